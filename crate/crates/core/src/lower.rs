//! Lowering of fused steps into point programs.
//!
//! A fused step becomes a [`PointProgram`]: straight-line SSA code that
//! computes the step's value at one point of an iteration space, reading its
//! leaves through [`IndexMap`]s. Broadcasts, transposes, slices and reshapes
//! never move data; they only rewrite the index map of the loads beneath
//! them. `slice_assign` becomes a `select` on a region predicate.
//!
//! For map-reduce steps the space is the reduction operand's shape with the
//! kept axes first and the reduced axes last, so the points feeding one
//! output are contiguous. For map-scan steps the scan axis is moved last.
//!
//! [`eval_point`] interprets a program one point at a time. [`FusedKernel::compile`]
//! turns it into a block evaluator that computes a few hundred contiguous
//! points per instruction.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::hash::Hash;

use crate::dag::{Graph, NodeId, OpKind, SliceRange};
use crate::dtype::{DType, Scalar};
use crate::elem::{self, ElemCode, ReduceOp};
use crate::error::{Error, Result};
use crate::planner::{KernelKind, PlanStep, StepKind};
use crate::shape::Shape;
use crate::tensor::{Element, TensorBuffer, TensorData};

/// One output coordinate as a function of the input coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DimExpr {
    Fixed(usize),
    /// `scale * coords[k] + offset`
    Coord { k: usize, scale: usize, offset: usize },
}

impl DimExpr {
    fn eval(self, coords: &[usize]) -> usize {
        match self {
            DimExpr::Fixed(c) => c,
            DimExpr::Coord { k, scale, offset } => scale * coords[k] + offset,
        }
    }

    fn compose(self, inner: &[DimExpr]) -> DimExpr {
        match self {
            DimExpr::Fixed(c) => DimExpr::Fixed(c),
            DimExpr::Coord { k, scale, offset } => match inner[k] {
                DimExpr::Fixed(c) => DimExpr::Fixed(scale * c + offset),
                DimExpr::Coord { k: k2, scale: s2, offset: o2 } => {
                    DimExpr::Coord { k: k2, scale: scale * s2, offset: scale * o2 + offset }
                }
            },
        }
    }

    fn id(k: usize) -> DimExpr {
        DimExpr::Coord { k, scale: 1, offset: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Stage {
    Affine(Vec<DimExpr>),
    /// Target coordinates to coordinates within a slice region. Points
    /// outside the region clamp to a valid region coordinate.
    RegionLocal(Vec<SliceRange>),
    /// Coordinates in `from` to the coordinates of the same linear position
    /// in `to`.
    Reshape { from: Shape, to: Shape },
}

/// Maps iteration-space coordinates to coordinates in some tensor by
/// applying stages in order. No stages is the identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct IndexMap {
    pub stages: Vec<Stage>,
}

impl IndexMap {
    pub fn identity() -> Self {
        IndexMap::default()
    }

    /// This map followed by `stage`. Consecutive affine stages are fused.
    pub fn then(&self, stage: Stage) -> IndexMap {
        let mut stages = self.stages.clone();
        match (stages.last_mut(), stage) {
            (Some(Stage::Affine(inner)), Stage::Affine(outer)) => {
                *inner = outer.iter().map(|e| e.compose(inner)).collect();
            }
            (_, stage) => stages.push(stage),
        }
        IndexMap { stages }
    }

    pub fn apply(&self, coords: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut tmp = Vec::new();
        self.apply_into(coords, &mut out, &mut tmp);
        out
    }

    fn apply_into(&self, coords: &[usize], out: &mut Vec<usize>, tmp: &mut Vec<usize>) {
        out.clear();
        out.extend_from_slice(coords);
        for stage in &self.stages {
            std::mem::swap(out, tmp);
            out.clear();
            match stage {
                Stage::Affine(exprs) => out.extend(exprs.iter().map(|e| e.eval(tmp))),
                Stage::RegionLocal(region) => out.extend(tmp.iter().zip(region).map(|(&c, r)| {
                    if c < r.start {
                        0
                    } else {
                        ((c - r.start) / r.step).min(r.len() - 1)
                    }
                })),
                Stage::Reshape { from, to } => {
                    let linear = from.linearize(tmp);
                    out.resize(to.rank(), 0);
                    to.delinearize_into(linear, out);
                }
            }
        }
    }

    /// The map as a single affine stage over `rank` input coordinates, if it
    /// is one.
    pub fn as_affine(&self, rank: usize) -> Option<Vec<DimExpr>> {
        match self.stages.as_slice() {
            [] => Some((0..rank).map(DimExpr::id).collect()),
            [Stage::Affine(e)] => Some(e.clone()),
            _ => None,
        }
    }
}

pub type Reg = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    /// Element of kernel input `input` at the mapped coordinates.
    Load { input: usize, map: IndexMap },
    Const(Scalar),
    Cast(Reg),
    Unary(ElemCode, Reg),
    Binary(ElemCode, Reg, Reg),
    Select(Reg, Reg, Reg),
    /// Whether the mapped coordinates fall inside `region`.
    InRegion { map: IndexMap, region: Vec<SliceRange> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inst {
    pub instr: Instr,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KernelInput {
    pub shape: Shape,
    pub dtype: DType,
}

/// Straight-line code for one point of the iteration space. Register `r`
/// holds the result of `body[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointProgram {
    pub inputs: Vec<KernelInput>,
    pub body: Vec<Inst>,
    pub output: Reg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedKernel {
    pub kind: KernelKind,
    pub root: NodeId,
    /// Kernel input `i` is the `i`-th leaf of the step in ascending id order.
    pub leaves: Vec<NodeId>,
    pub space: Shape,
    pub program: PointProgram,
    pub out_shape: Shape,
    pub out_dtype: DType,
    pub combine: Option<ReduceOp>,
    /// Points per output (map-reduce) or per scan line (map-scan); 1 for maps.
    pub group: usize,
    /// Leading space dims that index outputs; the rest are folded.
    pub kept_rank: usize,
    /// Map-scan only: stride in the output of each space dimension.
    pub out_strides: Vec<usize>,
}

/// Lowers a fused step of `g` into a point program.
pub fn lower(g: &Graph, step: &PlanStep) -> Result<FusedKernel> {
    let StepKind::Fused(kind) = step.kind else {
        return Err(Error::UnsupportedNodeInFusedStep { node: step.root, op: g.node(step.root).op.to_string() });
    };
    let leaves: Vec<NodeId> = step.leaves.iter().copied().collect();
    let mut lw = Lowerer {
        g,
        step,
        leaf_slot: leaves.iter().enumerate().map(|(i, &l)| (l, i)).collect(),
        body: Vec::new(),
        memo: HashMap::new(),
        consts: HashMap::new(),
    };
    let inputs = leaves
        .iter()
        .map(|&l| KernelInput { shape: g.node(l).shape.clone(), dtype: g.node(l).dtype })
        .collect();
    let root = g.node(step.root);
    let mut combine = None;
    let mut group = 1;
    let mut out_strides = Vec::new();
    let mut kept_rank = root.shape.rank();
    let (space, output) = match (&root.op, kind) {
        (OpKind::Reduce { op, axes, .. }, KernelKind::MapReduce) => {
            let src = g.node(root.preds[0]);
            let rank = src.shape.rank();
            let reduced = axes.resolve(rank);
            let order: Vec<usize> = (0..rank).filter(|d| !reduced.contains(d)).chain(reduced.iter().copied()).collect();
            let space = Shape::new(order.iter().map(|&d| src.shape[d]).collect::<Vec<_>>());
            group = reduced.iter().map(|&d| src.shape[d]).product();
            kept_rank = rank - reduced.len();
            combine = Some(*op);
            let v = lw.emit(root.preds[0], &IndexMap::identity().then(Stage::Affine(inverse(&order))))?;
            (space, lw.cast(v, root.dtype))
        }
        (OpKind::Scan { op, axis }, KernelKind::MapScan) => {
            let rank = root.shape.rank();
            let order: Vec<usize> = (0..rank).filter(|d| d != axis).chain([*axis]).collect();
            let space = Shape::new(order.iter().map(|&d| root.shape[d]).collect::<Vec<_>>());
            let strides = root.shape.strides();
            out_strides = order.iter().map(|&d| strides[d]).collect();
            group = root.shape[*axis];
            kept_rank = rank - 1;
            combine = Some(*op);
            let v = lw.emit(root.preds[0], &IndexMap::identity().then(Stage::Affine(inverse(&order))))?;
            (space, lw.cast(v, root.dtype))
        }
        (op, KernelKind::Map) if !op.is_reduction_like() => {
            (root.shape.clone(), lw.emit(step.root, &IndexMap::identity())?)
        }
        (op, _) => {
            return Err(Error::UnsupportedNodeInFusedStep { node: step.root, op: op.to_string() });
        }
    };
    Ok(FusedKernel {
        kind,
        root: step.root,
        leaves,
        space,
        program: PointProgram { inputs, body: lw.body, output },
        out_shape: root.shape.clone(),
        out_dtype: root.dtype,
        combine,
        group,
        kept_rank,
        out_strides,
    })
}

/// Affine map sending space coordinates (dims listed in `order`) back to
/// the original coordinate order.
fn inverse(order: &[usize]) -> Vec<DimExpr> {
    let mut out = vec![DimExpr::Fixed(0); order.len()];
    for (k, &d) in order.iter().enumerate() {
        out[d] = DimExpr::id(k);
    }
    out
}

/// Affine stage reading an operand of shape `from` broadcast to `to`.
fn broadcast_stage(from: &Shape, to: &Shape) -> Option<Stage> {
    if from == to {
        return None;
    }
    let pad = to.rank() - from.rank();
    Some(Stage::Affine(
        (0..from.rank())
            .map(|d| if from[d] == 1 && to[d + pad] != 1 { DimExpr::Fixed(0) } else { DimExpr::id(d + pad) })
            .collect(),
    ))
}

fn reshape_stage(out: &Shape, src: &Shape) -> Stage {
    let nz_out: Vec<usize> = (0..out.rank()).filter(|&d| out[d] != 1).collect();
    let nz_src: Vec<usize> = (0..src.rank()).filter(|&d| src[d] != 1).collect();
    let same = nz_out.len() == nz_src.len() && nz_out.iter().zip(&nz_src).all(|(&a, &b)| out[a] == src[b]);
    if !same {
        return Stage::Reshape { from: out.clone(), to: src.clone() };
    }
    let mut exprs = vec![DimExpr::Fixed(0); src.rank()];
    for (&a, &b) in nz_out.iter().zip(&nz_src) {
        exprs[b] = DimExpr::id(a);
    }
    Stage::Affine(exprs)
}

struct Lowerer<'a> {
    g: &'a Graph,
    step: &'a PlanStep,
    leaf_slot: HashMap<NodeId, usize>,
    body: Vec<Inst>,
    memo: HashMap<(NodeId, IndexMap), Reg>,
    consts: HashMap<(u64, DType), Reg>,
}

impl Lowerer<'_> {
    fn push(&mut self, instr: Instr, dtype: DType) -> Reg {
        self.body.push(Inst { instr, dtype });
        self.body.len() - 1
    }

    fn cast(&mut self, r: Reg, to: DType) -> Reg {
        if self.body[r].dtype == to {
            return r;
        }
        if let Instr::Const(s) = self.body[r].instr {
            return self.constant(s.cast(to));
        }
        self.push(Instr::Cast(r), to)
    }

    fn constant(&mut self, s: Scalar) -> Reg {
        let key = (scalar_bits(s), s.dtype());
        if let Some(&r) = self.consts.get(&key) {
            return r;
        }
        let r = self.push(Instr::Const(s), s.dtype());
        self.consts.insert(key, r);
        r
    }

    fn emit(&mut self, id: NodeId, map: &IndexMap) -> Result<Reg> {
        let key = (id, map.clone());
        if let Some(&r) = self.memo.get(&key) {
            return Ok(r);
        }
        let r = self.emit_uncached(id, map)?;
        self.memo.insert(key, r);
        Ok(r)
    }

    fn emit_uncached(&mut self, id: NodeId, map: &IndexMap) -> Result<Reg> {
        let node = self.g.node(id);
        if let Some(&slot) = self.leaf_slot.get(&id) {
            return Ok(self.push(Instr::Load { input: slot, map: map.clone() }, node.dtype));
        }
        let unsupported = || Error::UnsupportedNodeInFusedStep { node: id, op: node.op.to_string() };
        if !self.step.nodes.contains(&id) {
            return Err(unsupported());
        }
        let pred = |i: usize| self.g.node(node.preds[i]);
        match &node.op {
            OpKind::Elementwise(ElemCode::Const(s)) => Ok(self.constant(*s)),
            OpKind::Elementwise(code) => {
                let dtypes: Vec<DType> = node.preds.iter().map(|&p| self.g.node(p).dtype).collect();
                let targets = code.operand_dtypes(&dtypes);
                let mut args = Vec::with_capacity(node.preds.len());
                for (i, &p) in node.preds.iter().enumerate() {
                    let pmap = match broadcast_stage(&pred(i).shape, &node.shape) {
                        Some(stage) => map.then(stage),
                        None => map.clone(),
                    };
                    let r = self.emit(p, &pmap)?;
                    args.push(self.cast(r, targets[i]));
                }
                let instr = match args.as_slice() {
                    [a] => Instr::Unary(*code, *a),
                    [a, b] => Instr::Binary(*code, *a, *b),
                    [c, a, b] => Instr::Select(*c, *a, *b),
                    _ => unreachable!(),
                };
                Ok(self.push(instr, node.dtype))
            }
            OpKind::Transpose(perm) => {
                let stage = Stage::Affine(inverse(perm));
                self.emit(node.preds[0], &map.then(stage))
            }
            OpKind::Slice(ranges) => {
                let stage = Stage::Affine(
                    ranges
                        .iter()
                        .enumerate()
                        .map(|(d, r)| DimExpr::Coord { k: d, scale: r.step, offset: r.start })
                        .collect(),
                );
                self.emit(node.preds[0], &map.then(stage))
            }
            OpKind::Reshape(_) => {
                let stage = reshape_stage(&node.shape, &pred(0).shape);
                self.emit(node.preds[0], &map.then(stage))
            }
            OpKind::SliceAssign(region) => {
                let target = self.emit(node.preds[0], map)?;
                let region_shape = crate::dag::region_shape(region);
                if region_shape.is_empty() {
                    return Ok(target);
                }
                let mut vmap = map.then(Stage::RegionLocal(region.clone()));
                if let Some(stage) = broadcast_stage(&pred(1).shape, &region_shape) {
                    vmap = vmap.then(stage);
                }
                let value = self.emit(node.preds[1], &vmap)?;
                let value = self.cast(value, node.dtype);
                let inside = self.push(Instr::InRegion { map: map.clone(), region: region.clone() }, DType::Bool);
                Ok(self.push(Instr::Select(inside, value, target), node.dtype))
            }
            _ => Err(unsupported()),
        }
    }
}

fn scalar_bits(s: Scalar) -> u64 {
    match s {
        Scalar::Bool(b) => b as u64,
        Scalar::I32(v) => v as u32 as u64,
        Scalar::I64(v) => v as u64,
        Scalar::F32(v) => v.to_bits() as u64,
        Scalar::F64(v) => v.to_bits(),
    }
}

/// Value of `program` at one point of its iteration space.
pub fn eval_point(program: &PointProgram, inputs: &[&TensorBuffer], coords: &[usize]) -> Scalar {
    let mut regs: Vec<Scalar> = Vec::with_capacity(program.body.len());
    for inst in &program.body {
        let v = match &inst.instr {
            Instr::Load { input, map } => inputs[*input].at(&map.apply(coords)),
            Instr::Const(s) => *s,
            Instr::Cast(r) => regs[*r].cast(inst.dtype),
            Instr::Unary(code, a) => elem::eval_scalar(*code, &[regs[*a]]),
            Instr::Binary(code, a, b) => elem::eval_scalar(*code, &[regs[*a], regs[*b]]),
            Instr::Select(c, a, b) => elem::eval_scalar(ElemCode::Select, &[regs[*c], regs[*a], regs[*b]]),
            Instr::InRegion { map, region } => {
                let at = map.apply(coords);
                Scalar::Bool(at.iter().zip(region).all(|(&c, r)| r.contains(c)))
            }
        };
        regs.push(v);
    }
    regs[program.output]
}

impl FusedKernel {
    /// Number of points in the iteration space.
    pub fn points(&self) -> usize {
        self.space.element_count()
    }

    /// Number of output elements produced.
    pub fn outputs(&self) -> usize {
        self.out_shape.element_count()
    }

    /// Evaluates the whole kernel point by point with [`eval_point`],
    /// folding reductions and scans sequentially.
    pub fn interpret(&self, inputs: &[&TensorBuffer]) -> TensorBuffer {
        let n = self.points();
        let mut out = TensorData::zeros(self.out_dtype, self.outputs());
        let mut coords = vec![0; self.space.rank()];
        let mut acc = Scalar::Bool(false);
        let acc_dtype = ReduceOp::accumulator(self.out_dtype);
        for i in 0..n {
            self.space.delinearize_into(i, &mut coords);
            let v = eval_point(&self.program, inputs, &coords);
            match self.kind {
                KernelKind::Map => out.set(i, v),
                KernelKind::MapReduce => {
                    let op = self.combine.unwrap();
                    if i % self.group == 0 {
                        acc = op.identity(acc_dtype);
                    }
                    acc = op.combine(acc, v.cast(acc_dtype));
                    out.set(i / self.group, acc);
                }
                KernelKind::MapScan => {
                    let op = self.combine.unwrap();
                    if i % self.group == 0 {
                        acc = op.identity(acc_dtype);
                    }
                    acc = op.combine(acc, v.cast(acc_dtype));
                    let at: usize = coords.iter().zip(&self.out_strides).map(|(c, s)| c * s).sum();
                    out.set(at, acc);
                }
            }
        }
        if self.kind == KernelKind::MapReduce && self.group == 0 {
            let id = self.combine.unwrap().identity(self.out_dtype);
            out = TensorData::filled(id, self.outputs());
        }
        TensorBuffer::new(self.out_shape.clone(), out).expect("kernel output length")
    }

    pub fn compile(&self) -> CompiledKernel {
        CompiledKernel::new(self)
    }

    /// Readable C-like rendering of the kernel.
    pub fn to_pseudo_c(&self) -> String {
        let mut s = String::new();
        let kind = match self.kind {
            KernelKind::Map => "map".to_string(),
            KernelKind::MapReduce => format!("map-reduce({})", self.combine.unwrap()),
            KernelKind::MapScan => format!("map-scan({})", self.combine.unwrap()),
        };
        let _ = writeln!(s, "// fused {kind} over {}, root n{}", self.space, self.root);
        let _ = write!(s, "void kernel_n{}(", self.root);
        for (i, (inp, leaf)) in self.program.inputs.iter().zip(&self.leaves).enumerate() {
            let _ = write!(s, "const {} *in{i} /* n{leaf} {} */, ", c_type(inp.dtype), inp.shape);
        }
        let _ = writeln!(s, "{} *out /* {} */) {{", c_type(self.out_dtype), self.out_shape);
        let rank = self.space.rank();
        let mut indent = String::from("  ");
        if self.kind != KernelKind::Map && self.kept_rank == 0 {
            let _ = writeln!(s, "{indent}{} acc = {};", c_type(self.out_dtype), self.combine.unwrap().identity(self.out_dtype));
        }
        for d in 0..rank {
            let _ = writeln!(s, "{indent}for (size_t i{d} = 0; i{d} < {}; ++i{d}) {{", self.space[d]);
            indent.push_str("  ");
            if self.kind != KernelKind::Map && d + 1 == self.kept_rank {
                let _ = writeln!(
                    s,
                    "{indent}{} acc = {};",
                    c_type(self.out_dtype),
                    self.combine.unwrap().identity(self.out_dtype)
                );
            }
        }
        // Loads first, then the body in SSA order.
        let loads_first = self
            .program
            .body
            .iter()
            .enumerate()
            .filter(|(_, i)| matches!(i.instr, Instr::Load { .. }))
            .chain(self.program.body.iter().enumerate().filter(|(_, i)| !matches!(i.instr, Instr::Load { .. })));
        for (r, inst) in loads_first {
            let rhs = match &inst.instr {
                Instr::Load { input, map } => format!("in{input}[{}]", index_expr(map, rank, &self.program.inputs[*input].shape)),
                Instr::Const(v) => v.to_string(),
                Instr::Cast(a) => format!("({})v{a}", c_type(inst.dtype)),
                Instr::Unary(code, a) => format!("{}(v{a})", code.name()),
                Instr::Binary(code, a, b) => match code {
                    ElemCode::Add => format!("v{a} + v{b}"),
                    ElemCode::Sub => format!("v{a} - v{b}"),
                    ElemCode::Mul => format!("v{a} * v{b}"),
                    ElemCode::Div => format!("v{a} / v{b}"),
                    ElemCode::CmpLt => format!("v{a} < v{b}"),
                    ElemCode::CmpGt => format!("v{a} > v{b}"),
                    other => format!("{}(v{a}, v{b})", other.name()),
                },
                Instr::Select(c, a, b) => format!("v{c} ? v{a} : v{b}"),
                Instr::InRegion { map, region } => {
                    let coords = coord_exprs(map, rank);
                    let tests: Vec<String> = coords
                        .iter()
                        .zip(region)
                        .map(|(c, r)| {
                            let mut t = format!("{c} >= {} && {c} < {}", r.start, r.stop);
                            if r.step != 1 {
                                let _ = write!(t, " && ({c} - {}) % {} == 0", r.start, r.step);
                            }
                            t
                        })
                        .collect();
                    if tests.is_empty() {
                        "true".into()
                    } else {
                        tests.join(" && ")
                    }
                }
            };
            let note = match &inst.instr {
                Instr::Load { map, .. } => format!(" // ({}) -> ({})", space_coords(rank), coord_exprs(map, rank).join(", ")),
                _ => String::new(),
            };
            let _ = writeln!(s, "{indent}{} v{r} = {rhs};{note}", c_type(inst.dtype));
        }
        let out = self.program.output;
        match self.kind {
            KernelKind::Map => {
                let _ = writeln!(s, "{indent}out[{}] = v{out};", linear_expr(&self.space, rank));
            }
            _ => {
                let _ = writeln!(s, "{indent}acc = {}(acc, v{out});", self.combine.unwrap());
                if self.kind == KernelKind::MapScan {
                    let at: Vec<String> =
                        self.out_strides.iter().enumerate().map(|(d, st)| format!("{st}*i{d}")).collect();
                    let at = if at.is_empty() { "0".to_string() } else { at.join(" + ") };
                    let _ = writeln!(s, "{indent}out[{at}] = acc;");
                }
            }
        }
        for d in (0..rank).rev() {
            indent.truncate(indent.len() - 2);
            let _ = writeln!(s, "{indent}}}");
            if self.kind == KernelKind::MapReduce && d == self.kept_rank && d > 0 {
                let kept = Shape::new(self.space.dims()[..d].to_vec());
                let _ = writeln!(s, "{indent}out[{}] = acc;", linear_expr(&kept, d));
            }
        }
        if self.kind == KernelKind::MapReduce && self.kept_rank == 0 {
            let _ = writeln!(s, "  out[0] = acc;");
        }
        s.push_str("}\n");
        s
    }
}

fn c_type(d: DType) -> &'static str {
    match d {
        DType::Bool => "bool",
        DType::I32 => "int32_t",
        DType::I64 => "int64_t",
        DType::F32 => "float",
        DType::F64 => "double",
    }
}

/// Symbolic coordinates of `map` over `i0, i1, ..`, built stage by stage.
fn coord_exprs(map: &IndexMap, rank: usize) -> Vec<String> {
    let mut cur: Vec<String> = (0..rank).map(|d| format!("i{d}")).collect();
    for stage in &map.stages {
        cur = match stage {
            Stage::Affine(exprs) => exprs
                .iter()
                .map(|e| match *e {
                    DimExpr::Fixed(c) => c.to_string(),
                    DimExpr::Coord { k, scale, offset } => affine_text(&cur[k], scale, offset),
                })
                .collect(),
            Stage::RegionLocal(region) => cur
                .iter()
                .zip(region)
                .map(|(c, r)| {
                    let mut local = if r.start == 0 { c.clone() } else { format!("{c} - {}", r.start) };
                    if r.step != 1 {
                        local = format!("{} / {}", paren(&local), r.step);
                    }
                    format!("clamp({local}, 0, {})", r.len().saturating_sub(1))
                })
                .collect(),
            Stage::Reshape { from, to } => {
                let terms: Vec<String> = cur
                    .iter()
                    .zip(from.strides())
                    .filter(|(c, _)| c.as_str() != "0")
                    .map(|(c, st)| if st == 1 { c.clone() } else { format!("{st}*{}", paren(c)) })
                    .collect();
                let linear = if terms.is_empty() { "0".to_string() } else { terms.join(" + ") };
                let linear = paren(&linear);
                to.strides()
                    .iter()
                    .zip(to.dims())
                    .enumerate()
                    .map(|(d, (&st, &dim))| {
                        let q = if st == 1 { linear.clone() } else { format!("{linear} / {st}") };
                        if d == 0 {
                            q
                        } else {
                            format!("{} % {dim}", paren(&q))
                        }
                    })
                    .collect()
            }
        };
    }
    cur
}

fn affine_text(c: &str, scale: usize, offset: usize) -> String {
    let mut t = if scale == 1 { c.to_string() } else { format!("{scale}*{}", paren(c)) };
    if offset != 0 {
        let _ = write!(t, " + {offset}");
    }
    if offset != 0 || scale != 1 {
        t = format!("({t})");
    }
    t
}

/// Wraps `e` in parentheses unless it is a single token or already wrapped.
fn paren(e: &str) -> String {
    let token = e.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    let call = e.ends_with(')') && {
        let mut depth = 0;
        let mut closes_at_end = true;
        for (i, ch) in e.char_indices() {
            match ch {
                '(' => depth += 1,
                ')' => {
                    depth -= 1;
                    if depth == 0 && i + 1 != e.len() {
                        closes_at_end = false;
                    }
                }
                ' ' if depth == 0 => closes_at_end = false,
                _ => {}
            }
        }
        closes_at_end
    };
    if token || call {
        e.to_string()
    } else {
        format!("({e})")
    }
}

fn space_coords(rank: usize) -> String {
    (0..rank).map(|d| format!("i{d}")).collect::<Vec<_>>().join(", ")
}

fn index_expr(map: &IndexMap, rank: usize, shape: &Shape) -> String {
    let coords = coord_exprs(map, rank);
    let strides = shape.strides();
    let terms: Vec<String> = coords
        .iter()
        .zip(&strides)
        .filter(|(c, _)| c.as_str() != "0")
        .map(|(c, &st)| if st == 1 { c.clone() } else { format!("{st}*{}", paren(c)) })
        .collect();
    if terms.is_empty() {
        "0".into()
    } else {
        terms.join(" + ")
    }
}

fn linear_expr(space: &Shape, rank: usize) -> String {
    let strides = space.strides();
    let terms: Vec<String> = (0..rank)
        .map(|d| if strides[d] == 1 { format!("i{d}") } else { format!("{}*i{d}", strides[d]) })
        .collect();
    if terms.is_empty() {
        "0".into()
    } else {
        terms.join(" + ")
    }
}

impl fmt::Display for FusedKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_pseudo_c())
    }
}

/// Points evaluated per instruction by the block evaluator.
pub const BLOCK_LANES: usize = 512;

#[derive(Debug, Clone)]
enum COp {
    /// Offset `base + sum(coefs[k] * coords[k])`.
    LoadAffine { input: usize, base: usize, coefs: Vec<usize> },
    LoadGeneral { input: usize, map: IndexMap, strides: Vec<usize> },
    Const(Scalar),
    Cast(usize, DType),
    Unary(ElemCode, usize),
    Binary(ElemCode, usize, usize),
    Select(usize, usize, usize),
    InRegion { map: IndexMap, region: Vec<SliceRange> },
}

/// A point program turned into a block evaluator over typed lane registers.
#[derive(Debug, Clone)]
pub struct CompiledKernel {
    space: Shape,
    ops: Vec<(COp, usize)>,
    n_regs: usize,
    out_reg: usize,
    input_dtypes: Vec<DType>,
}

/// Per-thread register file for [`CompiledKernel::eval_block`].
#[derive(Debug, Default)]
pub struct Scratch {
    regs: Vec<TensorData>,
    coords: Vec<usize>,
    a: Vec<usize>,
    b: Vec<usize>,
}

impl CompiledKernel {
    fn new(k: &FusedKernel) -> Self {
        let body = &k.program.body;
        let rank = k.space.rank();
        let mut last_use = vec![0usize; body.len()];
        for (i, inst) in body.iter().enumerate() {
            for r in operands(&inst.instr) {
                last_use[r] = i;
            }
        }
        last_use[k.program.output] = usize::MAX;

        let mut free: Vec<(usize, DType)> = Vec::new();
        let mut reg_of = vec![0usize; body.len()];
        let mut n_regs = 0;
        let mut ops = Vec::with_capacity(body.len());
        for (i, inst) in body.iter().enumerate() {
            let same_dtype = free.iter().position(|&(_, d)| d == inst.dtype);
            let dst = match same_dtype.or(if free.is_empty() { None } else { Some(0) }) {
                Some(p) => free.swap_remove(p).0,
                None => {
                    n_regs += 1;
                    n_regs - 1
                }
            };
            reg_of[i] = dst;
            let op = match &inst.instr {
                Instr::Load { input, map } => {
                    let shape = &k.program.inputs[*input].shape;
                    let strides = shape.strides();
                    match map.as_affine(rank) {
                        Some(exprs) => {
                            let mut base = 0;
                            let mut coefs = vec![0; rank];
                            for (e, st) in exprs.iter().zip(&strides) {
                                match *e {
                                    DimExpr::Fixed(c) => base += c * st,
                                    DimExpr::Coord { k, scale, offset } => {
                                        base += offset * st;
                                        coefs[k] += scale * st;
                                    }
                                }
                            }
                            COp::LoadAffine { input: *input, base, coefs }
                        }
                        None => COp::LoadGeneral { input: *input, map: map.clone(), strides },
                    }
                }
                Instr::Const(s) => COp::Const(*s),
                Instr::Cast(a) => COp::Cast(reg_of[*a], inst.dtype),
                Instr::Unary(c, a) => COp::Unary(*c, reg_of[*a]),
                Instr::Binary(c, a, b) => COp::Binary(*c, reg_of[*a], reg_of[*b]),
                Instr::Select(c, a, b) => COp::Select(reg_of[*c], reg_of[*a], reg_of[*b]),
                Instr::InRegion { map, region } => COp::InRegion { map: map.clone(), region: region.clone() },
            };
            ops.push((op, dst));
            // Operands are released after the destination is chosen so an
            // instruction never writes over its own inputs.
            let mut released: Vec<usize> = operands(&inst.instr).into_iter().filter(|&r| last_use[r] == i).collect();
            released.sort_unstable();
            released.dedup();
            for r in released {
                free.push((reg_of[r], body[r].dtype));
            }
            // Operands always precede their use, so 0 means never read.
            if last_use[i] == 0 {
                free.push((dst, inst.dtype));
            }
        }
        CompiledKernel {
            space: k.space.clone(),
            ops,
            n_regs,
            out_reg: reg_of[k.program.output],
            input_dtypes: k.program.inputs.iter().map(|i| i.dtype).collect(),
        }
    }

    pub fn registers(&self) -> usize {
        self.n_regs
    }

    /// Computes points `start..start + len` (row-major in the space) and
    /// returns their values. `len` must not exceed [`BLOCK_LANES`].
    pub fn eval_block<'s>(&self, inputs: &[&TensorData], start: usize, len: usize, scratch: &'s mut Scratch) -> &'s TensorData {
        debug_assert!(len <= BLOCK_LANES);
        debug_assert!(inputs.iter().zip(&self.input_dtypes).all(|(i, &d)| i.dtype() == d));
        if scratch.regs.len() < self.n_regs {
            scratch.regs.resize_with(self.n_regs, || TensorData::Bool(Vec::new()));
        }
        let rank = self.space.rank();
        scratch.coords.resize(rank, 0);
        for (op, dst) in &self.ops {
            let mut out = std::mem::replace(&mut scratch.regs[*dst], TensorData::Bool(Vec::new()));
            match op {
                COp::LoadAffine { input, base, coefs } => {
                    crate::with_data!(inputs[*input], src => gather_affine(src, &mut out, &self.space, start, len, *base, coefs))
                }
                COp::LoadGeneral { input, map, strides } => {
                    let (a, b) = (&mut scratch.a, &mut scratch.b);
                    crate::with_data!(inputs[*input], src => gather_general(src, &mut out, &self.space, start, len, |c| {
                        map.apply_into(c, a, b);
                        a.iter().zip(strides).map(|(x, s)| x * s).sum()
                    }))
                }
                COp::Const(s) => fill(&mut out, *s, len),
                COp::Cast(a, to) => elem::cast_lanes(&scratch.regs[*a], *to, &mut out),
                COp::Unary(code, a) => elem::unary_into(*code, &scratch.regs[*a], &mut out),
                COp::Binary(code, a, b) => elem::binary_into(*code, &scratch.regs[*a], &scratch.regs[*b], &mut out),
                COp::Select(c, a, b) => elem::select_into(&scratch.regs[*c], &scratch.regs[*a], &scratch.regs[*b], &mut out),
                COp::InRegion { map, region } => {
                    let (a, b) = (&mut scratch.a, &mut scratch.b);
                    let lanes = bool::vec_mut(&mut out, len);
                    let mut lane = 0;
                    for_each_point(&self.space, start, len, |c| {
                        map.apply_into(c, a, b);
                        lanes[lane] = a.iter().zip(region).all(|(&x, r)| r.contains(x));
                        lane += 1;
                    });
                }
            }
            scratch.regs[*dst] = out;
        }
        &scratch.regs[self.out_reg]
    }
}

fn fill(out: &mut TensorData, s: Scalar, len: usize) {
    match s {
        Scalar::Bool(v) => bool::vec_mut(out, len).fill(v),
        Scalar::I32(v) => i32::vec_mut(out, len).fill(v),
        Scalar::I64(v) => i64::vec_mut(out, len).fill(v),
        Scalar::F32(v) => f32::vec_mut(out, len).fill(v),
        Scalar::F64(v) => f64::vec_mut(out, len).fill(v),
    }
}

fn operands(instr: &Instr) -> Vec<Reg> {
    match *instr {
        Instr::Load { .. } | Instr::Const(_) | Instr::InRegion { .. } => Vec::new(),
        Instr::Cast(a) | Instr::Unary(_, a) => vec![a],
        Instr::Binary(_, a, b) => vec![a, b],
        Instr::Select(c, a, b) => vec![c, a, b],
    }
}

/// Calls `f(coords, lane, run)` for each maximal run of consecutive points
/// along the innermost dimension within `start..start + len`.
fn for_each_run(space: &Shape, start: usize, len: usize, mut f: impl FnMut(&[usize], usize, usize)) {
    let rank = space.rank();
    if rank == 0 {
        if len > 0 {
            f(&[], 0, 1);
        }
        return;
    }
    let mut coords = vec![0; rank];
    space.delinearize_into(start, &mut coords);
    let inner = space[rank - 1];
    let mut lane = 0;
    while lane < len {
        let run = (inner - coords[rank - 1]).min(len - lane);
        f(&coords, lane, run);
        lane += run;
        coords[rank - 1] += run;
        let mut d = rank - 1;
        while d > 0 && coords[d] >= space[d] {
            coords[d] = 0;
            coords[d - 1] += 1;
            d -= 1;
        }
    }
}

fn for_each_point(space: &Shape, start: usize, len: usize, mut f: impl FnMut(&[usize])) {
    let rank = space.rank();
    let mut c = Vec::with_capacity(rank);
    for_each_run(space, start, len, |coords, _, run| {
        c.clear();
        c.extend_from_slice(coords);
        for j in 0..run {
            if j > 0 {
                c[rank - 1] += 1;
            }
            f(&c);
        }
    });
}

fn gather_affine<T: Element>(src: &[T], out: &mut TensorData, space: &Shape, start: usize, len: usize, base: usize, coefs: &[usize]) {
    let dst = T::vec_mut(out, len);
    let step = coefs.last().copied().unwrap_or(0);
    for_each_run(space, start, len, |coords, lane, run| {
        let at = base + coords.iter().zip(coefs).map(|(c, k)| c * k).sum::<usize>();
        let dst = &mut dst[lane..lane + run];
        match step {
            0 => dst.fill(src[at]),
            1 => dst.copy_from_slice(&src[at..at + run]),
            s => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[at + j * s];
                }
            }
        }
    });
}

fn gather_general<T: Element>(
    src: &[T],
    out: &mut TensorData,
    space: &Shape,
    start: usize,
    len: usize,
    mut offset: impl FnMut(&[usize]) -> usize,
) {
    let dst = T::vec_mut(out, len);
    let mut lane = 0;
    for_each_point(space, start, len, |c| {
        dst[lane] = src[offset(c)];
        lane += 1;
    });
}

/// Canonical description of a step's structure: node ops, shapes, dtypes
/// and edges with ids replaced by positions. Steps with equal keys lower to
/// identical kernels.
pub fn structural_key(g: &Graph, step: &PlanStep) -> String {
    let leaves: Vec<NodeId> = step.leaves.iter().copied().collect();
    let nodes: Vec<NodeId> = step.nodes.iter().copied().collect();
    let mut key = String::new();
    let _ = write!(key, "{:?}|", step.kind_tag());
    let index = |set: &[NodeId], id: NodeId| set.binary_search(&id).ok();
    for &l in &leaves {
        let n = g.node(l);
        let _ = write!(key, "L{}:{};", n.shape, n.dtype);
    }
    for &id in &nodes {
        let n = g.node(id);
        let _ = write!(key, "{}:{}:{}(", n.op, n.shape, n.dtype);
        for &p in &n.preds {
            match (index(&nodes, p), index(&leaves, p)) {
                (Some(i), _) => {
                    let _ = write!(key, "n{i},");
                }
                (None, Some(i)) => {
                    let _ = write!(key, "l{i},");
                }
                _ => key.push_str("?,"),
            }
        }
        key.push_str(");");
    }
    if let StepKind::Fused(_) = step.kind {
        let _ = write!(key, "root{}", index(&nodes, step.root).unwrap_or(usize::MAX));
    }
    key
}

impl PlanStep {
    fn kind_tag(&self) -> String {
        match &self.kind {
            StepKind::Fused(k) => format!("{k:?}"),
            StepKind::Library { call, operands, trans } => {
                let leaves: Vec<NodeId> = self.leaves.iter().copied().collect();
                let ops: Vec<usize> = operands.iter().map(|o| leaves.binary_search(o).unwrap_or(usize::MAX)).collect();
                format!("{call:?}{ops:?}{trans:?}")
            }
        }
    }
}
