//! The deferred-operation DAG. Every recorded operation becomes a node with
//! its operation, optional materialized data, and inferred shape and dtype.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::dtype::DType;
use crate::elem::{ElemCode, ReduceOp};
use crate::error::{Error, Result};
use crate::shape::{broadcast_shapes, broadcasts_to, Shape};
use crate::tensor::TensorBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A resolved slice along one dimension: `start <= stop <= extent`, `step > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceRange {
    pub start: usize,
    pub stop: usize,
    pub step: usize,
}

impl SliceRange {
    pub fn new(start: usize, stop: usize, step: usize) -> Self {
        SliceRange { start, stop, step }
    }

    pub fn full(extent: usize) -> Self {
        SliceRange { start: 0, stop: extent, step: 1 }
    }

    /// Number of selected indices, `ceil((stop - start) / step)`.
    pub fn len(&self) -> usize {
        if self.stop <= self.start {
            0
        } else {
            (self.stop - self.start).div_ceil(self.step)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.stop && (i - self.start) % self.step == 0
    }

    /// Resolves a numpy-style `start:stop:step` (negative indices count from
    /// the end, out-of-range values clamp) against `extent`.
    pub fn resolve(start: Option<i64>, stop: Option<i64>, step: i64, extent: usize) -> Result<Self> {
        if step <= 0 {
            return Err(Error::BadSlice(format!("step must be positive, got {step}")));
        }
        let n = extent as i64;
        let norm = |v: i64| if v < 0 { (v + n).max(0) } else { v.min(n) };
        let start = start.map_or(0, norm);
        let stop = stop.map_or(n, norm).max(start);
        Ok(SliceRange { start: start as usize, stop: stop as usize, step: step as usize })
    }

    fn check(&self, extent: usize) -> Result<()> {
        if self.step == 0 || self.start > self.stop || self.stop > extent {
            return Err(Error::BadSlice(format!("{self} for extent {extent}")));
        }
        Ok(())
    }
}

impl fmt::Display for SliceRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.stop)?;
        if self.step != 1 {
            write!(f, ":{}", self.step)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axes {
    All,
    /// Sorted, de-duplicated axis list.
    Set(Vec<usize>),
}

impl Axes {
    pub fn resolve(&self, rank: usize) -> Vec<usize> {
        match self {
            Axes::All => (0..rank).collect(),
            Axes::Set(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    Input,
    Elementwise(ElemCode),
    MatMul,
    MatVec,
    /// `out.dims[d] = in.dims[perm[d]]`.
    Transpose(Vec<usize>),
    Reshape(Shape),
    Slice(Vec<SliceRange>),
    /// `(target, value)`: target with `region` replaced by `value`.
    SliceAssign(Vec<SliceRange>),
    Reduce { op: ReduceOp, axes: Axes, keepdims: bool },
    Scan { op: ReduceOp, axis: usize },
}

impl OpKind {
    pub fn arity(&self) -> usize {
        match self {
            OpKind::Input => 0,
            OpKind::Elementwise(code) => code.arity(),
            OpKind::MatMul | OpKind::MatVec | OpKind::SliceAssign(_) => 2,
            _ => 1,
        }
    }

    pub fn is_library(&self) -> bool {
        matches!(self, OpKind::MatMul | OpKind::MatVec)
    }

    pub fn is_reduction_like(&self) -> bool {
        matches!(self, OpKind::Reduce { .. } | OpKind::Scan { .. })
    }

    /// Rank-2 `[1, 0]` transpose.
    pub fn is_matrix_transpose(&self) -> bool {
        matches!(self, OpKind::Transpose(p) if p.as_slice() == [1, 0])
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn list<T: fmt::Display>(f: &mut fmt::Formatter<'_>, items: &[T]) -> fmt::Result {
            for (i, x) in items.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{x}")?;
            }
            Ok(())
        }
        match self {
            OpKind::Input => write!(f, "input"),
            OpKind::Elementwise(code) => write!(f, "{code}"),
            OpKind::MatMul => write!(f, "matmul"),
            OpKind::MatVec => write!(f, "matvec"),
            OpKind::Transpose(p) => {
                write!(f, "transpose(")?;
                list(f, p)?;
                write!(f, ")")
            }
            OpKind::Reshape(s) => write!(f, "reshape{s}"),
            OpKind::Slice(r) => {
                write!(f, "slice[")?;
                list(f, r)?;
                write!(f, "]")
            }
            OpKind::SliceAssign(r) => {
                write!(f, "slice_assign[")?;
                list(f, r)?;
                write!(f, "]")
            }
            OpKind::Reduce { op, axes, keepdims } => {
                write!(f, "reduce_{op}(")?;
                match axes {
                    Axes::All => write!(f, "all")?,
                    Axes::Set(a) => list(f, a)?,
                }
                if *keepdims {
                    write!(f, ",keepdims")?;
                }
                write!(f, ")")
            }
            OpKind::Scan { op, axis } => write!(f, "scan_{op}({axis})"),
        }
    }
}

/// Shape and dtype of the result of `op` applied to operands with the given
/// shapes and dtypes.
pub fn infer(op: &OpKind, shapes: &[&Shape], dtypes: &[DType]) -> Result<(Shape, DType)> {
    if shapes.len() != op.arity() || dtypes.len() != shapes.len() {
        return Err(Error::Arity { op: op.to_string(), expected: op.arity(), got: shapes.len() });
    }
    match op {
        OpKind::Input => Err(Error::Arity { op: "input".into(), expected: 0, got: 0 }),
        OpKind::Elementwise(code) => {
            let mut shape = Shape::scalar();
            for s in shapes {
                shape = broadcast_shapes(&shape, s)?;
            }
            Ok((shape, code.result_dtype(dtypes)))
        }
        OpKind::MatMul => {
            let (a, b) = (shapes[0], shapes[1]);
            if a.rank() != 2 || b.rank() != 2 || a[1] != b[0] {
                return Err(Error::ShapeMismatch(format!("matmul of {a} and {b}")));
            }
            Ok((Shape::new(vec![a[0], b[1]]), dtypes[0].promote(dtypes[1]).arith()))
        }
        OpKind::MatVec => {
            let (a, x) = (shapes[0], shapes[1]);
            if a.rank() != 2 || x.rank() != 1 || a[1] != x[0] {
                return Err(Error::ShapeMismatch(format!("matvec of {a} and {x}")));
            }
            Ok((Shape::new(vec![a[0]]), dtypes[0].promote(dtypes[1]).arith()))
        }
        OpKind::Transpose(perm) => {
            let s = shapes[0];
            let mut seen = vec![false; s.rank()];
            if perm.len() != s.rank() {
                return Err(Error::BadAxis { axis: perm.len() as isize, rank: s.rank() });
            }
            for &p in perm {
                if p >= s.rank() || seen[p] {
                    return Err(Error::BadAxis { axis: p as isize, rank: s.rank() });
                }
                seen[p] = true;
            }
            Ok((Shape::new(perm.iter().map(|&p| s[p]).collect::<Vec<_>>()), dtypes[0]))
        }
        OpKind::Reshape(new) => {
            if new.element_count() != shapes[0].element_count() {
                return Err(Error::ShapeMismatch(format!("cannot reshape {} to {new}", shapes[0])));
            }
            Ok((new.clone(), dtypes[0]))
        }
        OpKind::Slice(ranges) => {
            let s = shapes[0];
            check_region(ranges, s)?;
            Ok((region_shape(ranges), dtypes[0]))
        }
        OpKind::SliceAssign(region) => {
            let (target, value) = (shapes[0], shapes[1]);
            check_region(region, target)?;
            let rs = region_shape(region);
            if !broadcasts_to(value, &rs) {
                return Err(Error::IncompatibleShapes(value.clone(), rs));
            }
            Ok((target.clone(), dtypes[0]))
        }
        OpKind::Reduce { op, axes, keepdims } => {
            let s = shapes[0];
            let axes = match axes {
                Axes::All => (0..s.rank()).collect(),
                Axes::Set(a) => a.clone(),
            };
            for &a in &axes {
                if a >= s.rank() {
                    return Err(Error::BadAxis { axis: a as isize, rank: s.rank() });
                }
            }
            let dims: Vec<usize> = (0..s.rank())
                .filter_map(|d| match (axes.contains(&d), keepdims) {
                    (false, _) => Some(s[d]),
                    (true, true) => Some(1),
                    (true, false) => None,
                })
                .collect();
            Ok((Shape::new(dims), op.result_dtype(dtypes[0])))
        }
        OpKind::Scan { op, axis } => {
            let s = shapes[0];
            if *axis >= s.rank() {
                return Err(Error::BadAxis { axis: *axis as isize, rank: s.rank() });
            }
            Ok((s.clone(), op.result_dtype(dtypes[0])))
        }
    }
}

fn check_region(ranges: &[SliceRange], s: &Shape) -> Result<()> {
    if ranges.len() != s.rank() {
        return Err(Error::BadSlice(format!("{} ranges for rank {}", ranges.len(), s.rank())));
    }
    ranges.iter().zip(s.dims()).try_for_each(|(r, &e)| r.check(e))
}

pub fn region_shape(ranges: &[SliceRange]) -> Shape {
    Shape::new(ranges.iter().map(SliceRange::len).collect::<Vec<_>>())
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub op: OpKind,
    pub preds: Vec<NodeId>,
    pub shape: Shape,
    pub dtype: DType,
    /// Display name used in DOT output.
    pub name: Option<String>,
    data: Option<TensorBuffer>,
}

impl Node {
    pub fn data(&self) -> Option<&TensorBuffer> {
        self.data.as_ref()
    }

    pub fn is_materialized(&self) -> bool {
        self.data.is_some()
    }
}

/// Append-only node store. Edges always point from later nodes to earlier
/// ones, so creation order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn get(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id))
    }

    pub fn add_input(&mut self, buf: TensorBuffer) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            op: OpKind::Input,
            preds: Vec::new(),
            shape: buf.shape().clone(),
            dtype: buf.dtype(),
            name: None,
            data: Some(buf),
        });
        id
    }

    pub fn add_op(&mut self, op: OpKind, preds: &[NodeId]) -> Result<NodeId> {
        for &p in preds {
            self.get(p)?;
        }
        let shapes: Vec<&Shape> = preds.iter().map(|&p| &self.node(p).shape).collect();
        let dtypes: Vec<DType> = preds.iter().map(|&p| self.node(p).dtype).collect();
        let (shape, dtype) = infer(&op, &shapes, &dtypes)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { id, op, preds: preds.to_vec(), shape, dtype, name: None, data: None });
        Ok(id)
    }

    pub fn set_name(&mut self, id: NodeId, name: impl Into<String>) -> Result<()> {
        self.nodes.get_mut(id.0).ok_or(Error::UnknownNode(id))?.name = Some(name.into());
        Ok(())
    }

    pub fn mark_materialized(&mut self, id: NodeId, buf: TensorBuffer) -> Result<()> {
        let node = self.nodes.get_mut(id.0).ok_or(Error::UnknownNode(id))?;
        if buf.shape() != &node.shape {
            return Err(Error::ShapeMismatch(format!(
                "node {id} has shape {}, buffer has {}",
                node.shape,
                buf.shape()
            )));
        }
        if buf.dtype() != node.dtype {
            return Err(Error::DTypeMismatch { expected: node.dtype.to_string(), got: buf.dtype().to_string() });
        }
        match &node.data {
            Some(existing) if existing.same_storage(&buf) || existing.bit_eq(&buf) => Ok(()),
            Some(_) => Err(Error::AlreadyMaterializedWithDifferentData(id)),
            None => {
                node.data = Some(buf);
                Ok(())
            }
        }
    }

    /// Graphviz rendering: one record per node, edges pred -> succ.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph dag {\n  node [shape=record];\n");
        for n in &self.nodes {
            let _ = writeln!(out, "  n{} [label=\"{}\"];", n.id, node_label(n));
        }
        for n in &self.nodes {
            for p in &n.preds {
                let _ = writeln!(out, "  n{p} -> n{};", n.id);
            }
        }
        out.push_str("}\n");
        out
    }
}

pub(crate) fn node_label(n: &Node) -> String {
    let mut label = format!("{}: {} {} {}", n.id, n.op, n.shape, n.dtype);
    if let Some(name) = &n.name {
        label = format!("{name} = {label}");
    }
    if n.is_materialized() {
        label.push_str(" [M]");
    }
    label.replace('"', "'").replace('{', "(").replace('}', ")").replace('|', "/")
}
