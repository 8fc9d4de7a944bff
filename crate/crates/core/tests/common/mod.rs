#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use lazyfuse::planner::{KernelKind, StepKind};
use lazyfuse::{
    eager, DType, ElemCode, Engine, ExecConfig, Graph, LazyArray, NodeId, OpKind, PlanStep, PlannerLimits, ReduceOp, Scalar, Session,
    Span, TensorBuffer,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DTYPES: [DType; 5] = [DType::Bool, DType::I32, DType::I64, DType::F32, DType::F64];
pub const REDUCE_OPS: [ReduceOp; 4] = [ReduceOp::Sum, ReduceOp::Prod, ReduceOp::Max, ReduceOp::Min];

pub fn fused_session(threads: usize) -> Session {
    Session::fused(Arc::new(Engine::new(ExecConfig::threads(threads))))
}

pub fn random_buffer(rng: &mut impl Rng, dims: &[usize], dtype: DType) -> TensorBuffer {
    let n: usize = dims.iter().product();
    let dims = dims.to_vec();
    match dtype {
        DType::Bool => TensorBuffer::from_vec(dims, (0..n).map(|_| rng.gen_bool(0.5)).collect()),
        DType::I32 => TensorBuffer::from_vec(dims, (0..n).map(|_| rng.gen_range(-4i32..=4)).collect()),
        DType::I64 => TensorBuffer::from_vec(dims, (0..n).map(|_| rng.gen_range(-4i64..=4)).collect()),
        DType::F32 => TensorBuffer::from_vec(dims, (0..n).map(|_| rng.gen_range(-2.0f32..2.0)).collect()),
        DType::F64 => TensorBuffer::from_vec(dims, (0..n).map(|_| rng.gen_range(-2.0f64..2.0)).collect()),
    }
    .unwrap()
}

/// Records random well-typed programs: ranks up to 3, extents up to 16,
/// every operation kind and dtype.
pub struct ProgramGen<'s> {
    pub rng: ChaCha8Rng,
    s: &'s Session,
    /// Every recorded array with its depth above the inputs.
    pub pool: Vec<(LazyArray, usize)>,
    pub max_depth: usize,
}

impl<'s> ProgramGen<'s> {
    pub fn new(s: &'s Session, seed: u64) -> Self {
        ProgramGen { rng: ChaCha8Rng::seed_from_u64(seed), s, pool: Vec::new(), max_depth: 12 }
    }

    fn extent(&mut self) -> usize {
        match self.rng.gen_range(0..100) {
            0..=2 => 0,
            3..=12 => self.rng.gen_range(6..=16),
            _ => self.rng.gen_range(1..=5),
        }
    }

    pub fn random_shape(&mut self) -> Vec<usize> {
        let rank = *[0, 1, 1, 2, 2, 2, 3, 3].choose(&mut self.rng).unwrap();
        (0..rank).map(|_| self.extent()).collect()
    }

    fn dtype(&mut self) -> DType {
        *DTYPES.choose(&mut self.rng).unwrap()
    }

    pub fn input(&mut self, dims: &[usize]) -> LazyArray {
        let dtype = self.dtype();
        let a = self.s.input(random_buffer(&mut self.rng, dims, dtype));
        self.pool.push((a.clone(), 0));
        a
    }

    fn pick(&mut self) -> LazyArray {
        if self.pool.is_empty() || self.rng.gen_bool(0.1) {
            let dims = self.random_shape();
            return self.input(&dims);
        }
        // favour recent nodes so programs grow deep rather than wide
        let n = self.pool.len();
        let i = if self.rng.gen_bool(0.6) { n - 1 - self.rng.gen_range(0..n.min(3)) } else { self.rng.gen_range(0..n) };
        self.pool[i].0.clone()
    }

    /// An array of exactly `dims`, reused from the pool when possible.
    fn with_shape(&mut self, dims: &[usize]) -> LazyArray {
        let same: Vec<LazyArray> =
            self.pool.iter().filter(|(a, _)| a.shape().dims() == dims).map(|(a, _)| a.clone()).collect();
        if !same.is_empty() && self.rng.gen_bool(0.5) {
            return same.choose(&mut self.rng).unwrap().clone();
        }
        self.input(dims)
    }

    /// A shape that broadcasts against `dims`, possibly widening it.
    fn partner_shape(&mut self, dims: &[usize]) -> Vec<usize> {
        let keep = self.rng.gen_range(0..=dims.len());
        let mut out: Vec<usize> = dims[dims.len() - keep..]
            .iter()
            .map(|&e| if self.rng.gen_bool(0.25) { 1 } else { e })
            .collect();
        let offset = dims.len() - keep;
        for (i, e) in out.iter_mut().enumerate() {
            if dims[offset + i] == 1 && self.rng.gen_bool(0.3) {
                *e = self.rng.gen_range(2..=4);
            }
        }
        if keep == dims.len() && dims.len() < 3 && self.rng.gen_bool(0.15) {
            out.insert(0, self.rng.gen_range(1..=3));
        }
        out
    }

    fn scalar(&mut self) -> Scalar {
        match self.rng.gen_range(0..5) {
            0 => Scalar::Bool(self.rng.gen_bool(0.5)),
            1 => Scalar::I32(self.rng.gen_range(-3..=3)),
            2 => Scalar::I64(self.rng.gen_range(-3..=3)),
            3 => Scalar::F32(self.rng.gen_range(-2.0..2.0)),
            _ => Scalar::F64(self.rng.gen_range(-2.0..2.0)),
        }
    }

    fn spans(&mut self, dims: &[usize]) -> Vec<Span> {
        dims.iter()
            .map(|&e| {
                let e = e as i64;
                let start = self.rng.gen_range(0..=e);
                let stop = self.rng.gen_range(start..=e);
                let step = *[1, 1, 1, 2, 3].choose(&mut self.rng).unwrap();
                // sometimes counted from the end, sometimes open or past the end
                let start = match self.rng.gen_range(0..6) {
                    0 => None,
                    1 if start > 0 => Some(start - e),
                    _ => Some(start),
                };
                let stop = match self.rng.gen_range(0..6) {
                    0 => None,
                    1 => Some(stop - e),
                    2 if stop == e => Some(e + 5),
                    _ => Some(stop),
                };
                Span { start, stop, step }
            })
            .collect()
    }

    fn factor(&mut self, n: usize) -> Vec<usize> {
        let rank = self.rng.gen_range(0..=3usize);
        if n == 0 {
            let mut dims: Vec<usize> = (0..rank.max(1)).map(|_| self.rng.gen_range(1..=3)).collect();
            let z = self.rng.gen_range(0..dims.len());
            dims[z] = 0;
            return dims;
        }
        if rank == 0 {
            return if n == 1 { vec![] } else { vec![n] };
        }
        let mut dims = Vec::new();
        let mut rest = n;
        for _ in 1..rank {
            let divisors: Vec<usize> = (1..=rest).filter(|d| rest % d == 0).collect();
            let d = *divisors.choose(&mut self.rng).unwrap();
            dims.push(d);
            rest /= d;
        }
        dims.push(rest);
        dims.shuffle(&mut self.rng);
        dims
    }

    /// Records one more operation. Returns `None` when the chosen operation
    /// does not apply to the picked operands.
    pub fn step(&mut self) -> Option<LazyArray> {
        let x = self.pick();
        let dims = x.shape().dims().to_vec();
        let rank = dims.len();
        let out = match self.rng.gen_range(0..100) {
            0..=9 => {
                let code = *[ElemCode::Neg, ElemCode::Exp, ElemCode::Log, ElemCode::Sqrt, ElemCode::Erf, ElemCode::Abs]
                    .choose(&mut self.rng)
                    .unwrap();
                x.unary(code).unwrap()
            }
            10..=31 => {
                let code = *[ElemCode::Add, ElemCode::Sub, ElemCode::Mul, ElemCode::Div, ElemCode::Maximum, ElemCode::Minimum]
                    .choose(&mut self.rng)
                    .unwrap();
                let pd = self.partner_shape(&dims);
                let y = self.with_shape(&pd);
                if self.rng.gen_bool(0.5) {
                    x.binary(code, &y).unwrap()
                } else {
                    y.binary(code, &x).unwrap()
                }
            }
            32..=39 => {
                let code = *[ElemCode::Add, ElemCode::Mul, ElemCode::Sub, ElemCode::Maximum].choose(&mut self.rng).unwrap();
                let c = self.scalar();
                x.binary(code, c).unwrap()
            }
            40..=47 => {
                let pd = self.partner_shape(&dims);
                let y = self.with_shape(&pd);
                let cond = if self.rng.gen_bool(0.5) { x.lt(&y).unwrap() } else { x.gt(&y).unwrap() };
                if self.rng.gen_bool(0.5) {
                    let c = self.scalar();
                    self.s.select(&cond, &x, c).unwrap()
                } else {
                    self.s.select(&cond, &y, &x).unwrap()
                }
            }
            48..=55 => {
                if rank != 2 {
                    return None;
                }
                // x is either the left operand or, transposed, read as one
                let a = if self.rng.gen_bool(0.5) { x.clone() } else { x.t().unwrap() };
                let k = a.shape().dims()[1];
                match self.rng.gen_range(0..3) {
                    0 => {
                        let v = self.with_shape(&[k]);
                        a.dot(&v).unwrap()
                    }
                    1 => {
                        let n = self.extent().max(1);
                        let b = self.with_shape(&[k, n]);
                        a.dot(&b).unwrap()
                    }
                    _ => {
                        let n = self.extent().max(1);
                        let b = self.with_shape(&[n, k]).t().unwrap();
                        a.dot(&b).unwrap()
                    }
                }
            }
            56..=61 => {
                let mut perm: Vec<usize> = (0..rank).collect();
                perm.shuffle(&mut self.rng);
                x.transpose(&perm).unwrap()
            }
            62..=67 => {
                let new = self.factor(dims.iter().product());
                x.reshape(&new).unwrap()
            }
            68..=74 => {
                let spans = self.spans(&dims);
                x.slice(&spans).unwrap()
            }
            75..=81 => {
                let spans = self.spans(&dims);
                let region = x.slice(&spans).unwrap().shape().dims().to_vec();
                // keep the value narrower than the region
                let keep = self.rng.gen_range(0..=region.len());
                let vd: Vec<usize> =
                    region[region.len() - keep..].iter().map(|&e| if self.rng.gen_bool(0.3) { 1 } else { e }).collect();
                if self.rng.gen_bool(0.25) {
                    let c = self.scalar();
                    x.slice_assign(&spans, c).unwrap()
                } else {
                    let v = self.with_shape(&vd);
                    x.slice_assign(&spans, &v).unwrap()
                }
            }
            82..=92 => {
                let op = *REDUCE_OPS.choose(&mut self.rng).unwrap();
                let keepdims = self.rng.gen_bool(0.4);
                if rank == 0 || self.rng.gen_bool(0.3) {
                    x.reduce(op, None, keepdims).unwrap()
                } else {
                    let mut axes: Vec<isize> = (0..rank as isize).filter(|_| self.rng.gen_bool(0.5)).collect();
                    if axes.is_empty() {
                        axes.push(self.rng.gen_range(0..rank as isize));
                    }
                    if self.rng.gen_bool(0.3) {
                        axes.iter_mut().for_each(|a| *a -= rank as isize);
                    }
                    x.reduce(op, Some(&axes), keepdims).unwrap()
                }
            }
            _ => {
                if rank == 0 {
                    return None;
                }
                let op = *REDUCE_OPS.choose(&mut self.rng).unwrap();
                let axis = self.rng.gen_range(0..rank as isize);
                x.scan(op, axis).unwrap()
            }
        };
        let preds = self.s.with_graph(|g| g.node(out.id()).preds.clone());
        let depth = 1 + preds
            .iter()
            .map(|p| self.pool.iter().find(|(a, _)| a.id() == *p).map_or(0, |(_, d)| *d))
            .max()
            .unwrap_or(0);
        if depth > self.max_depth {
            // the node stays in the graph but is never picked again
            return None;
        }
        self.pool.push((out.clone(), depth));
        Some(out)
    }

    /// Records `ops` operations and returns the last one.
    pub fn build(&mut self, ops: usize) -> LazyArray {
        let mut last = None;
        let mut tries = 0;
        while tries < ops * 4 && self.pool.iter().filter(|(_, d)| *d > 0).count() < ops {
            tries += 1;
            if let Some(a) = self.step() {
                last = Some(a);
            }
        }
        last.unwrap_or_else(|| {
            let x = self.pick();
            x.exp().unwrap()
        })
    }
}

/// Equality up to `tol` relative error for floats; exact otherwise. NaNs
/// must coincide.
pub fn compare(got: &TensorBuffer, want: &TensorBuffer, tol: f64) -> Result<(), String> {
    if got.shape() != want.shape() || got.dtype() != want.dtype() {
        return Err(format!("got {} {}, want {} {}", got.dtype(), got.shape(), want.dtype(), want.shape()));
    }
    let float = want.dtype().is_float();
    for i in 0..want.len() {
        let (a, b) = (got.get(i), want.get(i));
        let ok = if float {
            let (a, b) = (a.as_f64(), b.as_f64());
            a == b || (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol * b.abs().max(1.0)
        } else {
            a.bit_eq(b)
        };
        if !ok {
            return Err(format!("element {i}: got {a}, want {b}"));
        }
    }
    Ok(())
}

pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-5,
        _ => 1e-12,
    }
}

/// Replays `plan` from the graph's current materialization state. Every
/// step must read only materialized values, compute only unmaterialized
/// ones, and cover exactly what its root needs: walking back from the root
/// and stopping at materialized nodes must reach the step's interior nodes
/// and nothing else, and the stopping points must be its leaves.
pub fn simulate_plan(g: &Graph, root: NodeId, plan: &[PlanStep]) -> Result<(), String> {
    let mut mat: HashSet<NodeId> = g.nodes().iter().filter(|n| n.is_materialized()).map(|n| n.id).collect();
    if mat.contains(&root) {
        return if plan.is_empty() { Ok(()) } else { Err("steps planned for a materialized root".into()) };
    }
    let mut computed: HashSet<NodeId> = HashSet::new();
    for (i, step) in plan.iter().enumerate() {
        let mut reach = BTreeSet::new();
        let mut frontier = BTreeSet::new();
        let mut stack = vec![step.root];
        while let Some(n) = stack.pop() {
            if mat.contains(&n) {
                frontier.insert(n);
            } else if reach.insert(n) {
                stack.extend(g.node(n).preds.iter().copied());
            }
        }
        if mat.contains(&step.root) {
            return Err(format!("step {i} recomputes materialized {}", step.root));
        }
        if reach != step.nodes {
            return Err(format!("step {i}: interior {:?}, reachable {:?}", step.nodes, reach));
        }
        if frontier != step.leaves {
            return Err(format!("step {i}: leaves {:?}, boundary {:?}", step.leaves, frontier));
        }
        let root_op = &g.node(step.root).op;
        match &step.kind {
            StepKind::Fused(kind) => {
                let want = match root_op {
                    OpKind::Reduce { .. } => KernelKind::MapReduce,
                    OpKind::Scan { .. } => KernelKind::MapScan,
                    OpKind::MatMul | OpKind::MatVec => return Err(format!("step {i}: library op fused")),
                    _ => KernelKind::Map,
                };
                if *kind != want {
                    return Err(format!("step {i}: {kind:?} rooted at {root_op}"));
                }
                for &n in &step.nodes {
                    let op = &g.node(n).op;
                    let breaker = matches!(op, OpKind::Reduce { .. } | OpKind::Scan { .. } | OpKind::MatMul | OpKind::MatVec);
                    if n != step.root && breaker {
                        return Err(format!("step {i}: {op} fused below the root"));
                    }
                    if !computed.insert(n) {
                        return Err(format!("node {n} computed twice"));
                    }
                }
            }
            StepKind::Library { operands, trans, .. } => {
                if !matches!(root_op, OpKind::MatMul | OpKind::MatVec) {
                    return Err(format!("step {i}: library step rooted at {root_op}"));
                }
                for &n in &step.nodes {
                    if n != step.root && !g.node(n).op.is_matrix_transpose() {
                        return Err(format!("step {i}: library step computes {}", g.node(n).op));
                    }
                }
                for (k, &p) in g.node(step.root).preds.iter().enumerate() {
                    let want = if trans[k] { g.node(p).preds[0] } else { p };
                    if operands[k] != want || (trans[k] != (p != want)) {
                        return Err(format!("step {i}: operand {k} mismatch"));
                    }
                }
                if !computed.insert(step.root) {
                    return Err(format!("node {} computed twice", step.root));
                }
            }
        }
        mat.insert(step.root);
    }
    if !mat.contains(&root) {
        return Err("root never produced".into());
    }
    Ok(())
}

pub struct RandomRun {
    pub programs: usize,
    pub forces: usize,
    pub nodes: usize,
    pub elements: usize,
    pub oracle_failures: Vec<String>,
    pub plan_failures: Vec<String>,
}

/// Builds one random program per seed, forces random intermediates and
/// then the last node, checking every value against the eager evaluator
/// and every plan against [`simulate_plan`].
pub fn random_programs(seeds: std::ops::Range<u64>, threads: usize) -> RandomRun {
    let mut run =
        RandomRun { programs: 0, forces: 0, nodes: 0, elements: 0, oracle_failures: Vec::new(), plan_failures: Vec::new() };
    for seed in seeds {
        let s = fused_session(threads);
        let mut gen = ProgramGen::new(&s, seed);
        if gen.rng.gen_bool(0.25) {
            // small limits force oversized fused steps to split
            s.set_limits(PlannerLimits::new(gen.rng.gen_range(1..=6)));
        }
        let ops = gen.rng.gen_range(1..=24);
        let root = gen.build(ops);
        let mut order: Vec<LazyArray> =
            gen.pool.iter().filter(|(a, d)| *d > 0 && a.id() != root.id()).map(|(a, _)| a.clone()).collect();
        order.shuffle(&mut gen.rng);
        let extra = gen.rng.gen_range(0..=order.len().min(3));
        order.truncate(extra);
        // then every value nothing else reads, so no recorded node goes unchecked
        let sinks: Vec<LazyArray> = s.with_graph(|g| {
            let used: HashSet<NodeId> = g.nodes().iter().flat_map(|n| n.preds.iter().copied()).collect();
            gen.pool
                .iter()
                .filter(|(a, d)| *d > 0 && a.id() != root.id() && !used.contains(&a.id()))
                .map(|(a, _)| a.clone())
                .collect()
        });
        order.extend(sinks);
        order.push(root);
        run.programs += 1;
        run.nodes += s.with_graph(|g| g.len());
        for a in order {
            run.forces += 1;
            let plan = s.plan_for(&a);
            let check = plan.map_err(|e| e.to_string()).and_then(|p| s.with_graph(|g| simulate_plan(g, a.id(), &p)));
            if let Err(e) = check {
                run.plan_failures.push(format!("seed {seed}, node {}: {e}", a.id()));
            }
            let want = s.with_graph(|g| eager::evaluate(g, a.id()));
            let got = a.force();
            let result = match (got, want) {
                (Ok(got), Ok(want)) => {
                    run.elements += want.len();
                    compare(&got, &want, tolerance(want.dtype()))
                }
                (got, want) => Err(format!("fused {:?} / eager {:?}", got.err(), want.err())),
            };
            if let Err(e) = result {
                run.oracle_failures.push(format!("seed {seed}, node {}: {e}", a.id()));
            }
        }
    }
    run
}
