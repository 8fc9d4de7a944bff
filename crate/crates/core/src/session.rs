//! Deferred arrays.
//!
//! A [`Session`] owns a graph. Every operation on a [`LazyArray`] appends a
//! node and returns immediately; shape and dtype errors surface at that
//! point. Nothing runs until [`Session::force`], which plans the pending
//! part of the graph, executes the steps and keeps every step root's buffer
//! for later forces.
//!
//! Rust scalars mixed with arrays adopt the array's dtype when no kind is
//! lost (`f32_array * 2.0` stays f32; `i32_array * 0.5` becomes f64).

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Range, RangeFrom, RangeFull, RangeTo};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Duration;

use crate::dag::{Axes, Graph, NodeId, OpKind, SliceRange};
use crate::dtype::{DType, Scalar};
use crate::eager;
use crate::elem::{ElemCode, ReduceOp};
use crate::error::{Error, Result};
use crate::exec::{Engine, ExecConfig};
use crate::planner::{plan, plan_to_dot, PlanStep, PlannerLimits};
use crate::shape::Shape;
use crate::tensor::{Element, TensorBuffer};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionStats {
    /// Calls to `force` that had work to do.
    pub forces: u64,
    pub kernels_executed: u64,
    pub library_calls: u64,
    /// Operations run one at a time by the eager backend.
    pub eager_ops: u64,
    pub nodes_materialized: u64,
    pub kernels_compiled: u64,
    pub cache_hits: u64,
    pub external_transfers: u64,
    pub plan_time: Duration,
    pub exec_time: Duration,
}

/// Wall clock for stats. wasm32 without a host clock has no `Instant`, so
/// durations read zero there.
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed(&self) -> Duration {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed();
        #[cfg(target_arch = "wasm32")]
        Duration::ZERO
    }
}

#[derive(Debug, Clone)]
enum Backend {
    Fused(Arc<Engine>),
    Eager,
}

#[derive(Debug)]
struct Inner {
    graph: Graph,
    backend: Backend,
    limits: PlannerLimits,
    stats: SessionStats,
    executions: HashMap<NodeId, u64>,
    last_plan: Vec<PlanStep>,
}

/// Handle to a lazily evaluated graph. Clones share the same graph.
#[derive(Clone)]
pub struct Session {
    inner: Rc<RefCell<Inner>>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Session").field("nodes", &inner.graph.len()).field("backend", &inner.backend).finish()
    }
}

impl Default for Session {
    fn default() -> Self {
        Session::new()
    }
}

impl Session {
    /// Fused execution on all available cores.
    pub fn new() -> Self {
        Session::fused(Arc::new(Engine::new(ExecConfig::default())))
    }

    pub fn with_threads(threads: usize) -> Self {
        Session::fused(Arc::new(Engine::new(ExecConfig::threads(threads))))
    }

    /// Fused execution on `engine`, sharing its kernel cache with any other
    /// session built on it.
    pub fn fused(engine: Arc<Engine>) -> Self {
        Session::with_backend(Backend::Fused(engine))
    }

    /// Executes one operation at a time when forced, without planning.
    pub fn eager() -> Self {
        Session::with_backend(Backend::Eager)
    }

    fn with_backend(backend: Backend) -> Self {
        Session {
            inner: Rc::new(RefCell::new(Inner {
                graph: Graph::new(),
                backend,
                limits: PlannerLimits::default(),
                stats: SessionStats::default(),
                executions: HashMap::new(),
                last_plan: Vec::new(),
            })),
        }
    }

    pub fn set_limits(&self, limits: PlannerLimits) {
        self.inner.borrow_mut().limits = limits;
    }

    pub fn is_eager(&self) -> bool {
        matches!(self.inner.borrow().backend, Backend::Eager)
    }

    pub fn stats(&self) -> SessionStats {
        self.inner.borrow().stats.clone()
    }

    /// How many times `a` was computed by an executed step.
    pub fn executions(&self, a: &LazyArray) -> u64 {
        self.inner.borrow().executions.get(&a.id).copied().unwrap_or(0)
    }

    pub fn execution_counts(&self) -> HashMap<NodeId, u64> {
        self.inner.borrow().executions.clone()
    }

    /// Steps run by the most recent fused force.
    pub fn last_plan(&self) -> Vec<PlanStep> {
        self.inner.borrow().last_plan.clone()
    }

    pub fn with_graph<R>(&self, f: impl FnOnce(&Graph) -> R) -> R {
        f(&self.inner.borrow().graph)
    }

    pub fn input(&self, buf: TensorBuffer) -> LazyArray {
        let id = self.inner.borrow_mut().graph.add_input(buf);
        self.wrap(id)
    }

    pub fn from_vec<T: Element>(&self, shape: impl Into<Shape>, data: Vec<T>) -> Result<LazyArray> {
        Ok(self.input(TensorBuffer::from_vec(shape, data)?))
    }

    pub fn full(&self, shape: impl Into<Shape>, value: impl Into<Scalar>) -> LazyArray {
        self.input(TensorBuffer::full(shape, value))
    }

    pub fn zeros(&self, shape: impl Into<Shape>, dtype: DType) -> LazyArray {
        self.full(shape, Scalar::zero(dtype))
    }

    /// `[0, 1, .., n-1]` as i64.
    pub fn arange(&self, n: usize) -> LazyArray {
        self.input(TensorBuffer::from_vec(vec![n], (0..n as i64).collect::<Vec<_>>()).unwrap())
    }

    /// A rank-0 constant node.
    pub fn constant(&self, value: impl Into<Scalar>) -> LazyArray {
        let id = self.add(OpKind::Elementwise(ElemCode::Const(value.into())), &[]).expect("constants always infer");
        self.wrap(id)
    }

    /// `cond ? on_true : on_false`, elementwise with broadcasting.
    pub fn select(&self, cond: impl Operand, on_true: impl Operand, on_false: impl Operand) -> Result<LazyArray> {
        let args = [cond.to_arg(self)?, on_true.to_arg(self)?, on_false.to_arg(self)?];
        self.elementwise(ElemCode::Select, &args)
    }

    /// Applies `code` to operands, broadcasting shapes.
    pub fn elementwise(&self, code: ElemCode, args: &[Arg]) -> Result<LazyArray> {
        let skip = usize::from(code == ElemCode::Select);
        let context = {
            let inner = self.inner.borrow();
            args.iter()
                .skip(skip)
                .filter_map(|a| match a {
                    Arg::Node(id) => Some(inner.graph.node(*id).dtype),
                    Arg::Scalar(_) => None,
                })
                .reduce(DType::promote)
        };
        let mut ids = Vec::with_capacity(args.len());
        for (i, arg) in args.iter().enumerate() {
            ids.push(match *arg {
                Arg::Node(id) => id,
                Arg::Scalar(s) => {
                    let s = match context {
                        Some(d) if i >= skip => s.cast(weak_dtype(s.dtype(), d)),
                        _ => s,
                    };
                    self.add(OpKind::Elementwise(ElemCode::Const(s)), &[])?
                }
            });
        }
        self.add(OpKind::Elementwise(code), &ids).map(|id| self.wrap(id))
    }

    /// Computes `a`, reusing every buffer materialized by earlier forces.
    pub fn force(&self, a: &LazyArray) -> Result<TensorBuffer> {
        self.check(a)?;
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        if let Some(d) = inner.graph.node(a.id).data() {
            return Ok(d.clone());
        }
        inner.stats.forces += 1;
        match inner.backend.clone() {
            Backend::Fused(engine) => {
                let t = Stopwatch::start();
                let steps = plan(a.id, &inner.graph, inner.limits);
                inner.stats.plan_time += t.elapsed();
                for step in &steps {
                    let t = Stopwatch::start();
                    let (out, hit) = engine.run_step_traced(&inner.graph, step)?;
                    inner.stats.exec_time += t.elapsed();
                    if hit {
                        inner.stats.cache_hits += 1;
                    } else {
                        inner.stats.kernels_compiled += 1;
                    }
                    if step.is_fused() {
                        inner.stats.kernels_executed += 1;
                    } else {
                        inner.stats.library_calls += 1;
                    }
                    for &n in &step.nodes {
                        *inner.executions.entry(n).or_default() += 1;
                    }
                    inner.graph.mark_materialized(step.root, out)?;
                    inner.stats.nodes_materialized += 1;
                }
                inner.last_plan = steps;
            }
            Backend::Eager => {
                let t = Stopwatch::start();
                let (out, computed) = eager::evaluate_from_materialized(&inner.graph, a.id)?;
                inner.stats.exec_time += t.elapsed();
                inner.stats.eager_ops += computed as u64;
                *inner.executions.entry(a.id).or_default() += 1;
                inner.graph.mark_materialized(a.id, out)?;
                inner.stats.nodes_materialized += 1;
            }
        }
        Ok(inner.graph.node(a.id).data().expect("root was just materialized").clone())
    }

    /// Forces `a` for use by code outside the graph.
    pub fn to_external(&self, a: &LazyArray) -> Result<TensorBuffer> {
        let out = self.force(a)?;
        self.inner.borrow_mut().stats.external_transfers += 1;
        Ok(out)
    }

    /// The plan `force(a)` would run now, without running it.
    pub fn plan_for(&self, a: &LazyArray) -> Result<Vec<PlanStep>> {
        self.check(a)?;
        let inner = self.inner.borrow();
        Ok(plan(a.id, &inner.graph, inner.limits))
    }

    pub fn dag_dot(&self) -> String {
        self.inner.borrow().graph.to_dot()
    }

    pub fn plan_dot(&self, a: &LazyArray) -> Result<String> {
        let steps = self.plan_for(a)?;
        Ok(plan_to_dot(&self.inner.borrow().graph, &steps))
    }

    fn add(&self, op: OpKind, preds: &[NodeId]) -> Result<NodeId> {
        self.inner.borrow_mut().graph.add_op(op, preds)
    }

    fn wrap(&self, id: NodeId) -> LazyArray {
        LazyArray { session: self.clone(), id }
    }

    fn check(&self, a: &LazyArray) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &a.session.inner) {
            Ok(())
        } else {
            Err(Error::ForeignArray)
        }
    }
}

/// Dtype a Rust scalar takes next to an array of dtype `array`.
fn weak_dtype(scalar: DType, array: DType) -> DType {
    let keeps_kind = match scalar {
        DType::Bool => true,
        DType::I32 | DType::I64 => array != DType::Bool,
        DType::F32 | DType::F64 => array.is_float(),
    };
    if keeps_kind {
        array
    } else {
        scalar
    }
}

/// An elementwise operand: a node or a scalar still to be typed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arg {
    Node(NodeId),
    Scalar(Scalar),
}

pub trait Operand {
    fn to_arg(&self, s: &Session) -> Result<Arg>;
}

impl Operand for LazyArray {
    fn to_arg(&self, s: &Session) -> Result<Arg> {
        s.check(self)?;
        Ok(Arg::Node(self.id))
    }
}

impl<T: Operand + ?Sized> Operand for &T {
    fn to_arg(&self, s: &Session) -> Result<Arg> {
        (**self).to_arg(s)
    }
}

macro_rules! scalar_operand {
    ($($t:ty),*) => {$(
        impl Operand for $t {
            fn to_arg(&self, _: &Session) -> Result<Arg> {
                Ok(Arg::Scalar(Scalar::from(*self)))
            }
        }
    )*};
}
scalar_operand!(f64, f32, i32, i64, bool);

impl Operand for Scalar {
    fn to_arg(&self, _: &Session) -> Result<Arg> {
        Ok(Arg::Scalar(*self))
    }
}

/// One dimension of a slice: `start:stop:step` with numpy index rules.
/// Steps must be positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: Option<i64>,
    pub stop: Option<i64>,
    pub step: i64,
}

impl Span {
    pub fn all() -> Self {
        Span { start: None, stop: None, step: 1 }
    }

    pub fn new(start: i64, stop: i64) -> Self {
        Span { start: Some(start), stop: Some(stop), step: 1 }
    }

    pub fn step(mut self, step: i64) -> Self {
        self.step = step;
        self
    }
}

impl From<Range<i64>> for Span {
    fn from(r: Range<i64>) -> Self {
        Span::new(r.start, r.end)
    }
}

impl From<RangeFrom<i64>> for Span {
    fn from(r: RangeFrom<i64>) -> Self {
        Span { start: Some(r.start), stop: None, step: 1 }
    }
}

impl From<RangeTo<i64>> for Span {
    fn from(r: RangeTo<i64>) -> Self {
        Span { start: None, stop: Some(r.end), step: 1 }
    }
}

impl From<RangeFull> for Span {
    fn from(_: RangeFull) -> Self {
        Span::all()
    }
}

/// A deferred array: a node in its session's graph.
#[derive(Clone)]
pub struct LazyArray {
    session: Session,
    id: NodeId,
}

impl fmt::Debug for LazyArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LazyArray({} {}{})", self.id, self.dtype(), self.shape())
    }
}

impl LazyArray {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn shape(&self) -> Shape {
        self.session.with_graph(|g| g.node(self.id).shape.clone())
    }

    pub fn dtype(&self) -> DType {
        self.session.with_graph(|g| g.node(self.id).dtype)
    }

    pub fn rank(&self) -> usize {
        self.session.with_graph(|g| g.node(self.id).shape.rank())
    }

    pub fn is_materialized(&self) -> bool {
        self.session.with_graph(|g| g.node(self.id).is_materialized())
    }

    /// Names the node in DOT output.
    pub fn named(self, name: &str) -> Self {
        self.session.inner.borrow_mut().graph.set_name(self.id, name).expect("node exists");
        self
    }

    pub fn force(&self) -> Result<TensorBuffer> {
        self.session.force(self)
    }

    pub fn to_external(&self) -> Result<TensorBuffer> {
        self.session.to_external(self)
    }

    fn op(&self, op: OpKind, preds: &[NodeId]) -> Result<LazyArray> {
        self.session.add(op, preds).map(|id| self.session.wrap(id))
    }

    pub fn binary(&self, code: ElemCode, rhs: impl Operand) -> Result<LazyArray> {
        let rhs = rhs.to_arg(&self.session)?;
        self.session.elementwise(code, &[Arg::Node(self.id), rhs])
    }

    pub fn unary(&self, code: ElemCode) -> Result<LazyArray> {
        self.session.elementwise(code, &[Arg::Node(self.id)])
    }

    pub fn maximum(&self, rhs: impl Operand) -> Result<LazyArray> {
        self.binary(ElemCode::Maximum, rhs)
    }

    pub fn minimum(&self, rhs: impl Operand) -> Result<LazyArray> {
        self.binary(ElemCode::Minimum, rhs)
    }

    pub fn lt(&self, rhs: impl Operand) -> Result<LazyArray> {
        self.binary(ElemCode::CmpLt, rhs)
    }

    pub fn gt(&self, rhs: impl Operand) -> Result<LazyArray> {
        self.binary(ElemCode::CmpGt, rhs)
    }

    pub fn exp(&self) -> Result<LazyArray> {
        self.unary(ElemCode::Exp)
    }

    pub fn log(&self) -> Result<LazyArray> {
        self.unary(ElemCode::Log)
    }

    pub fn sqrt(&self) -> Result<LazyArray> {
        self.unary(ElemCode::Sqrt)
    }

    pub fn erf(&self) -> Result<LazyArray> {
        self.unary(ElemCode::Erf)
    }

    pub fn abs(&self) -> Result<LazyArray> {
        self.unary(ElemCode::Abs)
    }

    /// Matrix-vector for ranks (2, 1), matrix-matrix for (2, 2).
    pub fn dot(&self, rhs: &LazyArray) -> Result<LazyArray> {
        self.session.check(rhs)?;
        match (self.rank(), rhs.rank()) {
            (2, 1) => self.op(OpKind::MatVec, &[self.id, rhs.id]),
            (2, 2) => self.op(OpKind::MatMul, &[self.id, rhs.id]),
            _ => Err(Error::ShapeMismatch(format!("dot of {} and {}", self.shape(), rhs.shape()))),
        }
    }

    /// Reverses the axes.
    pub fn t(&self) -> Result<LazyArray> {
        let perm: Vec<usize> = (0..self.rank()).rev().collect();
        self.transpose(&perm)
    }

    pub fn transpose(&self, perm: &[usize]) -> Result<LazyArray> {
        self.op(OpKind::Transpose(perm.to_vec()), &[self.id])
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<LazyArray> {
        self.op(OpKind::Reshape(Shape::new(dims)), &[self.id])
    }

    fn region(&self, spans: &[Span]) -> Result<Vec<SliceRange>> {
        let shape = self.shape();
        if spans.len() != shape.rank() {
            return Err(Error::BadSlice(format!("{} spans for rank {}", spans.len(), shape.rank())));
        }
        spans.iter().zip(shape.dims()).map(|(s, &e)| SliceRange::resolve(s.start, s.stop, s.step, e)).collect()
    }

    pub fn slice(&self, spans: &[Span]) -> Result<LazyArray> {
        let region = self.region(spans)?;
        self.op(OpKind::Slice(region), &[self.id])
    }

    /// A copy of `self` with the region replaced by `value`, cast to this
    /// array's dtype.
    pub fn slice_assign(&self, spans: &[Span], value: impl Operand) -> Result<LazyArray> {
        let region = self.region(spans)?;
        let value = match value.to_arg(&self.session)? {
            Arg::Node(id) => id,
            Arg::Scalar(s) => self.session.add(OpKind::Elementwise(ElemCode::Const(s.cast(self.dtype()))), &[])?,
        };
        self.op(OpKind::SliceAssign(region), &[self.id, value])
    }

    /// Reduces over `axes` (negative counts from the end), or over every
    /// axis when `None`.
    pub fn reduce(&self, op: ReduceOp, axes: Option<&[isize]>, keepdims: bool) -> Result<LazyArray> {
        let axes = match axes {
            None => Axes::All,
            Some(list) => {
                let shape = self.shape();
                let mut v = list.iter().map(|&a| shape.normalize_axis(a)).collect::<Result<Vec<_>>>()?;
                v.sort_unstable();
                if let Some(w) = v.windows(2).find(|w| w[0] == w[1]) {
                    return Err(Error::BadAxis { axis: w[0] as isize, rank: shape.rank() });
                }
                Axes::Set(v)
            }
        };
        self.op(OpKind::Reduce { op, axes, keepdims }, &[self.id])
    }

    pub fn sum(&self, axes: Option<&[isize]>) -> Result<LazyArray> {
        self.reduce(ReduceOp::Sum, axes, false)
    }

    pub fn prod(&self, axes: Option<&[isize]>) -> Result<LazyArray> {
        self.reduce(ReduceOp::Prod, axes, false)
    }

    pub fn max(&self, axes: Option<&[isize]>) -> Result<LazyArray> {
        self.reduce(ReduceOp::Max, axes, false)
    }

    pub fn min(&self, axes: Option<&[isize]>) -> Result<LazyArray> {
        self.reduce(ReduceOp::Min, axes, false)
    }

    /// Inclusive scan along `axis`.
    pub fn scan(&self, op: ReduceOp, axis: isize) -> Result<LazyArray> {
        let axis = self.shape().normalize_axis(axis)?;
        self.op(OpKind::Scan { op, axis }, &[self.id])
    }

    pub fn cumsum(&self, axis: isize) -> Result<LazyArray> {
        self.scan(ReduceOp::Sum, axis)
    }
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident, $code:expr) => {
        impl<R: Operand> std::ops::$trait<R> for &LazyArray {
            type Output = LazyArray;
            fn $method(self, rhs: R) -> LazyArray {
                self.binary($code, rhs).unwrap_or_else(|e| panic!("{}: {e}", stringify!($method)))
            }
        }

        impl<R: Operand> std::ops::$trait<R> for LazyArray {
            type Output = LazyArray;
            fn $method(self, rhs: R) -> LazyArray {
                std::ops::$trait::$method(&self, rhs)
            }
        }

        scalar_lhs_operator!($trait, $method, $code, f64, i64);
    };
}

macro_rules! scalar_lhs_operator {
    ($trait:ident, $method:ident, $code:expr, $($t:ty),*) => {$(
        impl std::ops::$trait<&LazyArray> for $t {
            type Output = LazyArray;
            fn $method(self, rhs: &LazyArray) -> LazyArray {
                rhs.session
                    .elementwise($code, &[Arg::Scalar(Scalar::from(self)), Arg::Node(rhs.id)])
                    .unwrap_or_else(|e| panic!("{}: {e}", stringify!($method)))
            }
        }

        impl std::ops::$trait<LazyArray> for $t {
            type Output = LazyArray;
            fn $method(self, rhs: LazyArray) -> LazyArray {
                std::ops::$trait::$method(self, &rhs)
            }
        }
    )*};
}

binary_operator!(Add, add, ElemCode::Add);
binary_operator!(Sub, sub, ElemCode::Sub);
binary_operator!(Mul, mul, ElemCode::Mul);
binary_operator!(Div, div, ElemCode::Div);

impl std::ops::Neg for &LazyArray {
    type Output = LazyArray;
    fn neg(self) -> LazyArray {
        self.unary(ElemCode::Neg).expect("neg is defined for every dtype")
    }
}

impl std::ops::Neg for LazyArray {
    type Output = LazyArray;
    fn neg(self) -> LazyArray {
        -&self
    }
}
