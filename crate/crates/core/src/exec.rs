//! Parallel execution of plan steps.
//!
//! Map kernels split the output into contiguous chunks. Reductions split
//! every output's group of points into blocks: each (output, block) task
//! folds its points sequentially from the identity, and the partials of one
//! output are then folded in block order. Scans run a sequential scan per
//! block, an exclusive scan over block totals, and a final offset pass.
//!
//! With one thread nothing touches the thread pool, and with one block per
//! output every fold runs in plain sequential order.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use crate::dag::{Graph, NodeId};
use crate::dtype::DType;
use crate::elem::{Arith, ReduceOp};
use crate::error::{Error, Result};
use crate::lower::{lower, structural_key, CompiledKernel, FusedKernel, Scratch, BLOCK_LANES};
use crate::planner::{KernelKind, LibraryKind, PlanStep, StepKind};
use crate::shape::Shape;
use crate::tensor::{Element, TensorBuffer, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockSize {
    /// Maps take `ceil(points / threads)` per task; reductions and scans
    /// split each group so every thread gets work.
    #[default]
    Auto,
    /// Points per task (rounded up to whole lanes for maps) or per reduction
    /// and scan block.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    pub num_threads: usize,
    pub block: BlockSize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig { num_threads: std::thread::available_parallelism().map_or(1, |n| n.get()), block: BlockSize::Auto }
    }
}

impl ExecConfig {
    pub fn threads(num_threads: usize) -> Self {
        ExecConfig { num_threads: num_threads.max(1), block: BlockSize::Auto }
    }

    pub fn with_block(mut self, block: BlockSize) -> Self {
        self.block = block;
        self
    }
}

macro_rules! with_arith {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            DType::I32 => {
                type $t = i32;
                $body
            }
            DType::I64 => {
                type $t = i64;
                $body
            }
            DType::F32 => {
                type $t = f32;
                $body
            }
            DType::F64 => {
                type $t = f64;
                $body
            }
            DType::Bool => unreachable!("no arithmetic over bool"),
        }
    };
}

macro_rules! with_elem {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            DType::Bool => {
                type $t = bool;
                $body
            }
            other => with_arith!(other, $t => $body),
        }
    };
}

/// A library step, independent of node ids: operands are positions in the
/// step's sorted leaf list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LibraryCall {
    pub call: LibraryKind,
    pub operands: Vec<usize>,
    pub trans: Vec<bool>,
    pub out_shape: Shape,
    pub out_dtype: DType,
}

impl LibraryCall {
    pub fn from_step(g: &Graph, step: &PlanStep) -> Option<LibraryCall> {
        let StepKind::Library { call, operands, trans } = &step.kind else {
            return None;
        };
        let leaves: Vec<NodeId> = step.leaves.iter().copied().collect();
        let root = g.node(step.root);
        Some(LibraryCall {
            call: *call,
            operands: operands.iter().map(|o| leaves.binary_search(o).expect("operand is a leaf")).collect(),
            trans: trans.clone(),
            out_shape: root.shape.clone(),
            out_dtype: root.dtype,
        })
    }
}

/// Executes kernels on a lazily created worker pool.
#[derive(Debug)]
pub struct Executor {
    config: ExecConfig,
    pool: OnceLock<rayon::ThreadPool>,
}

impl Executor {
    pub fn new(config: ExecConfig) -> Self {
        Executor { config: ExecConfig { num_threads: config.num_threads.max(1), ..config }, pool: OnceLock::new() }
    }

    pub fn config(&self) -> ExecConfig {
        self.config
    }

    pub fn threads(&self) -> usize {
        self.config.num_threads
    }

    fn pool(&self) -> Option<&rayon::ThreadPool> {
        (self.threads() > 1).then(|| {
            self.pool.get_or_init(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(self.threads())
                    .build()
                    .expect("failed to start worker pool")
            })
        })
    }

    /// Runs `f` on each of `parts` (disjoint output pieces) with its index.
    fn each<T: Send>(&self, parts: Vec<&mut [T]>, f: impl Fn(usize, &mut [T]) + Sync) {
        match self.pool() {
            None => parts.into_iter().enumerate().for_each(|(i, p)| f(i, p)),
            Some(pool) => pool.install(|| parts.into_par_iter().enumerate().for_each(|(i, p)| f(i, p))),
        }
    }

    /// Task count to aim for when splitting uniform work.
    fn target_tasks(&self) -> usize {
        if self.threads() == 1 {
            1
        } else {
            self.threads() * 4
        }
    }

    fn block_for(&self, groups: usize, group: usize) -> usize {
        match self.config.block {
            BlockSize::Fixed(b) => b.max(1),
            BlockSize::Auto if groups >= self.threads() => group,
            BlockSize::Auto => group.div_ceil(self.threads().div_ceil(groups.max(1))).max(1),
        }
    }

    pub fn run_fused(&self, k: &FusedKernel, c: &CompiledKernel, inputs: &[&TensorBuffer]) -> Result<TensorBuffer> {
        check_inputs(k, inputs)?;
        let data: Vec<&TensorData> = inputs.iter().map(|b| b.data()).collect();
        let out = match k.kind {
            KernelKind::Map => with_elem!(k.out_dtype, T => self.map_typed::<T>(k, c, &data)),
            KernelKind::MapReduce => with_arith!(k.out_dtype, T => self.reduce_typed::<T>(k, c, &data)),
            KernelKind::MapScan => with_arith!(k.out_dtype, T => self.scan_typed::<T>(k, c, &data)),
        };
        TensorBuffer::new(k.out_shape.clone(), out)
    }

    fn map_typed<T: Element>(&self, k: &FusedKernel, c: &CompiledKernel, data: &[&TensorData]) -> TensorData {
        let n = k.points();
        let mut out = vec![T::default(); n];
        let per_thread = match self.config.block {
            BlockSize::Fixed(b) => b,
            BlockSize::Auto => n.div_ceil(self.threads()),
        };
        let chunk = per_thread.div_ceil(BLOCK_LANES).max(1) * BLOCK_LANES;
        let parts: Vec<&mut [T]> = out.chunks_mut(chunk).collect();
        self.each(parts, |i, part| {
            let mut scratch = Scratch::default();
            let base = i * chunk;
            for (j, lanes) in part.chunks_mut(BLOCK_LANES).enumerate() {
                let reg = c.eval_block(data, base + j * BLOCK_LANES, lanes.len(), &mut scratch);
                lanes.copy_from_slice(T::slice(reg).expect("register dtype"));
            }
        });
        T::wrap(out)
    }

    fn reduce_typed<T: Arith>(&self, k: &FusedKernel, c: &CompiledKernel, data: &[&TensorData]) -> TensorData {
        let op = k.combine.expect("reduction operator");
        let outputs = k.outputs();
        let group = k.group;
        if group == 0 || outputs == 0 {
            return T::wrap(vec![T::narrow(T::Acc::identity(op)); outputs]);
        }
        let block = self.block_for(outputs, group).min(group);
        let nb = group.div_ceil(block);
        let segs = Segments { group, block, nb };
        let mut partials = vec![T::Acc::identity(op); outputs * nb];
        let chunk = (outputs * nb).div_ceil(self.target_tasks()).max(1);
        let parts: Vec<&mut [T::Acc]> = partials.chunks_mut(chunk).collect();
        self.each(parts, |i, part| {
            let t0 = i * chunk;
            let mut scratch = Scratch::default();
            segs.walk(c, data, t0..t0 + part.len(), &mut scratch, |t, vals: &[T]| {
                let acc = &mut part[t - t0];
                for &v in vals {
                    *acc = acc.combine(op, v.widen());
                }
            });
        });
        let out: Vec<T> = partials
            .chunks(nb)
            .map(|p| T::narrow(p[1..].iter().fold(p[0], |acc, &x| acc.combine(op, x))))
            .collect();
        T::wrap(out)
    }

    fn scan_typed<T: Arith>(&self, k: &FusedKernel, c: &CompiledKernel, data: &[&TensorData]) -> TensorData {
        let op = k.combine.expect("scan operator");
        let n = k.points();
        let group = k.group;
        if n == 0 {
            return T::wrap(Vec::new());
        }
        let lines = n / group;
        let block = self.block_for(lines, group).min(group);
        let nb = group.div_ceil(block);
        let segs = Segments { group, block, nb };
        let mut values = vec![T::Acc::default(); n];
        let mut totals = vec![T::Acc::identity(op); lines * nb];
        {
            let per_task = (lines * nb).div_ceil(self.target_tasks()).max(1);
            let parts = split_at_segments(&mut values, &segs, lines * nb, per_task);
            let tparts: Vec<&mut [T::Acc]> = totals.chunks_mut(per_task).collect();
            let jobs: Vec<(&mut [T::Acc], &mut [T::Acc])> = parts.into_iter().zip(tparts).collect();
            let run = |i: usize, (vals, tot): (&mut [T::Acc], &mut [T::Acc])| {
                let t0 = i * per_task;
                let p0 = segs.start(t0);
                let mut scratch = Scratch::default();
                let mut cur = p0;
                let end = cur + vals.len();
                while cur < end {
                    let len = BLOCK_LANES.min(end - cur);
                    let reg = c.eval_block(data, cur, len, &mut scratch);
                    let lanes = T::slice(reg).expect("register dtype");
                    for (dst, &v) in vals[cur - p0..cur - p0 + len].iter_mut().zip(lanes) {
                        *dst = v.widen();
                    }
                    cur += len;
                }
                for (j, total) in tot.iter_mut().enumerate() {
                    let r = segs.range(t0 + j);
                    let mut acc = T::Acc::identity(op);
                    for x in &mut vals[r.start - p0..r.end - p0] {
                        acc = acc.combine(op, *x);
                        *x = acc;
                    }
                    *total = acc;
                }
            };
            match self.pool() {
                None => jobs.into_iter().enumerate().for_each(|(i, j)| run(i, j)),
                Some(pool) => pool.install(|| jobs.into_par_iter().enumerate().for_each(|(i, j)| run(i, j))),
            }
        }
        if nb > 1 {
            // Exclusive scan of block totals within each line.
            let mut offsets = vec![T::Acc::identity(op); lines * nb];
            for l in 0..lines {
                let mut acc = T::Acc::identity(op);
                for b in 0..nb {
                    offsets[l * nb + b] = acc;
                    acc = acc.combine(op, totals[l * nb + b]);
                }
            }
            let parts = split_at_segments(&mut values, &segs, lines * nb, 1);
            self.each(parts, |t, seg| {
                if t % nb != 0 {
                    let off = offsets[t];
                    for x in seg {
                        *x = off.combine(op, *x);
                    }
                }
            });
        }
        let space_strides = k.space.strides();
        if k.out_strides == space_strides {
            return T::wrap(values.into_iter().map(T::narrow).collect());
        }
        let mut out = vec![T::default(); n];
        let mut coords = vec![0; k.space.rank()];
        for (i, v) in values.into_iter().enumerate() {
            k.space.delinearize_into(i, &mut coords);
            let at: usize = coords.iter().zip(&k.out_strides).map(|(c, s)| c * s).sum();
            out[at] = T::narrow(v);
        }
        T::wrap(out)
    }

    pub fn run_library(&self, call: &LibraryCall, inputs: &[&TensorBuffer]) -> Result<TensorBuffer> {
        let a = inputs[call.operands[0]];
        let b = inputs[call.operands[1]];
        let out = with_arith!(call.out_dtype, T => {
            let av = a.data().cast(call.out_dtype);
            let bv = b.data().cast(call.out_dtype);
            let av = T::slice(&av).unwrap();
            let bv = T::slice(&bv).unwrap();
            T::wrap(self.library_typed(call, a.shape(), av, b.shape(), bv)?)
        });
        TensorBuffer::new(call.out_shape.clone(), out)
    }

    fn library_typed<T: Arith>(&self, call: &LibraryCall, sa: &Shape, a: &[T], sb: &Shape, b: &[T]) -> Result<Vec<T>> {
        let ta = call.trans[0];
        let tb = call.trans.get(1).copied().unwrap_or(false);
        if sa.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("library operand of shape {sa}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        // Element (i, p) of op(A).
        let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * ka + p] };
        let n = match call.call {
            LibraryKind::Gemv => 1,
            LibraryKind::Gemm => {
                if tb {
                    sb[0]
                } else {
                    sb[1]
                }
            }
        };
        let kb = match call.call {
            LibraryKind::Gemv => sb[0],
            LibraryKind::Gemm if tb => sb[1],
            LibraryKind::Gemm => sb[0],
        };
        if ka != kb || call.out_shape.element_count() != m * n {
            return Err(Error::ShapeMismatch(format!("library call with {sa} and {sb}")));
        }
        let bt = |p: usize, j: usize| match (call.call, tb) {
            (LibraryKind::Gemv, _) => b[p],
            (_, false) => b[p * n + j],
            (_, true) => b[j * kb + p],
        };
        let mut out = vec![T::default(); m * n];
        if n == 0 {
            return Ok(out);
        }
        let rows = m.div_ceil(self.target_tasks()).max(1);
        let parts: Vec<&mut [T]> = out.chunks_mut(rows * n).collect();
        self.each(parts, |ci, part| {
            for (r, row) in part.chunks_mut(n).enumerate() {
                let i = ci * rows + r;
                for (j, o) in row.iter_mut().enumerate() {
                    let mut acc = T::identity(ReduceOp::Sum);
                    for p in 0..ka {
                        acc = acc.add(at(i, p).mul(bt(p, j)));
                    }
                    *o = acc;
                }
            }
        });
        Ok(out)
    }
}

fn check_inputs(k: &FusedKernel, inputs: &[&TensorBuffer]) -> Result<()> {
    if inputs.len() != k.program.inputs.len() {
        return Err(Error::Arity { op: "kernel".into(), expected: k.program.inputs.len(), got: inputs.len() });
    }
    for (b, spec) in inputs.iter().zip(&k.program.inputs) {
        if b.shape() != &spec.shape {
            return Err(Error::ShapeMismatch(format!("kernel input {} given {}", spec.shape, b.shape())));
        }
        if b.dtype() != spec.dtype {
            return Err(Error::DTypeMismatch { expected: spec.dtype.to_string(), got: b.dtype().to_string() });
        }
    }
    Ok(())
}

/// Block layout of a grouped point range: group `o` covers points
/// `o*group..(o+1)*group`, split into `nb` blocks of `block` points.
#[derive(Clone, Copy)]
struct Segments {
    group: usize,
    block: usize,
    nb: usize,
}

impl Segments {
    fn start(&self, t: usize) -> usize {
        (t / self.nb) * self.group + (t % self.nb) * self.block
    }

    fn range(&self, t: usize) -> Range<usize> {
        let o = t / self.nb;
        let b = t % self.nb;
        o * self.group + b * self.block..o * self.group + ((b + 1) * self.block).min(self.group)
    }

    /// Evaluates the points of segments `ts` in order and hands each
    /// segment's values to `f`, possibly in several consecutive pieces.
    fn walk<T: Element>(
        &self,
        c: &CompiledKernel,
        data: &[&TensorData],
        ts: Range<usize>,
        scratch: &mut Scratch,
        mut f: impl FnMut(usize, &[T]),
    ) {
        if ts.is_empty() {
            return;
        }
        let end = self.range(ts.end - 1).end;
        let mut cur = self.start(ts.start);
        let mut t = ts.start;
        while cur < end {
            let len = BLOCK_LANES.min(end - cur);
            let vals = T::slice(c.eval_block(data, cur, len, scratch)).expect("register dtype");
            let mut pos = 0;
            while pos < len {
                let seg_end = self.range(t).end;
                let take = (seg_end - (cur + pos)).min(len - pos);
                f(t, &vals[pos..pos + take]);
                pos += take;
                if cur + pos == seg_end {
                    t += 1;
                }
            }
            cur += len;
        }
    }
}

/// Splits `values` into pieces covering `per_task` consecutive segments each.
fn split_at_segments<'v, T>(values: &'v mut [T], segs: &Segments, count: usize, per_task: usize) -> Vec<&'v mut [T]> {
    let mut parts = Vec::with_capacity(count.div_ceil(per_task));
    let mut rest = values;
    let mut t = 0;
    while t < count {
        let last = (t + per_task).min(count) - 1;
        let len = segs.range(last).end - segs.start(t);
        let (head, tail) = rest.split_at_mut(len);
        parts.push(head);
        rest = tail;
        t = last + 1;
    }
    parts
}

/// A step compiled once and reusable across graphs with the same structure.
#[derive(Debug)]
pub enum Kernel {
    Fused { kernel: FusedKernel, compiled: CompiledKernel },
    Library(LibraryCall),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

type LibraryFn = dyn Fn(&LibraryCall, &[&TensorBuffer]) -> Result<TensorBuffer> + Send + Sync;

/// Replacement implementation for library calls, e.g. an optimized BLAS.
#[derive(Clone)]
pub struct LibraryHook(Arc<LibraryFn>);

impl LibraryHook {
    pub fn new(f: impl Fn(&LibraryCall, &[&TensorBuffer]) -> Result<TensorBuffer> + Send + Sync + 'static) -> Self {
        LibraryHook(Arc::new(f))
    }
}

impl std::fmt::Debug for LibraryHook {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LibraryHook")
    }
}

/// Executor plus a kernel cache keyed by step structure.
#[derive(Debug)]
pub struct Engine {
    executor: Executor,
    cache: Mutex<HashMap<String, Arc<Kernel>>>,
    stats: Mutex<CacheStats>,
    library: Option<LibraryHook>,
}

impl Engine {
    pub fn new(config: ExecConfig) -> Self {
        Engine {
            executor: Executor::new(config),
            cache: Mutex::new(HashMap::new()),
            stats: Mutex::new(CacheStats::default()),
            library: None,
        }
    }

    pub fn with_library_hook(mut self, hook: LibraryHook) -> Self {
        self.library = Some(hook);
        self
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn cache_stats(&self) -> CacheStats {
        *self.stats.lock().unwrap()
    }

    pub fn cached_kernels(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn clear_cache(&self) {
        self.cache.lock().unwrap().clear();
    }

    /// The compiled kernel for `step`, from the cache when possible.
    pub fn kernel(&self, g: &Graph, step: &PlanStep) -> Result<Arc<Kernel>> {
        self.lookup(g, step).map(|(k, _)| k)
    }

    fn lookup(&self, g: &Graph, step: &PlanStep) -> Result<(Arc<Kernel>, bool)> {
        let key = structural_key(g, step);
        if let Some(k) = self.cache.lock().unwrap().get(&key) {
            self.stats.lock().unwrap().hits += 1;
            return Ok((Arc::clone(k), true));
        }
        let kernel = match LibraryCall::from_step(g, step) {
            Some(call) => Kernel::Library(call),
            None => {
                let kernel = lower(g, step)?;
                let compiled = kernel.compile();
                Kernel::Fused { kernel, compiled }
            }
        };
        let kernel = Arc::new(kernel);
        self.stats.lock().unwrap().misses += 1;
        self.cache.lock().unwrap().insert(key, Arc::clone(&kernel));
        Ok((kernel, false))
    }

    /// Computes the value of `step.root`. All leaves must be materialized.
    pub fn run_step(&self, g: &Graph, step: &PlanStep) -> Result<TensorBuffer> {
        self.run_step_traced(g, step).map(|(out, _)| out)
    }

    /// Like [`Engine::run_step`], also reporting whether the kernel came
    /// from the cache.
    pub fn run_step_traced(&self, g: &Graph, step: &PlanStep) -> Result<(TensorBuffer, bool)> {
        let (kernel, hit) = self.lookup(g, step)?;
        let inputs: Vec<&TensorBuffer> = step
            .leaves
            .iter()
            .map(|&l| {
                g.node(l)
                    .data()
                    .ok_or_else(|| Error::ShapeMismatch(format!("leaf {l} of step rooted at {} is not materialized", step.root)))
            })
            .collect::<Result<_>>()?;
        match &*kernel {
            Kernel::Fused { kernel, compiled } => self.executor.run_fused(kernel, compiled, &inputs),
            Kernel::Library(call) => match &self.library {
                Some(hook) => (hook.0)(call, &inputs),
                None => self.executor.run_library(call, &inputs),
            },
        }
        .map(|out| (out, hit))
    }
}
