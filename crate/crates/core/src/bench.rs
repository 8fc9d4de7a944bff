//! Benchmark programs written against the session API, and a runner that
//! checks the fused engine against the eager backend on identical inputs.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elem::ElemCode;
use crate::error::{Error, Result};
use crate::exec::{Engine, ExecConfig};
use crate::session::{LazyArray, Session, Span};
use crate::tensor::TensorBuffer;

pub const RATE: f64 = 0.02;
pub const VOLATILITY: f64 = 0.30;
pub const KMEANS_DIMS: usize = 4;
pub const KMEANS_CLUSTERS: usize = 8;
const WARM_REPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchName {
    BlackScholes,
    KMeans,
    Jacobi,
    InnerProduct,
}

impl BenchName {
    pub const ALL: [BenchName; 4] = [BenchName::BlackScholes, BenchName::KMeans, BenchName::Jacobi, BenchName::InnerProduct];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchName::BlackScholes => "blackscholes",
            BenchName::KMeans => "kmeans",
            BenchName::Jacobi => "jacobi",
            BenchName::InnerProduct => "innerproduct",
        }
    }

    /// Largest relative error against the eager run that still passes.
    pub fn tolerance(self) -> f64 {
        match self {
            BenchName::BlackScholes => 1e-10,
            BenchName::KMeans => 1e-9,
            BenchName::Jacobi => 1e-12,
            BenchName::InnerProduct => 1e-6,
        }
    }
}

impl fmt::Display for BenchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        BenchName::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown benchmark {s:?} (expected blackscholes, kmeans, jacobi or innerproduct)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub name: BenchName,
    /// Options for blackscholes, points for kmeans, interior grid side for
    /// jacobi, vector length for innerproduct.
    pub size: usize,
    /// Outer repetitions: pricing passes, k-means iterations, sweeps or
    /// inner products.
    pub iters: usize,
    pub threads: usize,
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(name: BenchName, size: usize) -> Self {
        BenchSpec { name, size, iters: 1, threads: 1, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.iters == 0 || self.threads == 0 {
            return Err(Error::ShapeMismatch("size, iters and threads must all be at least 1".into()));
        }
        Ok(())
    }
}

/// Named tensors handed to or returned from a program.
#[derive(Debug, Clone, Default)]
pub struct Tensors(pub Vec<(String, TensorBuffer)>);

impl Tensors {
    pub fn get(&self, name: &str) -> Result<&TensorBuffer> {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(n, _)| n.as_str())
    }

    /// Copies that share no storage with `self`.
    pub fn deep_copy(&self) -> Tensors {
        Tensors(
            self.0
                .iter()
                .map(|(n, b)| (n.clone(), TensorBuffer::new(b.shape().clone(), b.data().clone()).expect("same shape")))
                .collect(),
        )
    }

    /// Replaces the tensor called `name`, which must exist with the same
    /// shape and dtype.
    pub fn replace(&mut self, name: &str, buf: TensorBuffer) -> Result<()> {
        let slot = self.0.iter_mut().find(|(n, _)| n == name).ok_or_else(|| Error::ShapeMismatch(format!("no input {name:?}")))?;
        if slot.1.shape() != buf.shape() || slot.1.dtype() != buf.dtype() {
            return Err(Error::ShapeMismatch(format!(
                "input {name:?} must be {}{}, got {}{}",
                slot.1.dtype(),
                slot.1.shape(),
                buf.dtype(),
                buf.shape()
            )));
        }
        slot.1 = buf;
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Deterministic inputs for `spec`.
pub fn generate_inputs(spec: &BenchSpec) -> Result<Tensors> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let t = |name: &str, b: TensorBuffer| (name.to_string(), b);
    Ok(Tensors(match spec.name {
        BenchName::BlackScholes => vec![
            t("price", TensorBuffer::from_vec(vec![n], uniform(&mut rng, n, 5.0, 30.0))?),
            t("strike", TensorBuffer::from_vec(vec![n], uniform(&mut rng, n, 1.0, 100.0))?),
            t("years", TensorBuffer::from_vec(vec![n], uniform(&mut rng, n, 0.25, 10.0))?),
        ],
        BenchName::Jacobi => {
            let side = n + 2;
            vec![t("grid", TensorBuffer::from_vec(vec![side, side], uniform(&mut rng, side * side, 0.0, 1.0))?)]
        }
        BenchName::KMeans => {
            let (d, k) = (KMEANS_DIMS, KMEANS_CLUSTERS.min(n));
            let centers = uniform(&mut rng, k * d, 0.0, 10.0);
            let mut points = Vec::with_capacity(n * d);
            for _ in 0..n {
                let c = rng.gen_range(0..k);
                points.extend((0..d).map(|j| centers[c * d + j] + rng.gen_range(-1.0..1.0)));
            }
            let initial = points[..k * d].to_vec();
            vec![
                t("points", TensorBuffer::from_vec(vec![n, d], points)?),
                t("centroids", TensorBuffer::from_vec(vec![k, d], initial)?),
            ]
        }
        BenchName::InnerProduct => {
            let f32s = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect::<Vec<_>>();
            let a = f32s(&mut rng);
            let b = f32s(&mut rng);
            vec![t("a", TensorBuffer::from_vec(vec![n], a)?), t("b", TensorBuffer::from_vec(vec![n], b)?)]
        }
    }))
}

/// European call price with an erf-based normal CDF.
pub fn black_scholes_call(price: &LazyArray, strike: &LazyArray, years: &LazyArray) -> Result<LazyArray> {
    let vol_sqrt_t = years.sqrt()? * VOLATILITY;
    let drift = years * (RATE + 0.5 * VOLATILITY * VOLATILITY);
    let d1 = ((price / strike).log()? + &drift) / &vol_sqrt_t;
    let d2 = &d1 - &vol_sqrt_t;
    let cnd = |d: &LazyArray| -> Result<LazyArray> { Ok(((d * FRAC_1_SQRT_2).erf()? + 1.0) * 0.5) };
    let discount = (years * -RATE).exp()?;
    Ok(price * &cnd(&d1)? - &(strike * &discount) * &cnd(&d2)?)
}

/// One five-point averaging sweep: `b` with its interior replaced by the
/// mean of each interior point of `a` and its four neighbours.
pub fn jacobi_sweep(a: &LazyArray, b: &LazyArray) -> Result<LazyArray> {
    let mid = Span::new(1, -1);
    let centre = a.slice(&[mid, mid])?;
    let left = a.slice(&[mid, Span::new(0, -2)])?;
    let right = a.slice(&[mid, (2..).into()])?;
    let up = a.slice(&[Span::new(0, -2), mid])?;
    let down = a.slice(&[(2..).into(), mid])?;
    let sum = centre + &left + &right + &up + &down;
    b.slice_assign(&[mid, mid], sum * 0.2)
}

/// Lazy part of one k-means iteration: per-cluster coordinate sums, member
/// counts and each point's nearest centroid (lowest index on ties).
pub struct KMeansStep {
    pub sums: LazyArray,
    pub counts: LazyArray,
    pub labels: LazyArray,
}

pub fn kmeans_step(points: &LazyArray, centroids: &LazyArray) -> Result<KMeansStep> {
    let s = points.session();
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let k = centroids.shape()[0];
    let diff = points.reshape(&[n, 1, d])? - &centroids.reshape(&[1, k, d])?;
    let dist = (&diff * &diff).sum(Some(&[2]))?;
    let nearest = dist.min(Some(&[1]))?.reshape(&[n, 1])?;
    let ids = s.arange(k);
    let labels = s.select(dist.gt(&nearest)?, k as i64, &ids)?.min(Some(&[1]))?;
    let column = labels.reshape(&[n, 1])?;
    let onehot = s.select(column.lt(&ids)?, 0.0, s.select(column.gt(&ids)?, 0.0, 1.0)?)?;
    let counts = onehot.sum(Some(&[0]))?;
    let sums = onehot.t()?.dot(points)?;
    Ok(KMeansStep { sums, counts, labels })
}

/// New centroids from sums and counts, computed outside the graph. Empty
/// clusters keep their previous centroid.
fn update_centroids(old: &TensorBuffer, sums: &TensorBuffer, counts: &TensorBuffer) -> Result<TensorBuffer> {
    let d = old.shape()[1];
    let old = old.to_f64_vec();
    let sums = sums.to_f64_vec();
    let counts = counts.to_f64_vec();
    let next = (0..old.len())
        .map(|i| {
            let c = counts[i / d];
            if c > 0.0 {
                sums[i] / c
            } else {
                old[i]
            }
        })
        .collect::<Vec<f64>>();
    TensorBuffer::from_vec(vec![counts.len(), d], next)
}

/// Runs benchmark `name` in `s`, forcing at the same points whatever the
/// backend.
pub fn run_program(name: BenchName, s: &Session, inputs: &Tensors, iters: usize) -> Result<Tensors> {
    let input = |n: &str| -> Result<LazyArray> { Ok(s.input(inputs.get(n)?.clone()).named(n)) };
    let out = |n: &str, b: TensorBuffer| Tensors(vec![(n.to_string(), b)]);
    match name {
        BenchName::BlackScholes => {
            let (price, strike, years) = (input("price")?, input("strike")?, input("years")?);
            let mut call = None;
            for _ in 0..iters {
                call = Some(s.force(&black_scholes_call(&price, &strike, &years)?)?);
            }
            Ok(out("call", call.expect("iters >= 1")))
        }
        BenchName::Jacobi => {
            let (mut a, mut b) = (input("grid")?, input("grid")?);
            for _ in 0..iters {
                let next = jacobi_sweep(&a, &b)?;
                s.force(&next)?;
                (a, b) = (next, a);
            }
            Ok(out("grid", s.to_external(&a)?))
        }
        BenchName::KMeans => {
            let points = input("points")?;
            let mut centroids = inputs.get("centroids")?.clone();
            let mut labels = None;
            for _ in 0..iters {
                let step = kmeans_step(&points, &s.input(centroids.clone()))?;
                let sums = s.to_external(&step.sums)?;
                let counts = s.to_external(&step.counts)?;
                centroids = update_centroids(&centroids, &sums, &counts)?;
                labels = Some(s.to_external(&step.labels)?);
            }
            Ok(Tensors(vec![
                ("centroids".into(), centroids),
                ("labels".into(), labels.expect("iters >= 1")),
            ]))
        }
        BenchName::InnerProduct => {
            let (a, b) = (input("a")?, input("b")?);
            let mut dot = None;
            for _ in 0..iters {
                dot = Some(s.force(&(&a * &b).sum(None)?)?);
            }
            Ok(out("dot", dot.expect("iters >= 1")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub name: BenchName,
    pub size: usize,
    pub iters: usize,
    pub threads: usize,
    pub seed: u64,
    /// Fused run on an empty kernel cache: planning, lowering, compiling and
    /// executing.
    pub cold_ms: f64,
    /// Best fused run with every kernel already cached, on fresh input
    /// copies.
    pub warm_ms: f64,
    pub eager_ms: f64,
    /// `eager_ms / warm_ms`.
    pub speedup: f64,
    pub kernels_executed: u64,
    pub library_calls: u64,
    pub kernels_compiled: u64,
    pub external_transfers: u64,
    pub eager_ops: u64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub verified: bool,
    /// Sum of every fused output element, as f64.
    pub checksum: f64,
}

impl BenchReport {
    /// Everything except timings.
    pub fn same_results(&self, other: &BenchReport) -> bool {
        let strip = |r: &BenchReport| BenchReport { cold_ms: 0.0, warm_ms: 0.0, eager_ms: 0.0, speedup: 0.0, ..r.clone() };
        let (a, b) = (strip(self), strip(other));
        a.max_abs_err.to_bits() == b.max_abs_err.to_bits()
            && a.max_rel_err.to_bits() == b.max_rel_err.to_bits()
            && a.checksum.to_bits() == b.checksum.to_bits()
            && a == b
    }
}

/// Largest absolute and relative difference between matching outputs.
/// Relative error divides by the expected magnitude, or by 1 where the
/// expected value is zero.
pub fn compare(got: &Tensors, want: &Tensors) -> Result<(f64, f64)> {
    let (mut abs, mut rel) = (0.0f64, 0.0f64);
    for (name, w) in &want.0 {
        let g = got.get(name)?;
        if g.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!("output {name:?}: {} vs {}", g.shape(), w.shape())));
        }
        for (a, b) in g.to_f64_vec().into_iter().zip(w.to_f64_vec()) {
            let e = if a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()) { 0.0 } else { (a - b).abs() };
            let e = if e.is_nan() { f64::INFINITY } else { e };
            abs = abs.max(e);
            rel = rel.max(if b == 0.0 { e } else { e / b.abs() });
        }
    }
    Ok((abs, rel))
}

fn checksum(t: &Tensors) -> f64 {
    t.0.iter().flat_map(|(_, b)| b.to_f64_vec()).sum()
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times and cross-checks `spec` on generated inputs. Never fails on a
/// tolerance breach; see [`BenchReport::verified`].
pub fn measure(spec: &BenchSpec) -> Result<(BenchReport, Tensors)> {
    measure_with(spec, &generate_inputs(spec)?)
}

pub fn measure_with(spec: &BenchSpec, inputs: &Tensors) -> Result<(BenchReport, Tensors)> {
    spec.validate()?;
    let eager = Session::eager();
    let t = Instant::now();
    let want = run_program(spec.name, &eager, inputs, spec.iters)?;
    let eager_ms = ms(t);

    let engine = Arc::new(Engine::new(ExecConfig::threads(spec.threads)));
    let cold = Session::fused(Arc::clone(&engine));
    let t = Instant::now();
    let got = run_program(spec.name, &cold, inputs, spec.iters)?;
    let cold_ms = ms(t);

    let mut warm_ms = f64::INFINITY;
    for _ in 0..WARM_REPS {
        let fresh = inputs.deep_copy();
        let warm = Session::fused(Arc::clone(&engine));
        let t = Instant::now();
        let again = run_program(spec.name, &warm, &fresh, spec.iters)?;
        warm_ms = warm_ms.min(ms(t));
        if compare(&again, &got)?.0 != 0.0 {
            return Err(Error::VerificationFailed(format!("{}: warm run differs from cold run", spec.name)));
        }
    }

    let (max_abs_err, max_rel_err) = compare(&got, &want)?;
    let stats = cold.stats();
    let report = BenchReport {
        name: spec.name,
        size: spec.size,
        iters: spec.iters,
        threads: spec.threads,
        seed: spec.seed,
        cold_ms,
        warm_ms,
        eager_ms,
        speedup: eager_ms / warm_ms,
        kernels_executed: stats.kernels_executed,
        library_calls: stats.library_calls,
        kernels_compiled: stats.kernels_compiled,
        external_transfers: stats.external_transfers,
        eager_ops: eager.stats().eager_ops,
        max_abs_err,
        max_rel_err,
        tolerance: spec.name.tolerance(),
        verified: max_rel_err <= spec.name.tolerance(),
        checksum: checksum(&got),
    };
    Ok((report, got))
}

/// Like [`measure`], failing with `VerificationFailed` when the fused result
/// is out of tolerance.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    let (report, _) = measure(spec)?;
    if !report.verified {
        return Err(Error::VerificationFailed(format!(
            "{}: max relative error {:e} exceeds {:e}",
            spec.name, report.max_rel_err, report.tolerance
        )));
    }
    Ok(report)
}

/// Small recorded programs for inspecting graphs and plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Program {
    DenseLayer,
    BroadcastChain,
    SharedReduce,
    Bench(BenchName),
    Empty,
}

impl Program {
    pub const NAMES: [&'static str; 8] =
        ["dense_layer", "broadcast_chain", "shared_reduce", "blackscholes", "kmeans", "jacobi", "innerproduct", "empty"];
}

impl FromStr for Program {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense_layer" => Ok(Program::DenseLayer),
            "broadcast_chain" => Ok(Program::BroadcastChain),
            "shared_reduce" => Ok(Program::SharedReduce),
            "empty" => Ok(Program::Empty),
            other => other
                .parse()
                .map(Program::Bench)
                .map_err(|_| format!("unknown program {other:?} (expected one of {})", Program::NAMES.join(", "))),
        }
    }
}

/// Records `program` into `s` without forcing anything and returns its
/// root. Benchmarks record one iteration.
pub fn record(program: Program, s: &Session, size: usize, seed: u64) -> Result<Option<LazyArray>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f64s = |dims: &[usize], name: &str| -> Result<LazyArray> {
        let n = dims.iter().product();
        Ok(s.from_vec(dims.to_vec(), uniform(&mut rng, n, -1.0, 1.0))?.named(name))
    };
    let size = size.max(1);
    Ok(Some(match program {
        Program::Empty => return Ok(None),
        Program::DenseLayer => {
            let w = f64s(&[size, 10], "W")?;
            let x = f64s(&[size], "x")?;
            let b = f64s(&[10], "b")?;
            let hidden = x.maximum(0.0)?;
            (w.t()?.dot(&hidden)? + &b).exp()?
        }
        Program::BroadcastChain => {
            let w = f64s(&[size, 1], "W")?;
            let a = f64s(&[size, 1], "a")?;
            let b = f64s(&[size], "b")?;
            let x = &w * &a;
            let y = &b * &b;
            let z = &x * &y;
            &z * &a + &b + &x
        }
        Program::SharedReduce => {
            let x = f64s(&[size], "x")?;
            let v = x.exp()?;
            v.sum(None)?.binary(ElemCode::Add, &v)?
        }
        Program::Bench(name) => {
            let spec = BenchSpec { name, size, iters: 1, threads: 1, seed };
            let inputs = generate_inputs(&spec)?;
            let input = |n: &str| -> Result<LazyArray> { Ok(s.input(inputs.get(n)?.clone()).named(n)) };
            match name {
                BenchName::BlackScholes => black_scholes_call(&input("price")?, &input("strike")?, &input("years")?)?,
                BenchName::Jacobi => {
                    let grid = inputs.get("grid")?;
                    jacobi_sweep(&s.input(grid.clone()).named("a"), &s.input(grid.clone()).named("b"))?
                }
                BenchName::KMeans => kmeans_step(&input("points")?, &input("centroids")?)?.sums,
                BenchName::InnerProduct => (input("a")? * &input("b")?).sum(None)?,
            }
        }
    }
    .named("output")))
}
