use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lazyfuse::bench::{self, BenchName, BenchSpec, Program};
use lazyfuse::{npy, Session};

#[derive(Parser)]
#[command(name = "bench", about = "Run lazyfuse benchmarks and dump graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark on the fused engine and check it against eager
    /// evaluation.
    Run {
        /// blackscholes, kmeans, jacobi or innerproduct.
        name: BenchName,
        #[arg(long, default_value_t = 100_000)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Directory of `<input>.npy` files replacing generated inputs.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Directory to write each fused output as `<output>.npy`.
        #[arg(long)]
        out_npy: Option<PathBuf>,
        /// Override the benchmark's relative error tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Write a recorded program's graph or plan as Graphviz DOT.
    Dot {
        #[arg(long, value_enum)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
        /// dense_layer, broadcast_chain, shared_reduce, blackscholes,
        /// kmeans, jacobi, innerproduct or empty.
        #[arg(long, default_value = "dense_layer")]
        program: Program,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Dag,
    Plan,
}

fn load_inputs(dir: &Path, inputs: &mut bench::Tensors) -> Result<()> {
    let names: Vec<String> = inputs.names().map(str::to_string).collect();
    for name in names {
        let path = dir.join(format!("{name}.npy"));
        if path.exists() {
            let buf = npy::load(&path).with_context(|| format!("reading {}", path.display()))?;
            inputs.replace(&name, buf)?;
        }
    }
    Ok(())
}

fn run(spec: BenchSpec, json: Option<PathBuf>, inputs: Option<PathBuf>, out_npy: Option<PathBuf>, tolerance: Option<f64>) -> Result<bool> {
    let mut data = bench::generate_inputs(&spec)?;
    if let Some(dir) = &inputs {
        load_inputs(dir, &mut data)?;
    }
    let (mut report, outputs) = bench::measure_with(&spec, &data)?;
    if let Some(tol) = tolerance {
        report.tolerance = tol;
        report.verified = report.max_rel_err <= tol;
    }
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = json {
        fs::write(&path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(dir) = out_npy {
        fs::create_dir_all(&dir)?;
        for (name, buf) in &outputs.0 {
            npy::save(dir.join(format!("{name}.npy")), buf)?;
        }
    }
    if !report.verified {
        eprintln!(
            "verification failed: {} max relative error {:e} exceeds {:e}",
            spec.name, report.max_rel_err, report.tolerance
        );
    }
    Ok(report.verified)
}

fn dot(target: Target, out: &Path, program: Program, size: usize, seed: u64) -> Result<()> {
    let session = Session::with_threads(1);
    let root = bench::record(program, &session, size, seed)?;
    let text = match (target, root) {
        (Target::Dag, _) => session.dag_dot(),
        (Target::Plan, Some(root)) => session.plan_dot(&root)?,
        (Target::Plan, None) => lazyfuse::planner::plan_to_dot(&lazyfuse::Graph::new(), &[]),
    };
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { name, size, iters, threads, seed, json, inputs, out_npy, tolerance } => {
            run(BenchSpec { name, size, iters, threads, seed }, json, inputs, out_npy, tolerance)
        }
        Command::Dot { target, out, program, size, seed } => dot(target, &out, program, size, seed).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
