//! wasm-bindgen exports for the static page in `www/`.

use std::fmt::Write as _;

use lazyfuse::bench::{self, Program};
use lazyfuse::lower::lower;
use lazyfuse::{Result, Session, TensorBuffer};
use wasm_bindgen::prelude::*;

fn js(e: lazyfuse::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Heat diffusion on an `(n + 2)^2` grid whose top edge is held at 1.
/// Returns the grid row-major after `sweeps` fused sweeps.
pub fn heat(n: usize, sweeps: usize) -> Result<Vec<f64>> {
    let side = n + 2;
    let mut grid = vec![0.0; side * side];
    grid[..side].fill(1.0);
    let s = Session::with_threads(1);
    let grid = TensorBuffer::from_vec(vec![side, side], grid)?;
    let (mut a, mut b) = (s.input(grid.clone()), s.input(grid));
    for _ in 0..sweeps {
        let next = bench::jacobi_sweep(&a, &b)?;
        s.force(&next)?;
        (a, b) = (next, a);
    }
    Ok(a.force()?.to_f64_vec())
}

/// Call prices for strikes `1..=strikes` at one spot price and maturity.
pub fn call_curve(spot: f64, years: f64, strikes: usize) -> Result<Vec<f64>> {
    let s = Session::with_threads(1);
    let price = s.full(vec![strikes], spot);
    let strike = s.from_vec(vec![strikes], (1..=strikes).map(|k| k as f64).collect::<Vec<_>>())?;
    let t = s.full(vec![strikes], years);
    let call = bench::black_scholes_call(&price, &strike, &t)?;
    Ok(call.force()?.to_f64_vec())
}

/// Which view of a recorded program to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Dag,
    Plan,
    Steps,
    Kernels,
}

/// Text rendering of `program` at `size`: DOT for the graph or plan, a step
/// list, or each fused kernel's point program.
pub fn describe(program: &str, size: usize, view: View) -> Result<String> {
    let program: Program = program.parse().map_err(lazyfuse::Error::ShapeMismatch)?;
    let s = Session::with_threads(1);
    let Some(root) = bench::record(program, &s, size, 1)? else {
        return Ok(match view {
            View::Dag => s.dag_dot(),
            View::Plan => lazyfuse::planner::plan_to_dot(&lazyfuse::Graph::new(), &[]),
            View::Steps | View::Kernels => String::new(),
        });
    };
    let steps = s.plan_for(&root)?;
    let mut out = String::new();
    match view {
        View::Dag => out = s.dag_dot(),
        View::Plan => out = s.plan_dot(&root)?,
        View::Steps => {
            for step in &steps {
                let leaves: Vec<String> = step.leaves.iter().map(|l| l.to_string()).collect();
                let _ = writeln!(
                    out,
                    "#{} {}: root {}, {} nodes, leaves [{}]",
                    step.order_index,
                    step.kind,
                    step.root,
                    step.nodes.len(),
                    leaves.join(", ")
                );
            }
        }
        View::Kernels => s.with_graph(|g| -> Result<()> {
            for step in steps.iter().filter(|st| st.is_fused()) {
                let _ = writeln!(out, "// step #{}\n{}", step.order_index, lower(g, step)?.to_pseudo_c());
            }
            Ok(())
        })?,
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn heat_map(n: usize, sweeps: usize) -> Result<Vec<f64>, JsError> {
    heat(n, sweeps).map_err(js)
}

#[wasm_bindgen]
pub fn black_scholes_curve(spot: f64, years: f64, strikes: usize) -> Result<Vec<f64>, JsError> {
    call_curve(spot, years, strikes).map_err(js)
}

/// `view` is one of `dag`, `plan`, `steps` or `kernels`.
#[wasm_bindgen]
pub fn explain(program: &str, size: usize, view: &str) -> Result<String, JsError> {
    let view = match view {
        "dag" => View::Dag,
        "plan" => View::Plan,
        "steps" => View::Steps,
        "kernels" => View::Kernels,
        other => return Err(JsError::new(&format!("unknown view {other:?}"))),
    };
    describe(program, size, view).map_err(js)
}

#[wasm_bindgen]
pub fn program_names() -> Vec<String> {
    Program::NAMES.iter().map(|s| s.to_string()).collect()
}
