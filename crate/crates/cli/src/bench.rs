//! Solver benchmark: relative error and iteration counts per dimension and
//! method on random affine contractions `x ↦ Ax + y` with a fixed spectral
//! radius.

use eqcausal::deq::relative_deviation;
use eqcausal::fixedpoint::{self, SolveError, SolverConfig};
use eqcausal::linalg;
use eqcausal::modelzoo::synthetic_leontief;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::BenchDecl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub dim: usize,
    pub seed: u64,
    pub method: String,
    pub iterations: usize,
    pub converged: bool,
    /// The solver's stopping quantity `‖x − f(x)‖ / ‖x‖`.
    pub relative_error: f64,
    /// Max-norm deviation from the direct solve.
    pub solution_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub dim: usize,
    pub method: String,
    pub runs: usize,
    pub converged: usize,
    pub mean_relative_error: f64,
    pub std_relative_error: f64,
    pub mean_solution_error: f64,
    pub std_solution_error: f64,
    pub mean_iterations: f64,
    pub std_iterations: f64,
}

/// Rayon pool capped by `EQCAUSAL_THREADS` when set.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("EQCAUSAL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Instance seed for the `s`-th draw under run seed `seed`.
pub fn instance_seed(seed: u64, s: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s as u64)
}

fn one_run(decl: &BenchDecl, solver: &SolverConfig, dim: usize, seed: u64) -> Result<Vec<BenchRun>, SolveError> {
    let table = synthetic_leontief(dim, decl.rho, seed);
    let exact = linalg::solve(&linalg::identity_minus(&table.a), &table.y).ok_or(SolveError::ZeroNorm)?;
    let y = DVector::from_column_slice(&table.y);
    let map = |x: &[f64]| -> Result<Vec<f64>, SolveError> {
        Ok((&table.a * DVector::from_column_slice(x) + &y).as_slice().to_vec())
    };
    decl.methods
        .iter()
        .map(|m| {
            let cfg = SolverConfig { method: m.method, beta: m.beta, ..solver.clone() };
            let r = fixedpoint::solve(map, &vec![0.0; dim], &cfg)?;
            Ok(BenchRun {
                dim,
                seed,
                method: m.name.clone(),
                iterations: r.iterations,
                converged: r.converged,
                relative_error: r.relative_error,
                solution_error: relative_deviation(&r.solution, &exact),
            })
        })
        .collect()
}

/// Runs every (dimension, seed, method) cell. Results are ordered by
/// dimension, seed, then method regardless of thread count.
pub fn run_bench(decl: &BenchDecl, solver: &SolverConfig, seed: u64) -> Result<(Vec<BenchRun>, Vec<BenchCell>), SolveError> {
    let jobs: Vec<(usize, u64)> =
        decl.dims.iter().flat_map(|&d| (0..decl.seeds).map(move |s| (d, instance_seed(seed, s)))).collect();
    let runs: Vec<BenchRun> = thread_pool().install(|| {
        jobs.par_iter().map(|&(d, s)| one_run(decl, solver, d, s)).collect::<Result<Vec<_>, _>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let mut cells = Vec::new();
    for &dim in &decl.dims {
        for m in &decl.methods {
            let rs: Vec<&BenchRun> = runs.iter().filter(|r| r.dim == dim && r.method == m.name).collect();
            let col = |f: fn(&BenchRun) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (mre, sre) = mean_std(&col(|r| r.relative_error));
            let (mse, sse) = mean_std(&col(|r| r.solution_error));
            let (mit, sit) = mean_std(&col(|r| r.iterations as f64));
            cells.push(BenchCell {
                dim,
                method: m.name.clone(),
                runs: rs.len(),
                converged: rs.iter().filter(|r| r.converged).count(),
                mean_relative_error: mre,
                std_relative_error: sre,
                mean_solution_error: mse,
                std_solution_error: sse,
                mean_iterations: mit,
                std_iterations: sit,
            });
        }
    }
    Ok((runs, cells))
}
