//! Fixed-point solvers: plain forward iteration and Anderson acceleration.
//!
//! Both solvers take a fallible map `f` and stop when the relative residual
//! `‖x − f(x)‖ / ‖x‖` drops to `tol` (absolute residual when `‖x‖ = 0`).
//! A [`SolveReport`] comes back whether or not the tolerance was reached.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::norm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("iterate {iteration} contains a non-finite value")]
    NonFiniteIterate { iteration: usize },
    #[error("singular least-squares system at iteration {iteration}")]
    SingularLeastSquares { iteration: usize },
    #[error("relative error undefined at a zero-norm point")]
    ZeroNorm,
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("map returned {got} components for a {expected}-dimensional iterate")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Forward,
    Anderson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Anderson history length.
    pub m: usize,
    /// Anderson mixing (relaxation) parameter.
    pub beta: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Regularizer of the Anderson least-squares step: singular values of the
    /// normalized difference matrix below `√ridge·σ_max` are discarded.
    pub ridge: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Anderson, m: 5, beta: 2.0, tol: 1e-4, max_iter: 5000, ridge: 1e-8 }
    }
}

impl SolverConfig {
    pub fn forward() -> Self {
        Self { method: Method::Forward, ..Self::default() }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |msg: &str| Err(SolveError::InvalidConfig(msg.to_string()));
        if self.m < 1 {
            return bad("history m must be at least 1");
        }
        if !(self.beta > 0.0) {
            return bad("relaxation beta must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1");
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub residual_norm: f64,
    pub relative_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `‖x − f(x)‖ / ‖x‖` given an already evaluated `f(x)`, falling back to
/// the absolute residual at `‖x‖ = 0`.
fn residual_metrics(x: &[f64], fx: &[f64]) -> (f64, f64) {
    let r = norm(&x.iter().zip(fx).map(|(a, b)| a - b).collect::<Vec<_>>());
    let nx = norm(x);
    (r, if nx > 0.0 { r / nx } else { r })
}

/// Relative fixed-point error `‖x − f(x)‖ / ‖x‖`.
pub fn relative_error<F, E>(mut f: F, x: &[f64]) -> Result<f64, E>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
    E: From<SolveError>,
{
    if norm(x) == 0.0 {
        return Err(SolveError::ZeroNorm.into());
    }
    let fx = f(x)?;
    Ok(residual_metrics(x, &fx).1)
}

fn eval_checked<F, E>(f: &mut F, x: &[f64], iteration: usize) -> Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
    E: From<SolveError>,
{
    let fx = f(x)?;
    if fx.len() != x.len() {
        return Err(SolveError::DimensionMismatch { expected: x.len(), got: fx.len() }.into());
    }
    if fx.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::NonFiniteIterate { iteration }.into());
    }
    Ok(fx)
}

/// Iterates `x ← f(x)` from `x0`.
pub fn forward_iterate<F, E>(mut f: F, x0: &[f64], cfg: &SolverConfig) -> Result<SolveReport, E>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
    E: From<SolveError>,
{
    cfg.validate()?;
    let mut x = x0.to_vec();
    let mut k = 0;
    loop {
        let fx = eval_checked(&mut f, &x, k)?;
        let (res, rel) = residual_metrics(&x, &fx);
        if rel <= cfg.tol || k >= cfg.max_iter {
            return Ok(SolveReport {
                solution: x,
                residual_norm: res,
                relative_error: rel,
                iterations: k,
                converged: rel <= cfg.tol,
            });
        }
        x = fx;
        k += 1;
    }
}

/// Anderson acceleration with history `m` (stored iterates) and mixing `beta`.
///
/// Each step solves the least-squares problem over residual differences
/// `min ‖g_k − ΔG·γ‖`, with the columns of `ΔG` normalized to unit length
/// and directions weaker than `√ridge` filtered out, and sets `x ← β·f(x_k) + (1 − β)·x_k − (ΔX + β·ΔG)·γ`.
pub fn anderson_solve<F, E>(mut f: F, x0: &[f64], cfg: &SolverConfig) -> Result<SolveReport, E>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
    E: From<SolveError>,
{
    cfg.validate()?;
    let mut xs: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.m);
    let mut gs: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.m);
    let mut x = x0.to_vec();
    let mut k = 0;
    loop {
        let fx = eval_checked(&mut f, &x, k)?;
        let (res, rel) = residual_metrics(&x, &fx);
        if rel <= cfg.tol || k >= cfg.max_iter {
            return Ok(SolveReport {
                solution: x,
                residual_norm: res,
                relative_error: rel,
                iterations: k,
                converged: rel <= cfg.tol,
            });
        }
        if xs.len() == cfg.m {
            xs.pop_front();
            gs.pop_front();
        }
        let g: Vec<f64> = fx.iter().zip(&x).map(|(a, b)| a - b).collect();
        let mut next: Vec<f64> = fx.iter().zip(&x).map(|(fv, xv)| cfg.beta * fv + (1.0 - cfg.beta) * xv).collect();
        xs.push_back(x);
        gs.push_back(g);
        if xs.len() > 1 {
            let gamma = difference_weights(&gs, cfg.ridge).ok_or(SolveError::SingularLeastSquares { iteration: k })?;
            for (i, c) in gamma.iter().enumerate() {
                for (j, nx) in next.iter_mut().enumerate() {
                    let dx = xs[i + 1][j] - xs[i][j];
                    let dg = gs[i + 1][j] - gs[i][j];
                    *nx -= c * (dx + cfg.beta * dg);
                }
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFiniteIterate { iteration: k + 1 }.into());
        }
        x = next;
        k += 1;
    }
}

/// Coefficients `γ` of the newest residual on the residual differences:
/// least squares on the column-normalized differences via SVD, treating
/// singular values below `√ridge·σ_max` as zero. With `ridge = 0` any exact
/// rank deficiency is an error.
fn difference_weights(gs: &VecDeque<Vec<f64>>, ridge: f64) -> Option<Vec<f64>> {
    let h = gs.len() - 1;
    let n = gs[0].len();
    let last = &gs[h];
    let mut d = DMatrix::zeros(n, h);
    let mut scale = vec![1.0; h];
    for i in 0..h {
        for j in 0..n {
            d[(j, i)] = gs[i + 1][j] - gs[i][j];
        }
        let c = d.column(i).norm();
        if c > 0.0 && c.is_finite() {
            scale[i] = c;
            d.column_mut(i).unscale_mut(c);
        }
    }
    let svd = d.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || (ridge == 0.0 && smin == 0.0) {
        return None;
    }
    let cutoff = ridge.sqrt() * smax;
    let z = svd.solve(&DVector::from_column_slice(last), cutoff).ok()?;
    if z.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(z.iter().zip(&scale).map(|(v, c)| v / c).collect())
}

/// Dispatches on `cfg.method`.
pub fn solve<F, E>(f: F, x0: &[f64], cfg: &SolverConfig) -> Result<SolveReport, E>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
    E: From<SolveError>,
{
    match cfg.method {
        Method::Forward => forward_iterate(f, x0, cfg),
        Method::Anderson => anderson_solve(f, x0, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    fn affine<'a>(a: &'a DMatrix<f64>, y: &'a [f64]) -> impl Fn(&[f64]) -> Result<Vec<f64>, SolveError> + 'a {
        let y = DVector::from_row_slice(y);
        move |x: &[f64]| Ok((a * DVector::from_row_slice(x) + &y).iter().copied().collect())
    }

    fn two_by_two() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.1])
    }

    #[test]
    fn defaults() {
        let cfg = SolverConfig::default();
        assert_eq!((cfg.m, cfg.beta, cfg.tol, cfg.max_iter), (5, 2.0, 1e-4, 5000));
        assert_eq!(cfg.method, Method::Anderson);
    }

    #[test]
    fn forward_scalar_contraction() {
        let rep = forward_iterate(|x: &[f64]| Ok::<_, SolveError>(vec![0.5 * x[0] + 1.0]), &[0.0], &SolverConfig::forward())
            .unwrap();
        assert!(rep.converged);
        assert!((rep.solution[0] - 2.0).abs() < 2.0 * 1e-4 * 2.0);
    }

    #[test]
    fn identity_map_converges_immediately() {
        for solver in [SolverConfig::forward(), SolverConfig::default()] {
            let rep = solve(|x: &[f64]| Ok::<_, SolveError>(x.to_vec()), &[3.0, -1.0], &solver).unwrap();
            assert!(rep.converged);
            assert_eq!(rep.iterations, 0);
            assert_eq!(rep.relative_error, 0.0);
        }
    }

    #[test]
    fn two_by_two_matches_inverse() {
        let a = two_by_two();
        let exact = [1.1 / 0.75, 1.2 / 0.75];
        for cfg in [SolverConfig::forward(), SolverConfig::default()] {
            let rep = solve(affine(&a, &[1.0, 1.0]), &[0.0, 0.0], &cfg).unwrap();
            assert!(rep.converged);
            for (x, e) in rep.solution.iter().zip(exact) {
                assert!((x - e).abs() / e < 2.0 * cfg.tol * 5.0, "{x} vs {e}");
            }
        }
    }

    #[test]
    fn anderson_beats_forward_on_tight_tolerance() {
        let f = |x: &[f64]| Ok::<_, SolveError>(vec![0.5 * x[0] + 1.0]);
        let fwd = forward_iterate(f, &[0.0], &SolverConfig::forward().with_tol(1e-10)).unwrap();
        let and = anderson_solve(f, &[0.0], &SolverConfig::default().with_tol(1e-10)).unwrap();
        assert!(and.converged && fwd.converged);
        assert!((and.solution[0] - 2.0).abs() < 1e-9);
        assert!(and.iterations < fwd.iterations, "{} vs {}", and.iterations, fwd.iterations);
    }

    #[test]
    fn anderson_m1_beta1_is_forward_iteration() {
        let a = two_by_two();
        let mut fwd_trace = Vec::new();
        let mut and_trace = Vec::new();
        let cfg = SolverConfig { m: 1, beta: 1.0, tol: 1e-12, max_iter: 30, ..SolverConfig::default() };
        let f = affine(&a, &[1.0, 2.0]);
        forward_iterate(
            |x: &[f64]| {
                fwd_trace.push(x.to_vec());
                f(x)
            },
            &[0.0, 0.0],
            &SolverConfig { method: Method::Forward, ..cfg.clone() },
        )
        .unwrap();
        anderson_solve(
            |x: &[f64]| {
                and_trace.push(x.to_vec());
                f(x)
            },
            &[0.0, 0.0],
            &cfg,
        )
        .unwrap();
        assert_eq!(fwd_trace.len(), and_trace.len());
        for (p, q) in fwd_trace.iter().zip(&and_trace) {
            for (u, v) in p.iter().zip(q) {
                assert!((u - v).abs() <= 1e-15 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn relative_error_examples() {
        let r = relative_error(|x: &[f64]| Ok::<_, SolveError>(vec![x[0] + 1.0, x[1]]), &[1.0, 0.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert_eq!(relative_error(|x: &[f64]| Ok::<_, SolveError>(x.to_vec()), &[2.0]).unwrap(), 0.0);
        assert_eq!(relative_error(|x: &[f64]| Ok::<_, SolveError>(x.to_vec()), &[0.0]), Err(SolveError::ZeroNorm));

        let a = two_by_two();
        let rep = anderson_solve(affine(&a, &[1.0, 1.0]), &[0.0, 0.0], &SolverConfig::default()).unwrap();
        assert!(relative_error(affine(&a, &[1.0, 1.0]), &rep.solution).unwrap() <= 1e-4);
    }

    #[test]
    fn divergence_is_reported() {
        let f = |x: &[f64]| Ok::<_, SolveError>(vec![1e200 * x[0] + 1e200]);
        let err = forward_iterate(f, &[1.0], &SolverConfig::forward()).unwrap_err();
        assert!(matches!(err, SolveError::NonFiniteIterate { .. }));
    }

    #[test]
    fn non_convergence_still_returns_report() {
        let f = |x: &[f64]| Ok::<_, SolveError>(vec![0.999 * x[0] + 1.0]);
        let cfg = SolverConfig { max_iter: 10, ..SolverConfig::forward() };
        let rep = forward_iterate(f, &[0.0], &cfg).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 10);
    }

    #[test]
    fn unregularized_singular_gram_is_reported() {
        // Constant residuals give a zero difference column.
        let f = |x: &[f64]| Ok::<_, SolveError>(vec![x[0] + 1.0, x[1]]);
        let cfg = SolverConfig { ridge: 0.0, beta: 1.0, ..SolverConfig::default() };
        let err = anderson_solve(f, &[1.0, 1.0], &cfg).unwrap_err();
        assert!(matches!(err, SolveError::SingularLeastSquares { .. }));
    }

    #[test]
    fn invalid_configs_rejected() {
        let f = |x: &[f64]| Ok::<_, SolveError>(x.to_vec());
        for cfg in [
            SolverConfig { m: 0, ..SolverConfig::default() },
            SolverConfig { tol: 0.0, ..SolverConfig::default() },
            SolverConfig { beta: -1.0, ..SolverConfig::default() },
            SolverConfig { max_iter: 0, ..SolverConfig::default() },
        ] {
            assert!(matches!(solve(f, &[1.0], &cfg), Err(SolveError::InvalidConfig(_))));
        }
    }

    #[test]
    fn spectral_check_helper_agrees() {
        assert!(linalg::spectral_radius(&two_by_two()) < 1.0);
    }
}
