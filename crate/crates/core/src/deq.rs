//! Implicit differentiation of equilibria.
//!
//! For `x* = f(x*, θ, u)` and a loss with cotangent `c = ∂L/∂x*`, the adjoint
//! `w` solves `w = (∂f/∂x)ᵀ·w + c`; then `dL/dθ = (∂f/∂θ)ᵀ·w` and likewise
//! for the controls. Small systems use a dense LU solve, larger ones reuse
//! the fixed-point solver on the adjoint map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffcore::{finite_difference_jacobian, ExprGraph};
use crate::fixedpoint::{self, SolveReport, SolverConfig};
use crate::linalg;
use crate::sscm::{solve_equilibrium_at, EquilibriumSolution, Linearization, ModelError, SscmSpec};

/// Largest dimension for which the adjoint is solved densely.
pub const DENSE_ADJOINT_MAX_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitGradient {
    pub grad_theta: Vec<f64>,
    pub grad_u: Vec<f64>,
    pub adjoint_report: SolveReport,
}

/// Reusable adjoint solver at one equilibrium.
pub struct Adjoint<'a> {
    lin: Linearization<'a>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    cfg: SolverConfig,
}

impl<'a> Adjoint<'a> {
    /// Linearizes `spec` at a converged equilibrium.
    pub fn new(spec: &'a SscmSpec, sol: &EquilibriumSolution, cfg: &SolverConfig) -> Result<Self, ModelError> {
        if !sol.report.converged {
            return Err(ModelError::NotConverged { relative_error: sol.report.relative_error });
        }
        let lin = spec.linearize(&sol.x_star, &sol.theta, &sol.controls)?;
        let lu = if spec.dim() <= DENSE_ADJOINT_MAX_DIM {
            let lu = linalg::identity_minus(&lin.jac_x()).transpose().lu();
            if !lu.is_invertible() {
                return Err(ModelError::Singular("I - df/dx is singular at the equilibrium".into()));
            }
            Some(lu)
        } else {
            None
        };
        Ok(Self { lin, lu, cfg: cfg.clone() })
    }

    /// Solves `w = (∂f/∂x)ᵀ·w + c`.
    pub fn solve(&self, cotangent: &[f64]) -> Result<(Vec<f64>, SolveReport), ModelError> {
        let d = cotangent.len();
        if let Some(lu) = &self.lu {
            let w: Vec<f64> = lu
                .solve(&DVector::from_row_slice(cotangent))
                .ok_or_else(|| ModelError::Singular("adjoint system is singular".into()))?
                .iter()
                .copied()
                .collect();
            let fw: Vec<f64> = self.lin.vjp_x(&w).iter().zip(cotangent).map(|(a, c)| a + c).collect();
            let residual_norm = linalg::norm(&w.iter().zip(&fw).map(|(a, b)| a - b).collect::<Vec<_>>());
            let nw = linalg::norm(&w);
            let relative_error = if nw > 0.0 { residual_norm / nw } else { residual_norm };
            let report = SolveReport {
                solution: w.clone(),
                residual_norm,
                relative_error,
                iterations: 0,
                converged: w.iter().all(|v| v.is_finite()),
            };
            return Ok((w, report));
        }
        let report = fixedpoint::solve(
            |w: &[f64]| -> Result<Vec<f64>, ModelError> {
                Ok(self.lin.vjp_x(w).iter().zip(cotangent).map(|(a, c)| a + c).collect())
            },
            &vec![0.0; d],
            &self.cfg,
        )?;
        if !report.converged {
            return Err(ModelError::AdjointNotConverged { relative_error: report.relative_error });
        }
        Ok((report.solution.clone(), report))
    }

    pub fn gradient(&self, cotangent: &[f64]) -> Result<ImplicitGradient, ModelError> {
        let (w, adjoint_report) = self.solve(cotangent)?;
        Ok(ImplicitGradient {
            grad_theta: self.lin.vjp_theta(&w),
            grad_u: self.lin.vjp_controls(&w),
            adjoint_report,
        })
    }

    pub fn linearization(&self) -> &Linearization<'a> {
        &self.lin
    }
}

/// `dL/dθ` and `dL/du` for a loss whose gradient at `x*` is `cotangent`.
pub fn implicit_vjp(
    spec: &SscmSpec,
    sol: &EquilibriumSolution,
    cotangent: &[f64],
    cfg: &SolverConfig,
) -> Result<ImplicitGradient, ModelError> {
    if cotangent.len() != spec.dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "cotangent has {} entries, model has {} nodes",
            cotangent.len(),
            spec.dim()
        )));
    }
    Adjoint::new(spec, sol, cfg)?.gradient(cotangent)
}

fn jacobian_rows(
    spec: &SscmSpec,
    sol: &EquilibriumSolution,
    cfg: &SolverConfig,
    wrt_theta: bool,
) -> Result<DMatrix<f64>, ModelError> {
    let adj = Adjoint::new(spec, sol, cfg)?;
    let cols = if wrt_theta { spec.theta_dim() } else { spec.control_dim() };
    let mut out = DMatrix::zeros(spec.dim(), cols);
    let mut e = vec![0.0; spec.dim()];
    for i in 0..spec.dim() {
        e[i] = 1.0;
        let g = adj.gradient(&e)?;
        let row = if wrt_theta { g.grad_theta } else { g.grad_u };
        for (j, v) in row.into_iter().enumerate() {
            out[(i, j)] = v;
        }
        e[i] = 0.0;
    }
    Ok(out)
}

/// `∂x*/∂θ`, one adjoint solve per row.
pub fn jacobian_wrt_theta(spec: &SscmSpec, sol: &EquilibriumSolution, cfg: &SolverConfig) -> Result<DMatrix<f64>, ModelError> {
    jacobian_rows(spec, sol, cfg, true)
}

/// `∂x*/∂u` for the control vector.
pub fn jacobian_wrt_controls(
    spec: &SscmSpec,
    sol: &EquilibriumSolution,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>, ModelError> {
    jacobian_rows(spec, sol, cfg, false)
}

/// `max|a − b| / max|b|`, or the absolute deviation when `b` vanishes.
pub fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub implicit: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub max_relative_deviation: f64,
    pub step: f64,
    pub solver_tol: f64,
}

/// Compares the implicit gradient of `loss(x*(θ))` with central differences.
/// `loss` takes one slot of length `d` and returns a scalar.
pub fn grad_check(
    spec: &SscmSpec,
    theta: &[f64],
    loss: &ExprGraph,
    cfg: &SolverConfig,
    h: f64,
) -> Result<GradCheckReport, ModelError> {
    let controls = spec.control_ref();
    let sol = solve_equilibrium_at(spec, theta, &controls, cfg)?;
    let (_, g) = loss.value_and_vjp(&[&sol.x_star], &[1.0])?;
    let implicit = implicit_vjp(spec, &sol, g.slot(0), cfg)?.grad_theta;
    let fd = finite_difference_jacobian(
        |t: &[f64]| -> Result<Vec<f64>, ModelError> {
            let s = converged_solve(spec, t, &controls, cfg)?;
            Ok(vec![loss.eval_scalar(&[&s])?])
        },
        theta,
        h,
    )?;
    let finite_difference: Vec<f64> = fd.row(0).iter().copied().collect();
    Ok(GradCheckReport {
        max_relative_deviation: relative_deviation(&implicit, &finite_difference),
        implicit,
        finite_difference,
        step: h,
        solver_tol: cfg.tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianCheckReport {
    pub columns: Vec<usize>,
    pub implicit: Vec<Vec<f64>>,
    pub finite_difference: Vec<Vec<f64>>,
    pub max_relative_deviation: f64,
}

/// Compares selected columns of `∂x*/∂θ` with central differences of
/// `solve_equilibrium` (all columns when `columns` is `None`).
pub fn jacobian_check(
    spec: &SscmSpec,
    theta: &[f64],
    columns: Option<&[usize]>,
    cfg: &SolverConfig,
    h: f64,
) -> Result<JacobianCheckReport, ModelError> {
    let controls = spec.control_ref();
    let sol = solve_equilibrium_at(spec, theta, &controls, cfg)?;
    let jac = jacobian_wrt_theta(spec, &sol, cfg)?;
    let columns: Vec<usize> = columns.map(<[usize]>::to_vec).unwrap_or_else(|| (0..spec.theta_dim()).collect());
    let mut implicit = Vec::with_capacity(columns.len());
    let mut finite_difference = Vec::with_capacity(columns.len());
    let mut t = theta.to_vec();
    for &k in &columns {
        implicit.push(jac.column(k).iter().copied().collect::<Vec<f64>>());
        let orig = t[k];
        t[k] = orig + h;
        let plus = converged_solve(spec, &t, &controls, cfg)?;
        t[k] = orig - h;
        let minus = converged_solve(spec, &t, &controls, cfg)?;
        t[k] = orig;
        finite_difference.push(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect::<Vec<f64>>());
    }
    let flat_i: Vec<f64> = implicit.iter().flatten().copied().collect();
    let flat_f: Vec<f64> = finite_difference.iter().flatten().copied().collect();
    Ok(JacobianCheckReport {
        columns,
        max_relative_deviation: relative_deviation(&flat_i, &flat_f),
        implicit,
        finite_difference,
    })
}

fn converged_solve(spec: &SscmSpec, theta: &[f64], controls: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>, ModelError> {
    let s = solve_equilibrium_at(spec, theta, controls, cfg)?;
    if !s.report.converged {
        return Err(ModelError::NotConverged { relative_error: s.report.relative_error });
    }
    Ok(s.x_star)
}
