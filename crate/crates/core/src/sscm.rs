//! Smooth structural causal models with possibly cyclic graphs.
//!
//! Every node holds a scalar variable and an assignment graph with three
//! input slots, always in this order:
//!
//! 0. the values of the node's parents, in `parents` order;
//! 1. the node's parameters, gathered from the global θ by `theta` indices;
//! 2. the node's controls, gathered from the global control vector by
//!    `controls` indices (intervention parameters, policy weights, and
//!    rerouted inputs all live here).
//!
//! Parameters and controls are addressed by index, so several nodes may
//! read the same entry.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{ExprGraph, GraphBuilder, GraphError, NodeId};
use crate::fixedpoint::{self, SolveError, SolveReport, SolverConfig};
use crate::linalg;

pub const PARENTS_SLOT: usize = 0;
pub const THETA_SLOT: usize = 1;
pub const CONTROL_SLOT: usize = 2;

/// Default condition-number ceiling for the local-diffeomorphism check.
pub const DEFAULT_COND_MAX: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("forward solve did not converge (relative error {relative_error:e})")]
    NotConverged { relative_error: f64 },
    #[error("adjoint solve did not converge (relative error {relative_error:e})")]
    AdjointNotConverged { relative_error: f64 },
    #[error("singular system: {0}")]
    Singular(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub parents: Vec<usize>,
    pub theta: Vec<usize>,
    pub controls: Vec<usize>,
    pub assignment: ExprGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlDecl {
    pub name: String,
    /// Value at which the control leaves the model unintervened.
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SscmSpec {
    pub nodes: Vec<NodeSpec>,
    pub theta_names: Vec<String>,
    pub theta_ref: Vec<f64>,
    pub theta_box: Vec<[f64; 2]>,
    pub controls: Vec<ControlDecl>,
    #[serde(default)]
    pub x_ref: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    ParentOutOfRange { node: usize, parent: usize },
    DuplicateParent { node: usize, parent: usize },
    ThetaIndexOutOfRange { node: usize, index: usize },
    ControlIndexOutOfRange { node: usize, index: usize },
    SlotCount { node: usize, found: usize },
    ArityMismatch { node: usize, slot: usize, declared: usize, expected: usize },
    NonScalarOutput { node: usize, dim: usize },
    ThetaLength { theta_ref: usize, theta_box: usize, theta_names: usize },
    EmptyBox { index: usize },
    ThetaOutsideBox { index: usize, value: f64, lo: f64, hi: f64 },
    XRefLength { expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ParentOutOfRange { node, parent } => write!(f, "node {node}: parent {parent} out of range"),
            Violation::DuplicateParent { node, parent } => write!(f, "node {node}: parent {parent} listed twice"),
            Violation::ThetaIndexOutOfRange { node, index } => write!(f, "node {node}: theta index {index} out of range"),
            Violation::ControlIndexOutOfRange { node, index } => {
                write!(f, "node {node}: control index {index} out of range")
            }
            Violation::SlotCount { node, found } => write!(f, "node {node}: assignment has {found} slots, expected 3"),
            Violation::ArityMismatch { node, slot, declared, expected } => {
                write!(f, "node {node}: slot {slot} declares {declared} inputs, model supplies {expected}")
            }
            Violation::NonScalarOutput { node, dim } => write!(f, "node {node}: assignment output has length {dim}"),
            Violation::ThetaLength { theta_ref, theta_box, theta_names } => write!(
                f,
                "theta_ref has {theta_ref} entries, theta_box {theta_box}, theta_names {theta_names}"
            ),
            Violation::EmptyBox { index } => write!(f, "theta box {index} has lo > hi"),
            Violation::ThetaOutsideBox { index, value, lo, hi } => {
                write!(f, "theta[{index}] = {value} outside [{lo}, {hi}]")
            }
            Violation::XRefLength { expected, found } => write!(f, "x_ref has {found} entries, expected {expected}"),
        }
    }
}

/// A fresh builder with the three assignment slots declared.
pub struct AssignmentBuilder {
    pub b: GraphBuilder,
    pub parents: NodeId,
    pub theta: NodeId,
    pub controls: NodeId,
}

impl AssignmentBuilder {
    pub fn new(n_parents: usize, n_theta: usize, n_controls: usize) -> Self {
        let mut b = GraphBuilder::new();
        let parents = b.input("parents", n_parents);
        let theta = b.input("theta", n_theta);
        let controls = b.input("controls", n_controls);
        Self { b, parents, theta, controls }
    }

    pub fn parent(&mut self, i: usize) -> NodeId {
        self.b.index(self.parents, i)
    }

    pub fn param(&mut self, i: usize) -> NodeId {
        self.b.index(self.theta, i)
    }

    pub fn control(&mut self, i: usize) -> NodeId {
        self.b.index(self.controls, i)
    }

    pub fn finish(self, output: NodeId) -> Result<ExprGraph, GraphError> {
        self.b.finish(output)
    }
}

impl SscmSpec {
    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_ref.len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.len()
    }

    pub fn control_ref(&self) -> Vec<f64> {
        self.controls.iter().map(|c| c.reference).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn theta_index(&self, name: &str) -> Option<usize> {
        self.theta_names.iter().position(|n| n == name)
    }

    /// Appends a control and returns its index.
    pub fn add_control(&mut self, name: impl Into<String>, reference: f64) -> usize {
        self.controls.push(ControlDecl { name: name.into(), reference });
        self.controls.len() - 1
    }

    /// Nodes that read `node` as a parent.
    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.dim()).filter(|&m| self.nodes[m].parents.contains(&node)).collect()
    }

    pub fn theta_in_box(&self, theta: &[f64]) -> bool {
        theta.len() == self.theta_box.len()
            && theta.iter().zip(&self.theta_box).all(|(t, [lo, hi])| *lo <= *t && *t <= *hi)
    }

    /// Structural and shape diagnostics; empty means well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let d = self.dim();
        let mut out = Vec::new();
        for (j, node) in self.nodes.iter().enumerate() {
            for (pos, &p) in node.parents.iter().enumerate() {
                if p >= d {
                    out.push(Violation::ParentOutOfRange { node: j, parent: p });
                }
                if node.parents[..pos].contains(&p) {
                    out.push(Violation::DuplicateParent { node: j, parent: p });
                }
            }
            for &t in &node.theta {
                if t >= self.theta_dim() {
                    out.push(Violation::ThetaIndexOutOfRange { node: j, index: t });
                }
            }
            for &c in &node.controls {
                if c >= self.control_dim() {
                    out.push(Violation::ControlIndexOutOfRange { node: j, index: c });
                }
            }
            let slots = node.assignment.slots();
            if slots.len() != 3 {
                out.push(Violation::SlotCount { node: j, found: slots.len() });
            } else {
                let expected = [node.parents.len(), node.theta.len(), node.controls.len()];
                for (slot, (decl, exp)) in slots.iter().zip(expected).enumerate() {
                    if decl.dim != exp {
                        out.push(Violation::ArityMismatch { node: j, slot, declared: decl.dim, expected: exp });
                    }
                }
            }
            if node.assignment.output_dim() != 1 {
                out.push(Violation::NonScalarOutput { node: j, dim: node.assignment.output_dim() });
            }
        }
        if self.theta_ref.len() != self.theta_box.len() || self.theta_ref.len() != self.theta_names.len() {
            out.push(Violation::ThetaLength {
                theta_ref: self.theta_ref.len(),
                theta_box: self.theta_box.len(),
                theta_names: self.theta_names.len(),
            });
        } else {
            for (index, (t, [lo, hi])) in self.theta_ref.iter().zip(&self.theta_box).enumerate() {
                if lo > hi {
                    out.push(Violation::EmptyBox { index });
                } else if t < lo || t > hi {
                    out.push(Violation::ThetaOutsideBox { index, value: *t, lo: *lo, hi: *hi });
                }
            }
        }
        if let Some(x) = &self.x_ref {
            if x.len() != d {
                out.push(Violation::XRefLength { expected: d, found: x.len() });
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<(), ModelError> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid(v))
        }
    }

    fn check_lengths(&self, x: &[f64], theta: &[f64], controls: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim() || theta.len() != self.theta_dim() || controls.len() != self.control_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "x/theta/controls of length {}/{}/{}, model expects {}/{}/{}",
                x.len(),
                theta.len(),
                controls.len(),
                self.dim(),
                self.theta_dim(),
                self.control_dim()
            )));
        }
        Ok(())
    }

    fn node_inputs(&self, j: usize, x: &[f64], theta: &[f64], controls: &[f64]) -> [Vec<f64>; 3] {
        let n = &self.nodes[j];
        [
            n.parents.iter().map(|&p| x[p]).collect(),
            n.theta.iter().map(|&t| theta[t]).collect(),
            n.controls.iter().map(|&c| controls[c]).collect(),
        ]
    }

    /// Evaluates the stacked map `x ↦ (f_1(Pa_1), …, f_d(Pa_d))`.
    pub fn eval_map(&self, x: &[f64], theta: &[f64], controls: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_lengths(x, theta, controls)?;
        (0..self.dim())
            .map(|j| {
                let [p, t, c] = self.node_inputs(j, x, theta, controls);
                Ok(self.nodes[j].assignment.eval_scalar(&[&p, &t, &c])?)
            })
            .collect()
    }

    /// Local gradients of every assignment at `(x, θ, u)`.
    pub fn linearize(&self, x: &[f64], theta: &[f64], controls: &[f64]) -> Result<Linearization<'_>, ModelError> {
        self.check_lengths(x, theta, controls)?;
        let mut rows = Vec::with_capacity(self.dim());
        let mut value = Vec::with_capacity(self.dim());
        for j in 0..self.dim() {
            let [p, t, c] = self.node_inputs(j, x, theta, controls);
            let (out, g) = self.nodes[j].assignment.value_and_vjp(&[&p, &t, &c], &[1.0])?;
            value.push(out[0]);
            let mut it = g.slots.into_iter();
            rows.push(NodeGradient {
                parents: it.next().unwrap_or_default(),
                theta: it.next().unwrap_or_default(),
                controls: it.next().unwrap_or_default(),
            });
        }
        Ok(Linearization { spec: self, rows, value })
    }
}

#[derive(Debug, Clone)]
struct NodeGradient {
    parents: Vec<f64>,
    theta: Vec<f64>,
    controls: Vec<f64>,
}

/// First-order behaviour of the structural map at one point, stored per node
/// in the sparsity pattern of the graph.
#[derive(Debug, Clone)]
pub struct Linearization<'a> {
    spec: &'a SscmSpec,
    rows: Vec<NodeGradient>,
    value: Vec<f64>,
}

impl Linearization<'_> {
    /// `f(x, θ, u)` at the linearization point.
    pub fn value(&self) -> &[f64] {
        &self.value
    }

    /// `vᵀ·∂f/∂x`.
    pub fn vjp_x(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.dim()];
        for (j, row) in self.rows.iter().enumerate() {
            for (&p, g) in self.spec.nodes[j].parents.iter().zip(&row.parents) {
                out[p] += v[j] * g;
            }
        }
        out
    }

    /// `∂f/∂x · w`.
    pub fn jvp_x(&self, w: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .enumerate()
            .map(|(j, row)| self.spec.nodes[j].parents.iter().zip(&row.parents).map(|(&p, g)| g * w[p]).sum())
            .collect()
    }

    pub fn vjp_theta(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.theta_dim()];
        for (j, row) in self.rows.iter().enumerate() {
            for (&t, g) in self.spec.nodes[j].theta.iter().zip(&row.theta) {
                out[t] += v[j] * g;
            }
        }
        out
    }

    pub fn vjp_controls(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.control_dim()];
        for (j, row) in self.rows.iter().enumerate() {
            for (&c, g) in self.spec.nodes[j].controls.iter().zip(&row.controls) {
                out[c] += v[j] * g;
            }
        }
        out
    }

    pub fn jac_x(&self) -> DMatrix<f64> {
        let d = self.spec.dim();
        let mut m = DMatrix::zeros(d, d);
        for (j, row) in self.rows.iter().enumerate() {
            for (&p, g) in self.spec.nodes[j].parents.iter().zip(&row.parents) {
                m[(j, p)] += g;
            }
        }
        m
    }

    pub fn jac_theta(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.spec.dim(), self.spec.theta_dim());
        for (j, row) in self.rows.iter().enumerate() {
            for (&t, g) in self.spec.nodes[j].theta.iter().zip(&row.theta) {
                m[(j, t)] += g;
            }
        }
        m
    }

    pub fn jac_controls(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.spec.dim(), self.spec.control_dim());
        for (j, row) in self.rows.iter().enumerate() {
            for (&c, g) in self.spec.nodes[j].controls.iter().zip(&row.controls) {
                m[(j, c)] += g;
            }
        }
        m
    }
}

/// The stacked structural map at fixed θ and controls.
#[derive(Debug, Clone)]
pub struct StructuralMap<'a> {
    spec: &'a SscmSpec,
    theta: Vec<f64>,
    controls: Vec<f64>,
}

impl StructuralMap<'_> {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.spec.eval_map(x, &self.theta, &self.controls)
    }

    pub fn with_controls(mut self, controls: &[f64]) -> Self {
        self.controls = controls.to_vec();
        self
    }
}

/// Binds θ (controls at their reference values) and returns the map `x ↦ f(x, θ)`.
pub fn assemble_map<'a>(spec: &'a SscmSpec, theta: &[f64]) -> Result<StructuralMap<'a>, ModelError> {
    spec.ensure_valid()?;
    if theta.len() != spec.theta_dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "theta has {} entries, model expects {}",
            theta.len(),
            spec.theta_dim()
        )));
    }
    Ok(StructuralMap { spec, theta: theta.to_vec(), controls: spec.control_ref() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub x_star: Vec<f64>,
    pub report: SolveReport,
    pub theta: Vec<f64>,
    pub controls: Vec<f64>,
}

/// Solves `x = f(x, θ)` from `x0 = 0` with controls at their reference values.
pub fn solve_equilibrium(spec: &SscmSpec, theta: &[f64], cfg: &SolverConfig) -> Result<EquilibriumSolution, ModelError> {
    solve_equilibrium_at(spec, theta, &spec.control_ref(), cfg)
}

/// Solves `x = f(x, θ, u)` from `x0 = 0`.
pub fn solve_equilibrium_at(
    spec: &SscmSpec,
    theta: &[f64],
    controls: &[f64],
    cfg: &SolverConfig,
) -> Result<EquilibriumSolution, ModelError> {
    spec.ensure_valid()?;
    let x0 = vec![0.0; spec.dim()];
    spec.check_lengths(&x0, theta, controls)?;
    let report = fixedpoint::solve(|x: &[f64]| spec.eval_map(x, theta, controls), &x0, cfg)?;
    Ok(EquilibriumSolution { x_star: report.solution.clone(), report, theta: theta.to_vec(), controls: controls.to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffeomorphismReport {
    pub is_solution: bool,
    pub relative_error: f64,
    pub jacobian_invertible: bool,
    pub condition_number: f64,
}

/// Checks that `(x, θ)` solves the model (relative error within `tol`) and
/// that `I − ∂f/∂x` is invertible with condition number at most `cond_max`.
pub fn check_local_diffeomorphism(
    spec: &SscmSpec,
    x: &[f64],
    theta: &[f64],
    tol: f64,
    cond_max: f64,
) -> Result<DiffeomorphismReport, ModelError> {
    check_local_diffeomorphism_at(spec, x, theta, &spec.control_ref(), tol, cond_max)
}

pub fn check_local_diffeomorphism_at(
    spec: &SscmSpec,
    x: &[f64],
    theta: &[f64],
    controls: &[f64],
    tol: f64,
    cond_max: f64,
) -> Result<DiffeomorphismReport, ModelError> {
    spec.ensure_valid()?;
    let lin = spec.linearize(x, theta, controls)?;
    let fx = lin.value();
    let r = linalg::norm(&x.iter().zip(fx).map(|(a, b)| a - b).collect::<Vec<_>>());
    let nx = linalg::norm(x);
    let relative_error = if nx > 0.0 { r / nx } else { r };
    let condition_number = linalg::condition_number(&linalg::identity_minus(&lin.jac_x()));
    Ok(DiffeomorphismReport {
        is_solution: relative_error <= tol,
        relative_error,
        jacobian_invertible: condition_number <= cond_max,
        condition_number,
    })
}

/// Solves a model whose assignments are all affine in `x` directly, as a
/// cross-check independent of the fixed-point solvers.
pub fn solve_affine_direct(spec: &SscmSpec, theta: &[f64], controls: &[f64]) -> Result<Vec<f64>, ModelError> {
    let zero = vec![0.0; spec.dim()];
    let lin = spec.linearize(&zero, theta, controls)?;
    let offset = lin.value().to_vec();
    linalg::solve(&linalg::identity_minus(&lin.jac_x()), &offset)
        .ok_or_else(|| ModelError::Singular("I - df/dx is singular".into()))
}
