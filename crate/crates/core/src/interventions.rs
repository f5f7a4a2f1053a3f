//! Lie-group soft interventions, invariance conditions, invariant twin
//! models, and compartmentalization checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deq::{self, Adjoint};
use crate::diffcore::{ExprGraph, GraphBuilder, GraphError, NodeId};
use crate::fixedpoint::SolverConfig;
use crate::linalg;
use crate::sscm::{
    check_local_diffeomorphism_at, solve_equilibrium_at, AssignmentBuilder, ModelError, NodeSpec, SscmSpec,
};

/// Threshold for the full-column-rank and nonzero-derivative conditions.
pub const CONDITION_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterventionError {
    #[error("group elements act on different groups or target sets")]
    MismatchedTargets,
    #[error("invalid group element: {0}")]
    InvalidElement(String),
    #[error("node index {0} out of range")]
    NodeOutOfRange(usize),
    #[error("clamped model is singular or unsolvable: {0}")]
    ClampedModelSingular(String),
    #[error("policy expects slots {found:?}, node requires {expected:?}")]
    PolicyArityMismatch { expected: [usize; 3], found: Vec<usize> },
    #[error("invalid intervention triple: {0}")]
    InvalidTriple(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<GraphError> for InterventionError {
    fn from(e: GraphError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Positive reals under multiplication; acts by scaling an assignment.
    Multiplicative,
    /// Reals under addition; acts by shifting an assignment.
    Additive,
}

impl Group {
    pub fn identity_value(self) -> f64 {
        match self {
            Group::Multiplicative => 1.0,
            Group::Additive => 0.0,
        }
    }

    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            Group::Multiplicative => a * b,
            Group::Additive => a + b,
        }
    }

    pub fn invert(self, a: f64) -> f64 {
        match self {
            Group::Multiplicative => 1.0 / a,
            Group::Additive => -a,
        }
    }

    fn admits(self, v: f64) -> bool {
        v.is_finite() && (self == Group::Additive || v > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LieElement {
    pub group: Group,
    pub targets: Vec<usize>,
    pub values: Vec<f64>,
}

impl LieElement {
    pub fn new(group: Group, targets: Vec<usize>, values: Vec<f64>) -> Result<Self, InterventionError> {
        if targets.len() != values.len() {
            return Err(InterventionError::InvalidElement(format!(
                "{} targets but {} values",
                targets.len(),
                values.len()
            )));
        }
        for (pos, t) in targets.iter().enumerate() {
            if targets[..pos].contains(t) {
                return Err(InterventionError::InvalidElement(format!("target {t} listed twice")));
            }
        }
        if let Some(v) = values.iter().find(|v| !group.admits(**v)) {
            return Err(InterventionError::InvalidElement(format!("value {v} not in the {group:?} group")));
        }
        Ok(Self { group, targets, values })
    }

    pub fn identity(group: Group, targets: Vec<usize>) -> Self {
        let values = vec![group.identity_value(); targets.len()];
        Self { group, targets, values }
    }

    /// Componentwise product (or sum) `self ∘ other`.
    pub fn compose(&self, other: &LieElement) -> Result<LieElement, InterventionError> {
        if self.group != other.group || self.targets != other.targets {
            return Err(InterventionError::MismatchedTargets);
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| self.group.combine(*a, *b)).collect();
        Ok(LieElement { group: self.group, targets: self.targets.clone(), values })
    }

    pub fn inverse(&self) -> LieElement {
        let values = self.values.iter().map(|v| self.group.invert(*v)).collect();
        LieElement { group: self.group, targets: self.targets.clone(), values }
    }

    pub fn is_identity(&self) -> bool {
        self.values.iter().all(|v| *v == self.group.identity_value())
    }
}

fn node_dims(node: &NodeSpec) -> [usize; 3] {
    [node.parents.len(), node.theta.len(), node.controls.len()]
}

fn check_node(spec: &SscmSpec, k: usize) -> Result<(), InterventionError> {
    if k >= spec.dim() {
        return Err(InterventionError::NodeOutOfRange(k));
    }
    Ok(())
}

fn act(b: &mut GraphBuilder, group: Group, value: NodeId, out: NodeId) -> NodeId {
    match group {
        Group::Multiplicative => b.mul(value, out),
        Group::Additive => b.add(value, out),
    }
}

/// Returns a copy of `spec` whose targeted assignments are scaled (or shifted)
/// by the element's values. Parent sets are untouched.
pub fn apply(spec: &SscmSpec, g: &LieElement) -> Result<SscmSpec, InterventionError> {
    let mut out = spec.clone();
    for (&k, &v) in g.targets.iter().zip(&g.values) {
        check_node(spec, k)?;
        let node = &spec.nodes[k];
        let [np, nt, nc] = node_dims(node);
        let mut ab = AssignmentBuilder::new(np, nt, nc);
        let orig = ab.b.splice(&node.assignment, &[ab.parents, ab.theta, ab.controls]);
        let c = ab.b.scalar(v);
        let wrapped = act(&mut ab.b, g.group, c, orig);
        out.nodes[k].assignment = ab.finish(wrapped)?;
    }
    Ok(out)
}

/// Like [`apply`], but each target gets a fresh control (reference at the
/// group identity) so its value can be varied and differentiated without
/// rebuilding the model. Returns the new spec and the control indices.
pub fn apply_parametric(
    spec: &SscmSpec,
    group: Group,
    targets: &[usize],
) -> Result<(SscmSpec, Vec<usize>), InterventionError> {
    let mut out = spec.clone();
    let mut controls = Vec::with_capacity(targets.len());
    for &k in targets {
        check_node(spec, k)?;
        let name = format!("{}_{}", match group {
            Group::Multiplicative => "scale",
            Group::Additive => "shift",
        }, spec.nodes[k].name);
        let c = out.add_control(name, group.identity_value());
        let node = &out.nodes[k];
        let [np, nt, nc] = node_dims(node);
        let mut ab = AssignmentBuilder::new(np, nt, nc + 1);
        let own = ab.b.slice(ab.controls, 0, nc);
        let orig = ab.b.splice(&node.assignment, &[ab.parents, ab.theta, own]);
        let u = ab.control(nc);
        let wrapped = act(&mut ab.b, group, u, orig);
        let graph = ab.finish(wrapped)?;
        let node = &mut out.nodes[k];
        node.controls.push(c);
        node.assignment = graph;
        controls.push(c);
    }
    Ok((out, controls))
}

/// Replaces node `k`'s assignment with the constant control `λ` and returns
/// the clamped spec with the index of `λ`.
pub fn clamp_node(spec: &SscmSpec, k: usize, value: f64) -> Result<(SscmSpec, usize), InterventionError> {
    check_node(spec, k)?;
    let mut out = spec.clone();
    let c = out.add_control(format!("clamp_{}", spec.nodes[k].name), value);
    let mut ab = AssignmentBuilder::new(0, 0, 1);
    let v = ab.control(0);
    out.nodes[k] = NodeSpec {
        name: spec.nodes[k].name.clone(),
        parents: vec![],
        theta: vec![],
        controls: vec![c],
        assignment: ab.finish(v)?,
    };
    Ok((out, c))
}

/// `d x_j / dλ` for the hard intervention `x_k := λ`, evaluated at
/// `λ = x*_k(θ)`.
pub fn hard_intervention_derivative(
    spec: &SscmSpec,
    j: usize,
    k: usize,
    theta: &[f64],
    cfg: &SolverConfig,
) -> Result<f64, InterventionError> {
    check_node(spec, j)?;
    let base = solve_equilibrium_at(spec, theta, &spec.control_ref(), cfg)?;
    if !base.report.converged {
        return Err(ModelError::NotConverged { relative_error: base.report.relative_error }.into());
    }
    let (clamped, lambda) = clamp_node(spec, k, base.x_star[k])?;
    let singular = |e: ModelError| InterventionError::ClampedModelSingular(e.to_string());
    let sol = solve_equilibrium_at(&clamped, theta, &clamped.control_ref(), cfg).map_err(singular)?;
    let mut e = vec![0.0; spec.dim()];
    e[j] = 1.0;
    let g = deq::implicit_vjp(&clamped, &sol, &e, cfg).map_err(singular)?;
    Ok(g.grad_u[lambda])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub locally_diffeomorphic: bool,
    pub reduced_condition_number: f64,
    pub reduced_jacobian_invertible: bool,
    pub parents_sigma_min: f64,
    pub full_column_rank: bool,
    pub hard_derivative: f64,
    pub derivative_nonzero: bool,
}

impl InvarianceReport {
    pub fn all_pass(&self) -> bool {
        self.reduced_jacobian_invertible && self.full_column_rank && self.derivative_nonzero
    }
}

/// Sufficient conditions for an invariant intervention on `i` keeping `j`
/// fixed through the auxiliary node `k`, at `θ`. `free` selects the θ
/// columns considered variable (all when `None`).
#[allow(clippy::too_many_arguments)]
pub fn check_invariance_conditions(
    spec: &SscmSpec,
    i: usize,
    j: usize,
    k: usize,
    theta: &[f64],
    free: Option<&[usize]>,
    cond_max: f64,
    cfg: &SolverConfig,
) -> Result<InvarianceReport, InterventionError> {
    for n in [i, j, k] {
        check_node(spec, n)?;
    }
    if i == j || i == k {
        return Err(InterventionError::InvalidTriple(format!("intervened node {i} must differ from {j} and {k}")));
    }
    let controls = spec.control_ref();
    let sol = solve_equilibrium_at(spec, theta, &controls, cfg)?;
    if !sol.report.converged {
        return Err(ModelError::NotConverged { relative_error: sol.report.relative_error }.into());
    }
    let diffeo = check_local_diffeomorphism_at(spec, &sol.x_star, theta, &controls, cfg.tol, cond_max)?;

    let lin = spec.linearize(&sol.x_star, theta, &controls)?;
    let full = linalg::identity_minus(&lin.jac_x());
    let keep: Vec<usize> = (0..spec.dim()).filter(|&n| n != j).collect();
    let reduced = full.select_rows(&keep).select_columns(&keep);
    let reduced_condition_number = linalg::condition_number(&reduced);

    let jac = deq::jacobian_wrt_theta(spec, &sol, cfg)?;
    let cols: Vec<usize> = free.map(<[usize]>::to_vec).unwrap_or_else(|| (0..spec.theta_dim()).collect());
    let sub = jac.select_rows(&spec.nodes[k].parents).select_columns(&cols);
    let parents_sigma_min = if sub.nrows() < sub.ncols() || sub.ncols() == 0 { 0.0 } else { linalg::sigma_min(&sub) };

    let hard_derivative = hard_intervention_derivative(spec, j, k, theta, cfg)?;
    Ok(InvarianceReport {
        locally_diffeomorphic: diffeo.is_solution && diffeo.jacobian_invertible,
        reduced_condition_number,
        reduced_jacobian_invertible: reduced_condition_number <= cond_max,
        parents_sigma_min,
        full_column_rank: parents_sigma_min > CONDITION_THRESHOLD,
        hard_derivative,
        derivative_nonzero: hard_derivative.abs() > CONDITION_THRESHOLD,
    })
}

/// Soft assignment for the auxiliary node. The graph has four slots:
/// the node's parents, the node's own parameters, the intervention
/// controls `u`, and trainable weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub graph: ExprGraph,
    pub weights: Vec<f64>,
}

impl Policy {
    pub fn new(graph: ExprGraph, weights: Vec<f64>) -> Result<Self, InterventionError> {
        if graph.slots().len() != 4 || graph.output_dim() != 1 || graph.slot_dim(3) != weights.len() {
            return Err(InterventionError::PolicyArityMismatch {
                expected: [0, 0, weights.len()],
                found: graph.slots().iter().map(|s| s.dim).collect(),
            });
        }
        Ok(Self { graph, weights })
    }

    pub fn u_dim(&self) -> usize {
        self.graph.slot_dim(2)
    }

    /// The node's original assignment, ignoring `u`.
    pub fn from_assignment(spec: &SscmSpec, k: usize, u_dim: usize) -> Result<Self, InterventionError> {
        Self::assignment_times(spec, k, u_dim, |_, orig, _| orig)
    }

    /// The node's original assignment divided by `u[0]`; exactly undoes a
    /// multiplicative intervention of the same size upstream in linear
    /// chains.
    pub fn inverse_scaling(spec: &SscmSpec, k: usize, u_dim: usize) -> Result<Self, InterventionError> {
        Self::assignment_times(spec, k, u_dim, |b, orig, u| {
            let u0 = b.index(u, 0);
            let r = b.recip(u0);
            b.mul(orig, r)
        })
    }

    fn assignment_times(
        spec: &SscmSpec,
        k: usize,
        u_dim: usize,
        post: impl FnOnce(&mut GraphBuilder, NodeId, NodeId) -> NodeId,
    ) -> Result<Self, InterventionError> {
        check_node(spec, k)?;
        let node = &spec.nodes[k];
        let mut b = GraphBuilder::new();
        let p = b.input("parents", node.parents.len());
        let t = b.input("theta", node.theta.len());
        let u = b.input("u", u_dim);
        b.input("weights", 0);
        let ref_controls: Vec<f64> = node.controls.iter().map(|&c| spec.controls[c].reference).collect();
        let c = b.constant(ref_controls);
        let orig = b.splice(&node.assignment, &[p, t, c]);
        let out = post(&mut b, orig, u);
        Self::new(b.finish(out)?, vec![])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub intervened: usize,
    pub invariant: usize,
    pub auxiliary: usize,
}

impl Triple {
    /// Auxiliary node defaults to the invariant node.
    pub fn new(intervened: usize, invariant: usize) -> Self {
        Self { intervened, invariant, auxiliary: invariant }
    }

    fn validate(&self, d: usize) -> Result<(), InterventionError> {
        let Triple { intervened: i, invariant: j, auxiliary: k } = *self;
        if i >= d || j >= d || k >= d {
            return Err(InterventionError::InvalidTriple(format!("({i}, {j}, {k}) out of range for {d} nodes")));
        }
        if i == j || i == k {
            return Err(InterventionError::InvalidTriple(format!("intervened node {i} must differ from {j} and {k}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantInterventionSpec {
    pub triple: Triple,
    pub group: Group,
    pub policy: Policy,
}

/// Replaces node `k`'s assignment with `policy`, reading `u_controls` as the
/// intervention and appending the weights as new controls.
pub fn install_policy(
    spec: &SscmSpec,
    k: usize,
    policy: &Policy,
    u_controls: &[usize],
) -> Result<(SscmSpec, Vec<usize>), InterventionError> {
    check_node(spec, k)?;
    let node = &spec.nodes[k];
    let found: Vec<usize> = policy.graph.slots().iter().map(|s| s.dim).collect();
    if found.len() != 4 || found[0] != node.parents.len() || found[1] != node.theta.len() || found[2] != u_controls.len()
    {
        return Err(InterventionError::PolicyArityMismatch {
            expected: [node.parents.len(), node.theta.len(), u_controls.len()],
            found,
        });
    }
    let mut out = spec.clone();
    let weights: Vec<usize> = policy
        .weights
        .iter()
        .enumerate()
        .map(|(n, &w)| out.add_control(format!("policy_{}_w{n}", node.name), w))
        .collect();
    let nu = u_controls.len();
    let mut ab = AssignmentBuilder::new(node.parents.len(), node.theta.len(), nu + weights.len());
    let u = ab.b.slice(ab.controls, 0, nu);
    let w = ab.b.slice(ab.controls, nu, weights.len());
    let v = ab.b.splice(&policy.graph, &[ab.parents, ab.theta, u, w]);
    let graph = ab.finish(v)?;
    let node = &mut out.nodes[k];
    node.controls = u_controls.iter().chain(&weights).copied().collect();
    node.assignment = graph;
    Ok((out, weights))
}

/// Makes every node other than `j` read `j`'s value from a new control
/// instead of from `x_j`. Returns the new spec and the control index.
pub fn reroute_from(spec: &SscmSpec, j: usize, reference: f64) -> Result<(SscmSpec, usize), InterventionError> {
    check_node(spec, j)?;
    let mut out = spec.clone();
    let c = out.add_control(format!("reference_{}", spec.nodes[j].name), reference);
    for m in spec.children(j) {
        if m == j {
            continue;
        }
        let node = &spec.nodes[m];
        let pos = node.parents.iter().position(|&p| p == j).expect("child lists parent");
        let [np, nt, nc] = node_dims(node);
        let mut ab = AssignmentBuilder::new(np - 1, nt, nc + 1);
        let own = ab.b.slice(ab.controls, 0, nc);
        let r = ab.control(nc);
        let stacked = ab.b.concat(vec![ab.parents, r]);
        let order: Vec<usize> = (0..np).map(|q| if q < pos { q } else if q == pos { np - 1 } else { q - 1 }).collect();
        let parents = ab.b.gather(stacked, order);
        let v = ab.b.splice(&node.assignment, &[parents, ab.theta, own]);
        let graph = ab.finish(v)?;
        let node = &mut out.nodes[m];
        node.parents.remove(pos);
        node.controls.push(c);
        node.assignment = graph;
    }
    Ok((out, c))
}

/// Paired models sharing θ. `intervened` reroutes edges leaving the invariant
/// node to a reference control (used for training); `deployed` is the same
/// model without rerouting (used for evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinModel {
    pub unintervened: SscmSpec,
    pub intervened: SscmSpec,
    pub deployed: SscmSpec,
    pub triple: Triple,
    pub u_controls: Vec<usize>,
    pub weight_controls: Vec<usize>,
    pub reroute_control: usize,
}

/// Unintervened and intervened equilibria at one `(θ, u)`.
#[derive(Debug, Clone)]
pub struct TwinSolution {
    pub reference: crate::sscm::EquilibriumSolution,
    pub intervened: crate::sscm::EquilibriumSolution,
}

impl TwinModel {
    pub fn policy_weights(&self) -> Vec<f64> {
        self.weight_controls.iter().map(|&c| self.deployed.controls[c].reference).collect()
    }

    pub fn set_policy_weights(&mut self, weights: &[f64]) {
        for (&c, &w) in self.weight_controls.iter().zip(weights) {
            self.deployed.controls[c].reference = w;
            self.intervened.controls[c].reference = w;
        }
    }

    /// Control vector of the deployed model.
    pub fn deployed_controls(&self, u: &[f64], weights: &[f64]) -> Vec<f64> {
        let mut c = self.deployed.control_ref();
        for (&i, &v) in self.u_controls.iter().zip(u) {
            c[i] = v;
        }
        for (&i, &v) in self.weight_controls.iter().zip(weights) {
            c[i] = v;
        }
        c
    }

    /// Solves the unintervened layer, then the rerouted intervened layer.
    pub fn solve(&self, theta: &[f64], u: &[f64], weights: &[f64], cfg: &SolverConfig) -> Result<TwinSolution, ModelError> {
        let reference = solve_equilibrium_at(&self.unintervened, theta, &self.unintervened.control_ref(), cfg)?;
        if !reference.report.converged {
            return Err(ModelError::NotConverged { relative_error: reference.report.relative_error });
        }
        let mut c = self.deployed_controls(u, weights);
        c.push(reference.x_star[self.triple.invariant]);
        let intervened = solve_equilibrium_at(&self.intervened, theta, &c, cfg)?;
        Ok(TwinSolution { reference, intervened })
    }

    /// Squared invariant-node deviation and its gradient in the policy weights.
    pub fn loss_and_weight_gradient(
        &self,
        theta: &[f64],
        u: &[f64],
        weights: &[f64],
        cfg: &SolverConfig,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let s = self.solve(theta, u, weights, cfg)?;
        let j = self.triple.invariant;
        let dev = s.intervened.x_star[j] - s.reference.x_star[j];
        let mut cot = vec![0.0; self.intervened.dim()];
        cot[j] = 2.0 * dev;
        let g = Adjoint::new(&self.intervened, &s.intervened, cfg)?.gradient(&cot)?;
        Ok((dev * dev, self.weight_controls.iter().map(|&c| g.grad_u[c]).collect()))
    }

    /// Relative invariant-node deviation of the deployed model.
    pub fn deployed_deviation(
        &self,
        theta: &[f64],
        u: &[f64],
        weights: &[f64],
        cfg: &SolverConfig,
    ) -> Result<f64, ModelError> {
        let reference = solve_equilibrium_at(&self.unintervened, theta, &self.unintervened.control_ref(), cfg)?;
        let deployed = solve_equilibrium_at(&self.deployed, theta, &self.deployed_controls(u, weights), cfg)?;
        let j = self.triple.invariant;
        let r = reference.x_star[j];
        let diff = (deployed.x_star[j] - r).abs();
        Ok(if r != 0.0 { diff / r.abs() } else { diff })
    }
}

/// Builds the twin model for `plan` on top of `spec`, adding a parametric
/// intervention on the intervened node.
pub fn build_invariant_model(spec: &SscmSpec, plan: &InvariantInterventionSpec) -> Result<TwinModel, InterventionError> {
    plan.triple.validate(spec.dim())?;
    let (with_u, u) = apply_parametric(spec, plan.group, &[plan.triple.intervened])?;
    build_invariant_model_with_controls(&with_u, &u, plan.triple, &plan.policy)
}

/// Builds the twin model when the intervention is already exposed as the
/// controls `u_controls` of `spec` (possibly acting on several nodes).
pub fn build_invariant_model_with_controls(
    spec: &SscmSpec,
    u_controls: &[usize],
    triple: Triple,
    policy: &Policy,
) -> Result<TwinModel, InterventionError> {
    spec.ensure_valid()?;
    if triple.invariant >= spec.dim() || triple.auxiliary >= spec.dim() {
        return Err(InterventionError::InvalidTriple(format!("{triple:?} out of range")));
    }
    let (deployed, weight_controls) = install_policy(spec, triple.auxiliary, policy, u_controls)?;
    let (intervened, reroute_control) = reroute_from(&deployed, triple.invariant, 0.0)?;
    Ok(TwinModel {
        unintervened: spec.clone(),
        intervened,
        deployed,
        triple,
        u_controls: u_controls.to_vec(),
        weight_controls,
        reroute_control,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompartmentPlan {
    pub partition: Vec<Vec<usize>>,
    pub interventions: Vec<InvariantInterventionSpec>,
}

impl CompartmentPlan {
    /// Errors when the partition is not a disjoint cover or a triple leaves
    /// its compartment.
    pub fn validate(&self, d: usize) -> Result<(), InterventionError> {
        if self.partition.len() != self.interventions.len() {
            return Err(InterventionError::InvalidPartition(format!(
                "{} compartments but {} interventions",
                self.partition.len(),
                self.interventions.len()
            )));
        }
        let mut owner = vec![None; d];
        for (c, part) in self.partition.iter().enumerate() {
            for &n in part {
                if n >= d {
                    return Err(InterventionError::InvalidPartition(format!("node {n} out of range")));
                }
                if let Some(prev) = owner[n] {
                    return Err(InterventionError::InvalidPartition(format!(
                        "node {n} in compartments {prev} and {c}"
                    )));
                }
                owner[n] = Some(c);
            }
        }
        if let Some(n) = owner.iter().position(Option::is_none) {
            return Err(InterventionError::InvalidPartition(format!("node {n} not covered")));
        }
        for (c, iv) in self.interventions.iter().enumerate() {
            iv.triple.validate(d)?;
            let t = iv.triple;
            for n in [t.intervened, t.invariant, t.auxiliary] {
                if owner[n] != Some(c) {
                    return Err(InterventionError::InvalidPartition(format!("node {n} of triple {c} lies outside it")));
                }
            }
        }
        Ok(())
    }

    pub fn compartment_of(&self, n: usize) -> Option<usize> {
        self.partition.iter().position(|p| p.contains(&n))
    }

    /// Nodes with an outgoing edge into another compartment that are not
    /// their compartment's invariant node.
    pub fn structural_violations(&self, spec: &SscmSpec) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (m, node) in spec.nodes.iter().enumerate() {
            for &p in &node.parents {
                let (cp, cm) = (self.compartment_of(p), self.compartment_of(m));
                if cp != cm {
                    let invariant = cp.map(|c| self.interventions[c].triple.invariant);
                    if invariant != Some(p) {
                        out.push((p, m));
                    }
                }
            }
        }
        out
    }

    /// Deployed model with every compartment's intervention and policy
    /// installed. Returns the spec and one control per compartment.
    pub fn deploy(&self, spec: &SscmSpec) -> Result<(SscmSpec, Vec<usize>), InterventionError> {
        self.validate(spec.dim())?;
        let mut model = spec.clone();
        let mut u = Vec::new();
        for iv in &self.interventions {
            let (m, c) = apply_parametric(&model, iv.group, &[iv.triple.intervened])?;
            let (m, _) = install_policy(&m, iv.triple.auxiliary, &iv.policy, &c)?;
            model = m;
            u.push(c[0]);
        }
        Ok((model, u))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentDeviation {
    pub compartment: usize,
    /// Largest relative change of this compartment's nodes when only the
    /// other compartments' interventions vary.
    pub max_cross_deviation: f64,
    /// Relative spread of the intervened node across its own intervention grid.
    pub intervened_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentReport {
    pub structural_ok: bool,
    pub structural_violations: Vec<(usize, usize)>,
    pub compartments: Vec<CompartmentDeviation>,
    pub samples: usize,
}

impl CompartmentReport {
    pub fn max_cross_deviation(&self) -> f64 {
        self.compartments.iter().map(|c| c.max_cross_deviation).fold(0.0, f64::max)
    }
}

fn cartesian(grid: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                grid.iter().map(move |&g| {
                    let mut p = prefix.clone();
                    p.push(g);
                    p
                })
            })
            .collect();
    }
    out
}

/// Monte-Carlo check of compartmentalization over θ samples and a grid of
/// intervention values shared by all compartments.
pub fn check_compartmentalization(
    spec: &SscmSpec,
    plan: &CompartmentPlan,
    thetas: &[Vec<f64>],
    grid: &[f64],
    cfg: &SolverConfig,
) -> Result<CompartmentReport, InterventionError> {
    let (model, u) = plan.deploy(spec)?;
    let structural_violations = plan.structural_violations(spec);
    let nc = plan.partition.len();
    let mut cross = vec![0.0_f64; nc];
    let mut range = vec![0.0_f64; nc];
    let solve = |theta: &[f64], values: &[f64]| -> Result<Vec<f64>, InterventionError> {
        let mut c = model.control_ref();
        for (&i, &v) in u.iter().zip(values) {
            c[i] = v;
        }
        let s = solve_equilibrium_at(&model, theta, &c, cfg)?;
        if !s.report.converged {
            return Err(ModelError::NotConverged { relative_error: s.report.relative_error }.into());
        }
        Ok(s.x_star)
    };
    let identity: Vec<f64> = plan.interventions.iter().map(|iv| iv.group.identity_value()).collect();
    for theta in thetas {
        let base = solve(theta, &identity)?;
        for c in 0..nc {
            // Own intervention alone: baseline per grid value and spread of the intervened node.
            let mut own = Vec::with_capacity(grid.len());
            for &g in grid {
                let mut vals = identity.clone();
                vals[c] = g;
                own.push(solve(theta, &vals)?);
            }
            let i = plan.interventions[c].triple.intervened;
            let (lo, hi) = own.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x[i]), hi.max(x[i])));
            if base[i] != 0.0 {
                range[c] = range[c].max((hi - lo) / base[i].abs());
            }
            for others in cartesian(grid, nc - 1) {
                for (gi, &g) in grid.iter().enumerate() {
                    let mut vals = others.clone();
                    vals.insert(c, g);
                    let x = solve(theta, &vals)?;
                    for &n in &plan.partition[c] {
                        let r = own[gi][n];
                        let d = (x[n] - r).abs();
                        cross[c] = cross[c].max(if r != 0.0 { d / r.abs() } else { d });
                    }
                }
            }
        }
    }
    Ok(CompartmentReport {
        structural_ok: structural_violations.is_empty(),
        structural_violations,
        compartments: (0..nc)
            .map(|c| CompartmentDeviation { compartment: c, max_cross_deviation: cross[c], intervened_range: range[c] })
            .collect(),
        samples: thetas.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_examples() {
        let g = LieElement::new(Group::Multiplicative, vec![0, 1], vec![2.0, 0.5]).unwrap();
        let h = LieElement::new(Group::Multiplicative, vec![0, 1], vec![0.5, 2.0]).unwrap();
        assert!(g.compose(&h).unwrap().is_identity());
        assert!(g.compose(&g.inverse()).unwrap().is_identity());
        let a = LieElement::new(Group::Additive, vec![3, 4], vec![1.0, -1.0]).unwrap();
        assert_eq!(a.inverse().values, vec![-1.0, 1.0]);
    }

    #[test]
    fn invalid_elements() {
        assert!(LieElement::new(Group::Multiplicative, vec![0], vec![0.0]).is_err());
        assert!(LieElement::new(Group::Multiplicative, vec![0], vec![-1.0]).is_err());
        assert!(LieElement::new(Group::Additive, vec![0, 0], vec![1.0, 1.0]).is_err());
        let g = LieElement::identity(Group::Additive, vec![0]);
        let h = LieElement::identity(Group::Additive, vec![1]);
        assert_eq!(g.compose(&h), Err(InterventionError::MismatchedTargets));
        let m = LieElement::identity(Group::Multiplicative, vec![0]);
        assert_eq!(g.compose(&m), Err(InterventionError::MismatchedTargets));
    }

    #[test]
    fn cartesian_grid() {
        assert_eq!(cartesian(&[1.0, 2.0], 0), vec![Vec::<f64>::new()]);
        assert_eq!(cartesian(&[1.0, 2.0], 2).len(), 4);
    }
}
