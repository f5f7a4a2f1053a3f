//! Adam, MLP policies, equilibrium losses, and the training loops built on
//! implicit gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deq::Adjoint;
use crate::diffcore::{ExprGraph, GraphBuilder, GraphError, NodeId};
use crate::fixedpoint::SolverConfig;
use crate::interventions::{
    apply_parametric, build_invariant_model_with_controls, Group, InterventionError, LieElement, Policy, Triple, TwinModel,
};
use crate::sscm::{solve_equilibrium_at, ModelError, SscmSpec};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("equilibrium solve failed at step {step} after step-size halving: {reason}")]
    SolveFailedDuringOptimization { step: usize, reason: String, trajectory: Box<Trajectory> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
}

impl From<GraphError> for OptimizeError {
    fn from(e: GraphError) -> Self {
        Self::Model(e.into())
    }
}

/// Step-size halvings allowed after a failed solve before giving up.
pub const MAX_HALVINGS: usize = 5;
/// Plateau rule: stop when the loss changed by less than this relative
/// amount over [`PLATEAU_WINDOW`] steps.
pub const PLATEAU_RTOL: f64 = 1e-9;
pub const PLATEAU_WINDOW: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    pub seed: u64,
    pub early_stop: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, iterations: 10_000, seed: 0, early_stop: true }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if !(self.lr > 0.0) {
            return Err(OptimizeError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimizeError::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(OptimizeError::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected Adam update of `params` with learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamConfig, lr: f64) -> Result<(), OptimizeError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimizeError::DimensionMismatch(format!(
                "{} parameters, {} gradients, state of size {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(OptimizeError::NonFiniteGradient { step: self.t as usize });
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

fn plateaued(losses: &[f64]) -> bool {
    if losses.len() <= PLATEAU_WINDOW {
        return false;
    }
    let now = losses[losses.len() - 1];
    let then = losses[losses.len() - 1 - PLATEAU_WINDOW];
    (now - then).abs() <= PLATEAU_RTOL * now.abs().max(then.abs()).max(f64::MIN_POSITIVE)
}

/// Fully connected ReLU network with fixed input/output normalization:
/// `out = output_scale · net((input − input_shift) / input_scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// ReLU on the output layer as well as the hidden ones.
    pub output_relu: bool,
    pub seed: u64,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_scale: f64,
    /// Initial output-layer bias, in normalized units.
    pub output_bias: f64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            input_dim: 1,
            hidden: vec![20, 10],
            output_dim: 1,
            output_relu: true,
            seed: 0,
            input_shift: vec![],
            input_scale: vec![],
            output_scale: 1.0,
            output_bias: 1.0,
        }
    }
}

impl MlpSpec {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, ..Self::default() }
    }

    fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim).chain(self.hidden.iter().copied()).chain(std::iter::once(self.output_dim)).collect()
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        if self.sizes().contains(&0) {
            return Err(OptimizeError::InvalidConfig("layer sizes must be positive".into()));
        }
        let shift_ok = self.input_shift.is_empty() || self.input_shift.len() == self.input_dim;
        let scale_ok = self.input_scale.is_empty() || self.input_scale.len() == self.input_dim;
        if !shift_ok || !scale_ok || self.input_scale.iter().any(|s| !(*s > 0.0)) || !(self.output_scale > 0.0) {
            return Err(OptimizeError::InvalidConfig("invalid normalization".into()));
        }
        Ok(())
    }

    pub fn weight_count(&self) -> usize {
        self.sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn shift(&self) -> Vec<f64> {
        if self.input_shift.is_empty() {
            vec![0.0; self.input_dim]
        } else {
            self.input_shift.clone()
        }
    }

    fn inv_scale(&self) -> Vec<f64> {
        if self.input_scale.is_empty() {
            vec![1.0; self.input_dim]
        } else {
            self.input_scale.iter().map(|s| 1.0 / s).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<f64>,
}

impl Mlp {
    /// Uniform `±1/√fan_in` weights, zero hidden biases, and the configured
    /// output bias.
    pub fn init(spec: MlpSpec) -> Result<Self, OptimizeError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sizes = spec.sizes();
        let mut weights = Vec::with_capacity(spec.weight_count());
        for (l, w) in sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            let b = if l + 2 == sizes.len() { spec.output_bias } else { 0.0 };
            weights.extend(std::iter::repeat_n(b, w[1]));
        }
        Ok(Self { spec, weights })
    }

    pub fn with_weights(spec: MlpSpec, weights: Vec<f64>) -> Result<Self, OptimizeError> {
        spec.validate()?;
        if weights.len() != spec.weight_count() {
            return Err(OptimizeError::DimensionMismatch(format!(
                "{} weights for a network with {}",
                weights.len(),
                spec.weight_count()
            )));
        }
        Ok(Self { spec, weights })
    }

    pub fn layers(&self) -> Vec<Layer> {
        let mut off = 0;
        self.spec
            .sizes()
            .windows(2)
            .map(|w| {
                let n = w[0] * w[1];
                let layer = Layer {
                    rows: w[1],
                    cols: w[0],
                    weights: self.weights[off..off + n].to_vec(),
                    bias: self.weights[off + n..off + n + w[1]].to_vec(),
                };
                off += n + w[1];
                layer
            })
            .collect()
    }

    /// Builds the network into `b` reading `weights` (a node of length
    /// [`MlpSpec::weight_count`]) and `input`.
    pub fn build(spec: &MlpSpec, b: &mut GraphBuilder, input: NodeId, weights: NodeId) -> NodeId {
        let shift = b.constant(spec.shift());
        let inv = b.constant(spec.inv_scale());
        let centered = b.sub(input, shift);
        let mut h = b.mul(centered, inv);
        let sizes = spec.sizes();
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let n = w[0] * w[1];
            let mat = b.slice(weights, off, n);
            let bias = b.slice(weights, off + n, w[1]);
            let z = b.matvec(mat, w[1], w[0], h);
            let z = b.add(z, bias);
            let last = l + 2 == sizes.len();
            h = if !last || spec.output_relu { b.relu(z) } else { z };
            off += n + w[1];
        }
        let s = b.scalar(spec.output_scale);
        b.scale(h, s)
    }

    /// Graph with slots `input` and `weights`.
    pub fn graph(&self) -> Result<ExprGraph, GraphError> {
        let mut b = GraphBuilder::new();
        let x = b.input("input", self.spec.input_dim);
        let w = b.input("weights", self.spec.weight_count());
        let out = Self::build(&self.spec, &mut b, x, w);
        b.finish(out)
    }
}

/// Direct numeric forward pass, independent of the expression graph.
pub fn mlp_forward(mlp: &Mlp, input: &[f64]) -> Result<Vec<f64>, OptimizeError> {
    if input.len() != mlp.spec.input_dim {
        return Err(OptimizeError::DimensionMismatch(format!(
            "input of length {}, network expects {}",
            input.len(),
            mlp.spec.input_dim
        )));
    }
    let shift = mlp.spec.shift();
    let inv = mlp.spec.inv_scale();
    let mut h: Vec<f64> = input.iter().zip(&shift).zip(&inv).map(|((x, s), i)| (x - s) * i).collect();
    let layers = mlp.layers();
    let n = layers.len();
    for (l, layer) in layers.into_iter().enumerate() {
        let z: Vec<f64> = (0..layer.rows)
            .map(|r| layer.bias[r] + (0..layer.cols).map(|c| layer.weights[r * layer.cols + c] * h[c]).sum::<f64>())
            .collect();
        h = if l + 1 < n || mlp.spec.output_relu { z.into_iter().map(|v| v.max(0.0)).collect() } else { z };
    }
    Ok(h.into_iter().map(|v| v * mlp.spec.output_scale).collect())
}

/// Policy for node `k` computing `mlp(concat(parents, u))`; the node's own
/// parameters are ignored.
pub fn mlp_policy(spec: &SscmSpec, k: usize, u_dim: usize, mlp: &Mlp) -> Result<Policy, OptimizeError> {
    let node = spec.nodes.get(k).ok_or(InterventionError::NodeOutOfRange(k))?;
    if mlp.spec.input_dim != node.parents.len() + u_dim || mlp.spec.output_dim != 1 {
        return Err(InterventionError::PolicyArityMismatch {
            expected: [node.parents.len(), node.theta.len(), u_dim],
            found: vec![mlp.spec.input_dim, mlp.spec.output_dim],
        }
        .into());
    }
    let mut b = GraphBuilder::new();
    let p = b.input("parents", node.parents.len());
    b.input("theta", node.theta.len());
    let u = b.input("u", u_dim);
    let w = b.input("weights", mlp.spec.weight_count());
    let x = b.concat(vec![p, u]);
    let out = Mlp::build(&mlp.spec, &mut b, x, w);
    Ok(Policy::new(b.finish(out)?, mlp.weights.clone())?)
}

/// Scalar loss of an equilibrium with its gradient.
pub trait EquilibriumLoss {
    fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
}

/// `cᵀx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCost {
    pub c: Vec<f64>,
}

impl EquilibriumLoss for LinearCost {
    fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.c.iter().zip(x).map(|(c, x)| c * x).sum(), self.c.clone())
    }
}

/// `‖x − target‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquaredDistance {
    pub target: Vec<f64>,
}

impl EquilibriumLoss for SquaredDistance {
    fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d: Vec<f64> = x.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        (d.iter().map(|v| v * v).sum(), d.iter().map(|v| 2.0 * v).collect())
    }
}

/// Smoothing constant of the absolute value in the employment regularizer.
pub const L1_SMOOTHING: f64 = 1e-8;

/// `cᵀx + λ·Σ_k s(r_k·x_k − e*_k)` with `s(δ) = √(δ² + ε) − √ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhgEmploymentLoss {
    pub ghg: Vec<f64>,
    pub employment: Vec<f64>,
    pub employment_ref: Vec<f64>,
    pub lambda: f64,
}

impl GhgEmploymentLoss {
    /// Unsmoothed value, for reporting.
    pub fn true_value(&self, x: &[f64]) -> f64 {
        let e: Vec<f64> = self.employment.iter().zip(x).map(|(r, v)| r * v).collect();
        ghg_employment_loss(x, &self.ghg, &e, &self.employment_ref, self.lambda).expect("dimensions fixed at construction")
    }
}

impl EquilibriumLoss for GhgEmploymentLoss {
    fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let se = L1_SMOOTHING.sqrt();
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        for k in 0..x.len() {
            let delta = self.employment[k] * x[k] - self.employment_ref[k];
            let s = (delta * delta + L1_SMOOTHING).sqrt();
            value += self.ghg[k] * x[k] + self.lambda * (s - se);
            grad[k] = self.ghg[k] + self.lambda * delta / s * self.employment[k];
        }
        (value, grad)
    }
}

/// `cᵀx + λ·‖e − e*‖₁` with the exact absolute value.
pub fn ghg_employment_loss(x: &[f64], c: &[f64], e: &[f64], e_star: &[f64], lambda: f64) -> Result<f64, OptimizeError> {
    if c.len() != x.len() || e.len() != e_star.len() {
        return Err(OptimizeError::DimensionMismatch(format!(
            "x {} / c {} / e {} / e* {}",
            x.len(),
            c.len(),
            e.len(),
            e_star.len()
        )));
    }
    let ghg: f64 = c.iter().zip(x).map(|(c, x)| c * x).sum();
    let dev: f64 = e.iter().zip(e_star).map(|(a, b)| (a - b).abs()).sum();
    Ok(ghg + lambda * dev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub values: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub early_stopped: bool,
    pub step_halvings: usize,
}

impl Trajectory {
    pub fn last(&self) -> Option<&TrajectoryPoint> {
        self.points.last()
    }
}

/// Bounds on intervention values, in the group's own coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

/// Minimizes `loss(x^(u))` over the intervention values starting at `g0`,
/// at the spec's reference θ. Multiplicative values are optimized in log
/// space. Returns one trajectory point per accepted step; the last one is
/// the optimum.
pub fn optimize_lie_intervention(
    spec: &SscmSpec,
    g0: &LieElement,
    bounds: Option<Bounds>,
    loss: &dyn EquilibriumLoss,
    adam: &AdamConfig,
    solver: &SolverConfig,
) -> Result<Trajectory, OptimizeError> {
    adam.validate()?;
    let (model, controls) = apply_parametric(spec, g0.group, &g0.targets)?;
    let log_space = g0.group == Group::Multiplicative;
    let to_param = |v: f64| if log_space { v.ln() } else { v };
    let to_value = |w: f64| if log_space { w.exp() } else { w };
    let (wlo, whi) = match bounds {
        Some(b) if log_space => (b.lo.max(f64::MIN_POSITIVE).ln(), b.hi.ln()),
        Some(b) => (b.lo, b.hi),
        None => (f64::NEG_INFINITY, f64::INFINITY),
    };
    let theta = spec.theta_ref.clone();
    let mut w: Vec<f64> = g0.values.iter().map(|&v| to_param(v).clamp(wlo, whi)).collect();
    let mut state = AdamState::new(w.len());
    let mut lr = adam.lr;
    let mut traj = Trajectory { points: Vec::new(), early_stopped: false, step_halvings: 0 };
    let mut losses = Vec::new();

    let evaluate = |w: &[f64]| -> Result<(f64, Vec<f64>), ModelError> {
        let u: Vec<f64> = w.iter().map(|&p| to_value(p)).collect();
        let mut c = model.control_ref();
        for (&i, &v) in controls.iter().zip(&u) {
            c[i] = v;
        }
        let sol = solve_equilibrium_at(&model, &theta, &c, solver)?;
        if !sol.report.converged {
            return Err(ModelError::NotConverged { relative_error: sol.report.relative_error });
        }
        let (value, cot) = loss.value_and_grad(&sol.x_star);
        let g = Adjoint::new(&model, &sol, solver)?.gradient(&cot)?;
        let grad = controls
            .iter()
            .zip(&u)
            .map(|(&i, &uv)| if log_space { g.grad_u[i] * uv } else { g.grad_u[i] })
            .collect();
        Ok((value, grad))
    };

    let (mut value, mut grad) = evaluate(&w).map_err(|e| OptimizeError::SolveFailedDuringOptimization {
        step: 0,
        reason: e.to_string(),
        trajectory: Box::new(traj.clone()),
    })?;
    traj.points.push(TrajectoryPoint { step: 0, values: w.iter().map(|&p| to_value(p)).collect(), loss: value });
    losses.push(value);
    let mut halvings_here = 0;
    let mut step = 1;
    while step <= adam.iterations {
        let saved = (w.clone(), state.clone());
        state.step(&mut w, &grad, adam, lr)?;
        for p in &mut w {
            *p = p.clamp(wlo, whi);
        }
        match evaluate(&w) {
            Ok((v, g)) => {
                value = v;
                grad = g;
                halvings_here = 0;
            }
            Err(e) => {
                (w, state) = saved;
                if halvings_here == MAX_HALVINGS {
                    return Err(OptimizeError::SolveFailedDuringOptimization {
                        step,
                        reason: e.to_string(),
                        trajectory: Box::new(traj),
                    });
                }
                log::warn!("solve failed at step {step} ({e}); halving the step size");
                lr *= 0.5;
                halvings_here += 1;
                traj.step_halvings += 1;
                continue;
            }
        }
        traj.points.push(TrajectoryPoint { step, values: w.iter().map(|&p| to_value(p)).collect(), loss: value });
        losses.push(value);
        if adam.early_stop && plateaued(&losses) {
            traj.early_stopped = true;
            break;
        }
        step += 1;
    }
    Ok(traj)
}

/// Distributions for `(θ, u)` draws during invariant training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// θ entries that vary; all others stay at the reference.
    pub free_theta: Option<Vec<usize>>,
    /// Per free entry; defaults to the reference value.
    pub theta_mean: Option<Vec<f64>>,
    /// Per free entry; defaults to `0.05·|θ_ref| + 0.01`.
    pub theta_std: Option<Vec<f64>>,
    pub u_lo: f64,
    pub u_hi: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { free_theta: None, theta_mean: None, theta_std: None, u_lo: 0.5, u_hi: 2.0, batch_size: 16, seed: 0 }
    }
}

/// Seeded sampler of `(θ, u)`.
pub struct Sampler {
    rng: ChaCha8Rng,
    free: Vec<usize>,
    normals: Vec<Normal<f64>>,
    theta_ref: Vec<f64>,
    theta_box: Vec<[f64; 2]>,
    group: Group,
    u_lo: f64,
    u_hi: f64,
}

impl Sampler {
    pub fn new(spec: &SscmSpec, cfg: &SamplingConfig, group: Group) -> Result<Self, OptimizeError> {
        let free = cfg.free_theta.clone().unwrap_or_else(|| (0..spec.theta_dim()).collect());
        if free.iter().any(|&i| i >= spec.theta_dim()) {
            return Err(OptimizeError::InvalidConfig("free θ index out of range".into()));
        }
        let mean = cfg.theta_mean.clone().unwrap_or_else(|| free.iter().map(|&i| spec.theta_ref[i]).collect());
        let std = cfg
            .theta_std
            .clone()
            .unwrap_or_else(|| free.iter().map(|&i| 0.05 * spec.theta_ref[i].abs() + 0.01).collect());
        if mean.len() != free.len() || std.len() != free.len() {
            return Err(OptimizeError::InvalidConfig("θ mean/std lengths must match the free entries".into()));
        }
        let normals = mean
            .iter()
            .zip(&std)
            .map(|(&m, &s)| {
                if !(s > 0.0) {
                    return Err(OptimizeError::InvalidConfig(format!("θ stddev must be positive, got {s}")));
                }
                Normal::new(m, s).map_err(|e| OptimizeError::InvalidConfig(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        if !(cfg.u_lo <= cfg.u_hi) || (group == Group::Multiplicative && !(cfg.u_lo > 0.0)) {
            return Err(OptimizeError::InvalidConfig(format!("invalid u range [{}, {}]", cfg.u_lo, cfg.u_hi)));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            free,
            normals,
            theta_ref: spec.theta_ref.clone(),
            theta_box: spec.theta_box.clone(),
            group,
            u_lo: cfg.u_lo,
            u_hi: cfg.u_hi,
        })
    }

    /// Factorized Gaussian truncated to the box by rejection.
    pub fn theta(&mut self) -> Vec<f64> {
        let mut t = self.theta_ref.clone();
        for (n, &i) in self.free.iter().enumerate() {
            let [lo, hi] = self.theta_box[i];
            let mut v = self.normals[n].sample(&mut self.rng);
            let mut tries = 0;
            while !(lo..=hi).contains(&v) && tries < 1000 {
                v = self.normals[n].sample(&mut self.rng);
                tries += 1;
            }
            t[i] = v.clamp(lo, hi);
        }
        t
    }

    /// Log-uniform for multiplicative groups, uniform for additive ones.
    pub fn u(&mut self, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|_| {
                if self.u_lo == self.u_hi {
                    return self.u_lo;
                }
                match self.group {
                    Group::Multiplicative => self.rng.random_range(self.u_lo.ln()..self.u_hi.ln()).exp(),
                    Group::Additive => self.rng.random_range(self.u_lo..self.u_hi),
                }
            })
            .collect()
    }
}

/// Input normalization for an MLP policy on `triple.auxiliary`, fitted from
/// the parents' values under the plain intervention (no policy). The output
/// scale is the mean magnitude of the invariant node's reference value.
pub fn fit_policy_normalization(
    spec: &SscmSpec,
    u_controls: &[usize],
    triple: Triple,
    group: Group,
    sampling: &SamplingConfig,
    samples: usize,
    solver: &SolverConfig,
) -> Result<MlpSpec, OptimizeError> {
    if samples == 0 {
        return Err(OptimizeError::InvalidConfig("normalization needs at least one sample".into()));
    }
    let k = triple.auxiliary;
    let parents = &spec.nodes.get(k).ok_or(InterventionError::NodeOutOfRange(k))?.parents;
    let nu = u_controls.len();
    let mut sampler = Sampler::new(spec, &SamplingConfig { seed: sampling.seed ^ 0x5eed, ..sampling.clone() }, group)?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(samples);
    let mut target = 0.0;
    for _ in 0..samples {
        let theta = sampler.theta();
        let u = sampler.u(nu);
        let reference = solve_equilibrium_at(spec, &theta, &spec.control_ref(), solver)?;
        let mut c = spec.control_ref();
        for (&i, &v) in u_controls.iter().zip(&u) {
            c[i] = v;
        }
        let plain = solve_equilibrium_at(spec, &theta, &c, solver)?;
        target += reference.x_star[triple.invariant].abs() / samples as f64;
        rows.push(parents.iter().map(|&p| plain.x_star[p]).chain(u).collect());
    }
    let dim = parents.len() + nu;
    let mean: Vec<f64> = (0..dim).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / samples as f64).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|c| {
            let var = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / samples as f64;
            var.sqrt().max(1e-3 * mean[c].abs()).max(1e-12)
        })
        .collect();
    Ok(MlpSpec {
        input_dim: dim,
        input_shift: mean,
        input_scale: scale,
        output_scale: if target > 0.0 { target } else { 1.0 },
        ..MlpSpec::default()
    })
}

/// Twin model whose auxiliary node runs a freshly initialized, normalized MLP.
#[allow(clippy::too_many_arguments)]
pub fn build_mlp_twin(
    spec: &SscmSpec,
    u_controls: &[usize],
    triple: Triple,
    group: Group,
    hidden: &[usize],
    seed: u64,
    sampling: &SamplingConfig,
    solver: &SolverConfig,
) -> Result<(TwinModel, Mlp), OptimizeError> {
    let mut mspec = fit_policy_normalization(spec, u_controls, triple, group, sampling, 64, solver)?;
    mspec.hidden = hidden.to_vec();
    mspec.seed = seed;
    let mlp = Mlp::init(mspec)?;
    let policy = mlp_policy(spec, triple.auxiliary, u_controls.len(), &mlp)?;
    let twin = build_invariant_model_with_controls(spec, u_controls, triple, &policy)?;
    Ok((twin, mlp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub weights: Vec<f64>,
    /// Mean squared invariant-node deviation per step.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub early_stopped: bool,
    pub step_halvings: usize,
}

/// Trains the twin's policy weights to keep the invariant node at its
/// unintervened value. The twin's stored weights are the starting point.
pub fn train_invariant_mlp(
    twin: &TwinModel,
    group: Group,
    sampling: &SamplingConfig,
    adam: &AdamConfig,
    solver: &SolverConfig,
) -> Result<TrainingReport, OptimizeError> {
    adam.validate()?;
    if sampling.batch_size == 0 {
        return Err(OptimizeError::InvalidConfig("batch_size must be positive".into()));
    }
    let mut sampler = Sampler::new(&twin.unintervened, sampling, group)?;
    let nu = twin.u_controls.len();
    let mut weights = twin.policy_weights();
    let mut state = AdamState::new(weights.len());
    let mut lr = adam.lr;
    let mut losses = Vec::with_capacity(adam.iterations);
    let mut halvings = 0;
    let mut halvings_here = 0;
    let mut early_stopped = false;
    let mut step = 0;
    while step < adam.iterations {
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..sampling.batch_size).map(|_| (sampler.theta(), sampler.u(nu))).collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; weights.len()];
        let mut failure = None;
        for (theta, u) in &batch {
            match twin.loss_and_weight_gradient(theta, u, &weights, solver) {
                Ok((l, g)) => {
                    total += l;
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failure {
            // The last accepted step broke solvability: undo it and retry smaller.
            if halvings_here == MAX_HALVINGS || step == 0 {
                return Err(OptimizeError::SolveFailedDuringOptimization {
                    step,
                    reason: e.to_string(),
                    trajectory: Box::new(Trajectory { points: vec![], early_stopped: false, step_halvings: halvings }),
                });
            }
            log::warn!("training solve failed at step {step} ({e}); halving the step size");
            lr *= 0.5;
            halvings += 1;
            halvings_here += 1;
            continue;
        }
        halvings_here = 0;
        let n = batch.len() as f64;
        for g in &mut grad {
            *g /= n;
        }
        losses.push(total / n);
        state.step(&mut weights, &grad, adam, lr)?;
        step += 1;
        if adam.early_stop && plateaued(&losses) {
            early_stopped = true;
            break;
        }
    }
    Ok(TrainingReport { final_loss: losses.last().copied().unwrap_or(f64::NAN), weights, losses, early_stopped, step_halvings: halvings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceEvaluation {
    pub samples: usize,
    pub max_relative_deviation: f64,
    pub mean_relative_deviation: f64,
}

/// Held-out invariant-node deviation of the deployed model.
pub fn evaluate_invariance(
    twin: &TwinModel,
    weights: &[f64],
    group: Group,
    sampling: &SamplingConfig,
    samples: usize,
    solver: &SolverConfig,
) -> Result<InvarianceEvaluation, OptimizeError> {
    let mut sampler = Sampler::new(&twin.unintervened, sampling, group)?;
    let nu = twin.u_controls.len();
    let mut max = 0.0_f64;
    let mut sum = 0.0;
    for _ in 0..samples {
        let theta = sampler.theta();
        let u = sampler.u(nu);
        let d = twin.deployed_deviation(&theta, &u, weights, solver)?;
        max = max.max(d);
        sum += d;
    }
    Ok(InvarianceEvaluation { samples, max_relative_deviation: max, mean_relative_deviation: sum / samples.max(1) as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub lambda: f64,
    pub ghg_total: f64,
    pub employment_l1_deviation: f64,
    pub alpha: Vec<f64>,
    pub employment_deltas: Vec<f64>,
    pub final_loss: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoSweep {
    pub points: Vec<TradeoffPoint>,
    pub failures: Vec<(f64, String)>,
}

impl ParetoSweep {
    /// True when GHG never increases as the employment deviation grows,
    /// allowing a relative slack of `rtol`.
    pub fn is_monotone(&self, rtol: f64) -> bool {
        let mut pts: Vec<&TradeoffPoint> = self.points.iter().collect();
        pts.sort_by(|a, b| a.employment_l1_deviation.total_cmp(&b.employment_l1_deviation));
        pts.windows(2).all(|w| w[1].ghg_total <= w[0].ghg_total * (1.0 + rtol) + rtol)
    }
}

/// Scalarized GHG/employment sweep over `lambdas` with multiplicative
/// interventions on `targets`, warm-starting each λ at the previous optimum.
#[allow(clippy::too_many_arguments)]
pub fn pareto_sweep(
    spec: &SscmSpec,
    targets: &[usize],
    ghg: &[f64],
    employment: &[f64],
    lambdas: &[f64],
    bounds: Bounds,
    adam: &AdamConfig,
    solver: &SolverConfig,
) -> Result<ParetoSweep, OptimizeError> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(OptimizeError::InvalidConfig("λ list must be nonempty and nonnegative".into()));
    }
    if ghg.len() != spec.dim() || employment.len() != spec.dim() {
        return Err(OptimizeError::DimensionMismatch("impact rows must have one entry per node".into()));
    }
    let reference = solve_equilibrium_at(spec, &spec.theta_ref, &spec.control_ref(), solver)?;
    let e_star: Vec<f64> = employment.iter().zip(&reference.x_star).map(|(r, x)| r * x).collect();
    let mut order: Vec<f64> = lambdas.to_vec();
    order.sort_by(f64::total_cmp);
    let mut g = LieElement::identity(Group::Multiplicative, targets.to_vec());
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for &lambda in &order {
        let loss = GhgEmploymentLoss {
            ghg: ghg.to_vec(),
            employment: employment.to_vec(),
            employment_ref: e_star.clone(),
            lambda,
        };
        match optimize_lie_intervention(spec, &g, Some(bounds), &loss, adam, solver) {
            Ok(traj) => {
                let last = traj.last().expect("trajectory has the starting point");
                g = LieElement::new(Group::Multiplicative, targets.to_vec(), last.values.clone())?;
                let (model, controls) = apply_parametric(spec, Group::Multiplicative, targets)?;
                let mut c = model.control_ref();
                for (&i, &v) in controls.iter().zip(&last.values) {
                    c[i] = v;
                }
                let x = solve_equilibrium_at(&model, &spec.theta_ref, &c, solver)?.x_star;
                let deltas: Vec<f64> = employment.iter().zip(&x).zip(&e_star).map(|((r, x), e)| r * x - e).collect();
                points.push(TradeoffPoint {
                    lambda,
                    ghg_total: ghg.iter().zip(&x).map(|(c, x)| c * x).sum(),
                    employment_l1_deviation: deltas.iter().map(|d| d.abs()).sum(),
                    alpha: last.values.clone(),
                    employment_deltas: deltas,
                    final_loss: loss.true_value(&x),
                    iterations: last.step,
                });
            }
            Err(e) => {
                log::warn!("pareto sweep: λ = {lambda} failed: {e}");
                failures.push((lambda, e.to_string()));
            }
        }
    }
    Ok(ParetoSweep { points, failures })
}
