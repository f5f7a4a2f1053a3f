//! Concrete models and their closed-form oracles: Leontief input-output
//! models, a price/demand rebound model, the three-node motivating example,
//! a two-compartment model, and synthetic instances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::GraphError;
use crate::interventions::Triple;
use crate::linalg;
use crate::sscm::{AssignmentBuilder, ControlDecl, ModelError, NodeSpec, SscmSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZooError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("negative entry {value} in {matrix} at ({row}, {col})")]
    NegativeEntry { matrix: String, row: usize, col: usize, value: f64 },
    #[error("I - A is singular")]
    SingularMatrix,
    #[error("singular parameterization: {0}")]
    SingularParameterization(String),
    #[error("topology violation: {0}")]
    TopologyViolation(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<GraphError> for ZooError {
    fn from(e: GraphError) -> Self {
        Self::Model(e.into())
    }
}

/// Input-output table: technical coefficients `a` (d×d), footprint
/// intensities `r` (s×d), and final demand `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct IoTable {
    pub a: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub y: Vec<f64>,
    pub sector_names: Vec<String>,
    pub impact_names: Vec<String>,
}

impl IoTable {
    pub fn new(a: DMatrix<f64>, r: DMatrix<f64>, y: Vec<f64>) -> Result<Self, ZooError> {
        let sector_names = (0..a.nrows()).map(|i| format!("s{i}")).collect();
        let impact_names = (0..r.nrows()).map(|i| format!("r{i}")).collect();
        let t = Self { a, r, y, sector_names, impact_names };
        t.validate()?;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<(), ZooError> {
        let d = self.a.nrows();
        if self.a.ncols() != d {
            return Err(ZooError::DimensionMismatch(format!("A is {}x{}", d, self.a.ncols())));
        }
        if self.r.ncols() != d || self.y.len() != d {
            return Err(ZooError::DimensionMismatch(format!(
                "A has {d} sectors, R has {} columns, y has {} entries",
                self.r.ncols(),
                self.y.len()
            )));
        }
        if self.sector_names.len() != d || self.impact_names.len() != self.r.nrows() {
            return Err(ZooError::DimensionMismatch("name lists do not match table sizes".into()));
        }
        for (name, m) in [("A", &self.a), ("R", &self.r)] {
            for row in 0..m.nrows() {
                for col in 0..m.ncols() {
                    let value = m[(row, col)];
                    if value < 0.0 || !value.is_finite() {
                        return Err(ZooError::NegativeEntry { matrix: name.into(), row, col, value });
                    }
                }
            }
        }
        if let Some((col, &value)) = self.y.iter().enumerate().find(|(_, v)| **v < 0.0 || !v.is_finite()) {
            return Err(ZooError::NegativeEntry { matrix: "y".into(), row: 0, col, value });
        }
        Ok(())
    }

    pub fn impact_row(&self, s: usize) -> Vec<f64> {
        self.r.row(s).iter().copied().collect()
    }
}

/// True iff every leading principal minor of `I − A` is positive.
pub fn hawkins_simon_check(a: &DMatrix<f64>) -> bool {
    let m = linalg::identity_minus(a);
    (1..=m.nrows()).all(|k| m.view((0, 0), (k, k)).determinant() > 0.0)
}

/// `x* = (I − A)⁻¹·y`.
pub fn leontief_closed_form(a: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>, ZooError> {
    if a.nrows() != y.len() || a.ncols() != y.len() {
        return Err(ZooError::DimensionMismatch(format!("A is {}x{}, y has {}", a.nrows(), a.ncols(), y.len())));
    }
    linalg::solve(&linalg::identity_minus(a), y).ok_or(ZooError::SingularMatrix)
}

/// `s = R·x`.
pub fn impacts(r: &DMatrix<f64>, x: &[f64]) -> Result<Vec<f64>, ZooError> {
    if r.ncols() != x.len() {
        return Err(ZooError::DimensionMismatch(format!("R has {} columns, x has {}", r.ncols(), x.len())));
    }
    Ok((r * DVector::from_row_slice(x)).iter().copied().collect())
}

/// Entrywise product of one intensity row with `x`.
pub fn employment(row: &[f64], x: &[f64]) -> Vec<f64> {
    row.iter().zip(x).map(|(r, v)| r * v).collect()
}

fn box_around(v: f64) -> [f64; 2] {
    if v == 0.0 {
        [0.0, 1.0]
    } else {
        let (a, b) = (0.5 * v, 1.5 * v);
        [a.min(b), a.max(b)]
    }
}

/// Leontief model `x_k := Σ_m A_km·x_m + y_k`. θ holds `y` followed by the
/// coefficients listed in `expose_a` as `(row, col)` pairs.
pub fn leontief_model(table: &IoTable, expose_a: &[(usize, usize)]) -> Result<SscmSpec, ZooError> {
    table.validate()?;
    let d = table.dim();
    if let Some(&(r, c)) = expose_a.iter().find(|(r, c)| *r >= d || *c >= d) {
        return Err(ZooError::DimensionMismatch(format!("exposed coefficient ({r}, {c}) outside {d}x{d}")));
    }
    if !hawkins_simon_check(&table.a) {
        log::warn!("Hawkins-Simon condition fails; the Leontief model may have no nonnegative equilibrium");
    }
    let mut theta_names: Vec<String> = table.sector_names.iter().map(|s| format!("y_{s}")).collect();
    let mut theta_ref = table.y.clone();
    let mut theta_box: Vec<[f64; 2]> = table.y.iter().map(|&v| box_around(v)).collect();
    for &(r, c) in expose_a {
        theta_names.push(format!("A_{}_{}", table.sector_names[r], table.sector_names[c]));
        theta_ref.push(table.a[(r, c)]);
        theta_box.push([0.0, 1.0_f64.max(table.a[(r, c)])]);
    }
    let mut nodes = Vec::with_capacity(d);
    for k in 0..d {
        let exposed: Vec<(usize, usize)> =
            expose_a.iter().enumerate().filter(|(_, (r, _))| *r == k).map(|(n, (_, c))| (d + n, *c)).collect();
        let parents: Vec<usize> =
            (0..d).filter(|&m| table.a[(k, m)] != 0.0 || exposed.iter().any(|(_, c)| *c == m)).collect();
        let row: Vec<f64> = parents
            .iter()
            .map(|&m| if exposed.iter().any(|(_, c)| *c == m) { 0.0 } else { table.a[(k, m)] })
            .collect();
        let theta: Vec<usize> = std::iter::once(k).chain(exposed.iter().map(|(t, _)| *t)).collect();
        let mut ab = AssignmentBuilder::new(parents.len(), theta.len(), 0);
        let coeffs = ab.b.constant(row);
        let mut acc = ab.b.dot(coeffs, ab.parents);
        let y = ab.param(0);
        acc = ab.b.add(acc, y);
        for (n, (_, c)) in exposed.iter().enumerate() {
            let a = ab.param(n + 1);
            let pos = parents.iter().position(|m| m == c).expect("exposed parent present");
            let x = ab.parent(pos);
            let ax = ab.b.mul(a, x);
            acc = ab.b.add(acc, ax);
        }
        nodes.push(NodeSpec {
            name: table.sector_names[k].clone(),
            parents,
            theta,
            controls: vec![],
            assignment: ab.finish(acc)?,
        });
    }
    Ok(SscmSpec { nodes, theta_names, theta_ref, theta_box, controls: vec![], x_ref: None })
}

/// Constant-elasticity demand `y = y0·(p/p0)^(−ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandCurve {
    pub y0: f64,
    pub p0: f64,
    pub elasticity: f64,
}

impl DemandCurve {
    pub fn demand(&self, p: f64) -> f64 {
        self.y0 * (p / self.p0).powf(-self.elasticity)
    }
}

/// Price/demand model over stacked nodes `(x, π, y)`, where `π = p − p0` is
/// the price offset from the curves' base prices.
#[derive(Debug, Clone, PartialEq)]
pub struct ReboundModel {
    pub spec: SscmSpec,
    pub a: DMatrix<f64>,
    pub energy: usize,
    pub target: usize,
    /// Control scaling `A[energy, target]` (reference 1).
    pub efficiency_control: usize,
    pub theta_coefficient: usize,
    pub theta_price: usize,
    pub theta_base_demand: Vec<usize>,
    pub theta_elasticity: Vec<usize>,
    pub base_prices: Vec<f64>,
}

impl ReboundModel {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_node(&self, k: usize) -> usize {
        k
    }

    pub fn price_node(&self, k: usize) -> usize {
        self.dim() + k
    }

    pub fn demand_node(&self, k: usize) -> usize {
        2 * self.dim() + k
    }

    /// Demand node of the target sector: the natural invariant node.
    pub fn invariant_node(&self) -> usize {
        self.demand_node(self.target)
    }

    /// Coefficient matrix at `θ` with the efficiency control applied.
    pub fn coefficients(&self, theta: &[f64], efficiency: f64) -> DMatrix<f64> {
        let mut a = self.a.clone();
        a[(self.energy, self.target)] = theta[self.theta_coefficient] * efficiency;
        a
    }

    /// Energy bought by all sectors, `Σ_m A_em·x_m`.
    pub fn energy_demand(&self, x: &[f64], theta: &[f64], efficiency: f64) -> f64 {
        let a = self.coefficients(theta, efficiency);
        (0..self.dim()).map(|m| a[(self.energy, m)] * x[m]).sum()
    }

    /// Controls with the efficiency set to `alpha` and the rest at reference.
    pub fn controls_at(&self, alpha: f64) -> Vec<f64> {
        let mut c = self.spec.control_ref();
        c[self.efficiency_control] = alpha;
        c
    }

    /// Direct solve of the stacked model (prices, demand, then outputs).
    pub fn closed_form(&self, theta: &[f64], efficiency: f64) -> Result<Vec<f64>, ZooError> {
        let d = self.dim();
        let a = self.coefficients(theta, efficiency);
        let mut rhs = vec![0.0; d];
        rhs[self.energy] = theta[self.theta_price];
        let p = linalg::solve(&linalg::identity_minus(&a.transpose()), &rhs).ok_or(ZooError::SingularMatrix)?;
        let y: Vec<f64> = (0..d)
            .map(|k| {
                let c = DemandCurve {
                    y0: theta[self.theta_base_demand[k]],
                    p0: self.base_prices[k],
                    elasticity: theta[self.theta_elasticity[k]],
                };
                c.demand(p[k])
            })
            .collect();
        let x = leontief_closed_form(&a, &y)?;
        Ok(x.into_iter().chain(p.iter().zip(&self.base_prices).map(|(p, p0)| p - p0)).chain(y).collect())
    }
}

/// Base prices `p = (I − Aᵀ)⁻¹·β_e·δ_e`.
pub fn equilibrium_prices(a: &DMatrix<f64>, energy: usize, beta_e: f64) -> Result<Vec<f64>, ZooError> {
    let mut rhs = vec![0.0; a.nrows()];
    rhs[energy] = beta_e;
    linalg::solve(&linalg::identity_minus(&a.transpose()), &rhs).ok_or(ZooError::SingularMatrix)
}

/// Builds the rebound model. θ = `[A_ej, β_e, y0_0.., ε_0..]`; the
/// efficiency control scales `A_ej` in both the energy output and the
/// target-sector price assignments.
pub fn price_rebound_model(
    table: &IoTable,
    energy: usize,
    beta_e: f64,
    curves: &[DemandCurve],
    target: usize,
) -> Result<ReboundModel, ZooError> {
    table.validate()?;
    let d = table.dim();
    if energy >= d || target >= d || energy == target {
        return Err(ZooError::InvalidParameter(format!("energy {energy} and target {target} must be distinct sectors")));
    }
    if curves.len() != d {
        return Err(ZooError::DimensionMismatch(format!("{} demand curves for {d} sectors", curves.len())));
    }
    if !(beta_e > 0.0) {
        return Err(ZooError::InvalidParameter(format!("energy price coefficient {beta_e} must be positive")));
    }
    if let Some(c) = curves.iter().find(|c| !(c.p0 > 0.0) || c.y0 < 0.0 || c.elasticity < 0.0) {
        return Err(ZooError::InvalidParameter(format!("invalid demand curve {c:?}")));
    }
    if !hawkins_simon_check(&table.a) {
        log::warn!("Hawkins-Simon condition fails for the rebound model");
    }
    let a = &table.a;
    let p0: Vec<f64> = curves.iter().map(|c| c.p0).collect();
    let names = &table.sector_names;

    let theta_coefficient = 0;
    let theta_price = 1;
    let theta_base_demand: Vec<usize> = (0..d).map(|k| 2 + k).collect();
    let theta_elasticity: Vec<usize> = (0..d).map(|k| 2 + d + k).collect();
    let mut theta_names = vec![format!("A_{}_{}", names[energy], names[target]), "energy_price".to_string()];
    theta_names.extend(names.iter().map(|s| format!("base_demand_{s}")));
    theta_names.extend(names.iter().map(|s| format!("elasticity_{s}")));
    let mut theta_ref = vec![a[(energy, target)], beta_e];
    theta_ref.extend(curves.iter().map(|c| c.y0));
    theta_ref.extend(curves.iter().map(|c| c.elasticity));
    let mut theta_box = vec![box_around(a[(energy, target)]), box_around(beta_e)];
    theta_box.extend(curves.iter().map(|c| box_around(c.y0)));
    theta_box.extend(curves.iter().map(|c| [0.0, 5.0_f64.max(2.0 * c.elasticity)]));
    let controls = vec![ControlDecl { name: "efficiency".into(), reference: 1.0 }];
    let eff = 0;

    let mut nodes = Vec::with_capacity(3 * d);
    // Outputs: x_k := Σ_m A_km·x_m + y_k.
    for k in 0..d {
        let mut parents: Vec<usize> = (0..d).filter(|&m| a[(k, m)] != 0.0 || (k == energy && m == target)).collect();
        let n_x = parents.len();
        parents.push(2 * d + k);
        let exposed = k == energy;
        let row: Vec<f64> = parents[..n_x].iter().map(|&m| if exposed && m == target { 0.0 } else { a[(k, m)] }).collect();
        let (theta, ctrl) = if exposed { (vec![theta_coefficient], vec![eff]) } else { (vec![], vec![]) };
        let mut ab = AssignmentBuilder::new(parents.len(), theta.len(), ctrl.len());
        let xs = ab.b.slice(ab.parents, 0, n_x);
        let coeffs = ab.b.constant(row);
        let mut acc = ab.b.dot(coeffs, xs);
        if exposed {
            let pos = parents.iter().position(|&m| m == target).expect("target parent");
            let xj = ab.parent(pos);
            let c = ab.param(0);
            let u = ab.control(0);
            let cu = ab.b.mul(c, u);
            let t = ab.b.mul(cu, xj);
            acc = ab.b.add(acc, t);
        }
        let y = ab.parent(n_x);
        acc = ab.b.add(acc, y);
        nodes.push(NodeSpec { name: format!("output_{}", names[k]), parents, theta, controls: ctrl, assignment: ab.finish(acc)? });
    }
    // Price offsets: π_k := Σ_i A_ik·(π_i + p0_i) + β_e·δ_ek − p0_k.
    for k in 0..d {
        let exposed = k == target;
        let sources: Vec<usize> = (0..d).filter(|&i| a[(i, k)] != 0.0 || (exposed && i == energy)).collect();
        let parents: Vec<usize> = sources.iter().map(|&i| d + i).collect();
        let col: Vec<f64> = sources.iter().map(|&i| if exposed && i == energy { 0.0 } else { a[(i, k)] }).collect();
        let shift: f64 = sources.iter().zip(&col).map(|(&i, c)| c * p0[i]).sum::<f64>() - p0[k];
        let mut theta = Vec::new();
        if exposed {
            theta.push(theta_coefficient);
        }
        if k == energy {
            theta.push(theta_price);
        }
        let ctrl = if exposed { vec![eff] } else { vec![] };
        let mut ab = AssignmentBuilder::new(parents.len(), theta.len(), ctrl.len());
        let coeffs = ab.b.constant(col);
        let mut acc = ab.b.dot(coeffs, ab.parents);
        let s = ab.b.scalar(shift);
        acc = ab.b.add(acc, s);
        let mut next_theta = 0;
        if exposed {
            let pos = sources.iter().position(|&i| i == energy).expect("energy source");
            let pe = ab.parent(pos);
            let base = ab.b.scalar(p0[energy]);
            let price = ab.b.add(pe, base);
            let c = ab.param(0);
            let u = ab.control(0);
            let cu = ab.b.mul(c, u);
            let t = ab.b.mul(cu, price);
            acc = ab.b.add(acc, t);
            next_theta = 1;
        }
        if k == energy {
            let b = ab.param(next_theta);
            acc = ab.b.add(acc, b);
        }
        nodes.push(NodeSpec { name: format!("price_{}", names[k]), parents, theta, controls: ctrl, assignment: ab.finish(acc)? });
    }
    // Demand: y_k := y0_k·exp(−ε_k·log((π_k + p0_k)/p0_k)).
    for k in 0..d {
        let mut ab = AssignmentBuilder::new(1, 2, 0);
        let pi = ab.parent(0);
        let base = ab.b.scalar(p0[k]);
        let p = ab.b.add(pi, base);
        let inv = ab.b.scalar(1.0 / p0[k]);
        let ratio = ab.b.mul(p, inv);
        let lr = ab.b.log(ratio);
        let eps = ab.param(1);
        let e = ab.b.mul(eps, lr);
        let ne = ab.b.neg(e);
        let f = ab.b.exp(ne);
        let y0 = ab.param(0);
        let out = ab.b.mul(y0, f);
        nodes.push(NodeSpec {
            name: format!("demand_{}", names[k]),
            parents: vec![d + k],
            theta: vec![theta_base_demand[k], theta_elasticity[k]],
            controls: vec![],
            assignment: ab.finish(out)?,
        });
    }
    let spec = SscmSpec { nodes, theta_names, theta_ref, theta_box, controls, x_ref: None };
    spec.ensure_valid()?;
    Ok(ReboundModel {
        spec,
        a: a.clone(),
        energy,
        target,
        efficiency_control: eff,
        theta_coefficient,
        theta_price,
        theta_base_demand,
        theta_elasticity,
        base_prices: p0,
    })
}

/// Elasticities of the frozen three-sector rebound instance; the target
/// sector's value is the one varied in backfire experiments.
pub const REBOUND_ELASTICITIES: [f64; 3] = [0.1, 2.0, 0.2];

/// Frozen three-sector instance: energy (0), target (1), other (2), with
/// base prices at the unintervened equilibrium.
pub fn rebound_3sector() -> ReboundModel {
    rebound_3sector_with_elasticity(REBOUND_ELASTICITIES[1])
}

pub fn rebound_3sector_with_elasticity(target_elasticity: f64) -> ReboundModel {
    let a = DMatrix::from_row_slice(3, 3, &[0.10, 0.40, 0.05, 0.05, 0.10, 0.10, 0.10, 0.10, 0.15]);
    let r = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
    let mut table = IoTable::new(a, r, vec![1.0; 3]).expect("frozen table is valid");
    table.sector_names = vec!["energy".into(), "target".into(), "other".into()];
    table.impact_names = vec!["energy".into()];
    let beta_e = 1.0;
    let p = equilibrium_prices(&table.a, 0, beta_e).expect("frozen prices");
    let eps = [REBOUND_ELASTICITIES[0], target_elasticity, REBOUND_ELASTICITIES[2]];
    let curves: Vec<DemandCurve> =
        (0..3).map(|k| DemandCurve { y0: table.y[k], p0: p[k], elasticity: eps[k] }).collect();
    let mut m = price_rebound_model(&table, 0, beta_e, &curves, 1).expect("frozen rebound model");
    m.spec.theta_box[m.theta_elasticity[1]] = [0.0, 5.0];
    m
}

/// Three-node example: `x := τ`, `y := u_y·(α·x + β·z)`, `z := u_z·γ·y`,
/// with θ = (τ, α, β, γ) and controls (u_y, u_z).
pub fn motivating_example(tau: f64, alpha: f64, beta: f64, gamma: f64) -> Result<SscmSpec, ZooError> {
    if (1.0 - beta * gamma).abs() < 1e-12 {
        return Err(ZooError::SingularParameterization(format!("beta*gamma = {}", beta * gamma)));
    }
    let mut x = AssignmentBuilder::new(0, 1, 0);
    let out = x.param(0);
    let x = x.finish(out)?;

    let mut y = AssignmentBuilder::new(2, 2, 1);
    let (xv, zv) = (y.parent(0), y.parent(1));
    let (a, b) = (y.param(0), y.param(1));
    let ax = y.b.mul(a, xv);
    let bz = y.b.mul(b, zv);
    let s = y.b.add(ax, bz);
    let u = y.control(0);
    let out = y.b.mul(u, s);
    let y = y.finish(out)?;

    let mut z = AssignmentBuilder::new(1, 1, 1);
    let yv = z.parent(0);
    let g = z.param(0);
    let gy = z.b.mul(g, yv);
    let u = z.control(0);
    let out = z.b.mul(u, gy);
    let z = z.finish(out)?;

    let theta_ref = vec![tau, alpha, beta, gamma];
    let theta_box = theta_ref.iter().map(|&v| box_around(v)).collect();
    Ok(SscmSpec {
        nodes: vec![
            NodeSpec { name: "x".into(), parents: vec![], theta: vec![0], controls: vec![], assignment: x },
            NodeSpec { name: "y".into(), parents: vec![0, 2], theta: vec![1, 2], controls: vec![0], assignment: y },
            NodeSpec { name: "z".into(), parents: vec![1], theta: vec![3], controls: vec![1], assignment: z },
        ],
        theta_names: vec!["tau".into(), "alpha".into(), "beta".into(), "gamma".into()],
        theta_ref,
        theta_box,
        controls: vec![
            ControlDecl { name: "u_y".into(), reference: 1.0 },
            ControlDecl { name: "u_z".into(), reference: 1.0 },
        ],
        x_ref: None,
    })
}

/// Closed-form equilibrium of the motivating example.
pub fn motivating_closed_form(theta: &[f64], u_y: f64, u_z: f64) -> Result<[f64; 3], ZooError> {
    let [tau, alpha, beta, gamma] = <[f64; 4]>::try_from(theta)
        .map_err(|_| ZooError::DimensionMismatch(format!("expected 4 parameters, got {}", theta.len())))?;
    let den = 1.0 - u_y * u_z * beta * gamma;
    if den.abs() < 1e-12 {
        return Err(ZooError::SingularParameterization(format!("1 - u_y*u_z*beta*gamma = {den}")));
    }
    let y = u_y * alpha * tau / den;
    Ok([tau, y, u_z * gamma * y])
}

/// Node sets and intervention triples of a compartmentalized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentTopology {
    pub partition: Vec<Vec<usize>>,
    pub triples: Vec<Triple>,
    /// θ entries that vary across samples.
    pub free_theta: Vec<usize>,
}

/// Affine blocks coupled only through each compartment's invariant node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoCompartmentParams {
    /// Coefficients over all six nodes, row = child.
    pub coefficients: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub partition: Vec<Vec<usize>>,
    pub triples: Vec<Triple>,
    pub free_theta: Vec<usize>,
}

impl Default for TwoCompartmentParams {
    fn default() -> Self {
        // Each block: node 0 (intervened) and node 1 feed each other, node 2
        // (invariant) reads both and is the only node read by the other block.
        let coefficients = vec![
            vec![0.0, 0.2, 0.0, 0.0, 0.0, 0.3],
            vec![0.3, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.4, 0.3, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.3, 0.0, 0.2, 0.0],
            vec![0.0, 0.0, 0.0, 0.3, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.4, 0.3, 0.0],
        ];
        Self {
            coefficients,
            offsets: vec![1.0; 6],
            partition: vec![vec![0, 1, 2], vec![3, 4, 5]],
            triples: vec![Triple::new(0, 2), Triple::new(3, 5)],
            free_theta: vec![0, 3],
        }
    }
}

/// Builds the two-compartment Leontief-style model and its topology.
pub fn two_compartment_model(params: &TwoCompartmentParams) -> Result<(SscmSpec, CompartmentTopology), ZooError> {
    let d = params.offsets.len();
    if params.coefficients.len() != d || params.coefficients.iter().any(|r| r.len() != d) {
        return Err(ZooError::DimensionMismatch("coefficient matrix does not match offsets".into()));
    }
    if params.partition.len() != 2 || params.triples.len() != 2 {
        return Err(ZooError::TopologyViolation("exactly two compartments required".into()));
    }
    let owner = |n: usize| params.partition.iter().position(|p| p.contains(&n));
    if (0..d).any(|n| owner(n).is_none()) || params.partition.iter().map(Vec::len).sum::<usize>() != d {
        return Err(ZooError::TopologyViolation("partition must cover every node exactly once".into()));
    }
    for (c, t) in params.triples.iter().enumerate() {
        if [t.intervened, t.invariant, t.auxiliary].iter().any(|&n| owner(n) != Some(c)) {
            return Err(ZooError::TopologyViolation(format!("triple {c} leaves its compartment")));
        }
    }
    for (m, row) in params.coefficients.iter().enumerate() {
        for (p, &w) in row.iter().enumerate() {
            if w != 0.0 && owner(p) != owner(m) {
                let c = owner(p).expect("covered");
                if params.triples[c].invariant != p {
                    return Err(ZooError::TopologyViolation(format!(
                        "edge {p} -> {m} leaves compartment {c} from a non-invariant node"
                    )));
                }
            }
        }
    }
    let a = DMatrix::from_fn(d, d, |i, j| params.coefficients[i][j]);
    let r = DMatrix::from_element(1, d, 1.0);
    let mut table = IoTable::new(a, r, params.offsets.clone())?;
    table.sector_names = (0..d).map(|n| format!("n{n}")).collect();
    let spec = leontief_model(&table, &[])?;
    Ok((
        spec,
        CompartmentTopology {
            partition: params.partition.clone(),
            triples: params.triples.clone(),
            free_theta: params.free_theta.clone(),
        },
    ))
}

/// Random nonnegative coefficient matrix with spectral radius `rho`, plus a
/// final demand in `[0.5, 1.5]`. Each row has a few nonzeros and a cyclic
/// link so the radius is never zero.
pub fn synthetic_leontief(n: usize, rho: f64, seed: u64) -> IoTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = (4.0 / n as f64).min(1.0);
    let mut a = DMatrix::from_fn(n, n, |_, _| 0.0);
    for i in 0..n {
        for j in 0..n {
            if rng.random::<f64>() < density {
                a[(i, j)] = rng.random::<f64>();
            }
        }
        a[(i, (i + 1) % n)] += 0.1 + rng.random::<f64>();
    }
    let radius = linalg::spectral_radius(&a);
    a *= rho / radius;
    let y = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let r = DMatrix::from_element(1, n, 1.0);
    IoTable::new(a, r, y).expect("synthetic table is nonnegative")
}

/// Frozen ten-sector instance for trade-off sweeps. Impact rows are
/// greenhouse-gas intensity (0) and employment intensity (1).
pub fn pareto_10sector() -> IoTable {
    #[rustfmt::skip]
    let a = [
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1678, 0.0641,
        0.1694, 0.0, 0.0, 0.0, 0.0, 0.0435, 0.2239, 0.0508, 0.0, 0.0,
        0.1192, 0.0410, 0.2407, 0.0, 0.0749, 0.0, 0.0, 0.2290, 0.0, 0.2354,
        0.0, 0.2194, 0.0, 0.2619, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.3797, 0.0, 0.4183, 0.0815, 0.0, 0.0, 0.2339, 0.0, 0.3457,
        0.0, 0.0, 0.3399, 0.0, 0.0, 0.0614, 0.0286, 0.0421, 0.0, 0.0,
        0.1994, 0.0, 0.0, 0.3426, 0.0223, 0.2783, 0.0381, 0.0, 0.0, 0.2046,
        0.0399, 0.0, 0.0, 0.3837, 0.0, 0.0499, 0.0, 0.0166, 0.0, 0.0,
        0.0185, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1260, 0.0, 0.1840,
        0.0, 0.0, 0.3577, 0.2314, 0.0, 0.0, 0.0, 0.0, 0.0558, 0.0,
    ];
    let ghg = [0.7791, 1.3742, 1.6477, 1.4714, 2.4696, 1.6105, 1.9525, 1.9918, 0.1072, 1.2086];
    let emp = [0.5203, 0.7429, 0.3648, 0.6249, 0.8048, 0.8274, 0.4297, 0.2762, 0.2515, 0.7734];
    let y = vec![1.3114, 0.7728, 0.9032, 0.8543, 1.1096, 0.7763, 1.2327, 0.7661, 0.6947, 0.903];
    let r = DMatrix::from_fn(2, 10, |i, j| if i == 0 { ghg[j] } else { emp[j] });
    let mut t = IoTable::new(DMatrix::from_row_slice(10, 10, &a), r, y).expect("frozen table is valid");
    t.impact_names = vec!["ghg".into(), "employment".into()];
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::SolverConfig;
    use crate::sscm::{check_local_diffeomorphism, solve_equilibrium, solve_equilibrium_at, DEFAULT_COND_MAX};

    fn two_by_two() -> IoTable {
        IoTable::new(DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.1]), DMatrix::identity(2, 2), vec![1.0, 1.0])
            .unwrap()
    }

    #[test]
    fn leontief_closed_form_examples() {
        let x = leontief_closed_form(&DMatrix::zeros(2, 2), &[1.0, 2.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        let t = two_by_two();
        let x = leontief_closed_form(&t.a, &t.y).unwrap();
        assert!((x[0] - 1.1 / 0.75).abs() < 1e-12 && (x[1] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn leontief_model_matches_closed_form() {
        let t = two_by_two();
        let spec = leontief_model(&t, &[]).unwrap();
        let sol = solve_equilibrium(&spec, &t.y, &SolverConfig::default()).unwrap();
        let x = leontief_closed_form(&t.a, &t.y).unwrap();
        for (a, b) in sol.x_star.iter().zip(&x) {
            assert!((a - b).abs() / b <= 10.0 * 1e-4);
        }
        let zero = IoTable::new(DMatrix::zeros(3, 3), DMatrix::identity(3, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let spec = leontief_model(&zero, &[]).unwrap();
        let x = solve_equilibrium(&spec, &zero.y, &SolverConfig::default()).unwrap().x_star;
        for (a, b) in x.iter().zip(&zero.y) {
            assert!((a - b).abs() <= 1e-15 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn exposed_coefficients_enter_theta() {
        let t = two_by_two();
        let spec = leontief_model(&t, &[(0, 1)]).unwrap();
        assert_eq!(spec.theta_ref, vec![1.0, 1.0, 0.2]);
        let map = spec.eval_map(&[1.0, 1.0], &[1.0, 1.0, 0.5], &[]).unwrap();
        assert!((map[0] - 1.6).abs() < 1e-15 && (map[1] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn unstable_leontief_diverges() {
        let t = IoTable::new(DMatrix::from_row_slice(1, 1, &[1.2]), DMatrix::identity(1, 1), vec![1.0]).unwrap();
        assert!(!hawkins_simon_check(&t.a));
        let spec = leontief_model(&t, &[]).unwrap();
        match solve_equilibrium(&spec, &t.y, &SolverConfig::forward()) {
            Err(_) => {}
            Ok(sol) => assert!(!sol.report.converged, "{:?}", sol.report),
        }
    }

    #[test]
    fn hawkins_simon_examples() {
        assert!(hawkins_simon_check(&DMatrix::zeros(3, 3)));
        assert!(!hawkins_simon_check(&DMatrix::from_row_slice(1, 1, &[1.2])));
        assert!(hawkins_simon_check(&two_by_two().a));
    }

    #[test]
    fn impacts_examples() {
        assert_eq!(impacts(&DMatrix::identity(2, 2), &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(impacts(&DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), &[3.0, 4.0]).unwrap(), vec![11.0]);
        assert_eq!(employment(&[0.5, 2.0], &[3.0, 4.0]), vec![1.5, 8.0]);
        assert!(impacts(&DMatrix::identity(2, 2), &[1.0]).is_err());
    }

    #[test]
    fn negative_entries_rejected() {
        let err = IoTable::new(DMatrix::from_row_slice(1, 1, &[-0.1]), DMatrix::identity(1, 1), vec![1.0]).unwrap_err();
        assert!(matches!(err, ZooError::NegativeEntry { row: 0, col: 0, .. }));
    }

    #[test]
    fn motivating_example_values() {
        let spec = motivating_example(1.0, 0.5, 0.3, 0.4).unwrap();
        let fx = spec.eval_map(&[1.0, 1.0, 1.0], &spec.theta_ref, &[1.0, 1.0]).unwrap();
        assert!((fx[0] - 1.0).abs() < 1e-15 && (fx[1] - 0.8).abs() < 1e-15 && (fx[2] - 0.4).abs() < 1e-15);
        let cf = motivating_closed_form(&spec.theta_ref, 1.0, 1.0).unwrap();
        assert!((cf[1] - 0.568_181_818).abs() < 1e-8 && (cf[2] - 0.227_272_727).abs() < 1e-8);
        let cf = motivating_closed_form(&spec.theta_ref, 2.0, 1.0).unwrap();
        assert!((cf[1] - 1.0 / 0.76).abs() < 1e-12);
        let sol = solve_equilibrium(&spec, &spec.theta_ref, &SolverConfig::default()).unwrap();
        let exact = motivating_closed_form(&spec.theta_ref, 1.0, 1.0).unwrap();
        for (a, b) in sol.x_star.iter().zip(exact) {
            assert!((a - b).abs() / b <= 10.0 * 1e-4);
        }
        assert!(motivating_example(1.0, 0.5, 2.0, 0.5).is_err());
    }

    #[test]
    fn motivating_example_singular_jacobian() {
        let spec = motivating_example(1.0, 0.5, 0.3, 0.4).unwrap();
        let rep = check_local_diffeomorphism(&spec, &[1.0, 1.0, 0.5], &[1.0, 0.5, 2.0, 0.5], 1e-4, DEFAULT_COND_MAX).unwrap();
        assert!(!rep.jacobian_invertible);
        let x = motivating_closed_form(&spec.theta_ref, 1.0, 1.0).unwrap();
        let rep = check_local_diffeomorphism(&spec, &x, &spec.theta_ref, 1e-4, DEFAULT_COND_MAX).unwrap();
        assert!(rep.is_solution && rep.jacobian_invertible);
    }

    #[test]
    fn rebound_reference_is_self_consistent() {
        let m = rebound_3sector();
        assert!(hawkins_simon_check(&m.a));
        let cf = m.closed_form(&m.spec.theta_ref, 1.0).unwrap();
        for k in 0..3 {
            assert!(cf[m.price_node(k)].abs() < 1e-12);
            assert!((cf[m.demand_node(k)] - 1.0).abs() < 1e-12);
        }
        let cfg = SolverConfig::default().with_tol(1e-10);
        let sol = solve_equilibrium(&m.spec, &m.spec.theta_ref, &cfg).unwrap();
        for (a, b) in sol.x_star.iter().zip(&cf) {
            assert!((a - b).abs() < 1e-8, "{:?} vs {:?}", sol.x_star, cf);
        }
    }

    #[test]
    fn rebound_intervened_matches_closed_form() {
        let m = rebound_3sector();
        let cfg = SolverConfig::default().with_tol(1e-10);
        let sol = solve_equilibrium_at(&m.spec, &m.spec.theta_ref, &m.controls_at(0.7), &cfg).unwrap();
        let cf = m.closed_form(&m.spec.theta_ref, 0.7).unwrap();
        for (a, b) in sol.x_star.iter().zip(&cf) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn rebound_backfire_and_reduction() {
        let energy = |eps: f64, alpha: f64| {
            let m = rebound_3sector_with_elasticity(eps);
            let x = m.closed_form(&m.spec.theta_ref, alpha).unwrap();
            m.energy_demand(&x, &m.spec.theta_ref, alpha)
        };
        assert!(energy(2.0, 0.6) > energy(2.0, 1.0));
        assert!(energy(0.0, 0.6) < energy(0.0, 1.0));
    }

    #[test]
    fn rebound_rejects_nonpositive_energy_price() {
        let m = rebound_3sector();
        let mut table = IoTable::new(m.a.clone(), DMatrix::identity(3, 3), vec![1.0; 3]).unwrap();
        table.sector_names = vec!["e".into(), "t".into(), "o".into()];
        let curves = vec![DemandCurve { y0: 1.0, p0: 1.0, elasticity: 0.0 }; 3];
        assert!(price_rebound_model(&table, 0, 0.0, &curves, 1).is_err());
    }

    #[test]
    fn two_compartment_topology() {
        let (spec, topo) = two_compartment_model(&TwoCompartmentParams::default()).unwrap();
        assert!(spec.validate().is_empty());
        assert_eq!(topo.partition.len(), 2);
        let mut bad = TwoCompartmentParams::default();
        bad.coefficients[3][1] = 0.1;
        assert!(matches!(two_compartment_model(&bad), Err(ZooError::TopologyViolation(_))));
    }

    #[test]
    fn synthetic_radius_and_determinism() {
        let t = synthetic_leontief(20, 0.9, 7);
        assert!((linalg::spectral_radius(&t.a) - 0.9).abs() < 1e-9);
        assert_eq!(t, synthetic_leontief(20, 0.9, 7));
        assert!(hawkins_simon_check(&t.a));
    }

    #[test]
    fn pareto_instance_is_productive() {
        let t = pareto_10sector();
        assert!(hawkins_simon_check(&t.a));
        let x = leontief_closed_form(&t.a, &t.y).unwrap();
        assert!((x[0] - 1.711).abs() < 2e-3 && (x[4] - 4.235).abs() < 2e-3, "{x:?}");
    }
}
