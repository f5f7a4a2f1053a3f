//! Experiment configuration: strict JSON schema, defaults and validation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eqcausal::fixedpoint::{Method, SolverConfig};
use eqcausal::interventions::Group;
use eqcausal::optimize::{AdamConfig, SamplingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    GradCheck,
    Optimize,
    Pareto,
    Invariant,
    Compartment,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::GradCheck => "grad-check",
            Self::Optimize => "optimize",
            Self::Pareto => "pareto",
            Self::Invariant => "invariant",
            Self::Compartment => "compartment",
            Self::Bench => "bench",
        }
    }
}

/// A built-in zoo id or the three table files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Zoo(String),
    Tables(TablePaths),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TablePaths {
    pub a: PathBuf,
    pub r: PathBuf,
    pub y: PathBuf,
}

/// Resolved zoo id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZooId {
    Motivating,
    Rebound,
    TwoCompartment,
    Pareto10,
    Synthetic(usize),
}

impl ZooId {
    pub const IDS: &'static str =
        "motivating-example, rebound-3sector, two-compartment, pareto-10sector, leontief-synthetic-N";

    pub fn parse(id: &str) -> Option<Self> {
        match id {
            "motivating-example" => Some(Self::Motivating),
            "rebound-3sector" => Some(Self::Rebound),
            "two-compartment" => Some(Self::TwoCompartment),
            "pareto-10sector" => Some(Self::Pareto10),
            _ => id.strip_prefix("leontief-synthetic-")?.parse().ok().filter(|n| *n >= 1).map(Self::Synthetic),
        }
    }
}

/// Node or impact row, by index or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ref {
    Index(usize),
    Name(String),
}

impl Ref {
    pub fn resolve(&self, names: &[impl AsRef<str>]) -> Option<usize> {
        match self {
            Self::Index(i) => (*i < names.len()).then_some(*i),
            Self::Name(n) => names.iter().position(|m| m.as_ref() == n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionDecl {
    pub group: Group,
    /// Empty means every node of a table model.
    pub targets: Vec<Ref>,
    pub bounds: Option<[f64; 2]>,
    pub initial: Option<Vec<f64>>,
}

impl Default for InterventionDecl {
    fn default() -> Self {
        Self { group: Group::Multiplicative, targets: vec![], bounds: None, initial: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossDecl {
    pub objective_row: Ref,
    pub regularizer_row: Option<Ref>,
    pub lambda: f64,
    /// Only for `pareto`.
    pub lambdas: Option<Vec<f64>>,
}

impl Default for LossDecl {
    fn default() -> Self {
        Self { objective_row: Ref::Index(0), regularizer_row: None, lambda: 0.0, lambdas: None }
    }
}

/// Policy training and evaluation, shared by `invariant` and `compartment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvariantDecl {
    pub intervened: Option<Ref>,
    pub invariant: Option<Ref>,
    pub auxiliary: Option<Ref>,
    pub hidden: Vec<usize>,
    pub held_out_samples: usize,
    pub held_out_seed: u64,
    /// Efficiency values for the energy report.
    pub alphas: Vec<f64>,
    /// Target-sector elasticities for the energy report.
    pub elasticities: Vec<f64>,
    /// Intervention grid for the compartment check.
    pub grid: Vec<f64>,
    pub theta_samples: usize,
}

impl Default for InvariantDecl {
    fn default() -> Self {
        Self {
            intervened: None,
            invariant: None,
            auxiliary: None,
            hidden: vec![20, 10],
            held_out_samples: 200,
            held_out_seed: 12345,
            alphas: vec![0.6, 0.7, 0.8, 0.9],
            elasticities: vec![0.5, 1.0, 2.0, 3.0],
            grid: vec![0.6, 0.8, 1.0, 1.25, 1.5],
            theta_samples: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckDecl {
    pub step: f64,
    pub columns: Option<Vec<usize>>,
    pub threshold: f64,
}

impl Default for GradCheckDecl {
    fn default() -> Self {
        Self { step: 1e-4, columns: None, threshold: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchMethod {
    pub name: String,
    pub method: Method,
    #[serde(default = "one")]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchDecl {
    pub dims: Vec<usize>,
    pub seeds: usize,
    pub rho: f64,
    pub methods: Vec<BenchMethod>,
}

impl Default for BenchDecl {
    fn default() -> Self {
        let m = |name: &str, method, beta| BenchMethod { name: name.into(), method, beta };
        Self {
            dims: vec![2, 10, 50, 100, 200],
            seeds: 20,
            rho: 0.9,
            methods: vec![
                m("forward", Method::Forward, 1.0),
                m("anderson-beta1", Method::Anderson, 1.0),
                m("anderson-beta2", Method::Anderson, 2.0),
            ],
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("eqcausal-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    /// Required by every command except `bench`.
    #[serde(default)]
    pub model: Option<ModelSource>,
    /// Overrides the model's reference θ.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub intervention: InterventionDecl,
    #[serde(default)]
    pub loss: LossDecl,
    #[serde(default)]
    pub invariant: InvariantDecl,
    #[serde(default)]
    pub grad_check: GradCheckDecl,
    #[serde(default)]
    pub bench: BenchDecl,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Directory table paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn escape_pointer(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => write!(out, "/{index}").expect("string write"),
            Segment::Map { key } => write!(out, "/{}", escape_pointer(key)).expect("string write"),
            Segment::Enum { variant } => write!(out, "/{}", escape_pointer(variant)).expect("string write"),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

/// Parses a config from JSON text. `origin` names the source in errors.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let ptr = pointer(e.path());
        let inner = e.into_inner();
        match inner.classify() {
            serde_json::error::Category::Data => CliError::schema(ptr, inner.to_string()),
            _ => CliError::Parse { file: origin.into(), line: inner.line() as u64, column: inner.column(), message: inner.to_string() },
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, defaults and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    let mut cfg = parse_config(&text, &path.display().to_string())?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.check_files()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Checks that do not touch the file system.
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.model {
            None if self.command != Command::Bench => {
                return Err(CliError::schema("/model", format!("required for command {}", self.command.name())))
            }
            Some(ModelSource::Zoo(id)) if ZooId::parse(id).is_none() => {
                return Err(CliError::schema("/model", format!("unknown model id {id:?}; expected one of {}", ZooId::IDS)))
            }
            _ => {}
        }
        let loss = &self.loss;
        match (self.command, &loss.lambdas) {
            (Command::Pareto, None) => return Err(CliError::schema("/loss/lambdas", "required for command pareto")),
            (Command::Pareto, Some(l)) if l.is_empty() || l.iter().any(|v| !(*v >= 0.0)) => {
                return Err(CliError::schema("/loss/lambdas", "must be a nonempty list of nonnegative numbers"))
            }
            (c, Some(_)) if c != Command::Pareto => {
                return Err(CliError::schema("/loss/lambdas", format!("a lambda list is only valid for pareto, not {}", c.name())))
            }
            _ => {}
        }
        if !(loss.lambda >= 0.0) {
            return Err(CliError::schema("/loss/lambda", "must be nonnegative"));
        }
        if self.command == Command::Pareto && loss.regularizer_row.is_none() {
            return Err(CliError::schema("/loss/regularizer_row", "required for command pareto"));
        }
        if self.command == Command::Optimize && loss.lambda > 0.0 && loss.regularizer_row.is_none() {
            return Err(CliError::schema("/loss/regularizer_row", "required when lambda > 0"));
        }
        if let Some([lo, hi]) = self.intervention.bounds {
            if !(lo < hi) || (self.intervention.group == Group::Multiplicative && !(lo > 0.0)) {
                return Err(CliError::schema("/intervention/bounds", "need lo < hi, and lo > 0 for multiplicative"));
            }
        }
        if let Some(init) = &self.intervention.initial {
            if !self.intervention.targets.is_empty() && init.len() != self.intervention.targets.len() {
                return Err(CliError::schema("/intervention/initial", "needs one value per target"));
            }
        }
        self.solver.validate().map_err(|e| CliError::schema("/solver", e.to_string()))?;
        self.adam.validate().map_err(|e| CliError::schema("/adam", e.to_string()))?;
        let s = &self.sampling;
        if !(s.u_lo < s.u_hi) || (self.intervention.group == Group::Multiplicative && !(s.u_lo > 0.0)) || s.batch_size == 0 {
            return Err(CliError::schema("/sampling", "need 0 < u_lo < u_hi and a positive batch_size"));
        }
        if self.invariant.hidden.iter().any(|h| *h == 0) {
            return Err(CliError::schema("/invariant/hidden", "layer sizes must be positive"));
        }
        if !(self.grad_check.step > 0.0) {
            return Err(CliError::schema("/grad_check/step", "must be positive"));
        }
        let b = &self.bench;
        if b.dims.iter().any(|d| *d == 0) || b.seeds == 0 || !(b.rho > 0.0 && b.rho < 1.0) || b.methods.is_empty() {
            return Err(CliError::schema("/bench", "need positive dims and seeds, 0 < rho < 1, and at least one method"));
        }
        Ok(())
    }

    fn check_files(&self) -> Result<(), CliError> {
        if let Some(ModelSource::Tables(t)) = &self.model {
            for (key, p) in [("a", &t.a), ("r", &t.r), ("y", &t.y)] {
                if !self.resolve(p).is_file() {
                    return Err(CliError::schema(format!("/model/{key}"), format!("file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// SHA-256 of the resolved config, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("value serializes")))
    }

    /// Sampling settings with the run seed mixed in.
    pub fn run_sampling(&self) -> SamplingConfig {
        SamplingConfig { seed: self.sampling.seed.wrapping_add(self.seed), ..self.sampling.clone() }
    }
}
