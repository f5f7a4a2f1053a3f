//! Command pipelines. Each command runs as a sequence of stages; a failed
//! stage stops the run and is recorded in the manifest.

use std::fmt::Display;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use eqcausal::deq::jacobian_check;
use eqcausal::interventions::{
    apply, apply_parametric, check_compartmentalization, CompartmentPlan, Group, InvariantInterventionSpec, LieElement, Triple,
};
use eqcausal::modelzoo::{
    impacts, leontief_model, motivating_example, pareto_10sector, rebound_3sector, synthetic_leontief, two_compartment_model,
    CompartmentTopology, IoTable, ReboundModel, TwoCompartmentParams,
};
use eqcausal::optimize::{
    build_mlp_twin, evaluate_invariance, mlp_policy, optimize_lie_intervention, pareto_sweep, train_invariant_mlp, Bounds,
    GhgEmploymentLoss, Mlp, OptimizeError, Sampler, SamplingConfig, Trajectory, TrainingReport,
};
use eqcausal::sscm::{check_local_diffeomorphism, solve_equilibrium, solve_equilibrium_at, SscmSpec};
use serde_json::{json, Value};

use crate::bench::run_bench;
use crate::config::{Command, ExperimentConfig, ModelSource, ZooId};
use crate::error::CliError;
use crate::iotable::load_iotable_csv;
use crate::output::{num, OutputDir, RunManifest, StageReport};

/// Reference θ of the built-in motivating example.
pub const MOTIVATING_THETA: [f64; 4] = [1.0, 0.5, 0.3, 0.4];
/// Default pareto bounds on every multiplicative target.
pub const DEFAULT_BOUNDS: [f64; 2] = [0.5, 1.5];

pub enum LoadedModel {
    Motivating(SscmSpec),
    Rebound(ReboundModel),
    Compartments(SscmSpec, CompartmentTopology),
    Table(IoTable, SscmSpec),
}

impl LoadedModel {
    pub fn spec(&self) -> &SscmSpec {
        match self {
            Self::Motivating(s) | Self::Compartments(s, _) | Self::Table(_, s) => s,
            Self::Rebound(m) => &m.spec,
        }
    }

    fn spec_mut(&mut self) -> &mut SscmSpec {
        match self {
            Self::Motivating(s) | Self::Compartments(s, _) | Self::Table(_, s) => s,
            Self::Rebound(m) => &mut m.spec,
        }
    }

    pub fn table(&self) -> Option<&IoTable> {
        match self {
            Self::Table(t, _) => Some(t),
            _ => None,
        }
    }
}

fn zoo(e: impl Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Builds the configured model, with any θ override installed as its
/// reference point.
pub fn load_model(cfg: &ExperimentConfig) -> Result<Option<LoadedModel>, CliError> {
    let Some(source) = &cfg.model else { return Ok(None) };
    let mut model = match source {
        ModelSource::Tables(p) => {
            let table = load_iotable_csv(&cfg.resolve(&p.a), &cfg.resolve(&p.r), &cfg.resolve(&p.y))?;
            let spec = leontief_model(&table, &[]).map_err(zoo)?;
            LoadedModel::Table(table, spec)
        }
        ModelSource::Zoo(id) => match ZooId::parse(id).ok_or_else(|| CliError::schema("/model", format!("unknown id {id:?}")))? {
            ZooId::Motivating => {
                let [t, a, b, g] = MOTIVATING_THETA;
                LoadedModel::Motivating(motivating_example(t, a, b, g).map_err(zoo)?)
            }
            ZooId::Rebound => LoadedModel::Rebound(rebound_3sector()),
            ZooId::TwoCompartment => {
                let (s, t) = two_compartment_model(&TwoCompartmentParams::default()).map_err(zoo)?;
                LoadedModel::Compartments(s, t)
            }
            ZooId::Pareto10 => {
                let t = pareto_10sector();
                let s = leontief_model(&t, &[]).map_err(zoo)?;
                LoadedModel::Table(t, s)
            }
            ZooId::Synthetic(n) => {
                let t = synthetic_leontief(n, 0.9, cfg.seed);
                let s = leontief_model(&t, &[]).map_err(zoo)?;
                LoadedModel::Table(t, s)
            }
        },
    };
    if let Some(theta) = &cfg.theta {
        let spec = model.spec_mut();
        if theta.len() != spec.theta_dim() {
            return Err(CliError::schema("/theta", format!("model has {} parameters, got {}", spec.theta_dim(), theta.len())));
        }
        spec.theta_ref = theta.clone();
    }
    Ok(Some(model))
}

/// References resolved against the loaded model.
struct Plan {
    model: Option<LoadedModel>,
    targets: Vec<usize>,
    objective_row: usize,
    regularizer_row: Option<usize>,
    triple: Option<Triple>,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Plan, CliError> {
    let model = load_model(cfg)?;
    let mut plan = Plan { model: None, targets: vec![], objective_row: 0, regularizer_row: None, triple: None };
    let Some(m) = model else { return Ok(plan) };
    let spec = m.spec();
    let names = spec.names();
    let node = |r: &crate::config::Ref, ptr: &str| {
        r.resolve(&names).ok_or_else(|| CliError::schema(ptr, format!("node {r:?} not found in the model")))
    };
    if matches!(cfg.command, Command::Optimize | Command::Pareto) {
        let table = m.table().ok_or_else(|| {
            CliError::Config(format!("command {} needs an input-output table model", cfg.command.name()))
        })?;
        let row = |r: &crate::config::Ref, ptr: &str| {
            r.resolve(&table.impact_names).ok_or_else(|| CliError::schema(ptr, format!("impact row {r:?} not found in R")))
        };
        plan.objective_row = row(&cfg.loss.objective_row, "/loss/objective_row")?;
        plan.regularizer_row = cfg.loss.regularizer_row.as_ref().map(|r| row(r, "/loss/regularizer_row")).transpose()?;
        plan.targets = if cfg.intervention.targets.is_empty() {
            (0..spec.dim()).collect()
        } else {
            cfg.intervention
                .targets
                .iter()
                .enumerate()
                .map(|(i, r)| node(r, &format!("/intervention/targets/{i}")))
                .collect::<Result<_, _>>()?
        };
        if let Some(init) = &cfg.intervention.initial {
            if init.len() != plan.targets.len() {
                return Err(CliError::schema("/intervention/initial", "needs one value per target"));
            }
        }
        if cfg.command == Command::Pareto && cfg.intervention.group != Group::Multiplicative {
            return Err(CliError::schema("/intervention/group", "pareto sweeps use multiplicative interventions"));
        }
    }
    if cfg.command == Command::Invariant {
        let d = &cfg.invariant;
        let default = match &m {
            LoadedModel::Rebound(r) => Some(Triple::new(r.output_node(r.energy), r.invariant_node())),
            _ => None,
        };
        let pick = |r: &Option<crate::config::Ref>, ptr: &str, fallback: Option<usize>| match r {
            Some(r) => node(r, ptr).map(Some),
            None => Ok(fallback),
        };
        let i = pick(&d.intervened, "/invariant/intervened", default.map(|t| t.intervened))?;
        let j = pick(&d.invariant, "/invariant/invariant", default.map(|t| t.invariant))?;
        let (Some(i), Some(j)) = (i, j) else {
            return Err(CliError::schema("/invariant", "intervened and invariant nodes are required for this model"));
        };
        let k = pick(&d.auxiliary, "/invariant/auxiliary", Some(j))?.expect("fallback given");
        if i == j || i == k {
            return Err(CliError::schema("/invariant", "the intervened node must differ from the invariant and auxiliary nodes"));
        }
        plan.triple = Some(Triple { intervened: i, invariant: j, auxiliary: k });
    }
    if cfg.command == Command::Compartment && !matches!(m, LoadedModel::Compartments(..)) {
        return Err(CliError::Config("command compartment needs the two-compartment model".into()));
    }
    plan.model = Some(m);
    Ok(plan)
}

fn s(e: impl Display) -> String {
    e.to_string()
}

struct Runner {
    out: OutputDir,
    stages: Vec<StageReport>,
    ok: bool,
}

impl Runner {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut OutputDir) -> Result<(T, Value), String>) -> Option<T> {
        if !self.ok {
            return None;
        }
        log::info!("stage {name}");
        let t = Instant::now();
        let r = f(&mut self.out);
        let seconds = t.elapsed().as_secs_f64();
        match r {
            Ok((v, summary)) => {
                self.stages.push(StageReport { name: name.into(), ok: true, seconds, error: None, summary });
                Some(v)
            }
            Err(e) => {
                log::error!("stage {name} failed: {e}");
                self.stages.push(StageReport { name: name.into(), ok: false, seconds, error: Some(e), summary: Value::Null });
                self.ok = false;
                None
            }
        }
    }
}

/// Runs the configured command, writing outputs and `manifest.json` under
/// the output directory. Input problems are errors; stage failures are
/// reported through [`RunManifest::success`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let plan = prepare(cfg)?;
    let started = Instant::now();
    let started_at_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let out = OutputDir::create(&cfg.out_dir).map_err(|source| CliError::Io { path: cfg.out_dir.clone(), source })?;
    let mut run = Runner { out, stages: vec![], ok: true };
    let model = plan.model.as_ref();
    match (cfg.command, model) {
        (Command::Bench, _) => bench(cfg, &mut run),
        (Command::Solve, Some(m)) => solve(cfg, m, &mut run),
        (Command::GradCheck, Some(m)) => grad_check(cfg, m, &mut run),
        (Command::Optimize, Some(m)) => optimize(cfg, m, &plan, &mut run),
        (Command::Pareto, Some(m)) => pareto(cfg, m, &plan, &mut run),
        (Command::Invariant, Some(m)) => invariant(cfg, m, plan.triple.expect("resolved"), &mut run),
        (Command::Compartment, Some(m)) => compartment(cfg, m, &mut run),
        (c, None) => return Err(CliError::schema("/model", format!("required for command {}", c.name()))),
    }
    let manifest = RunManifest {
        command: cfg.command,
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        started_at_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        success: run.ok,
        stages: run.stages,
        outputs: run.out.files().to_vec(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    let path = run.out.root().join("manifest.json");
    std::fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })?;
    Ok(manifest)
}

fn solve(cfg: &ExperimentConfig, m: &LoadedModel, run: &mut Runner) {
    run.stage("solve", |out| {
        let spec = m.spec();
        let sol = solve_equilibrium(spec, &spec.theta_ref, &cfg.solver).map_err(s)?;
        let rows: Vec<Vec<String>> =
            spec.names().iter().zip(&sol.x_star).enumerate().map(|(i, (n, v))| vec![i.to_string(), n.to_string(), num(*v)]).collect();
        out.write_csv("equilibrium.csv", &["index", "node", "value"], &rows)?;
        if let Some(t) = m.table() {
            let imp = impacts(&t.r, &sol.x_star).map_err(s)?;
            let rows: Vec<Vec<String>> = t.impact_names.iter().zip(&imp).map(|(n, v)| vec![n.clone(), num(*v)]).collect();
            out.write_csv("impacts.csv", &["impact", "value"], &rows)?;
        }
        let diffeo = check_local_diffeomorphism(spec, &sol.x_star, &spec.theta_ref, cfg.solver.tol, 1e12).map_err(s)?;
        let r = &sol.report;
        let summary = json!({
            "converged": r.converged,
            "iterations": r.iterations,
            "relative_error": r.relative_error,
            "residual_norm": r.residual_norm,
            "local_diffeomorphism": diffeo,
        });
        out.write_json("solve.json", &summary)?;
        if !r.converged {
            return Err(format!("no convergence in {} iterations (relative error {})", r.iterations, r.relative_error));
        }
        Ok(((), summary))
    });
}

fn grad_check(cfg: &ExperimentConfig, m: &LoadedModel, run: &mut Runner) {
    run.stage("grad-check", |out| {
        let spec = m.spec();
        let d = &cfg.grad_check;
        let r = jacobian_check(spec, &spec.theta_ref, d.columns.as_deref(), &cfg.solver, d.step).map_err(s)?;
        let names = spec.names();
        let mut rows = Vec::new();
        for (c, col) in r.columns.iter().enumerate() {
            for (n, name) in names.iter().enumerate() {
                rows.push(vec![
                    spec.theta_names[*col].clone(),
                    name.to_string(),
                    num(r.implicit[c][n]),
                    num(r.finite_difference[c][n]),
                ]);
            }
        }
        out.write_csv("jacobian.csv", &["theta", "node", "implicit", "finite_difference"], &rows)?;
        let summary = json!({
            "columns": r.columns.len(),
            "max_relative_deviation": r.max_relative_deviation,
            "threshold": d.threshold,
            "step": d.step,
            "solver_tol": cfg.solver.tol,
        });
        out.write_json("grad_check.json", &summary)?;
        if !(r.max_relative_deviation < d.threshold) {
            return Err(format!("max relative deviation {} exceeds {}", r.max_relative_deviation, d.threshold));
        }
        Ok(((), summary))
    });
}

fn write_trajectory(out: &mut OutputDir, names: &[String], traj: &Trajectory) -> Result<(), String> {
    let header: Vec<String> = ["step".to_string(), "loss".into()].into_iter().chain(names.iter().cloned()).collect();
    let rows: Vec<Vec<String>> = traj
        .points
        .iter()
        .map(|p| [p.step.to_string(), num(p.loss)].into_iter().chain(p.values.iter().map(|v| num(*v))).collect())
        .collect();
    out.write_csv("trajectory.csv", &header, &rows)
}

fn optimize(cfg: &ExperimentConfig, m: &LoadedModel, plan: &Plan, run: &mut Runner) {
    let (table, spec) = (m.table().expect("checked"), m.spec());
    run.stage("optimize", |out| {
        let ghg = table.impact_row(plan.objective_row);
        let emp = plan.regularizer_row.map_or_else(|| vec![0.0; spec.dim()], |r| table.impact_row(r));
        let reference = solve_equilibrium(spec, &spec.theta_ref, &cfg.solver).map_err(s)?;
        let e_ref: Vec<f64> = emp.iter().zip(&reference.x_star).map(|(r, x)| r * x).collect();
        let loss = GhgEmploymentLoss { ghg: ghg.clone(), employment: emp.clone(), employment_ref: e_ref.clone(), lambda: cfg.loss.lambda };
        let iv = &cfg.intervention;
        let g0 = match &iv.initial {
            Some(v) => LieElement::new(iv.group, plan.targets.clone(), v.clone()).map_err(s)?,
            None => LieElement::identity(iv.group, plan.targets.clone()),
        };
        let bounds = iv.bounds.map(|[lo, hi]| Bounds { lo, hi });
        let names: Vec<String> = plan.targets.iter().map(|&t| table.sector_names[t].clone()).collect();
        let traj = match optimize_lie_intervention(spec, &g0, bounds, &loss, &cfg.adam, &cfg.solver) {
            Ok(t) => t,
            Err(OptimizeError::SolveFailedDuringOptimization { step, reason, trajectory }) => {
                write_trajectory(out, &names, &trajectory)?;
                return Err(format!("equilibrium solve failed at step {step}: {reason}"));
            }
            Err(e) => return Err(e.to_string()),
        };
        write_trajectory(out, &names, &traj)?;
        let last = traj.last().ok_or("empty trajectory")?;
        let g = LieElement::new(iv.group, plan.targets.clone(), last.values.clone()).map_err(s)?;
        let x = solve_equilibrium(&apply(spec, &g).map_err(s)?, &spec.theta_ref, &cfg.solver).map_err(s)?.x_star;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let summary = json!({
            "steps": traj.points.len(),
            "early_stopped": traj.early_stopped,
            "step_halvings": traj.step_halvings,
            "targets": names,
            "values": last.values,
            "smoothed_loss": last.loss,
            "loss": loss.true_value(&x),
            "objective_reference": dot(&ghg, &reference.x_star),
            "objective": dot(&ghg, &x),
            "regularizer_l1_deviation": emp.iter().zip(&x).zip(&e_ref).map(|((r, x), e)| (r * x - e).abs()).sum::<f64>(),
        });
        out.write_json("optimum.json", &summary)?;
        Ok(((), summary))
    });
}

fn pareto(cfg: &ExperimentConfig, m: &LoadedModel, plan: &Plan, run: &mut Runner) {
    let (table, spec) = (m.table().expect("checked"), m.spec());
    run.stage("pareto", |out| {
        let lambdas = cfg.loss.lambdas.as_ref().expect("validated");
        let [lo, hi] = cfg.intervention.bounds.unwrap_or(DEFAULT_BOUNDS);
        let sweep = pareto_sweep(
            spec,
            &plan.targets,
            &table.impact_row(plan.objective_row),
            &table.impact_row(plan.regularizer_row.expect("validated")),
            lambdas,
            Bounds { lo, hi },
            &cfg.adam,
            &cfg.solver,
        )
        .map_err(s)?;
        let names: Vec<String> = plan.targets.iter().map(|&t| table.sector_names[t].clone()).collect();
        let header: Vec<String> = ["lambda", "ghg_total", "employment_l1_deviation", "final_loss", "iterations"]
            .into_iter()
            .map(String::from)
            .chain(names.iter().map(|n| format!("alpha_{n}")))
            .collect();
        let rows: Vec<Vec<String>> = sweep
            .points
            .iter()
            .map(|p| {
                [num(p.lambda), num(p.ghg_total), num(p.employment_l1_deviation), num(p.final_loss), p.iterations.to_string()]
                    .into_iter()
                    .chain(p.alpha.iter().map(|a| num(*a)))
                    .collect()
            })
            .collect();
        out.write_csv("tradeoff.csv", &header, &rows)?;
        // Largest employment reductions first.
        let mut deltas = Vec::new();
        for p in &sweep.points {
            let mut order: Vec<usize> = (0..p.employment_deltas.len()).collect();
            order.sort_by(|&a, &b| p.employment_deltas[a].total_cmp(&p.employment_deltas[b]));
            for (rank, k) in order.into_iter().enumerate() {
                deltas.push(vec![num(p.lambda), rank.to_string(), table.sector_names[k].clone(), num(p.employment_deltas[k])]);
            }
        }
        out.write_csv("employment_deltas.csv", &["lambda", "rank", "sector", "delta"], &deltas)?;
        let summary = json!({
            "points": sweep.points.len(),
            "monotone": sweep.is_monotone(0.0),
            "failures": sweep.failures,
        });
        out.write_json("sweep.json", &summary)?;
        if !sweep.failures.is_empty() {
            return Err(format!("{} of {} lambda values failed", sweep.failures.len(), lambdas.len()));
        }
        Ok(((), summary))
    });
}

fn training_csv(out: &mut OutputDir, name: &str, rep: &TrainingReport) -> Result<(), String> {
    let rows: Vec<Vec<String>> = rep.losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), num(*l)]).collect();
    out.write_csv(name, &["step", "loss"], &rows)
}

fn policy_json(mlp: &Mlp) -> Value {
    json!({ "spec": mlp.spec, "layers": mlp.layers() })
}

fn held_out(cfg: &ExperimentConfig, sampling: &SamplingConfig) -> SamplingConfig {
    SamplingConfig { seed: cfg.invariant.held_out_seed.wrapping_add(cfg.seed), ..sampling.clone() }
}

fn invariant(cfg: &ExperimentConfig, m: &LoadedModel, triple: Triple, run: &mut Runner) {
    let group = cfg.intervention.group;
    let mut sampling = cfg.run_sampling();
    // Native efficiency control on the rebound model, a fresh one elsewhere.
    let (base, u_controls) = match m {
        LoadedModel::Rebound(r) => {
            sampling.free_theta.get_or_insert_with(|| vec![r.theta_coefficient]);
            (r.spec.clone(), vec![r.efficiency_control])
        }
        _ => match apply_parametric(m.spec(), group, &[triple.intervened]) {
            Ok(v) => v,
            Err(e) => {
                run.stage("build", |_| Err::<((), Value), _>(e.to_string()));
                return;
            }
        },
    };
    let inv = &cfg.invariant;
    let Some((twin, rep)) = run.stage("train", |out| {
        let (twin, mlp) =
            build_mlp_twin(&base, &u_controls, triple, group, &inv.hidden, cfg.seed, &sampling, &cfg.solver).map_err(s)?;
        let rep = train_invariant_mlp(&twin, group, &sampling, &cfg.adam, &cfg.solver).map_err(s)?;
        training_csv(out, "training_loss.csv", &rep)?;
        let trained = Mlp::with_weights(mlp.spec.clone(), rep.weights.clone()).map_err(s)?;
        out.write_json("policy.json", &policy_json(&trained))?;
        let summary = json!({
            "steps": rep.losses.len(),
            "final_loss": rep.final_loss,
            "early_stopped": rep.early_stopped,
            "step_halvings": rep.step_halvings,
        });
        Ok(((twin, rep), summary))
    }) else {
        return;
    };
    run.stage("evaluate", |out| {
        let held = held_out(cfg, &sampling);
        let trained = evaluate_invariance(&twin, &rep.weights, group, &held, inv.held_out_samples, &cfg.solver).map_err(s)?;
        let untrained = evaluate_invariance(&twin, &twin.policy_weights(), group, &held, inv.held_out_samples, &cfg.solver).map_err(s)?;
        let summary = json!({ "triple": triple, "trained": trained, "untrained": untrained });
        out.write_json("invariance.json", &summary)?;
        Ok(((), summary))
    });
    if let LoadedModel::Rebound(r) = m {
        run.stage("energy", |out| {
            let mut rows = Vec::new();
            let (mut backfire, mut below, mut cases) = (0, 0, 0);
            for &eps in &inv.elasticities {
                let mut theta = r.spec.theta_ref.clone();
                theta[r.theta_elasticity[r.target]] = eps;
                let reference = solve_equilibrium(&r.spec, &theta, &cfg.solver).map_err(s)?;
                let e_ref = r.energy_demand(&reference.x_star, &theta, 1.0);
                for &alpha in &inv.alphas {
                    let plain = solve_equilibrium_at(&r.spec, &theta, &r.controls_at(alpha), &cfg.solver).map_err(s)?;
                    let dep = solve_equilibrium_at(&twin.deployed, &theta, &twin.deployed_controls(&[alpha], &rep.weights), &cfg.solver)
                        .map_err(s)?;
                    let e_lie = r.energy_demand(&plain.x_star, &theta, alpha);
                    let e_inv = r.energy_demand(&dep.x_star, &theta, alpha);
                    let j = triple.invariant;
                    let drift = (dep.x_star[j] - reference.x_star[j]).abs() / reference.x_star[j].abs().max(f64::MIN_POSITIVE);
                    cases += 1;
                    backfire += usize::from(e_lie > e_ref);
                    below += usize::from(e_inv < e_ref);
                    rows.push(vec![num(eps), num(alpha), num(e_ref), num(e_lie), num(e_inv), (e_lie > e_ref).to_string(), num(drift)]);
                }
            }
            out.write_csv(
                "energy.csv",
                &["elasticity", "alpha", "reference", "lie", "invariant", "lie_backfire", "invariant_node_deviation"],
                &rows,
            )?;
            Ok(((), json!({ "cases": cases, "lie_backfire_cases": backfire, "invariant_below_reference_cases": below })))
        });
    }
}

fn compartment(cfg: &ExperimentConfig, m: &LoadedModel, run: &mut Runner) {
    let LoadedModel::Compartments(spec, topo) = m else { unreachable!("checked in prepare") };
    let group = cfg.intervention.group;
    let mut sampling = cfg.run_sampling();
    sampling.free_theta.get_or_insert_with(|| topo.free_theta.clone());
    let inv = &cfg.invariant;
    let Some(interventions) = run.stage("train", |out| {
        let mut ivs = Vec::new();
        let mut policies = Vec::new();
        let mut stats = Vec::new();
        let mut rows = Vec::new();
        for (c, &tr) in topo.triples.iter().enumerate() {
            let (model, u) = apply_parametric(spec, group, &[tr.intervened]).map_err(s)?;
            let seed = cfg.seed.wrapping_add(c as u64);
            let own = SamplingConfig { seed: sampling.seed.wrapping_add(c as u64), ..sampling.clone() };
            let (twin, mlp) = build_mlp_twin(&model, &u, tr, group, &inv.hidden, seed, &own, &cfg.solver).map_err(s)?;
            let rep = train_invariant_mlp(&twin, group, &own, &cfg.adam, &cfg.solver).map_err(s)?;
            let eval = evaluate_invariance(&twin, &rep.weights, group, &held_out(cfg, &own), inv.held_out_samples, &cfg.solver)
                .map_err(s)?;
            rows.extend(rep.losses.iter().enumerate().map(|(i, l)| vec![c.to_string(), i.to_string(), num(*l)]));
            let trained = Mlp::with_weights(mlp.spec.clone(), rep.weights.clone()).map_err(s)?;
            policies.push(policy_json(&trained));
            stats.push(json!({ "compartment": c, "final_loss": rep.final_loss, "held_out": eval }));
            let policy = mlp_policy(spec, tr.auxiliary, 1, &trained).map_err(s)?;
            ivs.push(InvariantInterventionSpec { triple: tr, group, policy });
        }
        out.write_csv("training_loss.csv", &["compartment", "step", "loss"], &rows)?;
        out.write_json("policies.json", &policies)?;
        Ok((ivs, json!(stats)))
    }) else {
        return;
    };
    run.stage("check", |out| {
        let plan = CompartmentPlan { partition: topo.partition.clone(), interventions };
        let mut sampler = Sampler::new(spec, &held_out(cfg, &sampling), group).map_err(s)?;
        let thetas: Vec<Vec<f64>> = (0..inv.theta_samples).map(|_| sampler.theta()).collect();
        let report = check_compartmentalization(spec, &plan, &thetas, &inv.grid, &cfg.solver).map_err(s)?;
        out.write_json("compartment_report.json", &report)?;
        let summary = json!({
            "structural_ok": report.structural_ok,
            "max_cross_deviation": report.max_cross_deviation(),
            "intervened_range": report.compartments.iter().map(|c| c.intervened_range).collect::<Vec<_>>(),
        });
        Ok(((), summary))
    });
}

fn bench(cfg: &ExperimentConfig, run: &mut Runner) {
    run.stage("bench", |out| {
        let (runs, cells) = run_bench(&cfg.bench, &cfg.solver, cfg.seed).map_err(s)?;
        let rows: Vec<Vec<String>> = cells
            .iter()
            .map(|c| {
                vec![
                    c.dim.to_string(),
                    c.method.clone(),
                    c.runs.to_string(),
                    c.converged.to_string(),
                    num(c.mean_relative_error),
                    num(c.std_relative_error),
                    num(c.mean_solution_error),
                    num(c.std_solution_error),
                    num(c.mean_iterations),
                    num(c.std_iterations),
                ]
            })
            .collect();
        out.write_csv(
            "bench.csv",
            &[
                "dim",
                "method",
                "runs",
                "converged",
                "mean_relative_error",
                "std_relative_error",
                "mean_solution_error",
                "std_solution_error",
                "mean_iterations",
                "std_iterations",
            ],
            &rows,
        )?;
        let raw: Vec<Vec<String>> = runs
            .iter()
            .map(|r| {
                vec![
                    r.dim.to_string(),
                    r.seed.to_string(),
                    r.method.clone(),
                    r.iterations.to_string(),
                    r.converged.to_string(),
                    num(r.relative_error),
                    num(r.solution_error),
                ]
            })
            .collect();
        out.write_csv("bench_runs.csv", &["dim", "seed", "method", "iterations", "converged", "relative_error", "solution_error"], &raw)?;
        let summary = json!({
            "runs": runs.len(),
            "all_converged": runs.iter().all(|r| r.converged),
            "max_relative_error": runs.iter().map(|r| r.relative_error).fold(0.0, f64::max),
        });
        Ok(((), summary))
    });
}
