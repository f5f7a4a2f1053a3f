use eqcausal::diffcore::GraphBuilder;
use eqcausal::fixedpoint::SolverConfig;
use eqcausal::interventions::{build_invariant_model, Group, InvariantInterventionSpec, LieElement, Policy, Triple};
use eqcausal::modelzoo::{leontief_model, motivating_example, rebound_3sector, synthetic_leontief};
use eqcausal::optimize::{
    build_mlp_twin, evaluate_invariance, optimize_lie_intervention, pareto_sweep, train_invariant_mlp, AdamConfig, Bounds,
    LinearCost, SamplingConfig, SquaredDistance,
};
use eqcausal::sscm::solve_equilibrium_at;
use proptest::prelude::*;

fn solver() -> SolverConfig {
    SolverConfig::default().with_tol(1e-10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn descent_on_a_quadratic_surrogate_converges(seed in any::<u64>(), target in prop::collection::vec(0.7..1.3f64, 3)) {
        let spec = leontief_model(&synthetic_leontief(3, 0.5, seed), &[]).unwrap();
        let (model, controls) = eqcausal::interventions::apply_parametric(&spec, Group::Multiplicative, &[0, 1, 2]).unwrap();
        let mut c = model.control_ref();
        for (&i, &v) in controls.iter().zip(&target) {
            c[i] = v;
        }
        let goal = solve_equilibrium_at(&model, &spec.theta_ref, &c, &solver()).unwrap().x_star;
        let loss = SquaredDistance { target: goal };
        let adam = AdamConfig { lr: 1e-2, iterations: 4000, ..AdamConfig::default() };
        let g0 = LieElement::identity(Group::Multiplicative, vec![0, 1, 2]);
        let traj = optimize_lie_intervention(&spec, &g0, None, &loss, &adam, &solver()).unwrap();
        let losses: Vec<f64> = traj.points.iter().map(|p| p.loss).collect();
        let last = *losses.last().unwrap();
        prop_assert!(last < 1e-8, "final loss {last}");
        // Eventually monotone: nothing in the second half exceeds its start.
        let tail = &losses[losses.len() / 2..];
        prop_assert!(tail.iter().all(|l| *l <= tail[0] + 1e-12));
        let final_values = &traj.points.last().unwrap().values;
        prop_assert!(final_values.iter().zip(&target).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn multiplicative_values_stay_positive(seed in any::<u64>(), start in prop::collection::vec(0.2..1.3f64, 4)) {
        let table = synthetic_leontief(4, 0.7, seed);
        let spec = leontief_model(&table, &[]).unwrap();
        let g0 = LieElement::new(Group::Multiplicative, vec![0, 1, 2, 3], start).unwrap();
        let loss = LinearCost { c: vec![1.0; 4] };
        let adam = AdamConfig { lr: 0.05, iterations: 300, ..AdamConfig::default() };
        let traj = optimize_lie_intervention(&spec, &g0, None, &loss, &adam, &SolverConfig::default()).unwrap();
        prop_assert!(traj.points.iter().all(|p| p.values.iter().all(|v| *v > 0.0)));
        prop_assert!(traj.points.last().unwrap().loss < traj.points[0].loss);
    }
}

#[test]
fn lie_optimization_is_bit_reproducible() {
    let spec = leontief_model(&synthetic_leontief(5, 0.8, 11), &[]).unwrap();
    let g0 = LieElement::identity(Group::Multiplicative, vec![0, 2, 4]);
    let loss = LinearCost { c: vec![1.0, 0.5, 2.0, 0.1, 1.0] };
    let adam = AdamConfig { iterations: 200, ..AdamConfig::default() };
    let bounds = Some(Bounds { lo: 0.5, hi: 1.5 });
    let a = optimize_lie_intervention(&spec, &g0, bounds, &loss, &adam, &SolverConfig::default()).unwrap();
    let b = optimize_lie_intervention(&spec, &g0, bounds, &loss, &adam, &SolverConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invariant_training_is_bit_reproducible() {
    let m = rebound_3sector();
    let j = m.invariant_node();
    let triple = Triple { intervened: 0, invariant: j, auxiliary: j };
    let sampling = SamplingConfig { free_theta: Some(vec![m.theta_coefficient]), u_lo: 0.6, u_hi: 1.0, ..Default::default() };
    let adam = AdamConfig { iterations: 30, ..AdamConfig::default() };
    let run = || {
        let (twin, _) =
            build_mlp_twin(&m.spec, &[m.efficiency_control], triple, Group::Multiplicative, &[8, 4], 5, &sampling, &solver())
                .unwrap();
        train_invariant_mlp(&twin, Group::Multiplicative, &sampling, &adam, &solver()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn lower_bound_is_optimal_without_regularization() {
    let table = synthetic_leontief(6, 0.8, 3);
    let spec = leontief_model(&table, &[]).unwrap();
    let targets: Vec<usize> = (0..6).collect();
    let ghg = table.impact_row(0);
    let sweep = pareto_sweep(
        &spec,
        &targets,
        &ghg,
        &vec![1.0; 6],
        &[0.0],
        Bounds { lo: 0.5, hi: 1.5 },
        &AdamConfig { lr: 1e-2, iterations: 2000, ..AdamConfig::default() },
        &SolverConfig::default(),
    )
    .unwrap();
    let p = &sweep.points[0];
    assert!(p.alpha.iter().all(|a| (a - 0.5).abs() < 1e-9), "{:?}", p.alpha);
}

/// Policy `z = γ·y·u^w`, with `w = −1` the exact invariant choice.
fn power_policy(spec: &eqcausal::sscm::SscmSpec) -> Policy {
    let node = &spec.nodes[2];
    let mut b = GraphBuilder::new();
    let y = b.input("parents", node.parents.len());
    let gamma = b.input("theta", node.theta.len());
    let u = b.input("u", 1);
    let w = b.input("weights", 1);
    let lu = b.log(u);
    let e = b.mul(w, lu);
    let pw = b.exp(e);
    let gy = b.mul(gamma, y);
    let out = b.mul(gy, pw);
    Policy::new(b.finish(out).unwrap(), vec![0.0]).unwrap()
}

#[test]
fn expressive_policy_trains_to_exact_invariance() {
    let spec = motivating_example(1.0, 0.5, 0.3, 0.4).unwrap();
    let plan = InvariantInterventionSpec { triple: Triple::new(1, 2), group: Group::Multiplicative, policy: power_policy(&spec) };
    let twin = build_invariant_model(&spec, &plan).unwrap();
    let sampling = SamplingConfig { u_lo: 0.5, u_hi: 2.0, ..Default::default() };
    let adam = AdamConfig { lr: 1e-2, iterations: 3000, ..AdamConfig::default() };
    let report = train_invariant_mlp(&twin, Group::Multiplicative, &sampling, &adam, &solver()).unwrap();
    assert!(report.final_loss < 1e-6, "final loss {}", report.final_loss);
    assert!((report.weights[0] + 1.0).abs() < 1e-3, "{:?}", report.weights);
    let held = SamplingConfig { seed: 77, ..sampling };
    let eval = evaluate_invariance(&twin, &report.weights, Group::Multiplicative, &held, 100, &solver()).unwrap();
    assert!(eval.max_relative_deviation < 1e-3, "{eval:?}");
}
