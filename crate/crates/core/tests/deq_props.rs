use eqcausal::deq::{implicit_vjp, jacobian_check, jacobian_wrt_controls, jacobian_wrt_theta, relative_deviation};
use eqcausal::fixedpoint::SolverConfig;
use eqcausal::linalg;
use eqcausal::modelzoo::{
    leontief_closed_form, leontief_model, motivating_closed_form, motivating_example, rebound_3sector, synthetic_leontief,
    DemandCurve,
};
use eqcausal::sscm::{solve_equilibrium, solve_equilibrium_at};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tight() -> SolverConfig {
    SolverConfig::default().with_tol(1e-10)
}

/// θ for the motivating example inside its box with `βγ` bounded away from 1.
fn motivating_theta() -> impl Strategy<Value = Vec<f64>> {
    (0.5..2.0f64, 0.1..1.0f64, 0.0..0.9f64, 0.0..0.9f64).prop_map(|(t, a, b, g)| vec![t, a, b, g])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn motivating_equilibrium_matches_closed_form(theta in motivating_theta(), uy in 0.5..2.0f64, uz in 0.5..2.0f64) {
        prop_assume!(uy * uz * theta[2] * theta[3] < 0.9);
        let spec = motivating_example(theta[0], theta[1], theta[2], theta[3]).unwrap();
        let cfg = SolverConfig::default();
        let sol = solve_equilibrium_at(&spec, &theta, &[uy, uz], &cfg).unwrap();
        let exact = motivating_closed_form(&theta, uy, uz).unwrap();
        prop_assert!(relative_deviation(&sol.x_star, &exact) < 10.0 * cfg.tol);
    }

    #[test]
    fn motivating_sensitivities_match_differentiated_closed_form(theta in motivating_theta()) {
        let spec = motivating_example(theta[0], theta[1], theta[2], theta[3]).unwrap();
        let sol = solve_equilibrium(&spec, &theta, &tight()).unwrap();
        let jac = jacobian_wrt_theta(&spec, &sol, &tight()).unwrap();
        let [t, a, b, g] = [theta[0], theta[1], theta[2], theta[3]];
        let den = 1.0 - b * g;
        // y* = ατ/(1 − βγ), z* = γ·y*.
        let y = a * t / den;
        let dy = [a / den, t / den, y * g / den, y * b / den];
        let dz = [g * dy[0], g * dy[1], g * dy[2], y + g * dy[3]];
        let want = DMatrix::from_fn(3, 4, |r, c| match r {
            0 => if c == 0 { 1.0 } else { 0.0 },
            1 => dy[c],
            _ => dz[c],
        });
        prop_assert!(relative_deviation(jac.as_slice(), want.as_slice()) < 1e-4);
    }

    #[test]
    fn adjoint_bilinear_form_matches_jacobian(
        n in 2usize..20, seed in any::<u64>(),
        v in prop::collection::vec(-1.0..1.0f64, 20), w in prop::collection::vec(-1.0..1.0f64, 20)
    ) {
        let table = synthetic_leontief(n, 0.8, seed);
        let spec = leontief_model(&table, &[]).unwrap();
        let cfg = tight();
        let sol = solve_equilibrium(&spec, &spec.theta_ref, &cfg).unwrap();
        let (v, w) = (&v[..n], &w[..n]);
        let g = implicit_vjp(&spec, &sol, v, &cfg).unwrap();
        let via_vjp: f64 = g.grad_theta.iter().zip(w).map(|(a, b)| a * b).sum();
        let jac = jacobian_wrt_theta(&spec, &sol, &cfg).unwrap();
        let via_jac = (DVector::from_column_slice(v).transpose() * jac * DVector::from_column_slice(w))[(0, 0)];
        prop_assert!((via_vjp - via_jac).abs() <= 1e-8 * (1.0 + via_jac.abs()));
    }

    #[test]
    fn leontief_sensitivities_are_the_leontief_inverse(n in 2usize..30, seed in any::<u64>()) {
        let table = synthetic_leontief(n, 0.9, seed);
        let spec = leontief_model(&table, &[]).unwrap();
        let sol = solve_equilibrium(&spec, &spec.theta_ref, &tight()).unwrap();
        let jac = jacobian_wrt_theta(&spec, &sol, &tight()).unwrap();
        let inv = linalg::identity_minus(&table.a).try_inverse().unwrap();
        prop_assert!(relative_deviation(jac.as_slice(), inv.as_slice()) < 1e-6);
        let x = leontief_closed_form(&table.a, &table.y).unwrap();
        prop_assert!(relative_deviation(&sol.x_star, &x) < 1e-8);
    }

    #[test]
    fn cost_gradient_is_transposed_inverse_times_cost(
        n in 2usize..30, seed in any::<u64>(), c in prop::collection::vec(0.0..1.0f64, 30)
    ) {
        let table = synthetic_leontief(n, 0.9, seed);
        let spec = leontief_model(&table, &[]).unwrap();
        let sol = solve_equilibrium(&spec, &spec.theta_ref, &tight()).unwrap();
        let g = implicit_vjp(&spec, &sol, &c[..n], &tight()).unwrap();
        let want = linalg::solve(&linalg::identity_minus(&table.a.transpose()), &c[..n]).unwrap();
        prop_assert!(relative_deviation(&g.grad_theta, &want) < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences_on_leontief(n in 2usize..50, seed in any::<u64>()) {
        let table = synthetic_leontief(n, 0.9, seed);
        let spec = leontief_model(&table, &[(0, 1 % n), (n - 1, 0)]).unwrap();
        let cols: Vec<usize> = (0..spec.theta_dim()).step_by(1 + n / 8).chain([n, n + 1]).collect();
        let r = jacobian_check(&spec, &spec.theta_ref, Some(&cols), &SolverConfig::default().with_tol(1e-8), 1e-4).unwrap();
        prop_assert!(r.max_relative_deviation < 1e-3, "{}", r.max_relative_deviation);
    }

    #[test]
    fn rebound_jacobian_matches_finite_differences(a_ej in 0.3..0.5f64, eps_t in 0.5..3.0f64) {
        let m = rebound_3sector();
        let mut theta = m.spec.theta_ref.clone();
        theta[m.theta_coefficient] = a_ej;
        theta[m.theta_elasticity[1]] = eps_t;
        let r = jacobian_check(&m.spec, &theta, None, &SolverConfig::default().with_tol(1e-8), 1e-4).unwrap();
        prop_assert!(r.max_relative_deviation < 1e-3, "{}", r.max_relative_deviation);
        let cf = m.closed_form(&theta, 1.0).unwrap();
        let sol = solve_equilibrium(&m.spec, &theta, &tight()).unwrap();
        prop_assert!(relative_deviation(&sol.x_star, &cf) < 1e-8);
    }

    #[test]
    fn efficiency_rebound_grows_with_target_elasticity(e1 in 0.0..4.0f64, e2 in 0.0..4.0f64, alpha in 0.5..0.95f64) {
        let m = rebound_3sector();
        let energy = |eps: f64| {
            let mut theta = m.spec.theta_ref.clone();
            theta[m.theta_elasticity[1]] = eps;
            let x = m.closed_form(&theta, alpha).unwrap();
            m.energy_demand(&x, &theta, alpha)
        };
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(energy(lo) <= energy(hi) + 1e-12);
    }

    #[test]
    fn demand_curves_decrease_in_price(y0 in 0.1..5.0f64, p0 in 0.1..5.0f64, eps in 0.01..4.0f64, p in 0.1..5.0f64, dp in 0.01..1.0f64) {
        let c = DemandCurve { y0, p0, elasticity: eps };
        prop_assert!(c.demand(p + dp) < c.demand(p));
        prop_assert!((c.demand(p0) - y0).abs() <= 1e-12 * y0);
    }
}

#[test]
fn motivating_oracle_over_many_thetas() {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut next = move || rng.random::<f64>();
    for _ in 0..100 {
        let theta = vec![0.5 + 1.5 * next(), 0.1 + 0.9 * next(), 0.9 * next(), 0.9 * next()];
        let spec = motivating_example(theta[0], theta[1], theta[2], theta[3]).unwrap();
        let sol = solve_equilibrium(&spec, &theta, &cfg).unwrap();
        let exact = motivating_closed_form(&theta, 1.0, 1.0).unwrap();
        assert!(relative_deviation(&sol.x_star, &exact) < 10.0 * cfg.tol);
        let ju = jacobian_wrt_controls(&spec, &sol, &cfg).unwrap();
        assert_eq!(ju.shape(), (3, 2));
    }
}
