use eqcausal::fixedpoint::{self, anderson_solve, forward_iterate, Method, SolveError, SolverConfig};
use eqcausal::linalg;
use eqcausal::modelzoo::{hawkins_simon_check, leontief_closed_form, leontief_model, synthetic_leontief, IoTable};
use eqcausal::sscm::solve_equilibrium;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[derive(Debug)]
struct Never;

impl From<SolveError> for Never {
    fn from(e: SolveError) -> Self {
        panic!("solver error: {e}")
    }
}

fn affine<'a>(a: &'a DMatrix<f64>, y: &[f64]) -> impl FnMut(&[f64]) -> Result<Vec<f64>, Never> + 'a {
    let y = DVector::from_column_slice(y);
    move |x: &[f64]| Ok((a * DVector::from_column_slice(x) + &y).as_slice().to_vec())
}

/// Random matrix rescaled to spectral norm `s`, so `x ↦ Ax + y` contracts in
/// the Euclidean norm.
fn contraction(n: usize, entries: &[f64], s: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |i, j| entries[(i * n + j) % entries.len()] + if i == j { 0.3 } else { 0.0 });
    let norm = linalg::singular_values(&m)[0];
    m * (s / norm)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    eqcausal::deq::relative_deviation(a, b)
}

fn problem() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, f64)> {
    (2usize..40).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(-1.0..1.0f64, n * n),
            prop::collection::vec(0.5..1.5f64, n),
            0.1..0.8f64,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_and_anderson_agree_with_inverse((n, entries, y, s) in problem()) {
        let a = contraction(n, &entries, s);
        let exact = linalg::solve(&linalg::identity_minus(&a), &y).unwrap();
        let cfg = SolverConfig::default();
        for method in [Method::Forward, Method::Anderson] {
            let c = SolverConfig { method, ..cfg.clone() };
            let r = fixedpoint::solve(affine(&a, &y), &vec![0.0; n], &c).unwrap();
            prop_assert!(r.converged);
            prop_assert!(r.relative_error <= c.tol);
            prop_assert!(r.iterations <= c.max_iter);
            prop_assert!(max_rel(&r.solution, &exact) < 10.0 * c.tol, "{method:?}: {}", max_rel(&r.solution, &exact));
        }
    }

    #[test]
    fn anderson_is_exact_on_affine_maps_with_full_history(
        (n, entries, y, s) in (2usize..8).prop_flat_map(|n| (
            Just(n),
            prop::collection::vec(-1.0..1.0f64, n * n),
            prop::collection::vec(0.5..1.5f64, n),
            0.5..0.9f64,
        ))
    ) {
        let a = contraction(n, &entries, s);
        let cfg = SolverConfig { m: n + 1, beta: 1.0, tol: 1e-7, ..SolverConfig::default() };
        let r = anderson_solve(affine(&a, &y), &vec![0.0; n], &cfg).unwrap();
        prop_assert!(r.converged, "{r:?}");
        // Full-history Anderson with β = 1 is GMRES on (I − A): exact after n + 1 residuals.
        prop_assert!(r.iterations <= n + 2, "{} iterations for n = {n}", r.iterations);
    }

    #[test]
    fn single_history_anderson_is_forward_iteration((n, entries, y, s) in problem()) {
        let a = contraction(n, &entries, s);
        let tight = SolverConfig::default().with_tol(1e-8);
        let fwd = forward_iterate(affine(&a, &y), &vec![0.0; n], &tight).unwrap();
        let and = anderson_solve(affine(&a, &y), &vec![0.0; n], &SolverConfig { m: 1, beta: 1.0, ..tight }).unwrap();
        prop_assert_eq!(fwd.iterations, and.iterations);
        prop_assert_eq!(fwd.solution, and.solution);
    }

    #[test]
    fn hawkins_simon_implies_forward_convergence(
        (n, entries, y, rho) in (2usize..30).prop_flat_map(|n| (
            Just(n),
            prop::collection::vec(0.0..1.0f64, n * n),
            prop::collection::vec(0.0..2.0f64, n),
            0.05..0.95f64,
        ))
    ) {
        let raw = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
        let a = &raw * (rho / linalg::spectral_radius(&raw).max(1e-12));
        prop_assume!(hawkins_simon_check(&a));
        let table = IoTable::new(a.clone(), DMatrix::from_element(1, n, 1.0), y.clone()).unwrap();
        let spec = leontief_model(&table, &[]).unwrap();
        let sol = solve_equilibrium(&spec, &spec.theta_ref, &SolverConfig::forward()).unwrap();
        prop_assert!(sol.report.converged);
        let exact = leontief_closed_form(&a, &y).unwrap();
        prop_assert!(exact.iter().all(|v| *v >= -1e-12));
        prop_assert!(max_rel(&sol.x_star, &exact) < 10.0 * 1e-4 / (1.0 - rho));
    }

    #[test]
    fn hawkins_simon_fails_beyond_unit_radius(
        (n, entries) in (2usize..12).prop_flat_map(|n| (Just(n), prop::collection::vec(0.01..1.0f64, n * n))),
        rho in 1.05..2.0f64,
    ) {
        let raw = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
        let a = &raw * (rho / linalg::spectral_radius(&raw));
        prop_assert!(!hawkins_simon_check(&a));
    }

    #[test]
    fn seeded_instances_and_solves_are_reproducible(n in 2usize..60, seed in any::<u64>()) {
        let t1 = synthetic_leontief(n, 0.9, seed);
        let t2 = synthetic_leontief(n, 0.9, seed);
        prop_assert_eq!(&t1.a, &t2.a);
        prop_assert_eq!(&t1.y, &t2.y);
        let spec = leontief_model(&t1, &[]).unwrap();
        let cfg = SolverConfig::default();
        let s1 = solve_equilibrium(&spec, &spec.theta_ref, &cfg).unwrap();
        let s2 = solve_equilibrium(&spec, &spec.theta_ref, &cfg).unwrap();
        prop_assert_eq!(s1.x_star, s2.x_star);
        prop_assert_eq!(s1.report.iterations, s2.report.iterations);
    }
}

#[test]
fn non_convergence_still_reports() {
    let a = DMatrix::from_row_slice(1, 1, &[0.999]);
    let cfg = SolverConfig { max_iter: 3, ..SolverConfig::forward() };
    let r = forward_iterate(affine(&a, &[1.0]), &[0.0], &cfg).unwrap();
    assert!(!r.converged);
    assert_eq!(r.iterations, 3);
}
