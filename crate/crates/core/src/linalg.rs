//! Dense linear-algebra helpers over nalgebra.

use nalgebra::{DMatrix, DVector};

/// Solves `a·x = b` by LU with partial pivoting; `None` when `a` is singular.
pub fn solve(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let lu = a.clone().lu();
    lu.solve(&DVector::from_row_slice(b)).map(|x| x.iter().copied().collect())
}

pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&max), Some(&min)) if min > 0.0 => max / min,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Smallest singular value among the `min(rows, cols)` available.
pub fn sigma_min(a: &DMatrix<f64>) -> f64 {
    singular_values(a).last().copied().unwrap_or(0.0)
}

/// Numerical rank with an absolute singular-value threshold.
pub fn rank(a: &DMatrix<f64>, threshold: f64) -> usize {
    singular_values(a).iter().filter(|s| **s > threshold).count()
}

/// Spectral radius from the eigenvalues of the Schur form.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Euclidean norm, rescaled so huge entries do not overflow.
pub fn norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * v.iter().map(|x| (x / scale) * (x / scale)).sum::<f64>().sqrt()
}

pub fn identity_minus(a: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::identity(a.nrows(), a.ncols()) - a
}
