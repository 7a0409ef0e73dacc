//! Small numeric helpers shared across estimators.
//!
//! All reductions that feed an estimate go through [`pairwise_sum`] so the
//! summation tree depends only on the length of the input, never on how work
//! was split across threads.

use nalgebra::{DMatrix, SymmetricEigen};

const PAIRWISE_LEAF: usize = 16;

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise sum of an iterator of terms, materialized first.
pub fn pairwise_sum_iter<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let v: Vec<f64> = it.into_iter().collect();
    pairwise_sum(&v)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss = pairwise_sum_iter(xs.iter().map(|x| (x - m) * (x - m)));
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Element-wise sum of equally sized matrices using a pairwise tree.
pub fn pairwise_matrix_sum(parts: &[DMatrix<f64>], nrows: usize, ncols: usize) -> DMatrix<f64> {
    match parts.len() {
        0 => DMatrix::zeros(nrows, ncols),
        1 => parts[0].clone(),
        n => {
            let mid = n / 2;
            pairwise_matrix_sum(&parts[..mid], nrows, ncols)
                + pairwise_matrix_sum(&parts[mid..], nrows, ncols)
        }
    }
}

/// Force exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Clip negative eigenvalues at zero. Returns the repaired matrix and whether
/// any eigenvalue was below `-tol * max(1, largest |eigenvalue|)`.
pub fn psd_floor(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let negative = eig.eigenvalues.iter().any(|&v| v < -tol * scale);
    if !negative {
        return (sym, false);
    }
    let floored = eig.eigenvalues.map(|v| v.max(0.0));
    let repaired =
        &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    (symmetrize(&repaired), true)
}
