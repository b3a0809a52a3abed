//! Dense linear algebra, normalization, softmax, a Jacobi eigen solver and
//! seeded random streams. Everything is `f64`.

mod eig;
mod mat;
mod rng;

pub use eig::{sym_eig, SymEigen};
pub use mat::{dot, norm, Mat};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;
/// Tolerance used when asserting that rows are unit-normalized.
pub const UNIT_TOL: f64 = 1e-9;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= MIN_NORM) {
        return Err(Error::ZeroVector(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalizes every row, returning the normalized matrix and the original row norms.
pub fn normalize_rows(m: &Mat) -> Result<(Mat, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if !(n >= MIN_NORM) {
            return Err(Error::ZeroVector(n));
        }
        row.iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Checks that every row has unit norm within [`UNIT_TOL`].
pub fn assert_unit_rows(m: &Mat) -> Result<()> {
    for (row, r) in m.row_iter().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotNormalized { row, norm: n });
        }
    }
    Ok(())
}

/// Pairwise cosine similarity of unit-normalized rows: `A · Bᵀ`.
pub fn cosine_sim_matrix(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(Error::DimMismatch {
            expected: a.cols(),
            got: b.cols(),
        });
    }
    assert_unit_rows(a)?;
    assert_unit_rows(b)?;
    a.matmul_t(b)
}

/// Backpropagates a gradient on `u = h / ||h||` to a gradient on `h`.
pub fn normalize_backward(unit: &[f64], h_norm: f64, grad_unit: &[f64], out: &mut [f64]) {
    let proj = dot(grad_unit, unit);
    for ((o, g), u) in out.iter_mut().zip(grad_unit).zip(unit) {
        *o = (g - proj * u) / h_norm;
    }
}

/// Row-wise version of [`normalize_backward`].
pub fn normalize_rows_backward(unit: &Mat, norms: &[f64], grad_unit: &Mat) -> Mat {
    let mut out = Mat::zeros(unit.rows(), unit.cols());
    for i in 0..unit.rows() {
        normalize_backward(unit.row(i), norms[i], grad_unit.row(i), out.row_mut(i));
    }
    out
}

/// Temperature softmax, `softmax(logits / temperature)`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// Temperature log-softmax.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&x| (x - max) / temperature).collect();
    let lse = shifted.iter().map(|x| x.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|x| x - lse).collect())
}
