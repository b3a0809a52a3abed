use serde::{Deserialize, Serialize};

use super::{DescriptorSet, GroundTruth};
use crate::error::{Error, Result};
use crate::numerics::{dot, normalize_rows, sym_eig, Mat};

/// Floor applied before taking logs of eigenvalues.
pub const LOG_FLOOR: f64 = 1e-300;
pub const GAP_BIN_WIDTH: f64 = 0.05;
const GAP_BINS: usize = 40;
/// Eigenvalues are floored here before inversion during whitening.
const WHITEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Eigenvalues of the descriptor covariance, descending, clamped at 0.
    pub singular_values: Vec<f64>,
    pub log_values: Vec<f64>,
    pub rank: usize,
    pub rpr: f64,
}

impl SpectrumReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,sigma,log_sigma\n");
        for (i, (s, l)) in self.singular_values.iter().zip(&self.log_values).enumerate() {
            out.push_str(&format!("{i},{s},{l}\n"));
        }
        out
    }
}

/// Spectrum of the covariance of mean-centered descriptors. Rank counts
/// eigenvalues above `tol_rel · σ_max`.
pub fn spectrum(descs: &DescriptorSet, tol_rel: f64) -> Result<SpectrumReport> {
    let (n, d) = descs.matrix().shape();
    if n < 2 {
        return Err(Error::DegenerateSet(n));
    }
    if n < d {
        log::warn!("spectrum of {n} descriptors in dimension {d}; rank is at most {}", n - 1);
    }
    let eig = sym_eig(&descs.matrix().covariance()?)?;
    let values: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let top = values.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 {
        values.iter().filter(|&&v| v > tol_rel * top).count()
    } else {
        0
    };
    Ok(SpectrumReport {
        log_values: values.iter().map(|v| v.max(LOG_FLOOR).ln()).collect(),
        singular_values: values,
        rank,
        rpr: rank as f64 / d as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// `(query_id, cos(q, gt) − max_{r ≠ gt} cos(q, r))`.
    pub gaps: Vec<(u64, f64)>,
    pub mean: f64,
    /// Counts over bins of width 0.05 spanning [−1, 1]; values outside land in the end bins.
    pub histogram: Vec<usize>,
}

impl GapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.histogram.iter().enumerate() {
            let lo = -1.0 + i as f64 * GAP_BIN_WIDTH;
            out.push_str(&format!("{lo:.2},{:.2},{c}\n", lo + GAP_BIN_WIDTH));
        }
        out
    }
}

/// Similarity gap between each query's ground-truth reference and its nearest
/// other reference.
pub fn similarity_gap(queries: &DescriptorSet, refs: &DescriptorSet, gt: &GroundTruth) -> Result<GapReport> {
    super::check_dims(queries, refs)?;
    let ref_row: std::collections::BTreeMap<u64, usize> =
        refs.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut gaps = Vec::new();
    for (qi, &qid) in queries.ids().iter().enumerate() {
        let Some(target) = gt.get(&qid) else { continue };
        let Some(&ti) = ref_row.get(target) else { continue };
        let q = queries.matrix().row(qi);
        let nearest_other = (0..refs.len())
            .filter(|&ri| ri != ti)
            .map(|ri| dot(q, refs.matrix().row(ri)))
            .fold(f64::NEG_INFINITY, f64::max);
        if nearest_other == f64::NEG_INFINITY {
            log::warn!("query {qid}: no negative reference, gap undefined");
            continue;
        }
        gaps.push((qid, dot(q, refs.matrix().row(ti)) - nearest_other));
    }
    if gaps.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let mut histogram = vec![0usize; GAP_BINS];
    for &(_, g) in &gaps {
        let bin = ((g + 1.0) / GAP_BIN_WIDTH).floor();
        histogram[bin.clamp(0.0, (GAP_BINS - 1) as f64) as usize] += 1;
    }
    let mean = gaps.iter().map(|g| g.1).sum::<f64>() / gaps.len() as f64;
    Ok(GapReport { gaps, mean, histogram })
}

/// `x ↦ Λ_t^{−1/2} V_tᵀ (x − μ)` from the top `t` eigenpairs of a fit set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaWhitening {
    pub mean: Vec<f64>,
    /// `t × d`, rows already scaled by `λ^{−1/2}`.
    pub projection: Mat,
}

impl PcaWhitening {
    pub fn fit(fit: &DescriptorSet, target_dim: usize) -> Result<Self> {
        let (n, d) = fit.matrix().shape();
        if target_dim == 0 || target_dim > d {
            return Err(Error::InvalidSizes(format!("target_dim {target_dim} for dimension {d}")));
        }
        if n <= d {
            return Err(Error::FitTooSmall { rows: n, dim: d });
        }
        let eig = sym_eig(&fit.matrix().covariance()?)?;
        if eig.values[0] < WHITEN_FLOOR {
            return Err(Error::RankDeficientFit(eig.values[0]));
        }
        let mut projection = Mat::zeros(target_dim, d);
        for i in 0..target_dim {
            let s = 1.0 / eig.values[i].max(WHITEN_FLOOR).sqrt();
            for (p, v) in projection.row_mut(i).iter_mut().zip(eig.vector(i)) {
                *p = s * v;
            }
        }
        Ok(Self {
            mean: fit.matrix().col_mean(),
            projection,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.projection.rows()
    }

    /// Whitened rows, not re-normalized.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.mean.len() {
            return Err(Error::DimMismatch {
                expected: self.mean.len(),
                got: x.cols(),
            });
        }
        let mut centered = x.clone();
        for i in 0..centered.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul_t(&self.projection)
    }

    /// Whitened and re-normalized descriptors, ready for cosine search.
    pub fn apply_set(&self, set: &DescriptorSet) -> Result<DescriptorSet> {
        let w = self.apply(set.matrix())?;
        DescriptorSet::new(set.ids().to_vec(), normalize_rows(&w)?.0)
    }
}
