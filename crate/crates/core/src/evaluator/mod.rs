//! Descriptor extraction, exact search, retrieval metrics and collapse diagnostics.

mod diagnostics;
mod metrics;

pub use diagnostics::{
    similarity_gap, spectrum, GapReport, PcaWhitening, SpectrumReport, GAP_BIN_WIDTH, LOG_FLOOR,
};
pub use metrics::{mean_ap, micro_ap, score_normalize};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, Head};
use crate::error::{Error, Result};
use crate::numerics::{assert_unit_rows, dot, normalize_rows, Mat};

/// Query id → reference id of its source.
pub type GroundTruth = BTreeMap<u64, u64>;

const EXTRACT_CHUNK: usize = 256;

/// Unit-norm descriptors with their item ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    ids: Vec<u64>,
    matrix: Mat,
}

impl DescriptorSet {
    pub fn new(ids: Vec<u64>, matrix: Mat) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids for {} descriptors",
                ids.len(),
                matrix.rows()
            )));
        }
        assert_unit_rows(&matrix)?;
        Ok(Self { ids, matrix })
    }

    /// Normalizes the rows of `raw` first.
    pub fn from_raw(ids: Vec<u64>, raw: &Mat) -> Result<Self> {
        Self::new(ids, normalize_rows(raw)?.0)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Runs every row of `x` through `head` and L2-normalizes the outputs.
pub fn extract_descriptors(
    params: &EncoderParams,
    ids: Vec<u64>,
    x: &Mat,
    head: Head,
) -> Result<DescriptorSet> {
    if x.cols() != params.input_dim() {
        return Err(Error::DimMismatch {
            expected: params.input_dim(),
            got: x.cols(),
        });
    }
    let starts: Vec<usize> = (0..x.rows()).step_by(EXTRACT_CHUNK).collect();
    let chunks: Vec<Mat> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + EXTRACT_CHUNK).min(x.rows())).collect();
            params.forward(&x.select_rows(&idx), head).map(|(y, _)| y)
        })
        .collect::<Result<_>>()?;
    let dim = params
        .head_dim(head)
        .ok_or_else(|| Error::ShapeMismatch("encoder has no matcher head".into()))?;
    let mut data = Vec::with_capacity(x.rows() * dim);
    for c in chunks {
        data.extend(c.into_data());
    }
    DescriptorSet::from_raw(ids, &Mat::new(x.rows(), dim, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub query_id: u64,
    pub ref_id: u64,
    pub score: f64,
    pub is_gt: bool,
}

/// Candidate pairs sorted by descending score, ties by `(query_id, ref_id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedPairList {
    pub entries: Vec<RankedPair>,
}

fn by_score(a: &RankedPair, b: &RankedPair) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.query_id.cmp(&b.query_id))
        .then(a.ref_id.cmp(&b.ref_id))
}

impl RankedPairList {
    /// Sorts `entries` into canonical order.
    pub fn from_unsorted(mut entries: Vec<RankedPair>) -> Self {
        entries.sort_by(by_score);
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,ref_id,score,is_gt\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.query_id, e.ref_id, e.score, e.is_gt as u8));
        }
        out
    }
}

fn check_dims(a: &DescriptorSet, b: &DescriptorSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Exact cosine search: each query's `top_k` references, merged and sorted.
pub fn search(
    queries: &DescriptorSet,
    refs: &DescriptorSet,
    top_k: usize,
    gt: &GroundTruth,
) -> Result<RankedPairList> {
    check_dims(queries, refs)?;
    if top_k == 0 {
        return Err(Error::InvalidSizes("top_k must be at least 1".into()));
    }
    let per_query: Vec<Vec<RankedPair>> = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.matrix.row(qi);
            let qid = queries.ids[qi];
            let mut row: Vec<RankedPair> = (0..refs.len())
                .map(|ri| RankedPair {
                    query_id: qid,
                    ref_id: refs.ids[ri],
                    score: dot(q, refs.matrix.row(ri)),
                    is_gt: gt.get(&qid) == Some(&refs.ids[ri]),
                })
                .collect();
            row.sort_by(by_score);
            row.truncate(top_k);
            row
        })
        .collect();
    Ok(RankedPairList::from_unsorted(per_query.into_iter().flatten().collect()))
}

/// Top-level numbers written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub uap: f64,
    pub uap_sn: Option<f64>,
    pub map: f64,
    pub rpr: f64,
    pub mean_gap: f64,
    pub config_echo: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub top_k: usize,
    pub head: Head,
    pub score_normalize: bool,
    /// `k` for the k-th background neighbor.
    pub sn_k: usize,
    /// Multiplier `β` on the background similarity.
    pub sn_beta: f64,
    /// Whiten to this dimension, fitted on the background split.
    pub pca_dim: Option<usize>,
    pub rank_tol: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            top_k: 10,
            head: Head::Projector,
            score_normalize: false,
            sn_k: 10,
            sn_beta: 1.0,
            pca_dim: None,
            rank_tol: 1e-6,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.sn_k == 0 {
            return Err(Error::Config("top_k and sn_k must be positive".into()));
        }
        if self.pca_dim == Some(0) {
            return Err(Error::Config("pca_dim must be positive".into()));
        }
        if !self.sn_beta.is_finite() || !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::Config("sn_beta must be finite and rank_tol in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything produced by one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub pairs: RankedPairList,
    pub spectrum: SpectrumReport,
    pub gap: GapReport,
}

/// Full evaluation of an encoder on a corpus.
pub fn evaluate(
    params: &EncoderParams,
    corpus: &crate::synthdata::CopyCorpus,
    opts: &EvalOptions,
    config_echo: serde_json::Value,
) -> Result<Evaluation> {
    use crate::synthdata::split_ids;
    opts.validate()?;
    let mut q = extract_descriptors(params, split_ids(&corpus.queries), &corpus.query_matrix(), opts.head)?;
    let mut r = extract_descriptors(
        params,
        split_ids(&corpus.references),
        &corpus.reference_matrix(),
        opts.head,
    )?;
    let mut bg = extract_descriptors(
        params,
        split_ids(&corpus.background),
        &corpus.background_matrix(),
        opts.head,
    )?;
    if let Some(t) = opts.pca_dim {
        let pca = PcaWhitening::fit(&bg, t)?;
        q = pca.apply_set(&q)?;
        r = pca.apply_set(&r)?;
        bg = pca.apply_set(&bg)?;
    }
    let pairs = search(&q, &r, opts.top_k, &corpus.ground_truth)?;
    let total_gt = corpus.ground_truth.len();
    let uap = micro_ap(&pairs, total_gt)?;
    let uap_sn = if opts.score_normalize {
        let sn = score_normalize(&pairs, &q, &bg, opts.sn_k, opts.sn_beta)?;
        Some(micro_ap(&sn, total_gt)?)
    } else {
        None
    };
    let map = mean_ap(&pairs, &corpus.ground_truth)?;
    let spec = spectrum(&r, opts.rank_tol)?;
    let gap = similarity_gap(&q, &r, &corpus.ground_truth)?;
    Ok(Evaluation {
        report: EvalReport {
            uap,
            uap_sn,
            map,
            rpr: spec.rpr,
            mean_gap: gap.mean,
            config_echo,
        },
        pairs,
        spectrum: spec,
        gap,
    })
}
