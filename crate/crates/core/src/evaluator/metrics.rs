use std::collections::BTreeMap;

use super::{DescriptorSet, GroundTruth, RankedPair, RankedPairList};
use crate::error::{Error, Result};
use crate::numerics::dot;

/// Micro average precision over the globally sorted list:
/// `Σ_i P(i)·Δr(i)` with `Δr(i) = 1/total_gt` at ground-truth positions.
pub fn micro_ap(pairs: &RankedPairList, total_gt: usize) -> Result<f64> {
    if total_gt == 0 {
        return Err(Error::ZeroGroundTruth);
    }
    let hits = pairs.entries.iter().filter(|e| e.is_gt).count();
    if hits > total_gt {
        return Err(Error::InvalidSizes(format!(
            "{hits} ground-truth pairs listed but total_gt is {total_gt}"
        )));
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, e) in pairs.entries.iter().enumerate() {
        if e.is_gt {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total_gt as f64)
}

/// Per-query average precision, averaged over queries that have ground truth.
/// A query's ground-truth pair that was never retrieved contributes zero.
pub fn mean_ap(pairs: &RankedPairList, gt: &GroundTruth) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::NoEvaluableQueries);
    }
    let mut per_query: BTreeMap<u64, Vec<&RankedPair>> = BTreeMap::new();
    for e in &pairs.entries {
        per_query.entry(e.query_id).or_default().push(e);
    }
    let mut total = 0.0;
    for q in gt.keys() {
        let Some(list) = per_query.get(q) else { continue };
        let mut found = 0usize;
        let mut ap = 0.0;
        for (i, e) in list.iter().enumerate() {
            if e.is_gt {
                found += 1;
                ap += found as f64 / (i + 1) as f64;
            }
        }
        // one ground-truth reference per query
        total += ap;
    }
    Ok(total / gt.len() as f64)
}

/// Replaces each score `s(q, r)` by `s(q, r) − β·s_k(q)`, where `s_k(q)` is
/// the k-th highest similarity of `q` to the background set, then re-sorts.
pub fn score_normalize(
    pairs: &RankedPairList,
    queries: &DescriptorSet,
    background: &DescriptorSet,
    k: usize,
    beta: f64,
) -> Result<RankedPairList> {
    if k == 0 || k > background.len() {
        return Err(Error::BackgroundTooSmall {
            have: background.len(),
            k,
        });
    }
    if queries.dim() != background.dim() {
        return Err(Error::DimMismatch {
            expected: queries.dim(),
            got: background.dim(),
        });
    }
    let row_of: BTreeMap<u64, usize> = queries.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut kth = BTreeMap::new();
    let mut entries = Vec::with_capacity(pairs.len());
    for e in &pairs.entries {
        let s_k = match kth.get(&e.query_id) {
            Some(&v) => v,
            None => {
                let &qi = row_of.get(&e.query_id).ok_or_else(|| {
                    Error::ShapeMismatch(format!("query {} has no descriptor", e.query_id))
                })?;
                let q = queries.matrix().row(qi);
                let mut sims: Vec<f64> = background.matrix().row_iter().map(|b| dot(q, b)).collect();
                sims.sort_by(|a, b| b.total_cmp(a));
                kth.insert(e.query_id, sims[k - 1]);
                sims[k - 1]
            }
        };
        entries.push(RankedPair {
            score: e.score - beta * s_k,
            ..*e
        });
    }
    Ok(RankedPairList::from_unsorted(entries))
}
