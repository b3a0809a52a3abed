//! Synthetic copy-detection corpus.
//!
//! Latent "images" are isotropic Gaussian vectors. An edit is a random scale,
//! random planar rotations on coordinate pairs `(0,1), (2,3), …`, coordinate
//! masking and additive noise. Queries are edited copies of references plus
//! distractors that have no reference; hard negatives are additive-offset twins
//! `u` and `u + δ` with `||δ|| = gap·||u||`.

mod io;

pub use io::{load_corpus, save_corpus, CorpusMeta, CORPUS_FORMAT_VERSION};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Mat, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub scale_range: (f64, f64),
    pub mask_prob: f64,
    /// Bound on the rotation angle (radians) applied to each coordinate pair.
    pub rotation_strength: f64,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            scale_range: (1.0, 1.0),
            mask_prob: 0.0,
            rotation_strength: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.noise_sigma >= 0.0)
            || !(lo > 0.0 && lo <= hi)
            || !(0.0..=1.0).contains(&self.mask_prob)
            || !(self.rotation_strength >= 0.0)
        {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.25,
            scale_range: (0.7, 1.3),
            mask_prob: 0.1,
            rotation_strength: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub latent_dim: usize,
    pub n_train: usize,
    pub n_references: usize,
    /// Total queries, distractors included.
    pub n_queries: usize,
    pub n_distractors: usize,
    pub n_background: usize,
    /// Fraction of train and reference items that belong to a hard-negative pair.
    pub hard_negative_fraction: f64,
    pub hn_gap: f64,
    /// Edits used to make training views.
    pub train_augment: AugmentConfig,
    /// Edits used to make evaluation queries.
    pub query_augment: AugmentConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            n_train: 2048,
            n_references: 512,
            n_queries: 256,
            n_distractors: 128,
            n_background: 512,
            hard_negative_fraction: 0.2,
            hn_gap: 0.25,
            train_augment: AugmentConfig::default(),
            query_augment: AugmentConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSizes(m.to_string()));
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2");
        }
        if self.n_train == 0 || self.n_references == 0 || self.n_queries == 0 || self.n_background == 0 {
            return bad("every split needs at least one item");
        }
        if self.n_distractors > self.n_queries {
            return bad("more distractors than queries");
        }
        if self.n_queries - self.n_distractors > self.n_references {
            return bad("more copy queries than references");
        }
        if !(0.0..1.0).contains(&self.hard_negative_fraction) {
            return bad("hard_negative_fraction must be in [0, 1)");
        }
        if !(self.hn_gap > 0.0) {
            return bad("hn_gap must be positive");
        }
        self.train_augment.validate()?;
        self.query_augment.validate()
    }

    pub fn n_copies(&self) -> usize {
        self.n_queries - self.n_distractors
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Train,
    Reference,
    /// Member of an additive-offset twin pair (train or reference split).
    HardNegative { partner: u64 },
    /// Edited copy of a reference.
    Copy { source: u64 },
    /// Query with no reference.
    Distractor,
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub id: u64,
    pub latent: Vec<f64>,
    pub group: Group,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopyCorpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub train: Vec<LatentImage>,
    pub references: Vec<LatentImage>,
    pub queries: Vec<LatentImage>,
    pub background: Vec<LatentImage>,
    /// Query id → reference id.
    pub ground_truth: BTreeMap<u64, u64>,
}

/// Rows of a split, in order.
pub fn split_matrix(items: &[LatentImage]) -> Mat {
    let rows: Vec<&[f64]> = items.iter().map(|x| x.latent.as_slice()).collect();
    Mat::from_rows(&rows).expect("latents share a dimension")
}

pub fn split_ids(items: &[LatentImage]) -> Vec<u64> {
    items.iter().map(|x| x.id).collect()
}

impl CopyCorpus {
    pub fn train_matrix(&self) -> Mat {
        split_matrix(&self.train)
    }

    pub fn reference_matrix(&self) -> Mat {
        split_matrix(&self.references)
    }

    pub fn query_matrix(&self) -> Mat {
        split_matrix(&self.queries)
    }

    pub fn background_matrix(&self) -> Mat {
        split_matrix(&self.background)
    }

    /// Hard-negative pairs `(a, b)` with `a < b`, across all splits.
    pub fn hard_negative_pairs(&self) -> Vec<(u64, u64)> {
        self.train
            .iter()
            .chain(&self.references)
            .filter_map(|x| match x.group {
                Group::HardNegative { partner } if x.id < partner => Some((x.id, partner)),
                _ => None,
            })
            .collect()
    }
}

/// Applies one random edit: `mask ∘ rotate ∘ scale (x) + noise`.
pub fn augment(x: &[f64], cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let s = rng.uniform_range(cfg.scale_range.0, cfg.scale_range.1);
    let mut y: Vec<f64> = x.iter().map(|v| v * s).collect();
    if cfg.rotation_strength > 0.0 {
        for pair in y.chunks_exact_mut(2) {
            let a = rng.uniform_range(-cfg.rotation_strength, cfg.rotation_strength);
            let (c, sn) = (a.cos(), a.sin());
            let (p, q) = (pair[0], pair[1]);
            pair[0] = c * p - sn * q;
            pair[1] = sn * p + c * q;
        }
    }
    if cfg.mask_prob > 0.0 {
        for v in y.iter_mut() {
            if rng.bernoulli(cfg.mask_prob) {
                *v = 0.0;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in y.iter_mut() {
            *v += cfg.noise_sigma * rng.normal();
        }
    }
    y
}

/// Augments every row of `x` with a fresh edit.
pub fn augment_rows(x: &Mat, cfg: &AugmentConfig, rng: &mut Rng) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let y = augment(x.row(i), cfg, rng);
        out.row_mut(i).copy_from_slice(&y);
    }
    out
}

/// Offset `δ` orthogonal to `u` with `||δ|| = gap·||u||`.
fn twin_offset(u: &[f64], gap: f64, rng: &mut Rng) -> Vec<f64> {
    let uu = dot(u, u);
    loop {
        let mut d = rng.normal_vec(u.len());
        let c = dot(&d, u) / uu;
        d.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
        let dn = norm(&d);
        if dn > 1e-9 {
            let target = gap * uu.sqrt();
            d.iter_mut().for_each(|x| *x *= target / dn);
            return d;
        }
    }
}

/// Draws `n` latents, the first `2·pairs` of them as twin pairs, with ids from `first_id`.
fn draw_split(
    n: usize,
    pairs: usize,
    base: Group,
    first_id: u64,
    cfg: &CorpusConfig,
    rng: &mut Rng,
) -> Vec<LatentImage> {
    let mut items = Vec::with_capacity(n);
    let mut id = first_id;
    for _ in 0..pairs {
        let u = rng.normal_vec(cfg.latent_dim);
        let d = twin_offset(&u, cfg.hn_gap, rng);
        let v: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + b).collect();
        items.push(LatentImage {
            id,
            latent: u,
            group: Group::HardNegative { partner: id + 1 },
        });
        items.push(LatentImage {
            id: id + 1,
            latent: v,
            group: Group::HardNegative { partner: id },
        });
        id += 2;
    }
    while items.len() < n {
        items.push(LatentImage {
            id,
            latent: rng.normal_vec(cfg.latent_dim),
            group: base,
        });
        id += 1;
    }
    items
}

/// Generates a corpus. Ids are assigned consecutively: train, references,
/// queries, background.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<CopyCorpus> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let pairs = |n: usize| ((cfg.hard_negative_fraction * n as f64) / 2.0).floor() as usize;

    let train = draw_split(
        cfg.n_train,
        pairs(cfg.n_train),
        Group::Train,
        0,
        cfg,
        &mut root.split("train"),
    );
    let ref_start = cfg.n_train as u64;
    let references = draw_split(
        cfg.n_references,
        pairs(cfg.n_references),
        Group::Reference,
        ref_start,
        cfg,
        &mut root.split("references"),
    );

    // copy sources: twin references first, then a random subset of the rest
    let mut rng = root.split("queries");
    let n_twins = 2 * pairs(cfg.n_references);
    let mut sources: Vec<usize> = (0..n_twins.min(cfg.n_copies())).collect();
    let mut rest: Vec<usize> = (n_twins..cfg.n_references).collect();
    rng.shuffle(&mut rest);
    sources.extend(rest.into_iter().take(cfg.n_copies() - sources.len()));

    let mut drafts: Vec<(Vec<f64>, Group)> = sources
        .iter()
        .map(|&r| {
            let src = &references[r];
            (
                augment(&src.latent, &cfg.query_augment, &mut rng),
                Group::Copy { source: src.id },
            )
        })
        .collect();
    for _ in 0..cfg.n_distractors {
        let fresh = rng.normal_vec(cfg.latent_dim);
        drafts.push((augment(&fresh, &cfg.query_augment, &mut rng), Group::Distractor));
    }
    rng.shuffle(&mut drafts);

    let query_start = ref_start + cfg.n_references as u64;
    let mut ground_truth = BTreeMap::new();
    let queries: Vec<LatentImage> = drafts
        .into_iter()
        .enumerate()
        .map(|(k, (latent, group))| {
            let id = query_start + k as u64;
            if let Group::Copy { source } = group {
                ground_truth.insert(id, source);
            }
            LatentImage { id, latent, group }
        })
        .collect();

    let bg_start = query_start + cfg.n_queries as u64;
    let background = draw_split(
        cfg.n_background,
        0,
        Group::Background,
        bg_start,
        cfg,
        &mut root.split("background"),
    );

    Ok(CopyCorpus {
        config: cfg.clone(),
        seed,
        train,
        references,
        queries,
        background,
        ground_truth,
    })
}

/// Fraction of twin-reference copies whose nearest reference by raw latent
/// cosine is the twin rather than the source.
pub fn identity_twin_confusion(corpus: &CopyCorpus) -> Option<f64> {
    let by_id: BTreeMap<u64, &LatentImage> = corpus.references.iter().map(|r| (r.id, r)).collect();
    let cos = |a: &[f64], b: &[f64]| dot(a, b) / (norm(a) * norm(b)).max(1e-300);
    let mut total = 0usize;
    let mut confused = 0usize;
    for q in &corpus.queries {
        let Group::Copy { source } = q.group else { continue };
        let src = by_id[&source];
        let Group::HardNegative { partner } = src.group else { continue };
        total += 1;
        if cos(&q.latent, &by_id[&partner].latent) > cos(&q.latent, &src.latent) {
            confused += 1;
        }
    }
    (total > 0).then(|| confused as f64 / total as f64)
}
