//! On-disk corpus layout: `meta.json`, one little-endian f64 file per split,
//! and `gt.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CopyCorpus, CorpusConfig, Group, LatentImage};
use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub format_version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    /// `[first_id, count]` per split.
    pub train: [u64; 2],
    pub references: [u64; 2],
    pub queries: [u64; 2],
    pub background: [u64; 2],
    pub hard_negative_pairs: Vec<(u64, u64)>,
    pub config_hash: Option<String>,
}

const SPLITS: [&str; 4] = ["train", "refs", "queries", "background"];

fn write_f64(path: &Path, items: &[LatentImage]) -> Result<()> {
    let mut bytes = Vec::with_capacity(items.len() * items.first().map_or(0, |x| x.latent.len()) * 8);
    for x in items {
        for v in &x.latent {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64(path: &Path, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path)?;
    if bytes.len() != count * dim * 8 {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            count * dim * 8
        )));
    }
    Ok(bytes
        .chunks_exact(dim * 8)
        .map(|row| {
            row.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()
        })
        .collect())
}

fn span(items: &[LatentImage]) -> [u64; 2] {
    [items.first().map_or(0, |x| x.id), items.len() as u64]
}

/// Writes the corpus into `dir`, which must exist.
pub fn save_corpus(dir: &Path, corpus: &CopyCorpus, config_hash: Option<String>) -> Result<()> {
    let meta = CorpusMeta {
        format_version: CORPUS_FORMAT_VERSION,
        seed: corpus.seed,
        config: corpus.config.clone(),
        train: span(&corpus.train),
        references: span(&corpus.references),
        queries: span(&corpus.queries),
        background: span(&corpus.background),
        hard_negative_pairs: corpus.hard_negative_pairs(),
        config_hash,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("meta.json"), text + "\n")?;
    let splits = [&corpus.train, &corpus.references, &corpus.queries, &corpus.background];
    for (name, items) in SPLITS.iter().zip(splits) {
        write_f64(&dir.join(format!("{name}.f64")), items)?;
    }
    let mut gt = String::from("query_id,ref_id\n");
    for (q, r) in &corpus.ground_truth {
        gt.push_str(&format!("{q},{r}\n"));
    }
    fs::write(dir.join("gt.csv"), gt)?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<CorpusMeta> {
    let text = fs::read_to_string(dir.join("meta.json"))?;
    let meta: CorpusMeta = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if meta.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Format(format!("corpus format version {}", meta.format_version)));
    }
    Ok(meta)
}

fn read_gt(path: &Path) -> Result<BTreeMap<u64, u64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("query_id,ref_id") {
        return Err(Error::Format("gt.csv header".into()));
    }
    let mut gt = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let parsed = line
            .split_once(',')
            .and_then(|(q, r)| Some((q.parse().ok()?, r.parse().ok()?)));
        let (q, r) = parsed.ok_or_else(|| Error::Format(format!("gt.csv line {line:?}")))?;
        gt.insert(q, r);
    }
    Ok(gt)
}

pub fn load_corpus(dir: &Path) -> Result<CopyCorpus> {
    let meta = load_meta(dir)?;
    let dim = meta.config.latent_dim;
    let ground_truth = read_gt(&dir.join("gt.csv"))?;
    let mut partners = BTreeMap::new();
    for &(a, b) in &meta.hard_negative_pairs {
        partners.insert(a, b);
        partners.insert(b, a);
    }
    let spans = [meta.train, meta.references, meta.queries, meta.background];
    let mut splits: Vec<Vec<LatentImage>> = Vec::new();
    for (k, (name, [first, count])) in SPLITS.iter().zip(spans).enumerate() {
        let rows = read_f64(&dir.join(format!("{name}.f64")), count as usize, dim)?;
        let items = rows
            .into_iter()
            .enumerate()
            .map(|(i, latent)| {
                let id = first + i as u64;
                let group = match (k, partners.get(&id), ground_truth.get(&id)) {
                    (0 | 1, Some(&partner), _) => Group::HardNegative { partner },
                    (0, None, _) => Group::Train,
                    (1, None, _) => Group::Reference,
                    (2, _, Some(&source)) => Group::Copy { source },
                    (2, _, None) => Group::Distractor,
                    _ => Group::Background,
                };
                LatentImage { id, latent, group }
            })
            .collect();
        splits.push(items);
    }
    let background = splits.pop().expect("four splits");
    let queries = splits.pop().expect("four splits");
    let references = splits.pop().expect("four splits");
    let train = splits.pop().expect("four splits");
    Ok(CopyCorpus {
        config: meta.config,
        seed: meta.seed,
        train,
        references,
        queries,
        background,
        ground_truth,
    })
}
