//! TOML run configuration layered over the built-in defaults.

use std::fs;
use std::path::Path;

use rdcd_core::config::RunConfig;
use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{CliError, CliResult};

/// Overlays `over` onto `base`, descending into tables.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a (possibly partial) TOML document. Keys not present fall back to
/// [`RunConfig::default`]; unknown keys are rejected.
pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let over: Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut base = Value::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
    merge(&mut base, over);
    let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::Config(format!("config file {} not found", p.display())),
                _ => CliError::Io(format!("{}: {e}", p.display())),
            })?;
            parse_config(&text)
        }
    }
}

pub fn to_toml(cfg: &RunConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))
}

/// SHA-256 of the serialized configuration, hex encoded.
pub fn config_hash(cfg: &RunConfig) -> CliResult<String> {
    let digest = Sha256::digest(to_toml(cfg)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = parse_config("seed = 3\n[teacher]\nepochs = 2\n[corpus.train_augment]\nmask_prob = 0.0\n").unwrap();
        let d = RunConfig::default();
        assert_eq!(c.seed, 3);
        assert_eq!(c.teacher.epochs, 2);
        assert_eq!(c.teacher.temps, d.teacher.temps);
        assert_eq!(c.corpus.train_augment.mask_prob, 0.0);
        assert_eq!(c.corpus.train_augment.noise_sigma, d.corpus.train_augment.noise_sigma);
        assert_eq!(c.student, d.student);
    }

    #[test]
    fn round_trip_is_a_fixpoint() {
        let mut c = RunConfig::default();
        c.eval.pca_dim = Some(8);
        c.student.train_samples = Some(100);
        c.student.weights.lambda_hn = 0.0;
        let text = to_toml(&c).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(to_toml(&back).unwrap(), text);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        for doc in ["bogus = 1", "[student]\nlr_max = 1.0", "[corpus]\nn_train = \"many\"", "seed = ["] {
            assert!(matches!(parse_config(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.clone().with_seed(8);
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }
}
