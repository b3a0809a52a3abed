//! Whole-experiment configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::EvalOptions;
use crate::losses::Temperatures;
use crate::synthdata::CorpusConfig;
use crate::trainer::{ModelConfig, TrainConfig};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Corpus, model, both training stages and evaluation for one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Corpus generation seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: RUN_CONFIG_VERSION,
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            teacher: teacher_defaults(),
            student: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Teacher pretraining defaults: longer schedule and a sharper InfoNCE.
pub fn teacher_defaults() -> TrainConfig {
    TrainConfig {
        epochs: 150,
        temps: Temperatures {
            tau_contrastive: 0.1,
            ..Temperatures::default()
        },
        ..TrainConfig::default()
    }
}

impl RunConfig {
    /// Sets the corpus seed and both training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.teacher.seed = seed;
        self.student.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "format_version {} is not supported (expected {RUN_CONFIG_VERSION})",
                self.format_version
            )));
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.eval.validate()
    }
}
