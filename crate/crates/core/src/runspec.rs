//! The run file: one TOML document holding everything a command needs.
//!
//! ```toml
//! dcase_root = "/data/dcase"   # optional; synthesize from [corpus] when absent
//!
//! [corpus]     # CorpusSpec
//! [frontend]   # FrontendConfig
//! [encoder]    # EncoderConfig
//! [loss]       # LossConfig
//! [train]      # TrainConfig (seed lives here)
//! [scoring]    # ScoringConfig
//! [task]       # target filter and anomaly budget
//! [sweep]      # budgets
//! ```
//!
//! Every section and key is optional and falls back to its default. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::config_digest;
use crate::dataset::{ingest_dcase, synthesize_corpus, Corpus, CorpusSpec, MAX_BUDGET};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::losses::LossConfig;
use crate::pipeline::SweepConfig;
use crate::scoring::ScoringConfig;
use crate::trainer::TrainConfig;

/// Which target ids a command covers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    /// Restrict to one machine type.
    pub target_type: Option<String>,
    /// Restrict to one machine id (within `target_type` when both are set).
    pub target_id: Option<u32>,
    pub anomaly_budget: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub dcase_root: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub task: TaskSpec,
    pub sweep: SweepConfig,
}

impl RunSpec {
    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(format!("run spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run spec serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dcase_root.is_none() {
            self.corpus.validate()?;
        }
        self.encoder.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.scoring.validate()?;
        if self.task.anomaly_budget > MAX_BUDGET {
            return Err(Error::config(format!(
                "anomaly_budget {} exceeds {MAX_BUDGET}",
                self.task.anomaly_budget
            )));
        }
        if self.sweep.budgets.is_empty() {
            return Err(Error::config("sweep.budgets must not be empty"));
        }
        if let Some(&k) = self.sweep.budgets.iter().find(|&&k| k > MAX_BUDGET) {
            return Err(Error::config(format!("sweep budget {k} exceeds {MAX_BUDGET}")));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    /// Training configuration with the loss section folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss.clone(),
            ..self.train.clone()
        }
    }

    /// Hex SHA-256 identifying the whole run.
    pub fn digest(&self) -> String {
        config_digest(self)
    }

    /// Digest of the settings that determine the features alone.
    pub fn feature_digest(&self) -> String {
        config_digest(&(&self.dcase_root, &self.corpus, &self.frontend))
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.dcase_root {
            Some(root) => ingest_dcase(root, self.corpus.validation_fraction, self.corpus.seed),
            None => synthesize_corpus(&self.corpus),
        }
    }

    /// `(type, id)` pairs selected by the task section, in corpus order.
    pub fn targets(&self, corpus: &Corpus) -> Result<Vec<(String, u32)>> {
        let t = &self.task;
        let picked: Vec<(String, u32)> = corpus
            .machine_ids()
            .into_iter()
            .filter(|(ty, id)| {
                t.target_type.as_ref().map_or(true, |x| x == ty) && t.target_id.map_or(true, |x| x == *id)
            })
            .collect();
        if picked.is_empty() {
            return Err(Error::config(format!(
                "no machine id matches target_type {:?}, target_id {:?}",
                t.target_type, t.target_id
            )));
        }
        Ok(picked)
    }
}
