//! Run configuration: one strict JSON document covering data, training and
//! evaluation. Every field is optional and falls back to its default; unknown
//! keys are rejected.
//!
//! ```json
//! {
//!   "dataset": { "height": 32, "width": 32, "channels": 3, "parts": 4, "concepts": 8,
//!                "classes": 4, "train_size": 2000, "val_size": 200, "test_size": 200,
//!                "noise": 0.05, "seed": 0 },
//!   "train":   { "epochs": 50, "batch_size": 32, "learning_rate": 0.1, "lr_schedule": "cosine",
//!                "momentum": 0.9, "grad_clip": 5.0, "lambda_c": 1.0, "lambda_g": 0.01, "k": 4,
//!                "recluster_period": 2, "warmup_epochs": 2, "reference_batch": 128, "grouping": true,
//!                "checkpoint_every": 0, "seed": 0, "concept_to_group": "parts",
//!                "backbone": { "input_height": 32, "input_width": 32, "input_channels": 3,
//!                              "stages": [{ "filters": 32, "kernel": 3, "stride": 2 }, ...],
//!                              "grouped_layer_index": 2 } },
//!   "eval":    { "rates": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], "modes": ["correct", "incorrect"],
//!                "repetitions": 5, "unit": "per_concept", "seed": 0, "reference_size": 128 }
//! }
//! ```
//!
//! `concept_to_group` is `"parts"`, `"modulo"`, or `{"explicit": [g0, g1, ...]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{InterventionMode, InterventionUnit, DEFAULT_REFERENCE_SIZE, DEFAULT_REPETITIONS};
use crate::params::read_file;
use crate::synth::DatasetSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rates: Vec<f64>,
    pub modes: Vec<InterventionMode>,
    pub repetitions: usize,
    pub unit: InterventionUnit,
    pub seed: u64,
    /// Samples in the cluster-export reference batch.
    pub reference_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rates: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            modes: vec![InterventionMode::Correct, InterventionMode::Incorrect],
            repetitions: DEFAULT_REPETITIONS,
            unit: InterventionUnit::PerConcept,
            seed: 0,
            reference_size: DEFAULT_REFERENCE_SIZE,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("intervention rate {r} outside [0, 1]")));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.reference_size < 2 {
            return Err(Error::Config("reference_size must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Pretty JSON with every default filled in.
    pub fn resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Parses a standalone dataset spec with the same strictness.
pub fn dataset_spec_from_file(path: &Path) -> Result<DatasetSpec> {
    let bytes = read_file(path)?;
    let spec: DatasetSpec = serde_json::from_slice(&bytes).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.dataset.train_size, 2000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_json(r#"{"train": {"k": 2, "concept_to_group": {"explicit": [0,1,0,1,0,1,0,1]}}}"#)
            .unwrap();
        let back = RunConfig::from_json(&c.resolved_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invariant_violations_are_config_errors() {
        let err = RunConfig::from_json(r#"{"train": {"recluster_period": 0}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(RunConfig::from_json(r#"{"dataset": {"concepts": 6}}"#).is_err());
    }
}
