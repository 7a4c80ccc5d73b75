//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::data::{GenSpec, PoisonDelta, PoisonSpec, Split};
use crate::exec::Execution;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::models::ModelKind;
use crate::train::TrainConfig;

/// Where the bags come from. Serialized externally tagged, so a config file
/// names exactly one of `generate`, `dataset` or `manifest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Generate(GenSpec),
    /// Directory written by `gen`: `{train,val,test}.milb` plus an optional
    /// `dataset.json` sidecar.
    Dataset(PathBuf),
    /// Feature-bag manifest (see `schemas/manifest.schema.json`).
    Manifest(PathBuf),
}

/// Offsets applied to the train side and the test side of the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonPair {
    pub train: PoisonSpec,
    pub test: PoisonSpec,
}

impl PoisonPair {
    /// Train negatives and test positives receive the same offset.
    pub fn audit(fraction: f64, delta: PoisonDelta) -> Self {
        Self {
            train: PoisonSpec {
                target_split: Split::Train,
                target_class: 0,
                fraction,
                delta: delta.clone(),
            },
            test: PoisonSpec {
                target_split: Split::Test,
                target_class: 1,
                fraction,
                delta,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Split the trained models are scored on.
    pub split: Split,
    /// Score threshold for accuracy and F1.
    pub threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Minimum mean test slide AUC for a respects-MIL verdict.
    pub respects_threshold: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            respects_threshold: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poison: Option<PoisonPair>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Models to run. `train` defaults to `train.model`, `audit` to all three.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<ModelKind>>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub execution: Execution,
}

impl ExperimentConfig {
    pub fn new(data: DataSource) -> Self {
        Self {
            data,
            poison: None,
            train: TrainConfig::default(),
            models: None,
            metrics: MetricsConfig::default(),
            audit: AuditConfig::default(),
            out: None,
            jobs: None,
            execution: Execution::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if let DataSource::Generate(spec) = &self.data {
            spec.validate()?;
        }
        self.train.validate()?;
        if let Some(models) = &self.models {
            if models.is_empty() {
                return Err(ExperimentError::Config("models list is empty".into()));
            }
        }
        let t = self.metrics.threshold;
        if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
            return Err(ExperimentError::Config(format!("metrics threshold {t} outside [0, 1]")));
        }
        let r = self.audit.respects_threshold;
        if !(r.is_finite() && r > 0.5 && r <= 1.0) {
            return Err(ExperimentError::Config(format!(
                "audit respects_threshold {r} outside (0.5, 1]"
            )));
        }
        if self.jobs == Some(0) {
            return Err(ExperimentError::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Models for `train`/`eval`.
    pub fn train_models(&self) -> Vec<ModelKind> {
        self.models.clone().unwrap_or_else(|| vec![self.train.model])
    }

    /// Models for `audit`.
    pub fn audit_models(&self) -> Vec<ModelKind> {
        self.models.clone().unwrap_or_else(|| ModelKind::ALL.to_vec())
    }

    /// SHA-256 of the canonical JSON form, ignoring settings that cannot
    /// change results (`out`, `jobs`, `execution`).
    pub fn hash(&self) -> String {
        let canonical = Self {
            out: None,
            jobs: None,
            execution: Execution::default(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Hash of the config as seen by one model's runs: `train.model` set to
    /// `kind` and the model list dropped.
    pub fn model_hash(&self, kind: ModelKind) -> String {
        let mut c = self.clone();
        c.train.model = kind;
        c.models = None;
        c.hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ExperimentConfig {
        ExperimentConfig::new(DataSource::Generate(GenSpec::default()))
    }

    #[test]
    fn json_round_trip() {
        let mut c = config();
        c.poison = Some(PoisonPair::audit(0.2, PoisonDelta::Magnitude(1.0)));
        c.models = Some(vec![ModelKind::Abmil]);
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let c = ExperimentConfig::from_json(r#"{"data": {"dataset": "runs/data"}}"#).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.metrics.split, Split::Test);
        assert_eq!(c.audit.respects_threshold, 0.7);
    }

    #[test]
    fn two_sources_are_rejected() {
        let text = r#"{"data": {"dataset": "a", "manifest": "b"}}"#;
        assert!(ExperimentConfig::from_json(text).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {}}"#).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"data": {"dataset": "a"}, "lr": 1}"#).is_err());
    }

    #[test]
    fn hash_ignores_output_settings_only() {
        let a = config();
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        b.jobs = Some(4);
        b.execution = Execution::Sequential;
        assert_eq!(a.hash(), b.hash());
        b.train.lr = 1e-3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn model_hashes_differ() {
        let c = config();
        assert_ne!(c.model_hash(ModelKind::MiNet), c.model_hash(ModelKind::FocusMil));
    }
}
