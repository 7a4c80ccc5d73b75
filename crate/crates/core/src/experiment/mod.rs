//! The `gen`, `train`, `eval` and `audit` workflows.
//!
//! Every command takes an [`ExperimentConfig`] and, when given an output
//! directory, writes its artifacts there through temp-file-and-rename and
//! records them in `manifest.json` with their SHA-256. Artifacts carry the
//! config hash and, where one applies, the run seed; none carries a
//! timestamp or an absolute path, so equal configs give equal bytes.
//!
//! Output layout:
//!
//! ```text
//! out/
//!   manifest.json  config.json
//!   train.milb val.milb test.milb dataset.json        (gen)
//!   <model>/seed-<s>/epochs.csv  <model>/seed-<s>/model.ckpt
//!   <model>/report.json  <model>/report.csv          (train, audit)
//!   audit.json audit.csv                              (audit)
//!   eval/report.json eval/report.csv                  (eval)
//! ```

mod audit;
mod config;

pub use audit::{AuditReport, AuditSeed, AuditVerdict, Verdict};
pub use config::{AuditConfig, DataSource, ExperimentConfig, MetricsConfig, PoisonPair};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    apply_poison, encode_bagset, generate, import_features, read_bagset, Bag, BagSet, DataError, Dataset, GenSpec,
    GeneratorState, PoisonCounts, Split,
};
use crate::diffcore::DiffError;
use crate::metrics::{bag_metrics, MetricError, MetricsReport, Provenance, RunMetrics};
use crate::models::{encode_checkpoint_tagged, read_checkpoint, BagOutput, ModelError, ModelKind, ModelParams};
use crate::train::{epoch_log_csv, predict_bags, train_model, RunRecord, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ExperimentError {
    /// 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Train(TrainError::Numerical { .. })
            | ExperimentError::Model(ModelError::Diff(DiffError::NonFinite { .. }))
            | ExperimentError::Train(TrainError::Model(ModelError::Diff(DiffError::NonFinite { .. }))) => 3,
            _ => 2,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| ExperimentError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ExperimentError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// `manifest.json`: index of everything written under an output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputManifest {
    pub commands: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

struct Outputs {
    root: PathBuf,
    config_hash: String,
    manifest: OutputManifest,
}

impl Outputs {
    /// Opens `root`, merging into an existing manifest so successive commands
    /// sharing a directory keep one index.
    fn open(root: &Path, config_hash: &str, command: &str) -> Result<Self, ExperimentError> {
        fs::create_dir_all(root).map_err(|e| {
            ExperimentError::Config(format!("output directory {} is not writable: {e}", root.display()))
        })?;
        let mut manifest = fs::read(root.join("manifest.json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<OutputManifest>(&b).ok())
            .unwrap_or_default();
        if !manifest.commands.iter().any(|c| c == command) {
            manifest.commands.push(command.to_owned());
        }
        Ok(Self {
            root: root.to_owned(),
            config_hash: config_hash.to_owned(),
            manifest,
        })
    }

    fn write(
        &mut self,
        rel: &str,
        bytes: &[u8],
        model: Option<ModelKind>,
        seed: Option<u64>,
    ) -> Result<(), ExperimentError> {
        atomic_write(&self.root.join(rel), bytes)?;
        self.manifest.artifacts.retain(|a| a.path != rel);
        self.manifest.artifacts.push(Artifact {
            path: rel.to_owned(),
            sha256: sha256_hex(bytes),
            config_hash: self.config_hash.clone(),
            model: model.map(|m| m.as_str().to_owned()),
            seed,
        });
        Ok(())
    }

    fn finish(mut self) -> Result<(), ExperimentError> {
        self.manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let mut json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        json.push('\n');
        atomic_write(&self.root.join("manifest.json"), json.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub split: Split,
    pub path: String,
    pub sha256: String,
    pub bags: usize,
    pub instances: usize,
}

/// `dataset.json`, written next to the `MILB` files by `gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub config_hash: String,
    pub seed: u64,
    pub feature_dim: usize,
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<GenSpec>,
    pub files: Vec<SplitFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poison: Option<PoisonPair>,
    #[serde(default)]
    pub poison_counts: Vec<PoisonCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorState>,
}

fn split_file_name(split: Split) -> String {
    format!("{}.milb", split.as_str())
}

/// Reads a directory written by `gen`. Split files that are absent are
/// skipped; when `dataset.json` is present its hashes are checked and its
/// generator state restored.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset, ExperimentError> {
    let sidecar: Option<DatasetSidecar> = match fs::read(dir.join("dataset.json")) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes).map_err(|e| DataError::Parse {
            path: dir.join("dataset.json"),
            msg: e.to_string(),
        })?),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(ExperimentError::io(&dir.join("dataset.json"), e)),
    };
    let mut splits = BTreeMap::new();
    let mut dim = None;
    for split in Split::ALL {
        let path = dir.join(split_file_name(split));
        if !path.exists() {
            continue;
        }
        if let Some(entry) = sidecar.as_ref().and_then(|s| s.files.iter().find(|f| f.split == split)) {
            let bytes = fs::read(&path).map_err(|e| ExperimentError::io(&path, e))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(DataError::Parse {
                    path,
                    msg: "contents do not match the hash in dataset.json".into(),
                }
                .into());
            }
        }
        let set = read_bagset(&path)?;
        match dim {
            Some(d) if d != set.feature_dim => {
                return Err(DataError::Parse {
                    path,
                    msg: format!("dimension {} differs from {d} in other splits", set.feature_dim),
                }
                .into())
            }
            _ => dim = Some(set.feature_dim),
        }
        splits.insert(split, set.bags);
    }
    let feature_dim = dim.ok_or_else(|| {
        ExperimentError::Config(format!("{} holds no train/val/test .milb files", dir.display()))
    })?;
    Ok(Dataset {
        feature_dim,
        seed: sidecar.as_ref().map_or(0, |s| s.seed),
        splits,
        generator: sidecar.and_then(|s| s.generator),
    })
}

/// A dataset after loading and poisoning.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub poison_counts: Vec<PoisonCounts>,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    let dataset = match &config.data {
        DataSource::Generate(spec) => generate(spec)?,
        DataSource::Dataset(dir) => load_dataset_dir(dir)?,
        DataSource::Manifest(path) => import_features(path)?,
    };
    let mut poison_counts = Vec::new();
    let dataset = match &config.poison {
        None => dataset,
        Some(pair) => {
            let (ds, a) = apply_poison(&dataset, &pair.train)?;
            let (ds, b) = apply_poison(&ds, &pair.test)?;
            poison_counts.extend([a, b]);
            ds
        }
    };
    dataset.validate()?;
    Ok(PreparedData {
        dataset,
        poison_counts,
    })
}

fn write_config(outputs: &mut Outputs, config: &ExperimentConfig) -> Result<(), ExperimentError> {
    let canonical = ExperimentConfig {
        out: None,
        jobs: None,
        execution: Default::default(),
        ..config.clone()
    };
    outputs.write("config.json", canonical.to_json().as_bytes(), None, None)
}

/// Generates (or imports) the dataset, applies any poison, and writes the
/// split files plus `dataset.json`.
pub fn run_gen(config: &ExperimentConfig, out: &Path) -> Result<DatasetSidecar, ExperimentError> {
    config.validate()?;
    let hash = config.hash();
    let prepared = prepare_data(config)?;
    let ds = &prepared.dataset;
    let mut outputs = Outputs::open(out, &hash, "gen")?;
    let mut files = Vec::new();
    for (&split, bags) in &ds.splits {
        let bytes = encode_bagset(&BagSet {
            feature_dim: ds.feature_dim,
            bags: bags.clone(),
        });
        let name = split_file_name(split);
        outputs.write(&name, &bytes, None, None)?;
        files.push(SplitFile {
            split,
            path: name,
            sha256: sha256_hex(&bytes),
            bags: bags.len(),
            instances: bags.iter().map(Bag::len).sum(),
        });
    }
    let sidecar = DatasetSidecar {
        config_hash: hash,
        seed: ds.seed,
        feature_dim: ds.feature_dim,
        content_hash: ds.content_hash(),
        spec: match &config.data {
            DataSource::Generate(spec) => Some(spec.clone()),
            _ => None,
        },
        files,
        poison: config.poison.clone(),
        poison_counts: prepared.poison_counts,
        generator: ds.generator.clone(),
    };
    let mut json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    json.push('\n');
    outputs.write("dataset.json", json.as_bytes(), None, None)?;
    write_config(&mut outputs, config)?;
    outputs.finish()?;
    Ok(sidecar)
}

/// Everything one model's runs produced.
#[derive(Clone, Debug)]
pub struct ModelOutcome {
    pub model: ModelKind,
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
    pub report: MetricsReport,
}

fn eval_split<'a>(ds: &'a Dataset, split: Split) -> Result<&'a [Bag], ExperimentError> {
    ds.split(split)
        .filter(|b| !b.is_empty())
        .ok_or_else(|| ExperimentError::Config(format!("dataset has no {split} split to evaluate")))
}

/// Scores `model` on `bags`, returning metrics, notes and raw outputs.
pub fn evaluate(
    model: &ModelParams,
    seed: u64,
    bags: &[Bag],
    threshold: f64,
) -> Result<(RunMetrics, Vec<String>, Vec<BagOutput>), ExperimentError> {
    let outputs = predict_bags(model, bags)?;
    let (metrics, notes) = bag_metrics(seed, bags, &outputs, threshold)?;
    Ok((metrics, notes, outputs))
}

fn train_one(
    config: &ExperimentConfig,
    prepared: &PreparedData,
    kind: ModelKind,
) -> Result<ModelOutcome, ExperimentError> {
    let ds = &prepared.dataset;
    let mut train_cfg = config.train.clone();
    train_cfg.model = kind;
    let hash = config.model_hash(kind);
    log::info!("training {kind} over seeds {:?}", train_cfg.seeds);
    let runs = config
        .execution
        .with_jobs(config.jobs, || train_model(ds, &train_cfg, config.execution))?;
    let bags = eval_split(ds, config.metrics.split)?;
    let mut metrics = Vec::new();
    let mut notes = Vec::new();
    for run in &runs {
        let (m, n, _) = evaluate(&run.model, run.seed, bags, config.metrics.threshold)?;
        metrics.push(m);
        notes.extend(n);
    }
    let report = MetricsReport::new(
        kind.as_str(),
        config.metrics.split.as_str(),
        Provenance {
            config_hash: hash.clone(),
            dataset_hash: ds.content_hash(),
            seeds: train_cfg.seeds.clone(),
        },
        metrics,
        notes,
    );
    Ok(ModelOutcome {
        model: kind,
        config_hash: hash,
        runs,
        report,
    })
}

fn write_outcome(outputs: &mut Outputs, outcome: &ModelOutcome) -> Result<(), ExperimentError> {
    let m = outcome.model;
    for run in &outcome.runs {
        let dir = format!("{}/seed-{}", m.as_str(), run.seed);
        let mut log = format!("# config_hash={} seed={}\n", outcome.config_hash, run.seed);
        log.push_str(&epoch_log_csv(&run.epochs));
        outputs.write(&format!("{dir}/epochs.csv"), log.as_bytes(), Some(m), Some(run.seed))?;
        let ckpt = encode_checkpoint_tagged(&run.model, Some(&outcome.config_hash));
        outputs.write(&format!("{dir}/model.ckpt"), &ckpt, Some(m), Some(run.seed))?;
    }
    outputs.write(
        &format!("{}/report.json", m.as_str()),
        outcome.report.to_json().as_bytes(),
        Some(m),
        None,
    )?;
    outputs.write(
        &format!("{}/report.csv", m.as_str()),
        outcome.report.to_csv().as_bytes(),
        Some(m),
        None,
    )
}

/// Trains every configured model over all seeds and scores the metrics
/// split. Writes artifacts when `out` is given.
pub fn run_train(config: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<ModelOutcome>, ExperimentError> {
    config.validate()?;
    let prepared = prepare_data(config)?;
    eval_split(&prepared.dataset, config.metrics.split)?;
    let mut outputs = out.map(|o| Outputs::open(o, &config.hash(), "train")).transpose()?;
    let mut outcomes = Vec::new();
    for kind in config.train_models() {
        let outcome = train_one(config, &prepared, kind)?;
        if let Some(o) = outputs.as_mut() {
            write_outcome(o, &outcome)?;
        }
        outcomes.push(outcome);
    }
    if let Some(mut o) = outputs {
        write_config(&mut o, config)?;
        o.finish()?;
    }
    Ok(outcomes)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// `bag_id,instance,score,label` with one row per instance; the label cell
/// is empty when unknown.
pub fn score_dump_csv(bags: &[Bag], outputs: &[BagOutput]) -> String {
    let mut out = String::from("bag_id,instance,score,label\n");
    for (bag, o) in bags.iter().zip(outputs) {
        let id = csv_field(&bag.id);
        for (i, (inst, score)) in bag.instances.iter().zip(&o.instance_scores).enumerate() {
            let label = inst.label.map_or(String::new(), |l| l.to_string());
            writeln!(out, "{id},{i},{score:?},{label}").expect("write to String");
        }
    }
    out
}

/// Scores a checkpoint on the metrics split. `dump_scores` receives the
/// per-instance score CSV.
pub fn run_eval(
    config: &ExperimentConfig,
    checkpoint: &Path,
    out: Option<&Path>,
    dump_scores: Option<&Path>,
) -> Result<MetricsReport, ExperimentError> {
    config.validate()?;
    let model = read_checkpoint(checkpoint)?;
    let prepared = prepare_data(config)?;
    let ds = &prepared.dataset;
    if model.input_dim != ds.feature_dim {
        return Err(ExperimentError::Config(format!(
            "checkpoint expects {}-dimensional instances, dataset has {}",
            model.input_dim, ds.feature_dim
        )));
    }
    let bags = eval_split(ds, config.metrics.split)?;
    let (metrics, notes, outputs) = evaluate(&model, model.init_seed, bags, config.metrics.threshold)?;
    let hash = config.model_hash(model.kind);
    let report = MetricsReport::new(
        model.kind.as_str(),
        config.metrics.split.as_str(),
        Provenance {
            config_hash: hash.clone(),
            dataset_hash: ds.content_hash(),
            seeds: vec![model.init_seed],
        },
        vec![metrics],
        notes,
    );
    if let Some(path) = dump_scores {
        atomic_write(path, score_dump_csv(bags, &outputs).as_bytes())?;
    }
    if let Some(o) = out {
        let mut outputs = Outputs::open(o, &hash, "eval")?;
        let seed = Some(model.init_seed);
        outputs.write("eval/report.json", report.to_json().as_bytes(), Some(model.kind), seed)?;
        outputs.write("eval/report.csv", report.to_csv().as_bytes(), Some(model.kind), seed)?;
        outputs.finish()?;
    }
    Ok(report)
}

/// Trains each audit model on the poisoned data and judges it from mean
/// train and test slide AUC.
pub fn run_audit(config: &ExperimentConfig, out: Option<&Path>) -> Result<AuditReport, ExperimentError> {
    config.validate()?;
    if config.poison.is_none() {
        return Err(ExperimentError::Config(
            "audit needs a poison pair (train negatives and test positives)".into(),
        ));
    }
    let prepared = prepare_data(config)?;
    let ds = &prepared.dataset;
    let train_bags = eval_split(ds, Split::Train)?;
    eval_split(ds, Split::Test)?;
    let mut outputs = out.map(|o| Outputs::open(o, &config.hash(), "audit")).transpose()?;
    let audit_cfg = ExperimentConfig {
        metrics: MetricsConfig {
            split: Split::Test,
            ..config.metrics.clone()
        },
        ..config.clone()
    };
    let mut verdicts = Vec::new();
    for kind in config.audit_models() {
        let outcome = train_one(&audit_cfg, &prepared, kind)?;
        let mut seeds = Vec::new();
        for (run, test) in outcome.runs.iter().zip(&outcome.report.runs) {
            let (train, _, _) = evaluate(&run.model, run.seed, train_bags, config.metrics.threshold)?;
            let metric = |v: Option<f64>, what: &str| {
                v.ok_or_else(|| ExperimentError::Config(format!("{what} slide AUC is undefined for seed {}", run.seed)))
            };
            seeds.push(AuditSeed {
                seed: run.seed,
                train_slide_auc: metric(train.slide_auc, "train")?,
                test_slide_auc: metric(test.slide_auc, "test")?,
                test_patch_f1: test.patch_f1,
            });
        }
        let v = AuditVerdict::from_seeds(kind.as_str(), &outcome.config_hash, seeds, config.audit.respects_threshold);
        log::info!(
            "{kind}: train AUC {:.3}, test AUC {:.3} -> {}",
            v.train_slide_auc,
            v.test_slide_auc,
            v.verdict
        );
        if let Some(o) = outputs.as_mut() {
            write_outcome(o, &outcome)?;
        }
        verdicts.push(v);
    }
    let report = AuditReport {
        config_hash: config.hash(),
        dataset_hash: ds.content_hash(),
        respects_threshold: config.audit.respects_threshold,
        models: verdicts,
    };
    if let Some(mut o) = outputs {
        o.write("audit.json", report.to_json().as_bytes(), None, None)?;
        o.write("audit.csv", report.to_csv().as_bytes(), None, None)?;
        write_config(&mut o, config)?;
        o.finish()?;
    }
    Ok(report)
}
