//! The training loop.
//!
//! Each epoch shuffles the training bags with the run's shuffle stream,
//! groups them into mini-batches of `batch_size` bags, and takes one
//! optimizer step per batch on the mean batch loss. After every epoch the
//! validation slide AUC is computed in eval mode. An epoch improves on the
//! best so far when its AUC is higher, or equal with a lower validation
//! cross-entropy; the best epoch's parameters are restored at the end.
//!
//! Every random draw of a run comes from streams keyed by the run seed (see
//! [`crate::rng`]): initialization, shuffling, ε/dropout noise and the
//! validation carve are independent, so runs for different seeds can execute
//! concurrently and still replay bit for bit.

use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::loss::{bce_loss, focusmil_loss, KlScope, LossNodes};
use super::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::data::{Bag, Dataset, Split};
use crate::diffcore::{DiffError, Graph, Matrix};
use crate::exec::Execution;
use crate::metrics::auc;
use crate::models::{BagOutput, BagTrace, Hyperparams, Mode, ModelError, ModelKind, ModelParams, NoiseSource};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure in seed {seed}, epoch {epoch}: {detail}")]
    Numerical { seed: u64, epoch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub hyper: Hyperparams,
    /// KL coefficient (FocusMIL only).
    pub beta: f64,
    pub kl_scope: KlScope,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a new best validation AUC before stopping.
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// Share of the train split held out for validation when the dataset has
    /// no val split.
    pub val_fraction: f64,
    /// Record wall-clock seconds per epoch; otherwise the column is 0 so
    /// logs are reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::FocusMil,
            hyper: Hyperparams::default(),
            beta: 0.01,
            kl_scope: KlScope::AllInstances,
            batch_size: 3,
            optimizer: OptimizerKind::AdamW,
            lr: 1e-4,
            weight_decay: 1e-2,
            max_epochs: 200,
            patience: 20,
            seeds: vec![0, 1, 2, 3, 4],
            val_fraction: 0.2,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        Ok(())
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean over training bags of `cls_term + β·kl_term`.
    pub train_loss: f64,
    pub cls_term: f64,
    pub kl_term: f64,
    pub val_slide_auc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub stopped_early: bool,
    /// Parameters from `best_epoch`.
    pub model: ModelParams,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,cls_term,kl_term,val_slide_auc,seconds";

/// Renders the per-epoch CSV log.
pub fn epoch_log_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in rows {
        // `{:?}` prints the shortest string that round-trips the f64.
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?}",
            r.epoch, r.train_loss, r.cls_term, r.kl_term, r.val_slide_auc, r.seconds
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_epoch_log(rows: &[EpochRow], path: impl AsRef<Path>) -> io::Result<()> {
    std::fs::write(path, epoch_log_csv(rows))
}

/// Stratified split of `bags` into (train, val), reproducible from `seed`.
/// Each class keeps at least one bag on each side when it has two or more.
pub fn carve_validation(bags: &[Bag], fraction: f64, seed: u64) -> (Vec<Bag>, Vec<Bag>) {
    let mut rng = stream(seed, Purpose::Split, 0);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let k = if n >= 2 {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        let (v, t) = idx.split_at(k);
        let mut v = v.to_vec();
        let mut t = t.to_vec();
        v.sort_unstable();
        t.sort_unstable();
        val.extend(v.into_iter().map(|i| bags[i].clone()));
        train.extend(t.into_iter().map(|i| bags[i].clone()));
    }
    (train, val)
}

/// Builds the objective for one mini-batch of traces.
pub fn batch_loss(
    g: &mut Graph,
    config: &TrainConfig,
    traces: &[BagTrace],
    labels: &[u8],
) -> Result<LossNodes, DiffError> {
    match config.model {
        ModelKind::FocusMil => focusmil_loss(g, traces, labels, config.beta, config.kl_scope),
        ModelKind::MiNet | ModelKind::Abmil => bce_loss(g, traces, labels),
    }
}

/// Eval-mode outputs for every bag.
pub fn predict_bags(model: &ModelParams, bags: &[Bag]) -> Result<Vec<BagOutput>, ModelError> {
    bags.iter().map(|b| model.predict(b)).collect()
}

/// Probability clamp for logged cross-entropy.
const LOG_EPS: f64 = 1e-12;

/// Eval-mode slide AUC and mean cross-entropy on `bags`.
fn validate_on(model: &ModelParams, bags: &[Bag]) -> Result<(f64, f64), TrainError> {
    let outs = predict_bags(model, bags)?;
    let scores: Vec<f64> = outs.iter().map(|o| o.bag_score).collect();
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let auc = auc(&scores, &labels).map_err(|e| TrainError::Config(format!("validation split: {e}")))?;
    let bce = scores
        .iter()
        .zip(&labels)
        .map(|(&s, &y)| {
            let s = s.clamp(LOG_EPS, 1.0 - LOG_EPS);
            if y == 1 {
                -s.ln()
            } else {
                -(1.0 - s).ln()
            }
        })
        .sum::<f64>()
        / bags.len() as f64;
    Ok((auc, bce))
}

struct Step {
    loss: f64,
    cls: f64,
    kl: f64,
}

fn train_step(
    model: &mut ModelParams,
    opt: &mut Optimizer,
    config: &TrainConfig,
    batch: &[(&Matrix, u8)],
    noise: &mut dyn NoiseSource,
) -> Result<Step, ModelError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g)?;
    let mut traces = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        let xv = g.constant((*x).clone())?;
        let (_, trace) = model.forward(&mut g, &vars, xv, Mode::Train, noise)?;
        traces.push(trace);
        labels.push(*y);
    }
    let loss = batch_loss(&mut g, config, &traces, &labels)?;
    let (total, cls, kl) = loss.values(&g);
    let grads = g.backward(loss.total)?;
    let zero: Vec<Matrix> = model
        .params
        .iter()
        .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
        .collect();
    let grad_refs: Vec<&Matrix> = vars
        .iter()
        .zip(&zero)
        .map(|(v, z)| grads.get(*v).unwrap_or(z))
        .collect();
    let mut params: Vec<&mut Matrix> = model.params.iter_mut().map(|p| &mut p.value).collect();
    opt.step(&mut params, &grad_refs);
    if params.iter().any(|p| !p.is_finite()) {
        return Err(ModelError::Diff(DiffError::NonFinite { op: "optimizer step" }));
    }
    Ok(Step { loss: total, cls, kl })
}

/// Trains one seed on explicit train/val bags.
pub fn train_seed(
    train: &[Bag],
    val: &[Bag],
    feature_dim: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<RunRecord, TrainError> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("train and validation splits must be non-empty".into()));
    }
    let numerical = |epoch: usize, e: &dyn std::fmt::Display| TrainError::Numerical {
        seed,
        epoch,
        detail: e.to_string(),
    };
    let mut model = ModelParams::init(config.model, feature_dim, config.hyper, seed)?;
    let mut opt = Optimizer::new(
        config.optimizer_config(),
        model.params.iter().map(|p| p.value.shape()),
    );
    let mut shuffle = stream(seed, Purpose::Shuffle, 0);
    let mut noise = stream(seed, Purpose::Noise, 0);
    let features: Vec<Matrix> = train.iter().map(Bag::features).collect();

    let mut rows = Vec::new();
    // (val AUC, val cross-entropy, epoch, parameters)
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, 0usize, model.clone());
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let (mut loss, mut cls, mut kl) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&Matrix, u8)> =
                chunk.iter().map(|&i| (&features[i], train[i].label)).collect();
            let step = match train_step(&mut model, &mut opt, config, &batch, &mut noise) {
                Ok(s) => s,
                Err(ModelError::Diff(e)) => return Err(numerical(epoch, &e)),
                Err(e) => return Err(e.into()),
            };
            let w = chunk.len() as f64;
            loss += step.loss * w;
            cls += step.cls * w;
            kl += step.kl * w;
        }
        let n = train.len() as f64;
        let (val_auc, val_bce) = match validate_on(&model, val) {
            Err(TrainError::Model(ModelError::Diff(e))) => return Err(numerical(epoch, &e)),
            other => other?,
        };
        rows.push(EpochRow {
            epoch,
            train_loss: loss / n,
            cls_term: cls / n,
            kl_term: kl / n,
            val_slide_auc: val_auc,
            seconds: if config.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        log::debug!("seed {seed} epoch {epoch}: loss {:.5} val auc {val_auc:.4}", loss / n);
        if val_auc > best.0 || (val_auc == best.0 && val_bce < best.1) {
            best = (val_auc, val_bce, epoch, model.clone());
        } else if epoch - best.2 >= config.patience {
            stopped_early = true;
            break;
        }
    }
    let (best_val_auc, _, best_epoch, model) = best;
    log::info!(
        "{} seed {seed}: best val AUC {best_val_auc:.4} at epoch {best_epoch} of {}",
        config.model,
        rows.len()
    );
    Ok(RunRecord {
        seed,
        epochs: rows,
        best_epoch,
        best_val_auc,
        stopped_early,
        model,
    })
}

/// Trains every configured seed. Uses the dataset's val split when present,
/// otherwise carves one from train per seed.
pub fn train_model(
    dataset: &Dataset,
    config: &TrainConfig,
    exec: Execution,
) -> Result<Vec<RunRecord>, TrainError> {
    config.validate()?;
    let train = dataset
        .split(Split::Train)
        .filter(|b| !b.is_empty())
        .ok_or_else(|| TrainError::Config("dataset has no train bags".into()))?;
    let val = dataset.split(Split::Val).filter(|b| !b.is_empty());
    exec.map(&config.seeds, |&seed| match val {
        Some(v) => train_seed(train, v, dataset.feature_dim, config, seed),
        None => {
            let (t, v) = carve_validation(train, config.val_fraction, seed);
            train_seed(&t, &v, dataset.feature_dim, config, seed)
        }
    })
    .into_iter()
    .collect()
}
