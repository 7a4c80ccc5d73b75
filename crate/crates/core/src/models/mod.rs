//! The three MIL models as differentiable functions of a bag.
//!
//! * **mi-Net**: instance MLP `d→h₁→h₂→1` with ReLU, max-pooled scores.
//! * **ABMIL**: instance embedding `d→h` (ReLU), gated attention
//!   `softmax(w·(tanh(HV) ⊙ sigmoid(HU)))`, weighted-sum bag feature and a
//!   linear bag classifier. Instance scores are the min-max normalized
//!   attention weights.
//! * **FocusMIL**: variational encoder `d→h` (ReLU) with mean and log-variance
//!   heads, reparameterized latent `z = μ + exp(½·logσ²)⊙ε` in training and
//!   `z = μ` in evaluation, a linear instance classifier on `z` and max
//!   pooling.
//!
//! Max pooling runs on post-sigmoid instance scores; the first maximal
//! instance wins ties. The bag logit handed to the loss is the logit of that
//! same instance.

mod checkpoint;
mod noise;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, encode_checkpoint_tagged, read_checkpoint, write_checkpoint, CheckpointHeader,
    ParamShape, CHECKPOINT_VERSION,
};
pub use noise::{NoiseSource, RecordingNoise, ReplayNoise, ZeroNoise};

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Bag;
use crate::diffcore::{sigmoid, DiffError, Graph, Matrix, Var};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "mi-net")]
    MiNet,
    #[serde(rename = "abmil")]
    Abmil,
    #[serde(rename = "focusmil")]
    FocusMil,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::MiNet, ModelKind::Abmil, ModelKind::FocusMil];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::MiNet => "mi-net",
            ModelKind::Abmil => "abmil",
            ModelKind::FocusMil => "focusmil",
        }
    }

    pub fn is_max_pool(self) -> bool {
        self != ModelKind::Abmil
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mi-net" | "minet" => Ok(ModelKind::MiNet),
            "abmil" => Ok(ModelKind::Abmil),
            "focusmil" => Ok(ModelKind::FocusMil),
            other => Err(format!("unknown model {other:?} (mi-net|abmil|focusmil)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// First hidden layer (mi-Net), embedding (ABMIL) or encoder width.
    pub hidden_dim: usize,
    /// Second mi-Net hidden layer.
    pub second_hidden_dim: usize,
    pub latent_dim: usize,
    pub attention_dim: usize,
    /// Dropout rate; ABMIL applies it to both attention branches, mi-Net to
    /// its hidden layers. FocusMIL ignores it.
    pub dropout: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            second_hidden_dim: 64,
            latent_dim: 35,
            attention_dim: 64,
            dropout: None,
        }
    }
}

impl Hyperparams {
    pub fn dropout_for(&self, kind: ModelKind) -> f64 {
        match kind {
            ModelKind::Abmil => self.dropout.unwrap_or(0.25),
            ModelKind::MiNet => self.dropout.unwrap_or(0.0),
            ModelKind::FocusMil => 0.0,
        }
    }

    fn validate(&self, kind: ModelKind) -> Result<(), ModelError> {
        let dims = [
            self.hidden_dim,
            self.second_hidden_dim,
            self.latent_dim,
            self.attention_dim,
        ];
        if dims.contains(&0) {
            return Err(ModelError::Contract("layer widths must be positive".into()));
        }
        let p = self.dropout_for(kind);
        if !(0.0..1.0).contains(&p) {
            return Err(ModelError::Contract(format!("dropout {p} outside [0, 1)")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Matrix,
}

/// A model's parameters in declaration order plus what is needed to
/// rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub hyper: Hyperparams,
    pub input_dim: usize,
    pub init_seed: u64,
    pub params: Vec<NamedParam>,
}

/// Per-instance diagonal Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn kl_to_standard_normal(lat: &LatentGaussian) -> f64 {
    debug_assert_eq!(lat.mu.len(), lat.log_var.len());
    0.5 * lat
        .mu
        .iter()
        .zip(&lat.log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagOutput {
    pub bag_score: f64,
    pub instance_scores: Vec<f64>,
    /// Selected instance (max-pool models).
    pub argmax: Option<usize>,
    /// Softmax attention (ABMIL).
    pub attention: Option<Vec<f64>>,
    /// Encoder posteriors (FocusMIL).
    pub latents: Option<Vec<LatentGaussian>>,
}

impl BagOutput {
    /// Maps outputs computed on rows `order[0], order[1], ...` back to the
    /// original row positions.
    fn unpermute(self, order: &[usize]) -> Self {
        fn scatter<T: Clone>(sorted: Vec<T>, order: &[usize]) -> Vec<T> {
            let mut out = sorted.clone();
            for (k, v) in sorted.into_iter().enumerate() {
                out[order[k]] = v;
            }
            out
        }
        Self {
            bag_score: self.bag_score,
            instance_scores: scatter(self.instance_scores, order),
            argmax: self.argmax.map(|a| order[a]),
            attention: self.attention.map(|a| scatter(a, order)),
            latents: self.latents.map(|l| scatter(l, order)),
        }
    }
}

/// Graph handles a loss needs from one forward pass.
#[derive(Clone, Debug)]
pub struct BagTrace {
    /// `1×1` bag logit; `sigmoid(logit)` is the bag score.
    pub logit: Var,
    /// `n×1` instance logits (max-pool models).
    pub instance_logits: Option<Var>,
    /// `n×k` latent means and log-variances (FocusMIL).
    pub mu: Option<Var>,
    pub log_var: Option<Var>,
    pub argmax: Option<usize>,
    /// `1×h` bag feature (ABMIL).
    pub bag_feature: Option<Var>,
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl ModelParams {
    /// Layer shapes `(name, rows, cols, fan_in)` in declaration order.
    pub fn layout(kind: ModelKind, d: usize, hp: &Hyperparams) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut linear = |name: &str, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.weight"), fan_in, fan_out, fan_in));
            out.push((format!("{name}.bias"), 1, fan_out, fan_in));
        };
        match kind {
            ModelKind::MiNet => {
                linear("fc1", d, hp.hidden_dim);
                linear("fc2", hp.hidden_dim, hp.second_hidden_dim);
                linear("out", hp.second_hidden_dim, 1);
            }
            ModelKind::Abmil => {
                linear("embed", d, hp.hidden_dim);
                linear("attn_v", hp.hidden_dim, hp.attention_dim);
                linear("attn_u", hp.hidden_dim, hp.attention_dim);
                linear("attn_w", hp.attention_dim, 1);
                linear("cls", hp.hidden_dim, 1);
            }
            ModelKind::FocusMil => {
                linear("enc", d, hp.hidden_dim);
                linear("mu", hp.hidden_dim, hp.latent_dim);
                linear("logvar", hp.hidden_dim, hp.latent_dim);
                linear("cls", hp.latent_dim, 1);
            }
        }
        out
    }

    /// Fresh parameters, uniform in `±1/√fan_in`, reproducible from `seed`.
    pub fn init(
        kind: ModelKind,
        input_dim: usize,
        hyper: Hyperparams,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if input_dim == 0 {
            return Err(ModelError::Contract("input dimension must be positive".into()));
        }
        hyper.validate(kind)?;
        let mut rng = stream(seed, Purpose::Init, 0);
        let params = Self::layout(kind, input_dim, &hyper)
            .into_iter()
            .map(|(name, r, c, fan_in)| NamedParam {
                value: uniform_init(r, c, fan_in, &mut rng),
                name,
            })
            .collect();
        Ok(Self {
            kind,
            hyper,
            input_dim,
            init_seed: seed,
            params,
        })
    }

    /// Checks that every parameter matches the declared layout.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.hyper.validate(self.kind)?;
        let layout = Self::layout(self.kind, self.input_dim, &self.hyper);
        if layout.len() != self.params.len() {
            return Err(ModelError::Contract(format!(
                "{} parameters, layout expects {}",
                self.params.len(),
                layout.len()
            )));
        }
        for ((name, r, c, _), p) in layout.iter().zip(&self.params) {
            if &p.name != name || p.value.shape() != (*r, *c) {
                return Err(ModelError::Contract(format!(
                    "parameter {} {:?} does not match layout {name} {:?}",
                    p.name,
                    p.value.shape(),
                    (r, c)
                )));
            }
            if !p.value.is_finite() {
                return Err(ModelError::Contract(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers the parameters as trainable leaves, in declaration order.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>, ModelError> {
        Ok(self
            .params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect::<Result<_, _>>()?)
    }

    /// Registers the parameters as constants (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Vec<Var>, ModelError> {
        Ok(self
            .params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect::<Result<_, _>>()?)
    }

    /// Builds the forward graph for one bag given as the node `x` (`n×d`).
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<(BagOutput, BagTrace), ModelError> {
        let (n, d) = g.value(x).shape();
        if d != self.input_dim {
            return Err(ModelError::Contract(format!(
                "bag has {d} features, model expects {}",
                self.input_dim
            )));
        }
        if n == 0 {
            return Err(ModelError::Contract("bag has no instances".into()));
        }
        if vars.len() != self.params.len() {
            return Err(ModelError::Contract("parameter handles do not match the model".into()));
        }
        match self.kind {
            ModelKind::MiNet => self.minet_forward(g, vars, x, mode, noise),
            ModelKind::Abmil => self.abmil_forward(g, vars, x, mode, noise),
            ModelKind::FocusMil => self.focusmil_forward(g, vars, x, mode, noise),
        }
    }

    /// Eval-mode forward pass on a bag.
    ///
    /// Instances run in lexicographic feature order and the per-instance
    /// outputs are mapped back, so reordering a bag leaves every output
    /// bit-identical (attention pooling sums in a fixed order).
    pub fn predict(&self, bag: &Bag) -> Result<BagOutput, ModelError> {
        let feats = bag.features();
        let mut order: Vec<usize> = (0..feats.rows()).collect();
        order.sort_by(|&a, &b| {
            feats
                .row(a)
                .iter()
                .zip(feats.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let sorted = Matrix::from_fn(feats.rows(), feats.cols(), |r, c| feats.row(order[r])[c]);
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g)?;
        let x = g.constant(sorted)?;
        let (out, _) = self.forward(&mut g, &vars, x, Mode::Eval, &mut ZeroNoise)?;
        Ok(out.unpermute(&order))
    }

    fn dropout(
        &self,
        g: &mut Graph,
        h: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<Var, ModelError> {
        let p = self.hyper.dropout_for(self.kind);
        if mode == Mode::Eval || p == 0.0 {
            return Ok(h);
        }
        let (r, c) = g.value(h).shape();
        let keep = 1.0 - p;
        let mask = noise.keep_mask(r, c, keep).map(|m| m / keep);
        Ok(g.mul_const(h, mask)?)
    }

    fn minet_forward(
        &self,
        g: &mut Graph,
        v: &[Var],
        x: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<(BagOutput, BagTrace), ModelError> {
        let h1 = linear(g, x, v[0], v[1])?;
        let h1 = g.relu(h1)?;
        let h1 = self.dropout(g, h1, mode, noise)?;
        let h2 = linear(g, h1, v[2], v[3])?;
        let h2 = g.relu(h2)?;
        let h2 = self.dropout(g, h2, mode, noise)?;
        let logits = linear(g, h2, v[4], v[5])?;
        max_pool(g, logits, None, None)
    }

    fn abmil_forward(
        &self,
        g: &mut Graph,
        v: &[Var],
        x: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<(BagOutput, BagTrace), ModelError> {
        let h = linear(g, x, v[0], v[1])?;
        let h = g.relu(h)?;
        let a_t = linear(g, h, v[2], v[3])?;
        let a_t = g.tanh(a_t)?;
        let a_t = self.dropout(g, a_t, mode, noise)?;
        let a_s = linear(g, h, v[4], v[5])?;
        let a_s = g.sigmoid(a_s)?;
        let a_s = self.dropout(g, a_s, mode, noise)?;
        let gate = g.hadamard(a_t, a_s)?;
        let scores = linear(g, gate, v[6], v[7])?;
        let row = g.transpose(scores)?;
        let alpha = g.softmax_rows(row)?;
        let z = g.matmul(alpha, h)?;
        let logit = linear(g, z, v[8], v[9])?;

        let attention = g.value(alpha).as_slice().to_vec();
        let out = BagOutput {
            bag_score: sigmoid(g.value(logit).item()),
            instance_scores: min_max_normalize(&attention),
            argmax: None,
            attention: Some(attention),
            latents: None,
        };
        let trace = BagTrace {
            logit,
            instance_logits: None,
            mu: None,
            log_var: None,
            argmax: None,
            bag_feature: Some(z),
        };
        Ok((out, trace))
    }

    fn focusmil_forward(
        &self,
        g: &mut Graph,
        v: &[Var],
        x: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<(BagOutput, BagTrace), ModelError> {
        let h = linear(g, x, v[0], v[1])?;
        let h = g.relu(h)?;
        let mu = linear(g, h, v[2], v[3])?;
        let log_var = linear(g, h, v[4], v[5])?;
        let z = match mode {
            Mode::Eval => mu,
            Mode::Train => {
                let (n, k) = g.value(mu).shape();
                let eps = noise.standard_normal(n, k);
                let half = g.scale(log_var, 0.5)?;
                let sigma = g.exp(half)?;
                let jitter = g.mul_const(sigma, eps)?;
                g.add(mu, jitter)?
            }
        };
        let logits = linear(g, z, v[6], v[7])?;
        let latents = (0..g.value(mu).rows())
            .map(|r| LatentGaussian {
                mu: g.value(mu).row(r).to_vec(),
                log_var: g.value(log_var).row(r).to_vec(),
            })
            .collect();
        let (mut out, trace) = max_pool(g, logits, Some(mu), Some(log_var))?;
        out.latents = Some(latents);
        Ok((out, trace))
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

/// Sigmoid instance scores, max over them, and the winning instance's logit.
fn max_pool(
    g: &mut Graph,
    logits: Var,
    mu: Option<Var>,
    log_var: Option<Var>,
) -> Result<(BagOutput, BagTrace), ModelError> {
    let scores = g.sigmoid(logits)?;
    let row = g.transpose(scores)?;
    let (bag, argmax) = g.max_rows(row)?;
    let idx = argmax[0];
    let logit = g.select_rows(logits, &[idx])?;
    let out = BagOutput {
        bag_score: g.value(bag).item(),
        instance_scores: g.value(scores).as_slice().to_vec(),
        argmax: Some(idx),
        attention: None,
        latents: None,
    };
    let trace = BagTrace {
        logit,
        instance_logits: Some(logits),
        mu,
        log_var,
        argmax: Some(idx),
        bag_feature: None,
    };
    Ok((out, trace))
}

/// Rescales to `[0, 1]` within the bag; a constant vector maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;
    use rand::SeedableRng;

    fn small_hp() -> Hyperparams {
        Hyperparams {
            hidden_dim: 8,
            second_hidden_dim: 6,
            latent_dim: 4,
            attention_dim: 5,
            dropout: None,
        }
    }

    fn bag_from(rows: &[Vec<f32>]) -> Bag {
        Bag {
            id: "t".into(),
            label: 0,
            instances: rows.iter().map(|r| Instance::new(r.clone())).collect(),
            context: vec![],
        }
    }

    fn random_bag(n: usize, d: usize, seed: u64) -> Bag {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        bag_from(&rows)
    }

    #[test]
    fn init_is_reproducible_and_consistent() {
        for kind in ModelKind::ALL {
            let a = ModelParams::init(kind, 7, small_hp(), 3).unwrap();
            let b = ModelParams::init(kind, 7, small_hp(), 3).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            let c = ModelParams::init(kind, 7, small_hp(), 4).unwrap();
            assert_ne!(a.params, c.params);
        }
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        for kind in ModelKind::ALL {
            let m = ModelParams::init(kind, 5, small_hp(), 0).unwrap();
            let bag = random_bag(3, 4, 0);
            assert!(matches!(m.predict(&bag), Err(ModelError::Contract(_))));
        }
    }

    #[test]
    fn single_instance_bag_score_is_instance_score() {
        for kind in [ModelKind::MiNet, ModelKind::FocusMil] {
            let m = ModelParams::init(kind, 4, small_hp(), 1).unwrap();
            let out = m.predict(&random_bag(1, 4, 9)).unwrap();
            assert_eq!(out.bag_score, out.instance_scores[0]);
            assert_eq!(out.argmax, Some(0));
        }
    }

    #[test]
    fn minet_bag_score_matches_per_instance_passes() {
        let m = ModelParams::init(ModelKind::MiNet, 4, small_hp(), 2).unwrap();
        let bag = random_bag(5, 4, 10);
        let out = m.predict(&bag).unwrap();
        let singles: Vec<f64> = bag
            .instances
            .iter()
            .map(|inst| {
                let one = bag_from(std::slice::from_ref(&inst.features));
                m.predict(&one).unwrap().bag_score
            })
            .collect();
        let best = singles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.bag_score, best);
        assert_eq!(out.bag_score, out.instance_scores[out.argmax.unwrap()]);
    }

    #[test]
    fn duplicating_argmax_keeps_bag_score() {
        let m = ModelParams::init(ModelKind::MiNet, 4, small_hp(), 5).unwrap();
        let mut bag = random_bag(6, 4, 11);
        let out = m.predict(&bag).unwrap();
        let top = bag.instances[out.argmax.unwrap()].clone();
        bag.instances.push(top);
        assert_eq!(m.predict(&bag).unwrap().bag_score, out.bag_score);
    }

    #[test]
    fn abmil_identical_instances_share_attention() {
        let m = ModelParams::init(ModelKind::Abmil, 3, small_hp(), 1).unwrap();
        let bag = bag_from(&[vec![0.3, -1.0, 2.0], vec![0.3, -1.0, 2.0]]);
        let out = m.predict(&bag).unwrap();
        assert_eq!(out.attention.unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn abmil_single_instance_feature_is_its_embedding() {
        let m = ModelParams::init(ModelKind::Abmil, 3, small_hp(), 8).unwrap();
        let bag = random_bag(1, 3, 4);
        let mut g = Graph::new();
        let vars = m.bind_frozen(&mut g).unwrap();
        let x = g.constant(bag.features()).unwrap();
        let (out, trace) = m
            .forward(&mut g, &vars, x, Mode::Eval, &mut ZeroNoise)
            .unwrap();
        assert_eq!(out.attention.as_deref(), Some(&[1.0][..]));
        let emb = bag
            .features()
            .matmul(&m.params[0].value)
            .zip_map(&m.params[1].value, |a, b| (a + b).max(0.0));
        assert_eq!(g.value(trace.bag_feature.unwrap()), &emb);
    }

    #[test]
    fn abmil_attention_sums_to_one() {
        let m = ModelParams::init(ModelKind::Abmil, 4, small_hp(), 6).unwrap();
        for seed in 0..20 {
            let out = m.predict(&random_bag(1 + seed as usize % 9, 4, seed)).unwrap();
            let a = out.attention.unwrap();
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(a.iter().all(|&w| w >= 0.0));
            assert!(out.instance_scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn focusmil_eval_is_deterministic_and_matches_zero_eps_train() {
        let m = ModelParams::init(ModelKind::FocusMil, 4, small_hp(), 7).unwrap();
        let bag = random_bag(6, 4, 12);
        let a = m.predict(&bag).unwrap();
        let b = m.predict(&bag).unwrap();
        assert_eq!(a, b);

        let mut g = Graph::new();
        let vars = m.bind(&mut g).unwrap();
        let x = g.constant(bag.features()).unwrap();
        let (train, _) = m
            .forward(&mut g, &vars, x, Mode::Train, &mut ZeroNoise)
            .unwrap();
        assert_eq!(train, a);
    }

    #[test]
    fn focusmil_train_bag_score_matches_replayed_eps() {
        let m = ModelParams::init(ModelKind::FocusMil, 4, small_hp(), 13).unwrap();
        let bag = random_bag(5, 4, 21);
        let mut rng = crate::rng::stream(99, Purpose::Noise, 0);
        let mut rec = RecordingNoise::new(&mut rng);
        let mut g = Graph::new();
        let vars = m.bind(&mut g).unwrap();
        let x = g.constant(bag.features()).unwrap();
        let (out, _) = m.forward(&mut g, &vars, x, Mode::Train, &mut rec).unwrap();
        let eps = rec.normals[0].clone();

        // Independent oracle: score each instance alone with its own ε row.
        let per_instance: Vec<f64> = (0..bag.len())
            .map(|j| {
                let one = bag_from(std::slice::from_ref(&bag.instances[j].features));
                let mut g = Graph::new();
                let vars = m.bind(&mut g).unwrap();
                let x = g.constant(one.features()).unwrap();
                let row = Matrix::from_vec(1, eps.cols(), eps.row(j).to_vec()).unwrap();
                let mut replay = ReplayNoise::new([row]);
                m.forward(&mut g, &vars, x, Mode::Train, &mut replay)
                    .unwrap()
                    .0
                    .bag_score
            })
            .collect();
        let best = per_instance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((out.bag_score - best).abs() < 1e-15);
    }

    #[test]
    fn kl_closed_form_values() {
        let zero = LatentGaussian {
            mu: vec![0.0; 3],
            log_var: vec![0.0; 3],
        };
        assert_eq!(kl_to_standard_normal(&zero), 0.0);
        let one = LatentGaussian {
            mu: vec![1.0],
            log_var: vec![0.0],
        };
        assert_eq!(kl_to_standard_normal(&one), 0.5);
    }

    #[test]
    fn min_max_normalization() {
        assert_eq!(min_max_normalize(&[0.2, 0.6, 0.4]), vec![0.0, 1.0, 0.5000000000000001]);
        assert_eq!(min_max_normalize(&[0.5, 0.5]), vec![0.0, 0.0]);
    }
}
