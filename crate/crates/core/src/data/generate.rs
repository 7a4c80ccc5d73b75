//! Synthetic bags from a three-factor generative model.
//!
//! Each instance feature is `x = W_c·c + W_s·s + W_b·b + ε`:
//!
//! * `c` is the scalar causal concept: 0 for negative instances and
//!   `concept_margin × multiplier` for positives, where the multiplier is the
//!   salient or hard mode drawn once per positive bag;
//! * `s ~ N(0, style_scale²·I)` is per-instance style;
//! * `b` is the per-bag context. Its first axis is tied to the bag label with
//!   `bias_label_correlation`, the rest is Gaussian, all scaled by
//!   `bias_strength`;
//! * `ε ~ N(0, noise_scale²·I)`.
//!
//! The mixing columns `[W_c | W_s | W_b]` are orthonormal, drawn once per
//! dataset and shared by every split, so the concept→label mechanism is the
//! same everywhere. With [`OodSpec`] the test split gets a shifted context
//! distribution.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Bag, DataError, Dataset, Instance, Split};
use crate::rng::{stream, MilRng, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Context shift applied to the test split only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSpec {
    /// Length of the mean offset added to test-split contexts.
    pub context_shift: f64,
    /// Replaces `bias_label_correlation` in the test split when set.
    #[serde(default)]
    pub test_bias_label_correlation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub feature_dim: usize,
    /// Bags per class in each split; a split with zero bags is omitted.
    pub bags_per_class: SplitCounts,
    /// Inclusive instance-count range.
    pub instances_per_bag: (usize, usize),
    /// Range of the positive-instance fraction inside a positive bag.
    pub positive_rate: (f64, f64),
    pub salient_fraction: f64,
    pub concept_margin: f64,
    pub salient_multiplier: f64,
    pub hard_multiplier: f64,
    pub style_dim: usize,
    pub style_scale: f64,
    pub context_dim: usize,
    pub bias_strength: f64,
    pub bias_label_correlation: f64,
    pub noise_scale: f64,
    pub ood: Option<OodSpec>,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            bags_per_class: SplitCounts {
                train: 40,
                val: 10,
                test: 40,
            },
            instances_per_bag: (50, 200),
            positive_rate: (0.03, 0.10),
            salient_fraction: 0.5,
            concept_margin: 1.0,
            salient_multiplier: 3.0,
            hard_multiplier: 1.1,
            style_dim: 4,
            style_scale: 1.0,
            context_dim: 4,
            bias_strength: 0.0,
            bias_label_correlation: 0.0,
            noise_scale: 0.5,
            ood: None,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        let needed = 1 + self.style_dim + self.context_dim;
        if self.feature_dim < needed {
            return fail(format!(
                "feature_dim {} is smaller than concept + style + context dims ({needed})",
                self.feature_dim
            ));
        }
        let (lo, hi) = self.instances_per_bag;
        if lo == 0 || hi < lo {
            return fail(format!("instances_per_bag range ({lo}, {hi}) is invalid"));
        }
        let (plo, phi) = self.positive_rate;
        if !(plo > 0.0 && phi < 1.0 && plo <= phi) {
            return fail(format!(
                "positive_rate range ({plo}, {phi}) must lie in (0, 1); a positive bag needs a positive instance"
            ));
        }
        if !(0.0..=1.0).contains(&self.salient_fraction) {
            return fail(format!("salient_fraction {} outside [0, 1]", self.salient_fraction));
        }
        if !(-1.0..=1.0).contains(&self.bias_label_correlation) {
            return fail(format!(
                "bias_label_correlation {} outside [-1, 1]",
                self.bias_label_correlation
            ));
        }
        if let Some(r) = self.ood.and_then(|o| o.test_bias_label_correlation) {
            if !(-1.0..=1.0).contains(&r) {
                return fail(format!("test_bias_label_correlation {r} outside [-1, 1]"));
            }
        }
        for (name, v) in [
            ("concept_margin", self.concept_margin),
            ("salient_multiplier", self.salient_multiplier),
            ("hard_multiplier", self.hard_multiplier),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("style_scale", self.style_scale),
            ("bias_strength", self.bias_strength),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.bags_per_class.train == 0 {
            return fail("the train split needs at least one bag per class".into());
        }
        Ok(())
    }
}

/// Mixing maps and the non-causal poison direction, shared by all splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorState {
    /// Unit concept direction `W_c` (length d).
    pub concept_direction: Vec<f64>,
    /// `W_s` columns, each of length d.
    pub style_basis: Vec<Vec<f64>>,
    /// `W_b` columns, each of length d.
    pub context_basis: Vec<Vec<f64>>,
    /// Unit vector orthogonal to `W_c`; the default poison direction.
    pub poison_direction: Vec<f64>,
}

fn gaussian_vec(rng: &mut MilRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt of `v` against `basis`, then normalization.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let norm = dot(&v, &v).sqrt();
    (norm > 1e-8).then(|| v.into_iter().map(|x| x / norm).collect())
}

impl GeneratorState {
    fn draw(spec: &GenSpec, rng: &mut MilRng) -> Self {
        let d = spec.feature_dim;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let total = 1 + spec.style_dim + spec.context_dim;
        while basis.len() < total {
            if let Some(v) = orthonormalize(gaussian_vec(rng, d), &basis) {
                basis.push(v);
            }
        }
        let concept_direction = basis[0].clone();
        let style_basis = basis[1..1 + spec.style_dim].to_vec();
        let context_basis = basis[1 + spec.style_dim..].to_vec();
        let poison_direction = loop {
            if let Some(v) = orthonormalize(gaussian_vec(rng, d), &basis[..1]) {
                break v;
            }
        };
        Self {
            concept_direction,
            style_basis,
            context_basis,
            poison_direction,
        }
    }
}

/// Generates train/val/test splits. Splits with zero bags per class are left
/// out of the dataset.
pub fn generate(spec: &GenSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Purpose::Generator, 0);
    let state = GeneratorState::draw(spec, &mut rng);
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let per_class = spec.bags_per_class.get(split);
        if per_class == 0 {
            continue;
        }
        let mut rng = stream(spec.seed, Purpose::Generator, 1 + split.index());
        let mut bags = Vec::with_capacity(2 * per_class);
        for label in [0u8, 1] {
            for i in 0..per_class {
                let id = format!("{split}-{label}-{i:04}");
                bags.push(make_bag(spec, &state, split, label, id, &mut rng));
            }
        }
        splits.insert(split, bags);
    }
    Ok(Dataset {
        feature_dim: spec.feature_dim,
        seed: spec.seed,
        splits,
        generator: Some(state),
    })
}

fn make_bag(
    spec: &GenSpec,
    state: &GeneratorState,
    split: Split,
    label: u8,
    id: String,
    rng: &mut MilRng,
) -> Bag {
    let d = spec.feature_dim;
    let (lo, hi) = spec.instances_per_bag;
    let n = rng.random_range(lo..=hi);

    let context = draw_context(spec, split, label, rng);
    let mut base = vec![0.0; d];
    for (coef, col) in context.iter().zip(&state.context_basis) {
        base.iter_mut().zip(col).for_each(|(x, w)| *x += coef * w);
    }

    let width = (n as f64).sqrt().ceil() as usize;
    let lesions = if label == 1 {
        let rate = rng.random_range(spec.positive_rate.0..=spec.positive_rate.1);
        let n_pos = ((rate * n as f64).round() as usize).clamp(1, n);
        grow_lesions(n, width, n_pos, rng)
    } else {
        vec![None; n]
    };
    let magnitude = if label == 1 {
        let salient = rng.random_bool(spec.salient_fraction);
        let mult = if salient {
            spec.salient_multiplier
        } else {
            spec.hard_multiplier
        };
        spec.concept_margin * mult
    } else {
        0.0
    };

    let instances = lesions
        .into_iter()
        .enumerate()
        .map(|(j, lesion)| {
            let mut x = base.clone();
            if lesion.is_some() {
                x.iter_mut()
                    .zip(&state.concept_direction)
                    .for_each(|(v, w)| *v += magnitude * w);
            }
            for col in &state.style_basis {
                let s: f64 = StandardNormal.sample(rng);
                let s = s * spec.style_scale;
                x.iter_mut().zip(col).for_each(|(v, w)| *v += s * w);
            }
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += spec.noise_scale * e;
            }
            Instance {
                features: x.into_iter().map(|v| v as f32).collect(),
                label: Some(u8::from(lesion.is_some())),
                lesion,
                grid: Some(((j / width) as u32, (j % width) as u32)),
            }
        })
        .collect();

    Bag {
        id,
        label,
        instances,
        context: context.into_iter().map(|v| v as f32).collect(),
    }
}

fn draw_context(spec: &GenSpec, split: Split, label: u8, rng: &mut MilRng) -> Vec<f64> {
    let k = spec.context_dim;
    let ood = spec.ood.filter(|_| split == Split::Test);
    let rho = ood
        .and_then(|o| o.test_bias_label_correlation)
        .unwrap_or(spec.bias_label_correlation);
    let sign = if label == 1 { 1.0 } else { -1.0 };
    let spread = (1.0 - rho * rho).max(0.0).sqrt();
    let mut ctx: Vec<f64> = (0..k)
        .map(|i| {
            let g: f64 = StandardNormal.sample(rng);
            let aligned = if i == 0 { rho * sign } else { 0.0 };
            let free = if i == 0 { spread * g } else { g };
            spec.bias_strength * (aligned + free)
        })
        .collect();
    if let Some(o) = ood {
        let step = o.context_shift / (k as f64).sqrt();
        ctx.iter_mut().for_each(|v| *v += step);
    }
    ctx
}

/// Assigns `n_pos` grid cells to 1–3 contiguous lesions grown by randomized
/// breadth-first search. Returns the lesion id (1-based) for each cell.
fn grow_lesions(n: usize, width: usize, n_pos: usize, rng: &mut MilRng) -> Vec<Option<u32>> {
    let mut owner: Vec<Option<u32>> = vec![None; n];
    let n_lesions = rng.random_range(1..=n_pos.min(3));
    let mut sizes = vec![1usize; n_lesions];
    for _ in n_lesions..n_pos {
        let k = rng.random_range(0..n_lesions);
        sizes[k] += 1;
    }
    for (lesion, &size) in sizes.iter().enumerate() {
        let id = lesion as u32 + 1;
        let mut placed = 0;
        while placed < size {
            // (Re)seed on a random free cell; continuing the same lesion id
            // if the frontier ran out.
            let free: Vec<usize> = (0..n).filter(|&c| owner[c].is_none()).collect();
            let seed = free[rng.random_range(0..free.len())];
            let mut frontier = vec![seed];
            while let Some(cell) = frontier.pop() {
                if placed == size {
                    break;
                }
                if owner[cell].is_some() {
                    continue;
                }
                owner[cell] = Some(id);
                placed += 1;
                let (r, c) = (cell / width, cell % width);
                let mut next = Vec::with_capacity(4);
                if c > 0 {
                    next.push(cell - 1);
                }
                if c + 1 < width && cell + 1 < n {
                    next.push(cell + 1);
                }
                if r > 0 {
                    next.push(cell - width);
                }
                if cell + width < n {
                    next.push(cell + width);
                }
                next.retain(|&x| owner[x].is_none());
                next.shuffle(rng);
                frontier.splice(0..0, next);
            }
        }
    }
    owner
}
