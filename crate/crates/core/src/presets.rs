//! Built-in experiment configurations for the desk-scale benchmark runs.
//!
//! All presets use 16-dimensional instances, 30 to 60 instances per bag,
//! 50 train and 30 test bags per class (validation carved from train), and
//! AdamW at learning rate 1e-3.

use crate::data::{GenSpec, PoisonDelta, SplitCounts};
use crate::experiment::{DataSource, ExperimentConfig, PoisonPair};
use crate::models::ModelKind;
use crate::train::TrainConfig;

/// Poison magnitudes of the audit sweep, as multiples of the concept margin.
pub const AUDIT_MAGNITUDES: [f64; 3] = [0.5, 1.0, 2.0];

pub const AUDIT_POISON_FRACTION: f64 = 0.2;

/// β values of the KL ablation.
pub const ABLATION_BETAS: [f64; 4] = [0.0, 0.001, 0.01, 0.1];

pub const NAMES: [&str; 4] = ["audit", "separable", "mixed", "mixed-biased"];

fn base_spec() -> GenSpec {
    GenSpec {
        feature_dim: 16,
        bags_per_class: SplitCounts {
            train: 50,
            val: 0,
            test: 30,
        },
        instances_per_bag: (30, 60),
        noise_scale: 0.5,
        seed: 7,
        ..GenSpec::default()
    }
}

fn base_train(model: ModelKind, max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        model,
        lr: 1e-3,
        max_epochs,
        patience,
        ..TrainConfig::default()
    }
}

/// Positive instances share one concept mode two units along `W_c`.
pub fn audit_spec() -> GenSpec {
    GenSpec {
        salient_fraction: 1.0,
        salient_multiplier: 1.0,
        concept_margin: 2.0,
        ..base_spec()
    }
}

/// The Standard-MIL audit with a poison offset of `factor ×` the concept
/// margin, run for all three models.
pub fn audit(factor: f64) -> ExperimentConfig {
    let spec = audit_spec();
    let delta = PoisonDelta::Magnitude(factor * spec.concept_margin);
    let mut c = ExperimentConfig::new(DataSource::Generate(spec));
    c.poison = Some(PoisonPair::audit(AUDIT_POISON_FRACTION, delta));
    c.train = base_train(ModelKind::FocusMil, 100, 20);
    c.models = Some(ModelKind::ALL.to_vec());
    c
}

/// Salient positives only, no bag-context bias.
pub fn separable() -> ExperimentConfig {
    let spec = GenSpec {
        salient_fraction: 1.0,
        concept_margin: 2.0,
        ..base_spec()
    };
    let mut c = ExperimentConfig::new(DataSource::Generate(spec));
    c.train = base_train(ModelKind::FocusMil, 100, 20);
    c.models = Some(ModelKind::ALL.to_vec());
    c
}

fn mixed_spec() -> GenSpec {
    GenSpec {
        salient_fraction: 0.5,
        concept_margin: 1.5,
        ..base_spec()
    }
}

/// Half salient, half hard positives; FocusMIL only.
pub fn mixed() -> ExperimentConfig {
    let mut c = ExperimentConfig::new(DataSource::Generate(mixed_spec()));
    c.train = base_train(ModelKind::FocusMil, 150, 50);
    c
}

/// [`mixed`] plus a label-correlated bag context, for ABMIL and FocusMIL.
pub fn mixed_biased() -> ExperimentConfig {
    let spec = GenSpec {
        bias_strength: 2.0,
        bias_label_correlation: 0.8,
        ..mixed_spec()
    };
    let mut c = ExperimentConfig::new(DataSource::Generate(spec));
    c.train = base_train(ModelKind::FocusMil, 150, 50);
    c.models = Some(vec![ModelKind::Abmil, ModelKind::FocusMil]);
    c
}

/// Looks a preset up by name; `audit` uses the 1× magnitude.
pub fn by_name(name: &str) -> Option<ExperimentConfig> {
    match name {
        "audit" => Some(audit(1.0)),
        "separable" => Some(separable()),
        "mixed" => Some(mixed()),
        "mixed-biased" => Some(mixed_biased()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in NAMES {
            by_name(name).unwrap().validate().unwrap();
        }
        for f in AUDIT_MAGNITUDES {
            audit(f).validate().unwrap();
        }
        assert!(by_name("nope").is_none());
    }

    #[test]
    fn audit_magnitude_scales_with_margin() {
        let c = audit(0.5);
        assert_eq!(c.poison.unwrap().train.delta, PoisonDelta::Magnitude(1.0));
    }
}
