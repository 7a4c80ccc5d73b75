//! Feature-space poisoning for the Standard-MIL audit.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Split};
use crate::rng::{stream, Purpose};

/// How the poison offset is specified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonDelta {
    /// Explicit offset of length d.
    Vector(Vec<f64>),
    /// `magnitude ×` the generator's unit poison direction.
    Magnitude(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub target_split: Split,
    pub target_class: u8,
    /// Fraction of instances per targeted bag, in (0, 1].
    pub fraction: f64,
    pub delta: PoisonDelta,
}

impl PoisonSpec {
    /// Resolves the offset vector against `dataset`.
    pub fn delta_vector(&self, dataset: &Dataset) -> Result<Vec<f64>, DataError> {
        let v = match &self.delta {
            PoisonDelta::Vector(v) => v.clone(),
            PoisonDelta::Magnitude(m) => {
                let gen = dataset.generator.as_ref().ok_or_else(|| {
                    DataError::Config(
                        "a poison magnitude needs a generated dataset; give an explicit delta vector"
                            .into(),
                    )
                })?;
                gen.poison_direction.iter().map(|x| x * m).collect()
            }
        };
        if v.len() != dataset.feature_dim {
            return Err(DataError::Config(format!(
                "poison delta has length {}, dataset dimension is {}",
                v.len(),
                dataset.feature_dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DataError::Config("poison delta is not finite".into()));
        }
        Ok(v)
    }
}

/// Number of instances offset per split and bag class.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonCounts {
    pub split: Option<Split>,
    pub class: u8,
    pub bags: usize,
    pub instances: usize,
}

/// Instances to poison in a bag of `n`: `ceil(fraction·n)`, at least one.
fn poison_count(fraction: f64, n: usize) -> usize {
    // Absorb representation error such as 0.2 * 15 = 3.0000000000000004.
    let raw = fraction * n as f64 - 1e-9;
    (raw.ceil() as usize).clamp(1, n)
}

/// Adds the poison offset to a random subset of instances in every bag of
/// the target class in the target split. Labels and counts are untouched.
pub fn apply_poison(
    dataset: &Dataset,
    spec: &PoisonSpec,
) -> Result<(Dataset, PoisonCounts), DataError> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(DataError::Config(format!(
            "poison fraction {} outside (0, 1]",
            spec.fraction
        )));
    }
    if spec.target_class > 1 {
        return Err(DataError::Config(format!(
            "poison target class {} is not binary",
            spec.target_class
        )));
    }
    let delta = spec.delta_vector(dataset)?;
    let mut out = dataset.clone();
    let bags = out.splits.get_mut(&spec.target_split).ok_or_else(|| {
        DataError::Config(format!("dataset has no {} split to poison", spec.target_split))
    })?;
    let salt = spec.target_split.index() * 2 + u64::from(spec.target_class);
    let mut rng = stream(dataset.seed, Purpose::Poison, salt);
    let mut counts = PoisonCounts {
        split: Some(spec.target_split),
        class: spec.target_class,
        ..PoisonCounts::default()
    };
    for bag in bags.iter_mut().filter(|b| b.label == spec.target_class) {
        let n = bag.len();
        let k = poison_count(spec.fraction, n);
        let mut chosen = sample(&mut rng, n, k).into_vec();
        chosen.sort_unstable();
        for j in chosen {
            for (f, d) in bag.instances[j].features.iter_mut().zip(&delta) {
                *f = (f64::from(*f) + d) as f32;
            }
        }
        counts.bags += 1;
        counts.instances += k;
    }
    Ok((out, counts))
}

/// The audit layout: train-split negatives and test-split positives receive
/// the same offset.
pub fn audit_poison(
    dataset: &Dataset,
    fraction: f64,
    delta: PoisonDelta,
) -> Result<(Dataset, Vec<PoisonCounts>), DataError> {
    let train = PoisonSpec {
        target_split: Split::Train,
        target_class: 0,
        fraction,
        delta: delta.clone(),
    };
    let test = PoisonSpec {
        target_split: Split::Test,
        target_class: 1,
        fraction,
        delta,
    };
    let (ds, a) = apply_poison(dataset, &train)?;
    let (ds, b) = apply_poison(&ds, &test)?;
    Ok((ds, vec![a, b]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenSpec, SplitCounts};

    fn dataset() -> Dataset {
        generate(&GenSpec {
            feature_dim: 12,
            bags_per_class: SplitCounts {
                train: 5,
                val: 0,
                test: 5,
            },
            instances_per_bag: (10, 30),
            seed: 5,
            ..GenSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn count_rounds_up() {
        assert_eq!(poison_count(0.2, 10), 2);
        assert_eq!(poison_count(0.2, 15), 3);
        assert_eq!(poison_count(0.2, 11), 3);
        assert_eq!(poison_count(0.01, 5), 1);
        assert_eq!(poison_count(1.0, 7), 7);
    }

    #[test]
    fn zero_delta_leaves_dataset_unchanged() {
        let ds = dataset();
        let spec = PoisonSpec {
            target_split: Split::Train,
            target_class: 0,
            fraction: 1.0,
            delta: PoisonDelta::Vector(vec![0.0; 12]),
        };
        let (out, counts) = apply_poison(&ds, &spec).unwrap();
        assert_eq!(out, ds);
        assert_eq!(counts.bags, 5);
    }

    #[test]
    fn missing_split_is_config_error() {
        let ds = dataset();
        let spec = PoisonSpec {
            target_split: Split::Val,
            target_class: 0,
            fraction: 0.2,
            delta: PoisonDelta::Magnitude(1.0),
        };
        assert!(matches!(apply_poison(&ds, &spec), Err(DataError::Config(_))));
    }

    #[test]
    fn wrong_delta_length_is_config_error() {
        let ds = dataset();
        let spec = PoisonSpec {
            target_split: Split::Train,
            target_class: 0,
            fraction: 0.2,
            delta: PoisonDelta::Vector(vec![1.0; 3]),
        };
        assert!(apply_poison(&ds, &spec).is_err());
    }

    #[test]
    fn poison_only_moves_features() {
        let ds = dataset();
        let (out, _) = audit_poison(&ds, 0.2, PoisonDelta::Magnitude(2.0)).unwrap();
        for (split, bags) in &ds.splits {
            let poisoned = &out.splits[split];
            assert_eq!(bags.len(), poisoned.len());
            for (a, b) in bags.iter().zip(poisoned) {
                assert_eq!(a.label, b.label);
                assert_eq!(a.len(), b.len());
                for (x, y) in a.instances.iter().zip(&b.instances) {
                    assert_eq!(x.label, y.label);
                    assert_eq!(x.lesion, y.lesion);
                }
            }
        }
    }
}
