//! Bags, datasets and everything that produces or stores them.

mod generate;
mod import;
mod milb;
mod poison;

pub use generate::{generate, GenSpec, GeneratorState, OodSpec, SplitCounts};
pub use import::{import_features, read_csv_bag, Manifest, ManifestBag, RawFormat};
pub use milb::{decode_bagset, encode_bagset, read_bagset, write_bagset, FORMAT_VERSION, MAGIC};
pub use poison::{apply_poison, audit_poison, PoisonCounts, PoisonDelta, PoisonSpec};

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcore::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("format error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<f32>,
    /// Hidden ground truth; never shown to a model.
    pub label: Option<u8>,
    /// Lesion grouping for positive instances (localization metrics only).
    pub lesion: Option<u32>,
    /// `(row, col)` on the bag's virtual grid.
    pub grid: Option<(u32, u32)>,
}

impl Instance {
    pub fn new(features: Vec<f32>) -> Self {
        Self {
            features,
            label: None,
            lesion: None,
            grid: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    pub label: u8,
    pub instances: Vec<Instance>,
    /// Realized bag-context draw, kept for analysis only.
    pub context: Vec<f32>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.instances.first().map_or(0, |i| i.features.len())
    }

    /// Features as an `n×d` matrix.
    pub fn features(&self) -> Matrix {
        let d = self.feature_dim();
        let data = self
            .instances
            .iter()
            .flat_map(|i| i.features.iter().map(|&v| f64::from(v)))
            .collect();
        Matrix::from_vec(self.len(), d, data).expect("instances share a dimension")
    }

    pub fn has_instance_labels(&self) -> bool {
        !self.instances.is_empty() && self.instances.iter().all(|i| i.label.is_some())
    }

    pub fn has_localization(&self) -> bool {
        !self.instances.is_empty() && self.instances.iter().all(|i| i.grid.is_some())
    }

    pub fn instance_labels(&self) -> Option<Vec<u8>> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// Checks the per-bag invariants: non-empty, constant dimension, binary
    /// labels, bag label equal to the max instance label, and lesions only on
    /// positive instances.
    pub fn validate(&self, dim: usize) -> Result<(), String> {
        if self.instances.is_empty() {
            return Err(format!("bag {} has no instances", self.id));
        }
        if self.label > 1 {
            return Err(format!("bag {} has non-binary label {}", self.id, self.label));
        }
        for (j, inst) in self.instances.iter().enumerate() {
            if inst.features.len() != dim {
                return Err(format!(
                    "bag {} instance {j} has {} features, expected {dim}",
                    self.id,
                    inst.features.len()
                ));
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                return Err(format!("bag {} instance {j} has non-finite features", self.id));
            }
            match inst.label {
                Some(l) if l > 1 => {
                    return Err(format!("bag {} instance {j} has label {l}", self.id))
                }
                Some(1) => {}
                _ if inst.lesion.is_some() => {
                    return Err(format!(
                        "bag {} instance {j} has a lesion id but is not positive",
                        self.id
                    ))
                }
                _ => {}
            }
        }
        if let Some(labels) = self.instance_labels() {
            let max = labels.iter().copied().max().unwrap_or(0);
            if max != self.label {
                return Err(format!(
                    "bag {} label {} disagrees with max instance label {max}",
                    self.id, self.label
                ));
            }
        }
        Ok(())
    }
}

/// A list of bags sharing a feature dimension: the unit stored in one
/// `MILB` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagSet {
    pub feature_dim: usize,
    pub bags: Vec<Bag>,
}

impl BagSet {
    pub fn validate(&self) -> Result<(), String> {
        for bag in &self.bags {
            bag.validate(self.feature_dim)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Train/val/test bags plus, for generated data, the generator state that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    /// Seed of the dataset RNG stream (poison selection draws from it).
    pub seed: u64,
    pub splits: BTreeMap<Split, Vec<Bag>>,
    pub generator: Option<GeneratorState>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Option<&[Bag]> {
        self.splits.get(&split).map(Vec::as_slice)
    }

    pub fn bagset(&self, split: Split) -> Option<BagSet> {
        self.splits.get(&split).map(|bags| BagSet {
            feature_dim: self.feature_dim,
            bags: bags.clone(),
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for bags in self.splits.values() {
            for bag in bags {
                bag.validate(self.feature_dim).map_err(DataError::Config)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over the encoded splits in split order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (split, bags) in &self.splits {
            h.update(split.as_str().as_bytes());
            h.update(encode_bagset(&BagSet {
                feature_dim: self.feature_dim,
                bags: bags.clone(),
            }));
        }
        hex::encode(h.finalize())
    }
}
