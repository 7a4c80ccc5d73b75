//! Parameter checkpoints.
//!
//! ```text
//! header_len u32 LE | JSON header (header_len bytes) | f64 LE parameter blob
//! ```
//!
//! The blob holds every parameter row-major, in the order listed by the
//! header's `params` array.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Hyperparams, ModelError, ModelKind, ModelParams, NamedParam};
use crate::diffcore::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub hyperparams: Hyperparams,
    pub input_dim: usize,
    pub init_seed: u64,
    /// Hash of the experiment config that produced the parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub params: Vec<ParamShape>,
}

pub fn encode_checkpoint(model: &ModelParams) -> Vec<u8> {
    encode_checkpoint_tagged(model, None)
}

pub fn encode_checkpoint_tagged(model: &ModelParams, config_hash: Option<&str>) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model_kind: model.kind,
        hyperparams: model.hyper,
        input_dim: model.input_dim,
        init_seed: model.init_seed,
        config_hash: config_hash.map(str::to_owned),
        params: model
            .params
            .iter()
            .map(|p| ParamShape {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(4 + json.len() + 8 * model.num_scalars());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelParams, ModelError> {
    let bad = |msg: String| ModelError::Checkpoint(msg);
    if buf.len() < 4 {
        return Err(bad("file shorter than its length prefix".into()));
    }
    let hlen = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    let body = &buf[4..];
    if body.len() < hlen {
        return Err(bad(format!("header needs {hlen} bytes, {} present", body.len())));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let blob = &body[hlen..];
    let expected: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    if blob.len() != 8 * expected {
        return Err(bad(format!(
            "parameter blob has {} bytes, header describes {}",
            blob.len(),
            8 * expected
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let params = header
        .params
        .iter()
        .map(|p| {
            let data: Vec<f64> = values.by_ref().take(p.rows * p.cols).collect();
            Ok(NamedParam {
                name: p.name.clone(),
                value: Matrix::from_vec(p.rows, p.cols, data)?,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let model = ModelParams {
        kind: header.model_kind,
        hyper: header.hyperparams,
        input_dim: header.input_dim,
        init_seed: header.init_seed,
        params,
    };
    model.validate()?;
    Ok(model)
}

pub fn write_checkpoint(model: &ModelParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model))
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, ModelError> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_every_kind() {
        for kind in ModelKind::ALL {
            let m = ModelParams::init(kind, 6, Hyperparams::default(), 11).unwrap();
            let bytes = encode_checkpoint(&m);
            assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn blob_is_little_endian_in_declared_order() {
        let m = ModelParams::init(ModelKind::MiNet, 2, Hyperparams::default(), 0).unwrap();
        let bytes = encode_checkpoint(&m);
        let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let first = f64::from_le_bytes(bytes[4 + hlen..12 + hlen].try_into().unwrap());
        assert_eq!(first, m.params[0].value.as_slice()[0]);
        let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + hlen]).unwrap();
        assert_eq!(header["model_kind"], "mi-net");
        assert_eq!(header["params"][0]["name"], "fc1.weight");
    }

    #[test]
    fn config_hash_is_optional_in_header() {
        let m = ModelParams::init(ModelKind::Abmil, 3, Hyperparams::default(), 2).unwrap();
        let tagged = encode_checkpoint_tagged(&m, Some("abc"));
        assert_eq!(decode_checkpoint(&tagged).unwrap(), m);
        let hlen = u32::from_le_bytes(tagged[..4].try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(&tagged[4..4 + hlen]).unwrap();
        assert_eq!(header.config_hash.as_deref(), Some("abc"));
        assert!(!String::from_utf8_lossy(&encode_checkpoint(&m)).contains("config_hash"));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let m = ModelParams::init(ModelKind::FocusMil, 3, Hyperparams::default(), 0).unwrap();
        let bytes = encode_checkpoint(&m);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    }
}
