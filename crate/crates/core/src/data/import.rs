//! Ingestion of externally extracted feature bags via a JSON manifest.
//!
//! See `schemas/manifest.schema.json` for the manifest format. Each bag
//! points at either a CSV file (one instance per row, optional trailing 0/1
//! label column) or a raw little-endian `f32` file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Bag, DataError, Dataset, Instance, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawFormat {
    Csv,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestBag {
    pub id: String,
    pub label: u8,
    /// Feature file, relative to the manifest's directory.
    pub path: PathBuf,
    /// Defaults to `csv` for `.csv` files and `f32` otherwise.
    #[serde(default)]
    pub format: Option<RawFormat>,
    #[serde(default)]
    pub split: Option<Split>,
    /// CSV only: whether the last column holds instance labels. When absent
    /// it is inferred from the column count if `feature_dim` is known.
    #[serde(default)]
    pub label_column: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub feature_dim: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub bags: Vec<ManifestBag>,
}

/// Parses one CSV bag. Blank lines and lines starting with `#` are skipped.
pub fn read_csv_bag(
    path: &Path,
    feature_dim: Option<usize>,
    label_column: Option<bool>,
) -> Result<Vec<Instance>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let parse_err = |line: usize, msg: String| DataError::Parse {
        path: path.to_owned(),
        msg: format!("line {line}: {msg}"),
    };
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
        rows.push((i + 1, vals));
    }
    let Some((_, first)) = rows.first() else {
        return Err(DataError::Parse {
            path: path.to_owned(),
            msg: "bag has no instances".into(),
        });
    };
    let cols = first.len();
    let has_labels = match (label_column, feature_dim) {
        (Some(flag), _) => flag,
        (None, Some(d)) => cols == d + 1,
        (None, None) => false,
    };
    let dim = if has_labels { cols - 1 } else { cols };
    if let Some(d) = feature_dim {
        if d != dim {
            return Err(DataError::Parse {
                path: path.to_owned(),
                msg: format!("{dim} feature columns, manifest declares {d}"),
            });
        }
    }
    rows.into_iter()
        .map(|(line, vals)| {
            if vals.len() != cols {
                return Err(parse_err(line, format!("{} columns, expected {cols}", vals.len())));
            }
            let mut inst = Instance::new(vals[..dim].iter().map(|&v| v as f32).collect());
            if has_labels {
                let l = vals[dim];
                if l != 0.0 && l != 1.0 {
                    return Err(parse_err(line, format!("instance label {l} is not 0 or 1")));
                }
                inst.label = Some(l as u8);
            }
            Ok(inst)
        })
        .collect()
}

fn read_raw_bag(path: &Path, feature_dim: Option<usize>) -> Result<Vec<Instance>, DataError> {
    let d = feature_dim.ok_or_else(|| DataError::Parse {
        path: path.to_owned(),
        msg: "raw f32 bags need feature_dim in the manifest".into(),
    })?;
    let buf = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if d == 0 || buf.is_empty() || buf.len() % (4 * d) != 0 {
        return Err(DataError::Parse {
            path: path.to_owned(),
            msg: format!("{} bytes is not a whole number of {d}-float rows", buf.len()),
        });
    }
    let floats: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(floats.chunks_exact(d).map(|r| Instance::new(r.to_vec())).collect())
}

/// Loads every bag listed in the manifest at `manifest_path`.
///
/// Instance labels stay unknown unless a CSV carries a label column. Bags
/// without a `split` go to the train split.
pub fn import_features(manifest_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| DataError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: manifest_path.to_owned(),
        msg: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut dim = manifest.feature_dim;
    let mut splits: BTreeMap<Split, Vec<Bag>> = BTreeMap::new();
    for entry in &manifest.bags {
        let path = base.join(&entry.path);
        let format = entry.format.unwrap_or_else(|| {
            match path.extension().and_then(|e| e.to_str()) {
                Some(ext) if ext.eq_ignore_ascii_case("csv") => RawFormat::Csv,
                _ => RawFormat::F32,
            }
        });
        let instances = match format {
            RawFormat::Csv => read_csv_bag(&path, dim, entry.label_column)?,
            RawFormat::F32 => read_raw_bag(&path, dim)?,
        };
        let bag_dim = instances[0].features.len();
        match dim {
            Some(d) if d != bag_dim => {
                return Err(DataError::Parse {
                    path,
                    msg: format!("bag {} has dimension {bag_dim}, expected {d}", entry.id),
                })
            }
            _ => dim = Some(bag_dim),
        }
        let bag = Bag {
            id: entry.id.clone(),
            label: entry.label,
            instances,
            context: Vec::new(),
        };
        bag.validate(bag_dim).map_err(|msg| DataError::Parse {
            path: path.clone(),
            msg,
        })?;
        splits
            .entry(entry.split.unwrap_or(Split::Train))
            .or_default()
            .push(bag);
    }
    let feature_dim = dim.ok_or_else(|| DataError::Parse {
        path: manifest_path.to_owned(),
        msg: "manifest lists no bags".into(),
    })?;
    Ok(Dataset {
        feature_dim,
        seed: manifest.seed.unwrap_or(0),
        splits,
        generator: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn csv_bag_with_three_instances() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bag.csv");
        fs::write(&p, "0.5,1,2,3\n-1,0.25,4,5\n\n7,8,9,10\n").unwrap();
        let inst = read_csv_bag(&p, Some(4), None).unwrap();
        assert_eq!(inst.len(), 3);
        assert!(inst.iter().all(|i| i.features.len() == 4 && i.label.is_none()));
        assert_eq!(inst[1].features, vec![-1.0, 0.25, 4.0, 5.0]);
    }

    #[test]
    fn csv_label_column_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bag.csv");
        fs::write(&p, "1,2,0\n3,4,1\n").unwrap();
        let inst = read_csv_bag(&p, Some(2), None).unwrap();
        assert_eq!(inst[1].label, Some(1));
        let explicit = read_csv_bag(&p, None, Some(true)).unwrap();
        assert_eq!(explicit, inst);
    }

    #[test]
    fn manifest_with_two_bags() {
        let dir = tempfile::tempdir().unwrap();
        let row = (0..8).map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        fs::write(dir.path().join("a.csv"), format!("{row}\n{row}\n")).unwrap();
        let mut f = fs::File::create(dir.path().join("b.bin")).unwrap();
        for v in 0..16 {
            f.write_all(&(v as f32).to_le_bytes()).unwrap();
        }
        let manifest = r#"{"feature_dim": 8, "bags": [
            {"id": "a", "label": 0, "path": "a.csv"},
            {"id": "b", "label": 1, "path": "b.bin", "split": "test"}
        ]}"#;
        fs::write(dir.path().join("m.json"), manifest).unwrap();
        let ds = import_features(dir.path().join("m.json")).unwrap();
        assert_eq!(ds.feature_dim, 8);
        assert_eq!(ds.split(Split::Train).unwrap().len(), 1);
        assert_eq!(ds.split(Split::Test).unwrap()[0].len(), 2);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("m.json"),
            r#"{"bags": [{"id": "x", "label": 0, "path": "nope.csv"}]}"#,
        )
        .unwrap();
        let err = import_features(dir.path().join("m.json")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
        assert!(err.to_string().contains("nope.csv"));
    }

    #[test]
    fn inconsistent_dimension_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1,2,3\n").unwrap();
        fs::write(dir.path().join("b.csv"), "1,2\n").unwrap();
        fs::write(
            dir.path().join("m.json"),
            r#"{"bags": [{"id": "a", "label": 0, "path": "a.csv"},
                         {"id": "b", "label": 0, "path": "b.csv"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            import_features(dir.path().join("m.json")),
            Err(DataError::Parse { .. })
        ));
    }
}
