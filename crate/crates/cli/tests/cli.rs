use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use milbench::data::{GenSpec, PoisonDelta, SplitCounts};
use milbench::experiment::{DataSource, ExperimentConfig, PoisonPair};
use milbench::models::Hyperparams;
use serde_json::Value;

fn milbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milbench"))
        .args(args)
        .env("MILBENCH_LOG", "error")
        .output()
        .expect("run milbench")
}

fn ok(args: &[&str]) -> String {
    let out = milbench(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(feature_dim: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(DataSource::Generate(GenSpec {
        feature_dim,
        bags_per_class: SplitCounts {
            train: 6,
            val: 0,
            test: 4,
        },
        instances_per_bag: (5, 10),
        style_dim: 2,
        context_dim: 2,
        seed: 3,
        ..GenSpec::default()
    }));
    c.train.hyper = Hyperparams {
        hidden_dim: 8,
        second_hidden_dim: 4,
        latent_dim: 4,
        attention_dim: 4,
        dropout: None,
    };
    c.train.max_epochs = 3;
    c.train.seeds = vec![0, 1];
    c.train.lr = 1e-2;
    c
}

fn write_config(dir: &Path, name: &str, c: &ExperimentConfig) -> String {
    let p = dir.join(name);
    fs::write(&p, c.to_json()).unwrap();
    p.to_str().unwrap().to_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_train_eval_audit_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(6));
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let (data_s, out_s) = (data.to_str().unwrap(), out.to_str().unwrap());

    let stdout = ok(&["gen", "--config", &cfg, "--out", data_s]);
    assert!(stdout.contains("train.milb"));
    for f in ["train.milb", "test.milb", "dataset.json", "manifest.json", "config.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let stdout = ok(&["train", "--config", &cfg, "--dataset", data_s, "--model", "focusmil", "--out", out_s]);
    assert!(stdout.contains("slide_auc"));
    for f in ["focusmil/report.json", "focusmil/report.csv", "focusmil/seed-0/epochs.csv", "focusmil/seed-1/model.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let ckpt = out.join("focusmil/seed-1/model.ckpt");
    let scores = dir.path().join("scores.csv");
    ok(&[
        "eval",
        "--config",
        &cfg,
        "--dataset",
        data_s,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dump-scores",
        scores.to_str().unwrap(),
        "--out",
        out_s,
    ]);
    assert!(out.join("eval/report.json").exists());
    let sidecar = read_json(&data.join("dataset.json"));
    let test_instances = sidecar["files"]
        .as_array()
        .unwrap()
        .iter()
        .find(|f| f["path"] == "test.milb")
        .and_then(|f| f["instances"].as_u64())
        .unwrap() as usize;
    let dump = fs::read_to_string(&scores).unwrap();
    assert_eq!(dump.lines().next(), Some("bag_id,instance,score,label"));
    assert_eq!(dump.lines().count(), test_instances + 1);

    let mut audit = tiny_config(6);
    audit.poison = Some(PoisonPair::audit(0.2, PoisonDelta::Magnitude(2.0)));
    let audit_cfg = write_config(dir.path(), "audit.json", &audit);
    let audit_out = dir.path().join("audit");
    let stdout = ok(&["audit", "--config", &audit_cfg, "--out", audit_out.to_str().unwrap()]);
    for model in ["mi-net", "abmil", "focusmil"] {
        assert!(stdout.contains(model), "{stdout}");
    }
    assert!(audit_out.join("audit.json").exists() && audit_out.join("audit.csv").exists());
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"data": {"generate": {}}, "surprise": 1}"#).unwrap();
    let out = milbench(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = milbench(&["train", "--config", bad.to_str().unwrap(), "--preset", "audit"]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = write_config(dir.path(), "c.json", &tiny_config(6));
    let out = milbench(&["train", "--config", &cfg, "--lr", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn checkpoint_of_wrong_dimension_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let six = write_config(dir.path(), "six.json", &tiny_config(6));
    let seven = write_config(dir.path(), "seven.json", &tiny_config(7));
    let out = dir.path().join("out");
    ok(&["train", "--config", &six, "--model", "mi-net", "--seeds", "0", "--out", out.to_str().unwrap()]);
    let ckpt = out.join("mi-net/seed-0/model.ckpt");
    let res = milbench(&["eval", "--config", &seven, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("dimensional"));
}

#[test]
fn models_get_distinct_provenance_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(6));
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    ok(&["train", "--config", &cfg, "--model", "mi-net", "--out", out_s]);
    ok(&["train", "--config", &cfg, "--model", "focusmil", "--out", out_s]);
    let a = read_json(&out.join("mi-net/report.json"));
    let b = read_json(&out.join("focusmil/report.json"));
    let (ha, hb) = (
        a["provenance"]["config_hash"].as_str().unwrap(),
        b["provenance"]["config_hash"].as_str().unwrap(),
    );
    assert_eq!(ha.len(), 64);
    assert_ne!(ha, hb);
    let log = fs::read_to_string(out.join("mi-net/seed-1/epochs.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), format!("# config_hash={ha} seed=1"));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("mi-net/report.json") && manifest.contains("focusmil/report.json"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(6));
    let out = dir.path().join("out");
    ok(&[
        "train",
        "--config",
        &cfg,
        "--model",
        "focusmil",
        "--beta",
        "0.125",
        "--batch-size",
        "2",
        "--epochs",
        "2",
        "--seeds",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    let written = ExperimentConfig::load(out.join("config.json")).unwrap();
    let file = tiny_config(6);
    assert_eq!(written.train.beta, 0.125);
    assert_eq!(written.train.batch_size, 2);
    assert_eq!(written.train.max_epochs, 2);
    assert_eq!(written.train.seeds, vec![4]);
    assert_eq!(written.train.lr, file.train.lr);
    assert_eq!(written.train.hyper, file.train.hyper);
    assert!(out.join("focusmil/seed-4/epochs.csv").exists());
    let rows = fs::read_to_string(out.join("focusmil/seed-4/epochs.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2 + 2);
}

#[test]
fn unknown_preset_and_usage_errors_exit_2() {
    assert_eq!(milbench(&["train", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(milbench(&["train", "--model", "transmil"]).status.code(), Some(2));
    assert_eq!(milbench(&["fly"]).status.code(), Some(2));
}
