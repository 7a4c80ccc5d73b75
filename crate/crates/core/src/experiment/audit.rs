//! Standard-MIL audit verdicts.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    RespectsMil,
    ViolatesMil,
    Inconclusive,
}

impl Verdict {
    /// Violates when the model separates the training bags but ranks the
    /// test bags worse than chance; respects when it also clears
    /// `respects_threshold` on test.
    pub fn judge(train_auc: f64, test_auc: f64, respects_threshold: f64) -> Self {
        if train_auc > 0.5 && test_auc < 0.5 {
            Verdict::ViolatesMil
        } else if train_auc > 0.5 && test_auc >= respects_threshold {
            Verdict::RespectsMil
        } else {
            Verdict::Inconclusive
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::RespectsMil => "respects-MIL",
            Verdict::ViolatesMil => "violates-MIL",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSeed {
    pub seed: u64,
    pub train_slide_auc: f64,
    pub test_slide_auc: f64,
    pub test_patch_f1: Option<f64>,
}

/// One model's audit outcome; the verdict is judged on the seed means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub model: String,
    pub config_hash: String,
    pub train_slide_auc: f64,
    pub test_slide_auc: f64,
    pub test_patch_f1: Option<f64>,
    pub verdict: Verdict,
    pub seeds: Vec<AuditSeed>,
}

impl AuditVerdict {
    pub fn from_seeds(
        model: impl Into<String>,
        config_hash: impl Into<String>,
        seeds: Vec<AuditSeed>,
        respects_threshold: f64,
    ) -> Self {
        let n = seeds.len() as f64;
        let train = seeds.iter().map(|s| s.train_slide_auc).sum::<f64>() / n;
        let test = seeds.iter().map(|s| s.test_slide_auc).sum::<f64>() / n;
        let f1: Option<Vec<f64>> = seeds.iter().map(|s| s.test_patch_f1).collect();
        Self {
            model: model.into(),
            config_hash: config_hash.into(),
            train_slide_auc: train,
            test_slide_auc: test,
            test_patch_f1: f1.map(|v| v.iter().sum::<f64>() / n),
            verdict: Verdict::judge(train, test, respects_threshold),
            seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config_hash: String,
    pub dataset_hash: String,
    pub respects_threshold: f64,
    pub models: Vec<AuditVerdict>,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("audit report serializes");
        s.push('\n');
        s
    }

    /// One row per model: mean train/test slide AUC, test patch F1, verdict.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,train_slide_auc,test_slide_auc,test_patch_f1,verdict\n");
        for m in &self.models {
            let f1 = m.test_patch_f1.map_or(String::new(), |v| format!("{v:?}"));
            writeln!(
                out,
                "{},{:?},{:?},{},{}",
                m.model, m.train_slide_auc, m.test_slide_auc, f1, m.verdict
            )
            .expect("write to String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_boundaries() {
        assert_eq!(Verdict::judge(1.0, 0.007, 0.7), Verdict::ViolatesMil);
        assert_eq!(Verdict::judge(0.9, 0.805, 0.7), Verdict::RespectsMil);
        assert_eq!(Verdict::judge(0.9, 0.7, 0.7), Verdict::RespectsMil);
        assert_eq!(Verdict::judge(0.9, 0.5, 0.7), Verdict::Inconclusive);
        assert_eq!(Verdict::judge(0.9, 0.69, 0.7), Verdict::Inconclusive);
        assert_eq!(Verdict::judge(0.5, 0.1, 0.7), Verdict::Inconclusive);
        assert_eq!(Verdict::judge(0.5, 0.9, 0.7), Verdict::Inconclusive);
    }

    #[test]
    fn verdict_uses_means() {
        let seed = |s, tr, te| AuditSeed {
            seed: s,
            train_slide_auc: tr,
            test_slide_auc: te,
            test_patch_f1: None,
        };
        let v = AuditVerdict::from_seeds("abmil", "h", vec![seed(0, 1.0, 0.0), seed(1, 1.0, 0.75)], 0.7);
        assert_eq!(v.test_slide_auc, 0.375);
        assert_eq!(v.verdict, Verdict::ViolatesMil);
        assert_eq!(v.test_patch_f1, None);
    }

    #[test]
    fn serialized_names() {
        assert_eq!(serde_json::to_string(&Verdict::RespectsMil).unwrap(), "\"respects-mil\"");
        assert_eq!(Verdict::ViolatesMil.to_string(), "violates-MIL");
    }
}
