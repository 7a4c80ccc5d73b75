//! Bag-level objectives.
//!
//! Cross-entropy is evaluated from the logit as `softplus(l) − y·l`, which
//! equals `−y·ln σ(l) − (1−y)·ln(1−σ(l))` and stays finite for any finite
//! logit, so no probability clamping is needed.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, Var};
use crate::models::BagTrace;

/// Which instances' latents the KL term regularizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlScope {
    /// Only the max-pooled instance of each bag.
    ArgmaxOnly,
    /// Mean over every instance in the bag.
    #[default]
    AllInstances,
}

/// Loss graph nodes for one mini-batch. Each is a `1×1` mean over bags.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub cls: Var,
    /// Present only for FocusMIL.
    pub kl: Option<Var>,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> (f64, f64, f64) {
        (
            g.value(self.total).item(),
            g.value(self.cls).item(),
            self.kl.map_or(0.0, |k| g.value(k).item()),
        )
    }
}

/// `−[y·ln σ(l) + (1−y)·ln(1−σ(l))]` for a `1×1` logit.
pub fn bce_from_logit(g: &mut Graph, logit: Var, label: u8) -> Result<Var, DiffError> {
    let sp = g.softplus(logit)?;
    if label == 1 {
        g.sub(sp, logit)
    } else {
        Ok(sp)
    }
}

/// `½·Σ(μ² + exp(lv) − lv − 1)` summed over columns and averaged over rows.
pub fn kl_rows_mean(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var, DiffError> {
    let rows = g.value(mu).rows();
    let m2 = g.hadamard(mu, mu)?;
    let ev = g.exp(log_var)?;
    let t = g.add(m2, ev)?;
    let t = g.sub(t, log_var)?;
    let t = g.add_scalar(t, -1.0)?;
    let s = g.sum(t)?;
    g.scale(s, 0.5 / rows as f64)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var, DiffError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

fn check_batch(traces: &[BagTrace], labels: &[u8]) -> Result<(), DiffError> {
    if traces.is_empty() || traces.len() != labels.len() {
        return Err(DiffError::Dimension {
            op: "loss",
            detail: format!("{} outputs for {} labels", traces.len(), labels.len()),
        });
    }
    Ok(())
}

/// Mean bag-level binary cross-entropy.
pub fn bce_loss(g: &mut Graph, traces: &[BagTrace], labels: &[u8]) -> Result<LossNodes, DiffError> {
    check_batch(traces, labels)?;
    let terms = traces
        .iter()
        .zip(labels)
        .map(|(t, &y)| bce_from_logit(g, t.logit, y))
        .collect::<Result<Vec<_>, _>>()?;
    let cls = mean_of(g, &terms)?;
    Ok(LossNodes {
        total: cls,
        cls,
        kl: None,
    })
}

/// Mean over bags of `BCE + β·KL`, with the KL scope chosen by `scope`.
pub fn focusmil_loss(
    g: &mut Graph,
    traces: &[BagTrace],
    labels: &[u8],
    beta: f64,
    scope: KlScope,
) -> Result<LossNodes, DiffError> {
    check_batch(traces, labels)?;
    let mut cls_terms = Vec::with_capacity(traces.len());
    let mut kl_terms = Vec::with_capacity(traces.len());
    for (t, &y) in traces.iter().zip(labels) {
        let (Some(mu), Some(lv)) = (t.mu, t.log_var) else {
            return Err(DiffError::Dimension {
                op: "focusmil_loss",
                detail: "trace carries no latent posterior".into(),
            });
        };
        cls_terms.push(bce_from_logit(g, t.logit, y)?);
        let kl = match scope {
            KlScope::AllInstances => kl_rows_mean(g, mu, lv)?,
            KlScope::ArgmaxOnly => {
                let idx = [t.argmax.expect("max-pool trace has an argmax")];
                let m = g.select_rows(mu, &idx)?;
                let l = g.select_rows(lv, &idx)?;
                kl_rows_mean(g, m, l)?
            }
        };
        kl_terms.push(kl);
    }
    let cls = mean_of(g, &cls_terms)?;
    let kl = mean_of(g, &kl_terms)?;
    let weighted = g.scale(kl, beta)?;
    let total = g.add(cls, weighted)?;
    Ok(LossNodes {
        total,
        cls,
        kl: Some(kl),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Matrix;

    fn trace_with_logit(g: &mut Graph, l: f64) -> BagTrace {
        let logit = g.param(Matrix::scalar(l)).unwrap();
        BagTrace {
            logit,
            instance_logits: None,
            mu: None,
            log_var: None,
            argmax: None,
            bag_feature: None,
        }
    }

    #[test]
    fn half_score_costs_ln2() {
        let mut g = Graph::new();
        let t = trace_with_logit(&mut g, 0.0);
        let loss = bce_loss(&mut g, &[t], &[1]).unwrap();
        assert!((g.value(loss.total).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let mut g = Graph::new();
        let a = trace_with_logit(&mut g, 40.0);
        let b = trace_with_logit(&mut g, -40.0);
        let loss = bce_loss(&mut g, &[a, b], &[1, 0]).unwrap();
        assert!(g.value(loss.total).item() < 1e-15);
    }

    #[test]
    fn extreme_wrong_logit_stays_finite() {
        let mut g = Graph::new();
        let t = trace_with_logit(&mut g, 800.0);
        let loss = bce_loss(&mut g, &[t], &[0]).unwrap();
        assert_eq!(g.value(loss.total).item(), 800.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut g = Graph::new();
        assert!(bce_loss(&mut g, &[], &[]).is_err());
    }
}
