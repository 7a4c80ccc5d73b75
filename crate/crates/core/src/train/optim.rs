//! Parameter updates.

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    #[default]
    AdamW,
    /// Plain gradient descent with the same decoupled decay.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter, in parameter order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must match the shapes given
    /// at construction.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let c = self.config;
        let decay = 1.0 - c.lr * c.weight_decay;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let w = p.as_mut_slice();
            let g = g.as_slice();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g) {
                        *w = *w * decay - c.lr * g;
                    }
                }
                OptimizerKind::AdamW => {
                    let m = self.m[i].as_mut_slice();
                    let v = self.v[i].as_mut_slice();
                    for k in 0..w.len() {
                        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                        let mhat = m[k] / bc1;
                        let vhat = v[k] / bc2;
                        w[k] = w[k] * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
    }
}
