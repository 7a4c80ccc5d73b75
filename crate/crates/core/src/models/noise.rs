//! Sources of training-time randomness (reparameterization ε and dropout
//! masks), abstracted so tests can pin or replay them.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::Matrix;
use crate::rng::MilRng;

pub trait NoiseSource {
    /// Matrix of independent standard normal draws.
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix;
    /// Matrix of independent 0/1 draws, 1 with probability `keep`.
    fn keep_mask(&mut self, rows: usize, cols: usize, keep: f64) -> Matrix;
}

impl NoiseSource for MilRng {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(self))
    }

    fn keep_mask(&mut self, rows: usize, cols: usize, keep: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| f64::from(u8::from(self.random_bool(keep))))
    }
}

/// ε = 0 and no units dropped.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::zeros(rows, cols)
    }

    fn keep_mask(&mut self, rows: usize, cols: usize, _keep: f64) -> Matrix {
        Matrix::ones(rows, cols)
    }
}

/// Wraps another source and keeps a copy of every Gaussian draw.
pub struct RecordingNoise<'a> {
    pub inner: &'a mut dyn NoiseSource,
    pub normals: Vec<Matrix>,
}

impl<'a> RecordingNoise<'a> {
    pub fn new(inner: &'a mut dyn NoiseSource) -> Self {
        Self {
            inner,
            normals: Vec::new(),
        }
    }
}

impl NoiseSource for RecordingNoise<'_> {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        let m = self.inner.standard_normal(rows, cols);
        self.normals.push(m.clone());
        m
    }

    fn keep_mask(&mut self, rows: usize, cols: usize, keep: f64) -> Matrix {
        self.inner.keep_mask(rows, cols, keep)
    }
}

/// Plays back fixed Gaussian draws in order; masks keep everything.
#[derive(Clone, Debug, Default)]
pub struct ReplayNoise {
    normals: VecDeque<Matrix>,
}

impl ReplayNoise {
    pub fn new(normals: impl IntoIterator<Item = Matrix>) -> Self {
        Self {
            normals: normals.into_iter().collect(),
        }
    }
}

impl NoiseSource for ReplayNoise {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        let m = self
            .normals
            .pop_front()
            .expect("replay noise exhausted");
        assert_eq!(m.shape(), (rows, cols), "replayed draw has the wrong shape");
        m
    }

    fn keep_mask(&mut self, rows: usize, cols: usize, _keep: f64) -> Matrix {
        Matrix::ones(rows, cols)
    }
}
