//! The two-layer scoring MLP shared by both pruning module families.
//!
//! Each pruning decision site owns one of these heads: features (embedding
//! dimension `E`) pass through a `tanh` hidden layer of width `E/2` to two
//! logits, interpreted as (keep, drop) scores for the Gumbel relaxations.
//! `tanh` keeps the map smooth everywhere, which the finite-difference
//! gradient checks rely on.
//!
//! The backward pass here is exact for the head in isolation (inputs treated
//! as constants); the loss module composes it with the relaxation Jacobian.

use crate::error::Result;
use crate::tensor::{Matrix, SeededRng};

/// Column index of the "keep" logit in the head output.
pub const KEEP: usize = 0;

/// Two-layer perceptron `in_dim -> hidden -> 2` with `tanh` activation.
#[derive(Debug, Clone)]
pub struct MlpHead {
    /// `in_dim x hidden`.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `hidden x 2`.
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Activations recorded by [`MlpHead::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input features, `n x in_dim`.
    pub x: Matrix,
    /// Hidden activations after `tanh`, `n x hidden`.
    pub h: Matrix,
}

/// Parameter gradients in the same shapes as the head.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

fn add_bias_row(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        for (v, &b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

impl MlpHead {
    /// Fresh head with Gaussian weights scaled by fan-in and zero biases.
    /// Hidden width is `in_dim / 2` (at least 1).
    pub fn new(in_dim: usize, rng: &mut SeededRng) -> MlpHead {
        let hidden = (in_dim / 2).max(1);
        MlpHead {
            w1: rng.normal_matrix(in_dim, hidden, 1.0 / (in_dim as f64).sqrt()),
            b1: vec![0.0; hidden],
            w2: rng.normal_matrix(hidden, 2, 1.0 / (hidden as f64).sqrt()),
            b2: vec![0.0; 2],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Logits for each input row: `z = tanh(x w1 + b1) w2 + b2`, shape
    /// `n x 2`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        let mut h = x.matmul(&self.w1)?;
        add_bias_row(&mut h, &self.b1);
        h.map_assign(f64::tanh);
        let mut z = h.matmul(&self.w2)?;
        add_bias_row(&mut z, &self.b2);
        Ok((z, MlpCache { x: x.clone(), h }))
    }

    /// Backward pass: given `dL/dz`, returns parameter gradients and
    /// `dL/dx` for callers that also need the input gradient.
    pub fn backward(&self, cache: &MlpCache, dz: &Matrix) -> Result<(MlpGrads, Matrix)> {
        let dw2 = cache.h.matmul_tn(dz)?;
        let db2 = dz.col_sums();
        // dL/da where a is the pre-activation: (dz w2^T) * (1 - h^2).
        let mut da = dz.matmul_nt(&self.w2)?;
        let mut one_minus_h2 = cache.h.clone();
        one_minus_h2.map_assign(|h| 1.0 - h * h);
        da.hadamard_assign(&one_minus_h2)?;
        let dw1 = cache.x.matmul_tn(&da)?;
        let db1 = da.col_sums();
        let dx = da.matmul_nt(&self.w1)?;
        Ok((MlpGrads { w1: dw1, b1: db1, w2: dw2, b2: db2 }, dx))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    /// Parameters flattened in the fixed order `w1, b1, w2, b2`; the same
    /// order is used by [`MlpHead::set_from_flat`] and [`MlpGrads::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        let n = self.w1.data().len();
        self.w1.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
        let n = self.b1.len();
        self.b1.copy_from_slice(&flat[at..at + n]);
        at += n;
        let n = self.w2.data().len();
        self.w2.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
        self.b2.copy_from_slice(&flat[at..]);
    }

    /// Names and lengths of the flattened parameter segments, in flat order.
    pub fn param_layout(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("w1", self.w1.data().len()),
            ("b1", self.b1.len()),
            ("w2", self.w2.data().len()),
            ("b2", self.b2.len()),
        ]
    }
}

impl MlpGrads {
    pub fn zeros_like(head: &MlpHead) -> MlpGrads {
        MlpGrads {
            w1: Matrix::zeros(head.w1.rows(), head.w1.cols()),
            b1: vec![0.0; head.b1.len()],
            w2: Matrix::zeros(head.w2.rows(), head.w2.cols()),
            b2: vec![0.0; head.b2.len()],
        }
    }

    pub fn add_scaled_assign(&mut self, other: &MlpGrads, factor: f64) -> Result<()> {
        self.w1.add_scaled_assign(&other.w1, factor)?;
        for (a, &b) in self.b1.iter_mut().zip(&other.b1) {
            *a += factor * b;
        }
        self.w2.add_scaled_assign(&other.w2, factor)?;
        for (a, &b) in self.b2.iter_mut().zip(&other.b2) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, factor: f64) {
        self.w1.scale_assign(factor);
        for b in &mut self.b1 {
            *b *= factor;
        }
        self.w2.scale_assign(factor);
        for b in &mut self.b2 {
            *b *= factor;
        }
    }

    /// Flattened in the same `w1, b1, w2, b2` order as [`MlpHead::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }
}
