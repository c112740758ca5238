//! Gated feed-forward block.
//!
//! ```text
//! s   = gate(x W_gate^T)
//! a   = s * (x W_up^T)
//! out = a W_mem^T
//! ```
//!
//! `a` is the activation vector that traces record.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateFn {
    #[default]
    Silu,
    Identity,
}

impl GateFn {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            GateFn::Silu => x / (1.0 + (-x).exp()),
            GateFn::Identity => x,
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self * v` for a column vector `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedFfnWeights {
    /// `d_ffn x d_model`
    pub w_gate: Matrix,
    /// `d_ffn x d_model`
    pub w_up: Matrix,
    /// `d_model x d_ffn`
    pub w_mem: Matrix,
    pub gate_fn: GateFn,
}

impl GatedFfnWeights {
    pub fn new(w_gate: Matrix, w_up: Matrix, w_mem: Matrix, gate_fn: GateFn) -> Result<Self> {
        let (d_ffn, d_model) = (w_gate.rows, w_gate.cols);
        if w_up.rows != d_ffn || w_up.cols != d_model {
            return Err(Error::DimensionMismatch(format!(
                "w_up is {}x{}, expected {d_ffn}x{d_model}",
                w_up.rows, w_up.cols
            )));
        }
        if w_mem.rows != d_model || w_mem.cols != d_ffn {
            return Err(Error::DimensionMismatch(format!(
                "w_mem is {}x{}, expected {d_model}x{d_ffn}",
                w_mem.rows, w_mem.cols
            )));
        }
        Ok(Self {
            w_gate,
            w_up,
            w_mem,
            gate_fn,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_gate.cols
    }

    pub fn d_ffn(&self) -> usize {
        self.w_gate.rows
    }

    /// Activation vector `a` for input `x`.
    pub fn activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_model() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} entries, model dimension is {}",
                x.len(),
                self.d_model()
            )));
        }
        Ok((0..self.d_ffn())
            .map(|i| {
                let s = self.gate_fn.apply(dot(self.w_gate.row(i), x));
                s * dot(self.w_up.row(i), x)
            })
            .collect())
    }

    /// Project activations back to the model dimension: `a W_mem^T`.
    pub fn project(&self, a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.d_ffn() {
            return Err(Error::DimensionMismatch(format!(
                "activation has {} entries, d_ffn is {}",
                a.len(),
                self.d_ffn()
            )));
        }
        Ok(self.w_mem.matvec(a))
    }
}

/// Run one gated FFN block, returning `(a, out)`.
pub fn gated_ffn_forward(x: &[f64], w: &GatedFfnWeights) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = w.activations(x)?;
    let out = w.project(&a)?;
    Ok((a, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(gate_fn: GateFn) -> GatedFfnWeights {
        let one = || Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        GatedFfnWeights::new(one(), one(), one(), gate_fn).unwrap()
    }

    #[test]
    fn zero_input_gives_zero() {
        let mut rng = crate::seed::rng(1);
        let w = GatedFfnWeights::new(
            Matrix::random_normal(6, 4, 1.0, &mut rng),
            Matrix::random_normal(6, 4, 1.0, &mut rng),
            Matrix::random_normal(4, 6, 1.0, &mut rng),
            GateFn::Silu,
        )
        .unwrap();
        let (a, out) = gated_ffn_forward(&[0.0; 4], &w).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_silu() {
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        let (a, out) = gated_ffn_forward(&[1.0], &scalar(GateFn::Silu)).unwrap();
        assert!((expected - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((a[0] - expected).abs() < 1e-15);
        assert!((out[0] - expected).abs() < 1e-15);
        assert!((a[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn scalar_identity() {
        let (a, out) = gated_ffn_forward(&[1.0], &scalar(GateFn::Identity)).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            gated_ffn_forward(&[1.0, 2.0], &scalar(GateFn::Silu)),
            Err(Error::DimensionMismatch(_))
        ));
        let bad = GatedFfnWeights::new(
            Matrix::zeros(2, 3),
            Matrix::zeros(2, 3),
            Matrix::zeros(2, 3),
            GateFn::Silu,
        );
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn output_linear_in_w_mem(seed in any::<u64>(), c in -4.0f64..4.0) {
            let mut rng = crate::seed::rng(seed);
            let w = GatedFfnWeights::new(
                Matrix::random_normal(5, 3, 1.0, &mut rng),
                Matrix::random_normal(5, 3, 1.0, &mut rng),
                Matrix::random_normal(3, 5, 1.0, &mut rng),
                GateFn::Silu,
            ).unwrap();
            let x: Vec<f64> = Matrix::random_normal(1, 3, 1.0, &mut rng).row(0).to_vec();
            let (_, out) = gated_ffn_forward(&x, &w).unwrap();
            let mut scaled = w.clone();
            scaled.w_mem.scale(c);
            let (_, out_c) = gated_ffn_forward(&x, &scaled).unwrap();
            for (o, oc) in out.iter().zip(&out_c) {
                prop_assert!((oc - c * o).abs() <= 1e-12 * (1.0 + (c * o).abs()));
            }
        }
    }
}
