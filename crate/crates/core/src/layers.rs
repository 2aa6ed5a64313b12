//! Affine and normalization layers shared by every block.

use crate::error::Result;
use crate::params::{Init, Scope};
use crate::tensor::Tensor;

/// `y = x W + b`, with `W` stored as `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: scope.param("weight", &[in_dim, out_dim], Init::Xavier)?,
            bias: scope.param("bias", &[out_dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope<'_>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: scope.param("gamma", &[dim], Init::Ones)?,
            beta: scope.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta)
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }
}

/// Overwrites every element of a leaf tensor.
pub fn fill(t: &Tensor, values: &[f64]) {
    assert_eq!(values.len(), t.numel(), "fill: length mismatch");
    t.update_data(|d| d.copy_from_slice(values));
}

/// Row-major identity-like selector: ones where row == col.
pub fn eye(rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows.min(cols) {
        out[i * cols + i] = 1.0;
    }
    out
}
