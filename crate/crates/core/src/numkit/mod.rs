//! Dense numerical kernel shared by every learned component.

pub mod adam;
pub mod checkpoint;
pub mod gaussian;
pub mod matrix;
pub mod mlp;

pub use adam::{AdamConfig, OptimState};
pub use gaussian::{gaussian_logpdf, log_sum_exp, LOG_STD_MAX, LOG_STD_MIN};
pub use matrix::Matrix;
pub use mlp::{Activation, ForwardCache, Layer, LayerSpec, MlpGrads, MlpParams};

/// Single-sample forward pass.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> crate::Result<Vec<f64>> {
    params.forward(input)
}

/// Single-sample backward pass for output gradient `output_grad`.
pub fn mlp_backward(
    params: &MlpParams,
    input: &[f64],
    output_grad: &[f64],
) -> crate::Result<(MlpGrads, Vec<f64>)> {
    params.backward_single(input, output_grad)
}

/// One Adam update of `params` in place.
pub fn adam_step(state: &mut OptimState, params: &mut MlpParams, grads: &MlpGrads) -> crate::Result<()> {
    state.step_mlp(params, grads)
}

/// Per-feature mean and standard deviation used to whiten network inputs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits on rows; standard deviations below `1e-6` are floored at 1.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            n += 1;
            for j in 0..dim {
                let d = row[j] - mean[j];
                mean[j] += d / n as f64;
                m2[j] += d * (row[j] - mean[j]);
            }
        }
        let std = m2
            .iter()
            .map(|&s| {
                let sd = if n > 1 { (s / n as f64).sqrt() } else { 0.0 };
                if sd < 1e-6 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = (x[j] - self.mean[j]) / self.std[j];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_matrix(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}
