use serde::{Deserialize, Serialize};

use super::DatasetError;

/// Variance floor inside the square root of the running normalizer.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `x / 255`.
    PixelScale,
    /// `(x - mean) / sqrt(var + eps)` with streaming statistics.
    RunningMeanStd,
}

/// Per-dimension streaming mean and population variance (Chan et al. merge).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    pub m2: Vec<f64>,
    pub count: u64,
}

impl NormStats {
    pub fn pixel_scale() -> Self {
        Self {
            mode: NormMode::PixelScale,
            mean: Vec::new(),
            m2: Vec::new(),
            count: 0,
        }
    }

    pub fn running(dim: usize) -> Self {
        Self {
            mode: NormMode::RunningMeanStd,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.dim()];
        }
        self.m2.iter().map(|m| m / self.count as f64).collect()
    }

    /// Folds a row-major batch of `rows x dim` values into the statistics.
    pub fn update(&mut self, batch: &[f64]) -> Result<(), DatasetError> {
        if self.mode == NormMode::PixelScale {
            return Ok(());
        }
        let dim = self.dim();
        if dim == 0 || !batch.len().is_multiple_of(dim) {
            return Err(DatasetError::Dimension {
                expected: dim,
                found: batch.len(),
            });
        }
        let n_b = (batch.len() / dim) as f64;
        if n_b == 0.0 {
            return Ok(());
        }
        let n_a = self.count as f64;
        let total = n_a + n_b;
        for j in 0..dim {
            let col = batch.iter().skip(j).step_by(dim);
            let mean_b = col.clone().sum::<f64>() / n_b;
            let m2_b: f64 = col.map(|v| (v - mean_b) * (v - mean_b)).sum();
            let delta = mean_b - self.mean[j];
            self.mean[j] += delta * n_b / total;
            self.m2[j] += m2_b + delta * delta * n_a * n_b / total;
        }
        self.count += n_b as u64;
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.normalize_in_place(&mut out);
        out
    }

    /// Normalizes rows of length `dim` (any length in pixel mode).
    pub fn normalize_in_place(&self, x: &mut [f64]) {
        match self.mode {
            NormMode::PixelScale => x.iter_mut().for_each(|v| *v /= 255.0),
            NormMode::RunningMeanStd => {
                let dim = self.dim();
                let std: Vec<f64> = self
                    .variance()
                    .iter()
                    .map(|v| (v + NORM_EPS).sqrt())
                    .collect();
                for row in x.chunks_mut(dim) {
                    for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&std) {
                        *v = (*v - m) / s;
                    }
                }
            }
        }
    }
}
