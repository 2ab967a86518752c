//! Domain value types shared by every module.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{GadError, Result};

/// A batch of normalized RGB images, laid out (batch, height, width, 3) with
/// all values in [-1, 1]. Height and width are equal powers of two >= 8.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Array4<f32>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (_, h, w, c) = data.dim();
        if c != 3 {
            return Err(GadError::contract(format!("images must have 3 channels, got {c}")));
        }
        if h != w || !h.is_power_of_two() || h < 8 {
            return Err(GadError::contract(format!(
                "image side must be an equal power of two >= 8, got {h}x{w}"
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(GadError::contract(format!("image value {v} outside [-1, 1]")));
            }
        }
        Ok(ImageBatch { data })
    }

    /// Like [`ImageBatch::new`] but clamps values into [-1, 1] first. Used for
    /// generator outputs where tanh can land exactly on the boundary and
    /// rounding may nudge a value a hair outside.
    pub fn from_clamped(mut data: Array4<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Self::new(data)
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.data.dim().1
    }

}

/// Integer artist label in [0, n_artists).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArtistId(pub usize);

impl ArtistId {
    pub fn checked(id: usize, n_artists: usize) -> Result<Self> {
        if id >= n_artists {
            return Err(GadError::contract(format!(
                "artist id {id} out of range (n_artists = {n_artists})"
            )));
        }
        Ok(ArtistId(id))
    }
}

/// Parameters of a diagonal Gaussian code distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCode {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianCode {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(GadError::contract(format!(
                "code mean dim {} != std dim {}",
                mean.len(),
                std.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(GadError::contract("code mean must be finite"));
        }
        if std.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(GadError::contract("code std must be finite and > 0"));
        }
        Ok(GaussianCode { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Raw classifier outputs, softmax-normalized on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Vec<f64>,
}

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(GadError::contract("logits must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GadError::contract("logits must be finite"));
        }
        Ok(Logits { values })
    }

    pub fn n_classes(&self) -> usize {
        self.values.len()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Batch of per-image codes as (batch, dim) mean/log-std matrices; the form
/// the networks produce and consume.
#[derive(Debug, Clone)]
pub struct CodeBatch {
    pub mean: Array2<f32>,
    pub logstd: Array2<f32>,
}

impl CodeBatch {
    pub fn item(&self, i: usize) -> Result<GaussianCode> {
        GaussianCode::new(
            self.mean.row(i).iter().map(|&v| v as f64).collect(),
            self.logstd.row(i).iter().map(|&v| (v as f64).exp()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn image_batch_rejects_bad_shapes_and_values() {
        assert!(ImageBatch::new(Array4::zeros((1, 8, 8, 3))).is_ok());
        assert!(ImageBatch::new(Array4::zeros((1, 8, 16, 3))).is_err());
        assert!(ImageBatch::new(Array4::zeros((1, 12, 12, 3))).is_err());
        assert!(ImageBatch::new(Array4::zeros((1, 4, 4, 3))).is_err());
        let mut bad = Array4::zeros((1, 8, 8, 3));
        bad[(0, 0, 0, 0)] = 1.5;
        assert!(ImageBatch::new(bad).is_err());
    }

    #[test]
    fn clamping_constructor_fixes_boundary_overshoot() {
        let mut data = Array4::zeros((1, 8, 8, 3));
        data[(0, 0, 0, 0)] = 1.0 + f32::EPSILON;
        data[(0, 1, 1, 1)] = -1.5;
        let batch = ImageBatch::from_clamped(data).unwrap();
        assert_eq!(batch.data()[(0, 0, 0, 0)], 1.0);
        assert_eq!(batch.data()[(0, 1, 1, 1)], -1.0);
    }

    #[test]
    fn gaussian_code_requires_positive_std() {
        assert!(GaussianCode::new(vec![0.0], vec![1.0]).is_ok());
        assert!(GaussianCode::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianCode::new(vec![0.0], vec![-1.0]).is_err());
        assert!(GaussianCode::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }
}
