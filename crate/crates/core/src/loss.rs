//! Reconstruction and memory-entropy losses.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::TargetPatch;

/// Mean squared difference over all pixels and channels.
pub fn recon_loss(x: &TargetPatch, x_hat: &TargetPatch) -> Result<f64> {
    if x.0.dim() != x_hat.0.dim() {
        return Err(Error::shape(
            "reconstruction loss",
            format!("{:?}", x.0.dim()),
            format!("{:?}", x_hat.0.dim()),
        ));
    }
    let n = x.0.len() as f64;
    Ok(x.0
        .iter()
        .zip(x_hat.0.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Shannon entropy of the memory read weights with `0 log 0 = 0`.
pub fn entropy_loss(weights: &Array1<f64>) -> f64 {
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| -w * w.ln())
        .sum()
}

pub(crate) fn entropy_grad(weights: &Array1<f64>) -> Array1<f64> {
    weights.mapv(|w| if w > 0.0 { -(w.ln() + 1.0) } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            entropy: 0.0002,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub entropy: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(recon: f64, entropy: f64, weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        recon,
        entropy,
        total: weights.recon * recon + weights.entropy * entropy,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn recon_examples() {
        let zeros = TargetPatch::zeros(2, 4);
        let ones = TargetPatch(Array3::ones((2, 4, 4)));
        assert_eq!(recon_loss(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(recon_loss(&zeros, &ones).unwrap(), 1.0);
        let three = TargetPatch(Array3::from_elem((2, 4, 4), 3.0));
        assert_eq!(recon_loss(&zeros, &three).unwrap(), 9.0 * recon_loss(&zeros, &ones).unwrap());
        assert!(recon_loss(&zeros, &TargetPatch::zeros(1, 4)).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_loss(&array![1.0, 0.0, 0.0, 0.0]), 0.0);
        assert!((entropy_loss(&array![0.25, 0.25, 0.25, 0.25]) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy_loss(&array![0.5, 0.5, 0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert!((total_loss(2.0, 5.0, w).total - 2.001).abs() < 1e-12);
        let no_ent = LossWeights { entropy: 0.0, ..w };
        assert_eq!(total_loss(2.0, 5.0, no_ent).total, 2.0);
        assert_eq!(total_loss(0.0, 0.0, w).total, 0.0);
    }
}
