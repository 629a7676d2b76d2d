//! Differentially private local training.
//!
//! [`dp_sgd_step`] clips each per-sample gradient to L2 norm `C`, averages, and
//! adds `N(0, σ²C²I_d) / batch` over the flattened trainable coordinates.
//! [`accountant`] converts `(σ, q, T, δ)` to `ε` and back; [`decomposition`]
//! splits the perturbation of a private adapter into first- and second-order
//! noise terms.

pub mod accountant;
pub mod decomposition;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::rng_from_seed;

pub use accountant::{accountant_epsilon, calibrate_sigma, AccountantDump, RdpAccountant, RDP_ORDERS};
pub use decomposition::{noise_decompose_lora, noise_decompose_sb, NoiseDecomposition};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy parameters: {0}")]
    Invalid(String),
    #[error("no per-sample gradients")]
    EmptyBatch,
    #[error("per-sample gradient {index} has length {got}, expected {expected}")]
    Ragged {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("target epsilon {target} is unreachable (epsilon {best} at sigma {sigma})")]
    Unreachable { target: f64, best: f64, sigma: f64 },
}

/// DP-SGD and accounting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Per-sample L2 clip norm `C`; `inf` disables clipping (only with `σ = 0`).
    pub clip_norm: f64,
    /// Noise multiplier `σ`.
    pub noise_multiplier: f64,
    pub delta: f64,
    /// Sampling rate `q` of one step.
    pub sample_rate: f64,
    /// Number of composed steps `T`.
    pub steps: u64,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        let bad = |msg: String| Err(PrivacyError::Invalid(msg));
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return bad(format!("noise multiplier must be finite and >= 0, got {}", self.noise_multiplier));
        }
        if self.clip_norm.is_infinite() && self.noise_multiplier > 0.0 {
            return bad("noise needs a finite clip norm".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad(format!("sample rate must lie in (0, 1], got {}", self.sample_rate));
        }
        Ok(())
    }
}

fn check_batch(grads: &[Vec<f64>]) -> Result<usize, PrivacyError> {
    let d = grads.first().ok_or(PrivacyError::EmptyBatch)?.len();
    for (index, g) in grads.iter().enumerate() {
        if g.len() != d {
            return Err(PrivacyError::Ragged {
                index,
                expected: d,
                got: g.len(),
            });
        }
    }
    Ok(d)
}

fn accumulate_mean<'a>(d: usize, n: usize, items: impl Iterator<Item = (&'a [f64], f64)>) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for (g, factor) in items {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += factor * v;
        }
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Plain mean of flattened per-sample gradients.
pub fn mean_gradient(grads: &[Vec<f64>]) -> Result<Vec<f64>, PrivacyError> {
    let d = check_batch(grads)?;
    Ok(accumulate_mean(d, grads.len(), grads.iter().map(|g| (g.as_slice(), 1.0))))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Factor `min(1, C/‖g‖)` applied to one per-sample gradient.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// One private gradient estimate from flattened per-sample gradients.
///
/// With `σ = 0` and no gradient above the clip norm the result is bitwise the
/// [`mean_gradient`].
pub fn dp_sgd_step(grads: &[Vec<f64>], params: &PrivacyParams, seed: u64) -> Result<Vec<f64>, PrivacyError> {
    params.validate()?;
    let d = check_batch(grads)?;
    let clip = params.clip_norm;
    let factors: Vec<f64> = grads.iter().map(|g| clip_factor(l2(g), clip)).collect();
    for (g, f) in grads.iter().zip(&factors) {
        let clipped = l2(g) * f;
        assert!(clipped <= clip * (1.0 + 1e-12), "clipped norm {clipped} exceeds {clip}");
    }
    let mut out = accumulate_mean(d, grads.len(), grads.iter().map(|g| g.as_slice()).zip(factors));
    if params.noise_multiplier > 0.0 {
        let std = params.noise_multiplier * clip / grads.len() as f64;
        let mut rng = rng_from_seed(seed);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(clip: f64, sigma: f64) -> PrivacyParams {
        PrivacyParams {
            clip_norm: clip,
            noise_multiplier: sigma,
            delta: 1e-5,
            sample_rate: 0.1,
            steps: 1,
        }
    }

    #[test]
    fn no_noise_no_clip_is_mean_bitwise() {
        let g = vec![vec![0.1, -0.2, 0.3], vec![0.05, 0.4, -0.01], vec![1.0 / 3.0, 0.0, 0.2]];
        let dp = dp_sgd_step(&g, &params(10.0, 0.0), 1).unwrap();
        let plain = mean_gradient(&g).unwrap();
        assert!(dp.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits()));
        let unclipped = dp_sgd_step(&g, &params(f64::INFINITY, 0.0), 1).unwrap();
        assert!(unclipped.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn clipping_halves_a_gradient_at_twice_the_norm() {
        let g = vec![vec![3.0, 4.0]];
        let out = dp_sgd_step(&g, &params(2.5, 0.0), 0).unwrap();
        assert_eq!(out, vec![1.5, 2.0]);
    }

    #[test]
    fn noise_is_seeded() {
        let g = vec![vec![0.0; 5]];
        let a = dp_sgd_step(&g, &params(1.0, 1.0), 7).unwrap();
        assert_eq!(a, dp_sgd_step(&g, &params(1.0, 1.0), 7).unwrap());
        assert_ne!(a, dp_sgd_step(&g, &params(1.0, 1.0), 8).unwrap());
    }

    #[test]
    fn invalid_inputs() {
        assert_eq!(dp_sgd_step(&[], &params(1.0, 0.0), 0), Err(PrivacyError::EmptyBatch));
        assert!(matches!(
            dp_sgd_step(&[vec![1.0], vec![1.0, 2.0]], &params(1.0, 0.0), 0),
            Err(PrivacyError::Ragged { index: 1, .. })
        ));
        assert!(params(f64::INFINITY, 1.0).validate().is_err());
        assert!(params(0.0, 1.0).validate().is_err());
        assert!(PrivacyParams { delta: 1.0, ..params(1.0, 1.0) }.validate().is_err());
        assert!(PrivacyParams { sample_rate: 0.0, ..params(1.0, 1.0) }.validate().is_err());
    }
}
