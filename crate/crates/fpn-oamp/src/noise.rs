//! Measurement-domain noise generators: AWGN and (possibly skewed)
//! alpha-stable impulsive noise.
//!
//! Noise is drawn directly in the real measurement domain. The combining
//! vectors have unit norm and disjoint supports, so combined antenna noise is
//! again iid with the same per-component statistics; sampling in the
//! measurement domain is exact, not an approximation.
//!
//! SNR convention: `signal_power` passed to [`sample_noise`] is the
//! *per-component* signal power ‖Mh‖²/dim. For AWGN the per-component noise
//! variance is signal_power/10^(snr_db/10), so the total-power ratio
//! ‖Mh‖²/E‖n‖² matches snr_db. For alpha-stable noise the generalized SNR
//! (GSNR) fixes the dispersion as signal_power/10^(gsnr_db/10).

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from noise specification.
#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("stability parameter alpha must be in (0, 2], got {0}")]
    InvalidAlpha(f64),
    #[error("skewness beta must be in [-1, 1], got {0}")]
    InvalidBeta(f64),
    #[error("dispersion must be positive, got {0}")]
    InvalidDispersion(f64),
    #[error("noise dimension must be positive")]
    ZeroDim,
}

/// How the alpha-stable scale is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StableScale {
    /// Dispersion derived from the generalized SNR in dB.
    GsnrDb(f64),
    /// Dispersion given directly.
    Dispersion(f64),
}

/// Noise model specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Gaussian noise at the given per-sample SNR (dB); +∞ means noiseless.
    Awgn { snr_db: f64 },
    /// Alpha-stable noise via the Chambers-Mallows-Stuck construction.
    AlphaStable {
        alpha: f64,
        beta: f64,
        scale: StableScale,
    },
}

impl NoiseSpec {
    /// Validates parameter ranges.
    pub fn validate(&self) -> Result<(), NoiseError> {
        match *self {
            NoiseSpec::Awgn { .. } => Ok(()),
            NoiseSpec::AlphaStable { alpha, beta, scale } => {
                if !(alpha > 0.0 && alpha <= 2.0) {
                    return Err(NoiseError::InvalidAlpha(alpha));
                }
                if !(-1.0..=1.0).contains(&beta) {
                    return Err(NoiseError::InvalidBeta(beta));
                }
                if let StableScale::Dispersion(d) = scale {
                    if !(d > 0.0) {
                        return Err(NoiseError::InvalidDispersion(d));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Dispersion implied by a GSNR (dB) at the given per-component signal power.
pub fn dispersion_from_gsnr(signal_power: f64, gsnr_db: f64) -> f64 {
    signal_power / 10f64.powf(gsnr_db / 10.0)
}

/// One draw of the standard (unit-scale) stable law S(alpha, beta) via the
/// Chambers-Mallows-Stuck transform.
///
/// Uses the standard parameterization: U uniform on (−π/2, π/2), W
/// exponential(1); the α=1 branch is the usual logarithmic form. For α=2 the
/// law is Gaussian with variance 2.
fn standard_stable(rng: &mut impl Rng, alpha: f64, beta: f64) -> f64 {
    let u: f64 = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
    let w: f64 = Exp1.sample(rng);
    if (alpha - 1.0).abs() < 1e-12 {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let t = half_pi + beta * u;
        (t * u.tan() - beta * ((half_pi * w * u.cos()) / t).ln()) / half_pi
    } else {
        let tan_term = beta * (std::f64::consts::FRAC_PI_2 * alpha).tan();
        let b = tan_term.atan() / alpha;
        let s = (1.0 + tan_term * tan_term).powf(1.0 / (2.0 * alpha));
        let cos_u = u.cos();
        s * (alpha * (u + b)).sin() / cos_u.powf(1.0 / alpha)
            * ((u - alpha * (u + b)).cos() / w).powf((1.0 - alpha) / alpha)
    }
}

/// Draws a real noise vector of length `dim` for the given spec.
///
/// `signal_power` is the per-component signal power ‖Mh‖²/dim of the sample
/// the noise will be added to.
pub fn sample_noise(
    rng: &mut impl Rng,
    spec: &NoiseSpec,
    signal_power: f64,
    dim: usize,
) -> Result<DVector<f64>, NoiseError> {
    spec.validate()?;
    if dim == 0 {
        return Err(NoiseError::ZeroDim);
    }
    match *spec {
        NoiseSpec::Awgn { snr_db } => {
            let variance = if snr_db.is_infinite() && snr_db > 0.0 {
                0.0
            } else {
                signal_power / 10f64.powf(snr_db / 10.0)
            };
            if variance == 0.0 {
                return Ok(DVector::zeros(dim));
            }
            let normal = Normal::new(0.0, variance.sqrt()).expect("finite std");
            Ok(DVector::from_fn(dim, |_, _| normal.sample(rng)))
        }
        NoiseSpec::AlphaStable { alpha, beta, scale } => {
            let dispersion = match scale {
                StableScale::GsnrDb(gsnr_db) => dispersion_from_gsnr(signal_power, gsnr_db),
                StableScale::Dispersion(d) => d,
            };
            if !(dispersion > 0.0) {
                return Err(NoiseError::InvalidDispersion(dispersion));
            }
            Ok(DVector::from_fn(dim, |_, _| {
                dispersion * standard_stable(rng, alpha, beta)
            }))
        }
    }
}
