//! Wideband sample generation over a symmetric subcarrier grid.
//!
//! Each physical channel draw is shared across all subcarriers: path angles,
//! distances, and delays stay fixed while the gains, array responses, and
//! delay phases are re-evaluated at every subcarrier frequency. The
//! measurement operator (and its dictionary, built at the centre frequency)
//! is shared across the band, so these sets expose exactly the mismatch a
//! beam-squint-free narrowband model suffers away from the centre.

use crate::channel::{assemble_channel, gains_at_frequency, sample_paths, ChannelConfig};
use crate::measurement::MeasurementOperator;
use crate::noise::{sample_noise, NoiseSpec};
use crate::sample_rng;
use crate::training::{GeneratedSet, TrainingError};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Subcarrier grid description.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct WidebandConfig {
    /// Number of subcarriers.
    pub k_subcarriers: usize,
    /// Total bandwidth in Hz.
    pub bandwidth: f64,
}

impl Default for WidebandConfig {
    fn default() -> Self {
        Self {
            k_subcarriers: 32,
            bandwidth: 0.05 * 3e11,
        }
    }
}

/// Frequency of 1-based subcarrier `k` on a grid of `k_total` subcarriers
/// spaced `bandwidth / k_total` apart and centred on `f_c`.
pub fn subcarrier_frequency(f_c: f64, bandwidth: f64, k: usize, k_total: usize) -> f64 {
    assert!(k_total > 0 && (1..=k_total).contains(&k));
    let offset = (k as f64 - 1.0) - (k_total as f64 - 1.0) / 2.0;
    f_c + offset * bandwidth / k_total as f64
}

/// Generated samples for every subcarrier of a grid.
#[derive(Debug, Clone)]
pub struct WidebandSet {
    /// Subcarrier frequencies in Hz, ascending.
    pub frequencies: Vec<f64>,
    /// One labelled set per subcarrier, all describing the same channel
    /// draws evaluated at that subcarrier's frequency.
    pub per_subcarrier: Vec<GeneratedSet>,
}

/// Draws `count` channels and observes each of them on every subcarrier
/// through the shared (centre-frequency) operator. Each subcarrier's ground
/// truths are normalised to unit norm; the SNR is drawn once per channel and
/// reused across the band.
pub fn generate_wideband_dataset(
    master_seed: u64,
    count: usize,
    op: &MeasurementOperator,
    channel: &ChannelConfig,
    wideband: &WidebandConfig,
    snr_range_db: (f64, f64),
) -> Result<WidebandSet, TrainingError> {
    if count == 0 {
        return Err(TrainingError::EmptyDataset);
    }
    assert!(wideband.k_subcarriers > 0 && wideband.bandwidth >= 0.0);
    let geometry = op.geometry();
    let k_total = wideband.k_subcarriers;
    let frequencies: Vec<f64> = (1..=k_total)
        .map(|k| subcarrier_frequency(geometry.f_c(), wideband.bandwidth, k, k_total))
        .collect();
    let dim = op.cols();
    let rows = op.rows();
    let mut gt: Vec<DMatrix<f64>> = vec![DMatrix::zeros(dim, count); k_total];
    let mut y: Vec<DMatrix<f64>> = vec![DMatrix::zeros(rows, count); k_total];
    let mut snr_db = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = sample_rng(master_seed, idx as u64);
        let paths = sample_paths(&mut rng, channel, geometry)?;
        let snr = if snr_range_db.0 < snr_range_db.1 {
            rng.gen_range(snr_range_db.0..snr_range_db.1)
        } else {
            snr_range_db.0
        };
        snr_db.push(snr);
        for (k, &f_k) in frequencies.iter().enumerate() {
            let paths_k = gains_at_frequency(&paths, channel, f_k)?;
            let sample = assemble_channel(&paths_k, geometry, f_k)?;
            let mut h = op.to_estimation_domain(&sample.h_complex)?;
            let norm = h.norm();
            assert!(norm > 0.0, "assembled channel must be nonzero");
            h /= norm;
            let clean = op.m_real() * &h;
            let signal_power = clean.norm_squared() / rows as f64;
            let noise =
                sample_noise(&mut rng, &NoiseSpec::Awgn { snr_db: snr }, signal_power, rows)?;
            gt[k].set_column(idx, &h);
            y[k].set_column(idx, &(clean + noise));
        }
    }
    let per_subcarrier = gt
        .into_iter()
        .zip(y)
        .map(|(gt, y)| GeneratedSet {
            gt,
            y,
            snr_db: snr_db.clone(),
        })
        .collect();
    Ok(WidebandSet {
        frequencies,
        per_subcarrier,
    })
}
