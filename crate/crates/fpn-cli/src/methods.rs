//! Estimation methods evaluated by the experiment runners.

use anyhow::{bail, Result};
use fpn_oamp::baselines::{
    fista_estimate, ls_estimate, oamp_bg_estimate, omp_estimate, spectral_norm, FistaConfig,
    OampBgConfig,
};
use fpn_oamp::config::EvalSection;
use fpn_oamp::fpn::{batch_fixed_point_solve, SolveOptions};
use fpn_oamp::measurement::MeasurementOperator;
use fpn_oamp::nle::NleParameters;
use fpn_oamp::training::GeneratedSet;
use nalgebra::DVector;
use std::time::Instant;

/// Estimators the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Learned fixed-point estimator.
    Fpn,
    /// Pseudo-inverse least squares.
    Ls,
    /// Orthogonal matching pursuit on the dictionary blocks.
    Omp,
    /// L1-regularised proximal gradient descent.
    Fista,
    /// Orthogonal AMP with a Bernoulli-Gaussian denoiser.
    OampBg,
    /// Ground truth injected back (pipeline sanity row).
    Oracle,
}

impl Method {
    /// Name used in CSV rows.
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fpn => "fpn_oamp",
            Method::Ls => "ls",
            Method::Omp => "omp",
            Method::Fista => "fista",
            Method::OampBg => "oamp_bg",
            Method::Oracle => "oracle",
        }
    }

    /// All methods in report order.
    pub fn all() -> [Method; 6] {
        [
            Method::Fpn,
            Method::Ls,
            Method::Omp,
            Method::Fista,
            Method::OampBg,
            Method::Oracle,
        ]
    }
}

/// Aggregated evaluation of one method over one labelled set.
#[derive(Debug, Clone)]
pub struct MethodEval {
    /// `10 log10` of the energy-mean error ratio, floored at -200.
    pub nmse_db: f64,
    pub mean_iterations: f64,
    /// Mean seconds per sample around the solve only; 0 in deterministic
    /// mode.
    pub wall_time: f64,
    /// Soft-threshold weight picked from the candidate grid (FISTA only).
    pub fista_lambda: Option<f64>,
}

fn nmse_ratio(estimate: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    (estimate - truth).norm_squared() / truth.norm_squared()
}

fn ratio_to_db(mean_ratio: f64) -> f64 {
    (10.0 * mean_ratio.log10()).max(-200.0)
}

/// Noise variance per real component implied by a sample's SNR, using the
/// clean measurement energy of its ground truth.
fn oracle_noise_variance(op: &MeasurementOperator, set: &GeneratedSet, j: usize) -> f64 {
    let clean = op.m_real() * set.gt.column(j);
    let signal_power = clean.norm_squared() / clean.len() as f64;
    signal_power / 10f64.powf(set.snr_db[j] / 10.0)
}

/// Picks the candidate soft-threshold weight with the best mean error ratio
/// on the first few samples of the set.
pub fn pick_fista_lambda(
    op: &MeasurementOperator,
    set: &GeneratedSet,
    eval: &EvalSection,
) -> f64 {
    assert!(!eval.fista_lambdas.is_empty(), "empty lambda grid");
    let probe = set.len().min(32);
    let step = 1.0 / spectral_norm(op.m_real()).powi(2);
    let mut best = (f64::INFINITY, eval.fista_lambdas[0]);
    for &lambda in &eval.fista_lambdas {
        let config = FistaConfig {
            step_size: Some(step),
            max_iterations: eval.fista_max_iterations,
            ..FistaConfig::new(lambda)
        };
        let mut ratio = 0.0;
        for j in 0..probe {
            let y = set.y.column(j).into_owned();
            let (estimate, _) = fista_estimate(op, &y, &config, None);
            ratio += nmse_ratio(&estimate, &set.gt.column(j).into_owned());
        }
        if ratio < best.0 {
            best = (ratio, lambda);
        }
    }
    best.1
}

/// Runs one method over the whole set and aggregates its error, iteration
/// count, and per-sample solve time.
pub fn evaluate_method(
    method: Method,
    params: Option<&NleParameters>,
    op: &MeasurementOperator,
    set: &GeneratedSet,
    eval: &EvalSection,
    deterministic: bool,
) -> Result<MethodEval> {
    let n = set.len();
    assert!(n > 0, "empty evaluation set");
    let mut ratio_sum = 0.0;
    let mut iteration_sum = 0.0;
    let mut fista_lambda = None;
    let started = Instant::now();
    match method {
        Method::Fpn => {
            let Some(params) = params else {
                bail!("method {} needs a trained checkpoint", method.name());
            };
            let opts = SolveOptions {
                tolerance: eval.tolerance,
                max_iterations: eval.max_iterations,
            };
            let chunk = 128;
            let mut start = 0;
            while start < n {
                let stop = (start + chunk).min(n);
                let idx: Vec<usize> = (start..stop).collect();
                let ys = set.y.select_columns(idx.iter());
                let solved = batch_fixed_point_solve(params, op, &ys, &opts);
                for (k, &j) in idx.iter().enumerate() {
                    ratio_sum += nmse_ratio(
                        &solved.estimates.column(k).into_owned(),
                        &set.gt.column(j).into_owned(),
                    );
                    iteration_sum += solved.iterations[k] as f64;
                }
                start = stop;
            }
        }
        Method::Ls => {
            for j in 0..n {
                let estimate = ls_estimate(op, &set.y.column(j).into_owned());
                ratio_sum += nmse_ratio(&estimate, &set.gt.column(j).into_owned());
                iteration_sum += 1.0;
            }
        }
        Method::Omp => {
            for j in 0..n {
                let estimate = omp_estimate(op, &set.y.column(j).into_owned(), eval.omp_atoms);
                ratio_sum += nmse_ratio(&estimate, &set.gt.column(j).into_owned());
                iteration_sum += eval.omp_atoms as f64;
            }
        }
        Method::Fista => {
            let lambda = pick_fista_lambda(op, set, eval);
            fista_lambda = Some(lambda);
            let config = FistaConfig {
                step_size: Some(1.0 / spectral_norm(op.m_real()).powi(2)),
                max_iterations: eval.fista_max_iterations,
                ..FistaConfig::new(lambda)
            };
            for j in 0..n {
                let (estimate, trace) =
                    fista_estimate(op, &set.y.column(j).into_owned(), &config, None);
                ratio_sum += nmse_ratio(&estimate, &set.gt.column(j).into_owned());
                iteration_sum += trace.len() as f64;
            }
        }
        Method::OampBg => {
            for j in 0..n {
                let config = OampBgConfig {
                    sparsity: eval.oamp_sparsity,
                    max_iterations: eval.oamp_iterations,
                    ..OampBgConfig::new(oracle_noise_variance(op, set, j))
                };
                let (estimate, trace) =
                    oamp_bg_estimate(op, &set.y.column(j).into_owned(), &config, None);
                ratio_sum += nmse_ratio(&estimate, &set.gt.column(j).into_owned());
                iteration_sum += trace.len() as f64;
            }
        }
        Method::Oracle => {
            // ratio_sum stays zero: exact recovery reports the sentinel.
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    Ok(MethodEval {
        nmse_db: ratio_to_db(ratio_sum / n as f64),
        mean_iterations: iteration_sum / n as f64,
        wall_time: if deterministic { 0.0 } else { elapsed / n as f64 },
        fista_lambda,
    })
}
