//! Classical reference estimators: least squares, orthogonal matching
//! pursuit, FISTA, and an orthogonal AMP loop with a Bernoulli-Gaussian
//! posterior-mean denoiser.
//!
//! All of them consume the real stacked measurement vector produced by
//! [`crate::measurement::MeasurementOperator::observe`] and return estimates
//! in the real estimation domain, so they slot into the same evaluation
//! pipeline as the learned solver.

use crate::measurement::MeasurementOperator;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// One point of an iterative estimator's trajectory.
#[derive(Debug, Clone)]
pub struct IterationPoint {
    /// 1-based iteration counter.
    pub iteration: usize,
    /// Norm of the change between consecutive iterates.
    pub residual: f64,
    /// Objective value, for estimators that minimise one.
    pub objective: Option<f64>,
    /// Error against the supplied ground truth, when available.
    pub nmse_db: Option<f64>,
}

/// Minimum-norm least squares: applies the operator's cached pseudo-inverse.
pub fn ls_estimate(op: &MeasurementOperator, y: &DVector<f64>) -> DVector<f64> {
    // The de-correlated linear estimator is eta times the pseudo-inverse.
    (op.w() * y) / op.eta()
}

/// Largest singular value of a real matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

fn real_to_complex(y: &DVector<f64>) -> DVector<Complex64> {
    let half = y.len() / 2;
    DVector::from_fn(half, |i, _| Complex64::new(y[i], y[half + i]))
}

fn complex_to_real(x: &DVector<Complex64>) -> DVector<f64> {
    let half = x.len();
    DVector::from_fn(2 * half, |i, _| if i < half { x[i].re } else { x[i - half].im })
}

/// Orthogonal matching pursuit on the complex measurement matrix.
///
/// Greedily selects the column with the largest normalised correlation to
/// the residual, then re-fits all selected coefficients by least squares.
/// Stops after `max_atoms` selections or once the residual is negligible.
pub fn omp_estimate(op: &MeasurementOperator, y: &DVector<f64>, max_atoms: usize) -> DVector<f64> {
    let m = op.m_complex();
    let yc = real_to_complex(y);
    let n_cols = m.ncols();
    let col_norms: Vec<f64> = (0..n_cols).map(|j| m.column(j).norm().max(1e-300)).collect();

    let mut selected: Vec<usize> = Vec::new();
    let mut in_support = vec![false; n_cols];
    let mut residual = yc.clone();
    let mut coeffs: DVector<Complex64> = DVector::zeros(0);
    let y_norm = yc.norm();

    for _ in 0..max_atoms.min(n_cols) {
        if residual.norm() <= 1e-12 * y_norm.max(1e-300) {
            break;
        }
        let mut best = None;
        let mut best_score = -1.0;
        for j in 0..n_cols {
            if in_support[j] {
                continue;
            }
            let score = m.column(j).dotc(&residual).norm() / col_norms[j];
            if score > best_score {
                best_score = score;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        selected.push(j);
        in_support[j] = true;

        let sub = m.select_columns(selected.iter());
        let svd = sub.clone().svd(true, true);
        coeffs = svd.solve(&yc, 1e-12).expect("svd solve");
        residual = &yc - sub * &coeffs;
    }

    let mut x = DVector::zeros(n_cols);
    for (k, &j) in selected.iter().enumerate() {
        x[j] = coeffs[k];
    }
    complex_to_real(&x)
}

/// FISTA settings for the l1-regularised least-squares problem.
#[derive(Debug, Clone, Copy)]
pub struct FistaConfig {
    /// l1 penalty weight.
    pub lambda: f64,
    /// Iteration budget.
    pub max_iterations: usize,
    /// Early-stop threshold on the iterate change norm.
    pub tolerance: f64,
    /// Gradient step size; `None` computes `1 / spectral_norm(M)^2`.
    pub step_size: Option<f64>,
}

impl FistaConfig {
    /// Defaults: 500 iterations, change tolerance `1e-10`, automatic step.
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            max_iterations: 500,
            tolerance: 1e-10,
            step_size: None,
        }
    }
}

fn soft_threshold(v: f64, threshold: f64) -> f64 {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        0.0
    }
}

/// FISTA for `min 0.5 ||y - M h||^2 + lambda ||h||_1`, with the standard
/// momentum schedule and no restarts.
pub fn fista_estimate(
    op: &MeasurementOperator,
    y: &DVector<f64>,
    config: &FistaConfig,
    ground_truth: Option<&DVector<f64>>,
) -> (DVector<f64>, Vec<IterationPoint>) {
    let m = op.m_real();
    let step = config
        .step_size
        .unwrap_or_else(|| 1.0 / spectral_norm(m).powi(2));
    let n = m.ncols();
    let mut x = DVector::zeros(n);
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut trace = Vec::new();

    for k in 1..=config.max_iterations {
        let grad = m.transpose() * (m * &z - y);
        let mut x_next = &z - step * grad;
        for v in x_next.iter_mut() {
            *v = soft_threshold(*v, config.lambda * step);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        z = &x_next + (&x_next - &x) * momentum;
        let change = (&x_next - &x).norm();
        let objective = 0.5 * (y - m * &x_next).norm_squared() + config.lambda * x_next.lp_norm(1);
        trace.push(IterationPoint {
            iteration: k,
            residual: change,
            objective: Some(objective),
            nmse_db: ground_truth.map(|gt| crate::nmse_db(&x_next, gt)),
        });
        x = x_next;
        t = t_next;
        if change <= config.tolerance {
            break;
        }
    }
    (x, trace)
}

/// Settings for the orthogonal AMP loop with a Bernoulli-Gaussian denoiser.
#[derive(Debug, Clone, Copy)]
pub struct OampBgConfig {
    /// Prior probability that a real coefficient is active.
    pub sparsity: f64,
    /// Prior variance of active coefficients; `None` re-estimates it from
    /// the current linear-estimator output every iteration.
    pub signal_variance: Option<f64>,
    /// Noise variance per real measurement component.
    pub noise_variance: f64,
    /// Iteration budget.
    pub max_iterations: usize,
    /// Early-stop threshold on the iterate change norm.
    pub tolerance: f64,
    /// Replace the cached pseudo-inverse step with a per-iteration LMMSE
    /// linear stage.
    pub lmmse_le: bool,
}

impl OampBgConfig {
    /// Defaults: sparsity 0.1, estimated signal variance, 30 iterations.
    pub fn new(noise_variance: f64) -> Self {
        Self {
            sparsity: 0.1,
            signal_variance: None,
            noise_variance,
            max_iterations: 30,
            tolerance: 1e-6,
            lmmse_le: false,
        }
    }
}

/// Posterior mean and its derivative for a Bernoulli-Gaussian scalar prior
/// `(1 - rho) delta_0 + rho N(0, v)` observed through `u = x + N(0, tau2)`.
fn bg_denoise(u: f64, rho: f64, v: f64, tau2: f64) -> (f64, f64) {
    let shrink = v / (v + tau2);
    // Log odds of the active component, evaluated stably.
    let log_odds = (rho / (1.0 - rho)).ln() + 0.5 * (tau2 / (v + tau2)).ln()
        + 0.5 * u * u * (1.0 / tau2 - 1.0 / (v + tau2));
    let pi = 1.0 / (1.0 + (-log_odds).exp());
    let value = pi * shrink * u;
    let dpi = pi * (1.0 - pi) * u * (1.0 / tau2 - 1.0 / (v + tau2));
    let derivative = shrink * (pi + u * dpi);
    (value, derivative)
}

/// Orthogonal AMP iteration: de-correlated linear stage, Bernoulli-Gaussian
/// posterior-mean denoiser, divergence correction.
pub fn oamp_bg_estimate(
    op: &MeasurementOperator,
    y: &DVector<f64>,
    config: &OampBgConfig,
    ground_truth: Option<&DVector<f64>>,
) -> (DVector<f64>, Vec<IterationPoint>) {
    assert!(
        config.sparsity > 0.0 && config.sparsity < 1.0,
        "sparsity must be in (0, 1)"
    );
    let m = op.m_real();
    let rows = m.nrows() as f64;
    let n = m.ncols();
    let count = n as f64;
    let mut h = DVector::zeros(n);
    let mut trace = Vec::new();

    for k in 1..=config.max_iterations {
        let data_residual = y - m * &h;
        // Effective per-component noise at the denoiser input, from the
        // unexplained measurement power.
        let tau2 = (data_residual.norm_squared() / rows - config.noise_variance).max(1e-12);

        let u = if config.lmmse_le {
            // LMMSE linear stage for the current error level, trace
            // normalised so the identity part keeps unit gain.
            let gram = m * m.transpose() * tau2
                + DMatrix::identity(m.nrows(), m.nrows()) * config.noise_variance;
            let w = tau2
                * m.transpose()
                * gram.cholesky().expect("positive definite gram").inverse();
            let gain = (&w * m).trace() / count;
            &h + w * &data_residual / gain.max(1e-12)
        } else {
            &h + op.w() * &data_residual
        };

        let v = config
            .signal_variance
            .unwrap_or_else(|| ((u.norm_squared() / count - tau2) / config.sparsity).max(1e-12));

        let mut eta = DVector::zeros(n);
        let mut deriv_sum = 0.0;
        for i in 0..n {
            let (value, derivative) = bg_denoise(u[i], config.sparsity, v, tau2);
            eta[i] = value;
            deriv_sum += derivative;
        }
        let avg_deriv = deriv_sum / count;
        // Divergence correction, skipped when it would blow up numerically.
        let h_next = if 1.0 - avg_deriv >= 1e-6 {
            (eta - &u * avg_deriv) / (1.0 - avg_deriv)
        } else {
            eta
        };

        let change = (&h_next - &h).norm();
        trace.push(IterationPoint {
            iteration: k,
            residual: change,
            objective: None,
            nmse_db: ground_truth.map(|gt| crate::nmse_db(&h_next, gt)),
        });
        h = h_next;
        if change <= config.tolerance {
            break;
        }
    }
    (h, trace)
}
