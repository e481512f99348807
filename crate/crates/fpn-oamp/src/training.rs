//! Dataset generation, losses, gradients, and the training loop for the
//! learned nonlinear estimator.
//!
//! Training follows the one-step scheme: solve the fixed-point iteration
//! without tracking gradients, apply the map once more with gradients, and
//! backpropagate a normalised mean absolute error (plus a measurement-domain
//! auxiliary term) through that single application. An implicit-gradient
//! oracle that differentiates through the fixed point exactly is provided
//! for verification on small instances.

use crate::channel::{assemble_channel, sample_paths, ChannelConfig, ChannelError};
use crate::fpn::{
    batch_fixed_point_solve, lipschitz_estimate, safeguard_normalize, BatchSolveResult,
    SolveOptions,
};
use crate::measurement::{draw_operator, MeasurementError, MeasurementOperator};
use crate::nle::{
    batch_backward, batch_forward, init_params, nle_backward, NleError, NleParameters,
};
use crate::noise::{sample_noise, NoiseError, NoiseSpec};
use crate::sample_rng;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced by dataset generation and training.
#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training loss diverged at epoch {epoch}: {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Nle(#[from] NleError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// Training hyperparameters. Geometry and pilot settings live on the
/// measurement operator; this struct only describes the learning problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hidden channel width of the network.
    pub channels: usize,
    /// Residual block count.
    pub blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate is halved every this many epochs.
    pub lr_halving_epochs: usize,
    /// Weight of the measurement-domain auxiliary loss.
    pub aux_weight: f64,
    /// Training SNR draw range in dB.
    pub snr_range_db: (f64, f64),
    /// Fixed-point tolerance during training solves.
    pub solve_tolerance: f64,
    /// Fixed-point iteration cap during training solves.
    pub solve_max_iterations: usize,
    /// Validation fixed points used as expansion-ratio anchors.
    pub lipschitz_anchors: usize,
    /// Gaussian perturbation scale for the expansion-ratio probe.
    pub lipschitz_scale: f64,
    /// Draw a fresh measurement operator for every batch and regenerate the
    /// batch observations with it (operator-robustness ablation).
    pub redraw_operator_each_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            blocks: 3,
            epochs: 12,
            batch_size: 128,
            learning_rate: 1e-3,
            lr_halving_epochs: 30,
            aux_weight: 0.3,
            snr_range_db: (0.0, 20.0),
            solve_tolerance: 1e-2,
            solve_max_iterations: 15,
            lipschitz_anchors: 32,
            lipschitz_scale: 0.1,
            redraw_operator_each_batch: false,
        }
    }
}

/// A generated dataset: unit-norm ground truths in the estimation domain,
/// observations, and the SNR each observation was drawn at.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    /// Ground-truth columns (`io_len x n`), each normalised to unit norm.
    pub gt: DMatrix<f64>,
    /// Observation columns (`rows x n`).
    pub y: DMatrix<f64>,
    /// Per-sample SNR in dB.
    pub snr_db: Vec<f64>,
}

impl GeneratedSet {
    /// Number of samples.
    pub fn len(&self) -> usize {
        self.snr_db.len()
    }

    /// True when the set holds no samples.
    pub fn is_empty(&self) -> bool {
        self.snr_db.is_empty()
    }

    /// Copies the selected samples into a new set.
    pub fn subset(&self, indices: &[usize]) -> GeneratedSet {
        GeneratedSet {
            gt: self.gt.select_columns(indices.iter()),
            y: self.y.select_columns(indices.iter()),
            snr_db: indices.iter().map(|&i| self.snr_db[i]).collect(),
        }
    }
}

/// Draws `count` channels, normalises them, and observes them through the
/// operator at SNRs drawn uniformly from `snr_range_db`. Every sample uses
/// its own RNG stream, so the set is independent of generation order.
pub fn generate_dataset(
    master_seed: u64,
    count: usize,
    op: &MeasurementOperator,
    channel: &ChannelConfig,
    snr_range_db: (f64, f64),
) -> Result<GeneratedSet, TrainingError> {
    if count == 0 {
        return Err(TrainingError::EmptyDataset);
    }
    let geometry = op.geometry();
    let dim = op.cols();
    let rows = op.rows();
    let mut gt = DMatrix::zeros(dim, count);
    let mut y = DMatrix::zeros(rows, count);
    let mut snr_db = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = sample_rng(master_seed, idx as u64);
        let paths = sample_paths(&mut rng, channel, geometry)?;
        let sample = assemble_channel(&paths, geometry, geometry.f_c())?;
        let mut h = op.to_estimation_domain(&sample.h_complex)?;
        let norm = h.norm();
        assert!(norm > 0.0, "assembled channel must be nonzero");
        h /= norm;
        let snr = if snr_range_db.0 < snr_range_db.1 {
            rng.gen_range(snr_range_db.0..snr_range_db.1)
        } else {
            snr_range_db.0
        };
        let clean = op.m_real() * &h;
        let signal_power = clean.norm_squared() / rows as f64;
        let noise = sample_noise(&mut rng, &NoiseSpec::Awgn { snr_db: snr }, signal_power, rows)?;
        gt.set_column(idx, &h);
        y.set_column(idx, &(clean + noise));
        snr_db.push(snr);
    }
    Ok(GeneratedSet { gt, y, snr_db })
}

/// Re-observes stored ground truths through an operator with per-sample
/// noise specifications. Used for SNR sweeps, impulsive-noise evaluation,
/// and operator-redraw training.
pub fn observe_with_specs(
    master_seed: u64,
    op: &MeasurementOperator,
    gt: &DMatrix<f64>,
    specs: &[NoiseSpec],
) -> Result<DMatrix<f64>, TrainingError> {
    assert_eq!(gt.ncols(), specs.len(), "one noise spec per sample");
    let rows = op.rows();
    let mut y = DMatrix::zeros(rows, gt.ncols());
    for idx in 0..gt.ncols() {
        let mut rng = sample_rng(master_seed, idx as u64);
        let clean = op.m_real() * gt.column(idx);
        let signal_power = clean.norm_squared() / rows as f64;
        let noise = sample_noise(&mut rng, &specs[idx], signal_power, rows)?;
        y.set_column(idx, &(clean + noise));
    }
    Ok(y)
}

/// Normalised mean absolute errors of a batch of refined outputs.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    /// Estimation-domain error against the ground truth.
    pub main: f64,
    /// Measurement-domain consistency error.
    pub aux: f64,
    /// `main + aux_weight * aux`.
    pub total: f64,
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Batch-mean normalised L1 losses of outputs `z` against ground truth and
/// measurements.
pub fn nmae_losses(
    gt: &DMatrix<f64>,
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    op: &MeasurementOperator,
    aux_weight: f64,
) -> LossReport {
    let n = gt.ncols();
    assert!(n > 0 && z.ncols() == n && y.ncols() == n);
    let mz = op.m_real() * z;
    let mut main = 0.0;
    let mut aux = 0.0;
    for j in 0..n {
        let gt_j = gt.column(j);
        let z_j = z.column(j);
        let y_j = y.column(j);
        let gt_l1 = gt_j.iter().map(|v| v.abs()).sum::<f64>();
        let y_l1 = y_j.iter().map(|v| v.abs()).sum::<f64>();
        assert!(gt_l1 > 0.0 && y_l1 > 0.0, "degenerate sample {j}");
        main += gt_j.iter().zip(z_j.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / gt_l1;
        aux += y_j
            .iter()
            .zip(mz.column(j).iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / y_l1;
    }
    main /= n as f64;
    aux /= n as f64;
    LossReport {
        main,
        aux,
        total: main + aux_weight * aux,
    }
}

/// Gradient and diagnostics of one training step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Loss gradient with respect to the flat parameter vector (batch mean).
    pub grad: Vec<f64>,
    pub loss: LossReport,
    pub mean_iterations: f64,
    pub converged_fraction: f64,
}

/// One-step gradient at frozen fixed points: applies the map once more with
/// gradients and backpropagates the loss through that application only.
pub fn one_step_gradient_at(
    params: &NleParameters,
    op: &MeasurementOperator,
    h_star: &DMatrix<f64>,
    gt: &DMatrix<f64>,
    y: &DMatrix<f64>,
    aux_weight: f64,
) -> Result<(Vec<f64>, LossReport), TrainingError> {
    let n = h_star.ncols();
    assert!(n > 0, "empty batch");
    // u = h* + W (y - M h*), then z = nle(u) with a stored trace.
    let u = h_star + op.w() * (y - op.m_real() * h_star);
    let (z, trace) = batch_forward(params, &u)?;
    let loss = nmae_losses(gt, &z, y, op, aux_weight);

    // d(loss)/dz for the batch-mean normalised L1 terms.
    let inv_n = 1.0 / n as f64;
    let mz = op.m_real() * &z;
    let mut signs = DMatrix::zeros(y.nrows(), n);
    let mut upstream = DMatrix::zeros(z.nrows(), n);
    for j in 0..n {
        let gt_l1 = gt.column(j).iter().map(|v| v.abs()).sum::<f64>();
        let y_l1 = y.column(j).iter().map(|v| v.abs()).sum::<f64>();
        for i in 0..z.nrows() {
            upstream[(i, j)] = sgn(z[(i, j)] - gt[(i, j)]) * inv_n / gt_l1;
        }
        for r in 0..y.nrows() {
            // d|y - Mz|/dz flows through -M^T.
            signs[(r, j)] = -sgn(y[(r, j)] - mz[(r, j)]) * aux_weight * inv_n / y_l1;
        }
    }
    upstream += op.m_real().transpose() * signs;
    let grads = batch_backward(params, &trace, &upstream)?;
    Ok((grads.theta, loss))
}

/// Full one-step gradient: fixed-point solve, then [`one_step_gradient_at`].
pub fn one_step_gradient(
    params: &NleParameters,
    op: &MeasurementOperator,
    gt: &DMatrix<f64>,
    y: &DMatrix<f64>,
    opts: &SolveOptions,
    aux_weight: f64,
) -> Result<StepOutcome, TrainingError> {
    let solve = batch_fixed_point_solve(params, op, y, opts);
    let (grad, loss) = one_step_gradient_at(params, op, &solve.estimates, gt, y, aux_weight)?;
    Ok(StepOutcome {
        grad,
        loss,
        mean_iterations: mean_usize(&solve.iterations),
        converged_fraction: fraction_true(&solve.converged),
    })
}

fn mean_usize(v: &[usize]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<usize>() as f64 / v.len() as f64
    }
}

fn fraction_true(v: &[bool]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().filter(|b| **b).count() as f64 / v.len() as f64
    }
}

/// A parametric map with vector-Jacobian products, for gradient oracles.
pub trait DifferentiableMap {
    /// Iterate dimension.
    fn dim(&self) -> usize;
    /// Parameter count.
    fn theta_len(&self) -> usize;
    /// Applies the map at the current parameters.
    fn apply(&self, h: &DVector<f64>) -> DVector<f64>;
    /// Vector-Jacobian products at `h`: returns
    /// `(v^T d f / d theta, v^T d f / d h)`.
    fn vjp(&self, h: &DVector<f64>, v: &DVector<f64>) -> (Vec<f64>, DVector<f64>);
}

/// The production refinement map as a [`DifferentiableMap`].
pub struct FpnMap<'a> {
    pub params: &'a NleParameters,
    pub op: &'a MeasurementOperator,
    pub y: &'a DVector<f64>,
}

impl DifferentiableMap for FpnMap<'_> {
    fn dim(&self) -> usize {
        self.params.arch().io_len()
    }

    fn theta_len(&self) -> usize {
        self.params.arch().param_count()
    }

    fn apply(&self, h: &DVector<f64>) -> DVector<f64> {
        crate::fpn::contraction_apply(self.params, self.op, h, self.y)
    }

    fn vjp(&self, h: &DVector<f64>, v: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
        let u = crate::fpn::le_apply(self.op, h, self.y);
        let bundle =
            nle_backward(self.params, u.as_slice(), v.as_slice()).expect("dimensions match");
        let du = DVector::from_vec(bundle.input);
        // d u / d h = I - W M.
        let dh = &du - op_wm_transpose_apply(self.op, &du);
        (bundle.theta, dh)
    }
}

fn op_wm_transpose_apply(op: &MeasurementOperator, v: &DVector<f64>) -> DVector<f64> {
    op.m_real().transpose() * (op.w().transpose() * v)
}

/// Exact gradient of `upstream^T h*(theta)` where `h*` is the fixed point of
/// the map: solves the adjoint system `(I - J^T) v = upstream` with the
/// Jacobian assembled column by column from vector-Jacobian products, then
/// pushes `v` through the parameter side of the map. Intended for small
/// instances; cost grows with the cube of the dimension.
pub fn implicit_gradient<M: DifferentiableMap>(
    map: &M,
    h_star: &DVector<f64>,
    upstream: &DVector<f64>,
) -> Vec<f64> {
    let n = map.dim();
    let mut jt = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        let (_, dh) = map.vjp(h_star, &e);
        jt.set_column(i, &dh);
    }
    let a = DMatrix::identity(n, n) - jt;
    let v = a
        .lu()
        .solve(upstream)
        .expect("I - J^T must be invertible at a stable fixed point");
    map.vjp(h_star, &v).0
}

/// Adam optimiser state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Fresh state with the usual coefficients (0.9, 0.999, 1e-8).
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected update of `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], learning_rate: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nmae: f64,
    pub val_nmse_db: f64,
    /// Measured expansion ratio of the network after the epoch.
    pub lipschitz: f64,
    /// Output-stage factor applied by the safeguard (1 when inactive).
    pub safeguard_factor: f64,
    pub learning_rate: f64,
    /// Mean fixed-point iterations on the validation set.
    pub val_mean_iterations: f64,
    /// Fraction of validation solves that hit the tolerance.
    pub val_converged_fraction: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: NleParameters,
    /// 1-based epoch that produced `params`.
    pub best_epoch: usize,
    pub best_val_nmse_db: f64,
    pub log: Vec<EpochLog>,
}

/// Summary of running the solver over a labelled set.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// `10 log10` of the energy-mean error ratio.
    pub nmse_db: f64,
    /// Mean per-sample normalised L1 error.
    pub nmae: f64,
    pub mean_iterations: f64,
    pub converged_fraction: f64,
    pub per_sample_nmse_db: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub residual_traces: Vec<Vec<f64>>,
}

/// Runs the fixed-point solver over a whole set in chunks and aggregates
/// error statistics of the solver estimates.
pub fn evaluate(
    params: &NleParameters,
    op: &MeasurementOperator,
    set: &GeneratedSet,
    opts: &SolveOptions,
    chunk: usize,
) -> EvalSummary {
    let n = set.len();
    assert!(n > 0, "empty evaluation set");
    let chunk = chunk.max(1);
    let mut ratio_sum = 0.0;
    let mut nmae_sum = 0.0;
    let mut per_sample = Vec::with_capacity(n);
    let mut iterations = Vec::with_capacity(n);
    let mut converged = Vec::with_capacity(n);
    let mut residual_traces = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let stop = (start + chunk).min(n);
        let idx: Vec<usize> = (start..stop).collect();
        let ys = set.y.select_columns(idx.iter());
        let gts = set.gt.select_columns(idx.iter());
        let solved: BatchSolveResult = batch_fixed_point_solve(params, op, &ys, opts);
        for (k, _) in idx.iter().enumerate() {
            let est = solved.estimates.column(k);
            let gt = gts.column(k);
            let ratio = (est - gt).norm_squared() / gt.norm_squared();
            ratio_sum += ratio;
            nmae_sum += est
                .iter()
                .zip(gt.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / gt.iter().map(|v| v.abs()).sum::<f64>();
            per_sample.push((10.0 * ratio.log10()).max(-200.0));
        }
        iterations.extend_from_slice(&solved.iterations);
        converged.extend_from_slice(&solved.converged);
        residual_traces.extend(solved.residual_traces);
        start = stop;
    }
    EvalSummary {
        nmse_db: (10.0 * (ratio_sum / n as f64).log10()).max(-200.0),
        nmae: nmae_sum / n as f64,
        mean_iterations: mean_usize(&iterations),
        converged_fraction: fraction_true(&converged),
        per_sample_nmse_db: per_sample,
        iterations,
        converged,
        residual_traces,
    }
}

/// Learning-rate schedule: halves the base rate every
/// `lr_halving_epochs` epochs (0-based epoch index).
fn scheduled_lr(config: &TrainConfig, epoch_index: usize) -> f64 {
    let halvings = (epoch_index / config.lr_halving_epochs.max(1)) as i32;
    config.learning_rate * 0.5f64.powi(halvings)
}

/// Trains a fresh network on the given sets. `on_epoch` receives each epoch
/// log entry as it is produced (for streaming to a file or stdout).
pub fn train(
    config: &TrainConfig,
    op: &MeasurementOperator,
    train_set: &GeneratedSet,
    val_set: &GeneratedSet,
    master_seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainingError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let geometry = *op.geometry();
    let mut params = init_params(
        &mut sample_rng(master_seed, u64::MAX / 2),
        &geometry,
        config.channels,
        config.blocks,
    )?;
    let mut adam = AdamState::new(params.arch().param_count());
    let opts = SolveOptions {
        tolerance: config.solve_tolerance,
        max_iterations: config.solve_max_iterations,
    };
    let n = train_set.len();
    let mut best: Option<(usize, f64, NleParameters)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    // Disjoint RNG stream blocks for shuffling, operator redraws, and probes.
    const SHUFFLE_BLOCK: u64 = 1 << 40;
    const REDRAW_BLOCK: u64 = 2 << 40;
    const PROBE_BLOCK: u64 = 3 << 40;
    let mut batch_counter = 0u64;

    for epoch_index in 0..config.epochs {
        let lr = scheduled_lr(config, epoch_index);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut sample_rng(master_seed, SHUFFLE_BLOCK + epoch_index as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let gt = train_set.gt.select_columns(batch_idx.iter());
            let outcome = if config.redraw_operator_each_batch {
                let mut redraw_rng = sample_rng(master_seed, REDRAW_BLOCK + batch_counter);
                let fresh = draw_operator(&mut redraw_rng, &geometry, op.pilot())?;
                let specs: Vec<NoiseSpec> = batch_idx
                    .iter()
                    .map(|&i| NoiseSpec::Awgn {
                        snr_db: train_set.snr_db[i],
                    })
                    .collect();
                let y = observe_with_specs(
                    master_seed ^ (REDRAW_BLOCK + batch_counter),
                    &fresh,
                    &gt,
                    &specs,
                )?;
                one_step_gradient(&params, &fresh, &gt, &y, &opts, config.aux_weight)?
            } else {
                let y = train_set.y.select_columns(batch_idx.iter());
                one_step_gradient(&params, op, &gt, &y, &opts, config.aux_weight)?
            };
            if !outcome.loss.total.is_finite() {
                return Err(TrainingError::Diverged {
                    epoch: epoch_index + 1,
                    loss: outcome.loss.total,
                });
            }
            adam.step(params.data_mut(), &outcome.grad, lr);
            loss_sum += outcome.loss.total;
            batches += 1.0;
            batch_counter += 1;
        }

        // Expansion-ratio probe at validation fixed points, then safeguard.
        let probe_count = config.lipschitz_anchors.min(val_set.len()).max(1);
        let probe_idx: Vec<usize> = (0..probe_count).collect();
        let probe_y = val_set.y.select_columns(probe_idx.iter());
        let probe_solve = batch_fixed_point_solve(&params, op, &probe_y, &opts);
        let anchors: Vec<DVector<f64>> = (0..probe_count)
            .map(|k| probe_solve.estimates.column(k).into_owned())
            .collect();
        let mut probe_rng = sample_rng(master_seed, PROBE_BLOCK + epoch_index as u64);
        let lipschitz =
            lipschitz_estimate(&params, &anchors, config.lipschitz_scale, &mut probe_rng);
        let safeguard_factor = safeguard_normalize(&mut params, lipschitz);

        let val = evaluate(&params, op, val_set, &opts, config.batch_size);
        let entry = EpochLog {
            epoch: epoch_index + 1,
            train_loss: loss_sum / batches,
            val_nmae: val.nmae,
            val_nmse_db: val.nmse_db,
            lipschitz,
            safeguard_factor,
            learning_rate: lr,
            val_mean_iterations: val.mean_iterations,
            val_converged_fraction: val.converged_fraction,
        };
        on_epoch(&entry);
        log.push(entry);
        let is_better = best
            .as_ref()
            .map(|(_, best_nmse, _)| val.nmse_db < *best_nmse)
            .unwrap_or(true);
        if is_better {
            best = Some((epoch_index + 1, val.nmse_db, params.clone()));
        }
    }
    let (best_epoch, best_val_nmse_db, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        best_val_nmse_db,
        log,
    })
}

/// Fine-tunes on unlabeled measurements by descending the
/// measurement-consistency loss alone for a few steps with a fresh
/// optimiser. Returns the adapted parameters.
pub fn self_adapt(
    params: &NleParameters,
    op: &MeasurementOperator,
    ys: &DMatrix<f64>,
    steps: usize,
    learning_rate: f64,
    opts: &SolveOptions,
) -> Result<NleParameters, TrainingError> {
    let mut adapted = params.clone();
    if steps == 0 || ys.ncols() == 0 {
        return Ok(adapted);
    }
    let mut adam = AdamState::new(adapted.arch().param_count());
    let n = ys.ncols();
    let inv_n = 1.0 / n as f64;
    for _ in 0..steps {
        let solve = batch_fixed_point_solve(&adapted, op, ys, opts);
        let u = &solve.estimates + op.w() * (ys - op.m_real() * &solve.estimates);
        let (z, trace) = batch_forward(&adapted, &u)?;
        let mz = op.m_real() * &z;
        let mut signs = DMatrix::zeros(ys.nrows(), n);
        for j in 0..n {
            let y_l1 = ys.column(j).iter().map(|v| v.abs()).sum::<f64>();
            assert!(y_l1 > 0.0, "degenerate measurement {j}");
            for r in 0..ys.nrows() {
                signs[(r, j)] = -sgn(ys[(r, j)] - mz[(r, j)]) * inv_n / y_l1;
            }
        }
        let upstream = op.m_real().transpose() * signs;
        let grads = batch_backward(&adapted, &trace, &upstream)?;
        adam.step(adapted.data_mut(), &grads.theta, learning_rate);
    }
    Ok(adapted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ArrayGeometry;
    use crate::measurement::{CombinerResolution, PilotConfig};
    use crate::nle::nle_forward;
    use rand::Rng;

    fn desk_geometry() -> ArrayGeometry {
        ArrayGeometry::new(4, 16, 5e-4, 8e-3, 3e11).unwrap()
    }

    fn desk_operator(seed: u64) -> MeasurementOperator {
        let pilot = PilotConfig {
            num_slots: 8,
            resolution: CombinerResolution::OneBit,
        };
        draw_operator(&mut sample_rng(seed, 0), &desk_geometry(), &pilot).unwrap()
    }

    fn tiny_operator(seed: u64) -> MeasurementOperator {
        let geometry = ArrayGeometry::new(1, 4, 5e-4, 5e-4, 3e11).unwrap();
        let pilot = PilotConfig {
            num_slots: 2,
            resolution: CombinerResolution::OneBit,
        };
        draw_operator(&mut sample_rng(seed, 0), &geometry, &pilot).unwrap()
    }

    fn randomized_params(seed: u64, geometry: &ArrayGeometry, c: usize, b: usize) -> NleParameters {
        let mut rng = sample_rng(seed, 0);
        let mut params = init_params(&mut rng, geometry, c, b).unwrap();
        for v in params.data_mut() {
            *v += 0.1 * rng.gen_range(-1.0..1.0f64);
        }
        params
    }

    #[test]
    fn generated_ground_truths_are_unit_norm_and_deterministic() {
        let op = desk_operator(1);
        let channel = ChannelConfig::default_desk();
        let a = generate_dataset(7, 20, &op, &channel, (0.0, 20.0)).unwrap();
        let b = generate_dataset(7, 20, &op, &channel, (0.0, 20.0)).unwrap();
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.y, b.y);
        assert_eq!(a.snr_db, b.snr_db);
        for j in 0..a.len() {
            assert!((a.gt.column(j).norm() - 1.0).abs() < 1e-12);
            let snr = a.snr_db[j];
            assert!((0.0..20.0).contains(&snr));
        }
        let c = generate_dataset(8, 20, &op, &channel, (0.0, 20.0)).unwrap();
        assert_ne!(a.gt, c.gt);
    }

    #[test]
    fn generated_noise_level_matches_requested_snr() {
        let op = desk_operator(2);
        let channel = ChannelConfig::default_desk();
        let set = generate_dataset(9, 300, &op, &channel, (10.0, 10.0)).unwrap();
        let mut ratio_sum = 0.0;
        for j in 0..set.len() {
            let clean = op.m_real() * set.gt.column(j);
            let noise = set.y.column(j) - &clean;
            ratio_sum += clean.norm_squared() / noise.norm_squared();
        }
        let mean_snr_db = 10.0 * (ratio_sum / set.len() as f64).log10();
        assert!(
            (mean_snr_db - 10.0).abs() < 0.5,
            "empirical snr {mean_snr_db:.2} dB"
        );
    }

    #[test]
    fn subset_selects_matching_columns() {
        let op = desk_operator(3);
        let channel = ChannelConfig::default_desk();
        let set = generate_dataset(10, 10, &op, &channel, (5.0, 15.0)).unwrap();
        let sub = set.subset(&[2, 5, 7]);
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.gt.column(1), set.gt.column(5));
        assert_eq!(sub.y.column(2), set.y.column(7));
        assert_eq!(sub.snr_db[0], set.snr_db[2]);
    }

    #[test]
    fn losses_have_exact_structure() {
        let op = desk_operator(4);
        let channel = ChannelConfig::default_desk();
        let set = generate_dataset(11, 6, &op, &channel, (10.0, 10.0)).unwrap();
        // Perfect outputs: zero main loss; aux equals the noise level term.
        let report = nmae_losses(&set.gt, &set.gt, &set.y, &op, 0.3);
        assert_eq!(report.main, 0.0);
        assert!(report.aux > 0.0);
        assert_eq!(report.total, report.main + 0.3 * report.aux);
        // Zero outputs: main loss is exactly one.
        let zeros = DMatrix::zeros(set.gt.nrows(), set.gt.ncols());
        let report = nmae_losses(&set.gt, &zeros, &set.y, &op, 0.5);
        assert!((report.main - 1.0).abs() < 1e-12);
        assert_eq!(report.total, report.main + 0.5 * report.aux);
    }

    #[test]
    fn one_step_gradient_matches_finite_differences_at_frozen_fixed_point() {
        let op = tiny_operator(5);
        let geometry = ArrayGeometry::new(1, 4, 5e-4, 5e-4, 3e11).unwrap();
        let params = randomized_params(6, &geometry, 4, 1);
        let channel = ChannelConfig::default_desk();
        let set = generate_dataset(12, 4, &op, &channel, (10.0, 10.0)).unwrap();
        // Any anchor works: the one-step gradient treats it as a constant.
        let mut rng = sample_rng(13, 0);
        let h_star = DMatrix::from_fn(op.cols(), 4, |_, _| rng.gen_range(-0.5..0.5));
        let aux_weight = 0.3;
        let (grad, _) =
            one_step_gradient_at(&params, &op, &h_star, &set.gt, &set.y, aux_weight).unwrap();
        let loss_at = |p: &NleParameters| {
            let u = &h_star + op.w() * (&set.y - op.m_real() * &h_star);
            let (z, _) = batch_forward(p, &u).unwrap();
            nmae_losses(&set.gt, &z, &set.y, &op, aux_weight).total
        };
        let gmax = grad.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let scale = (1e-3 * gmax).max(1e-8);
        // Spot-check a spread of parameter coordinates.
        let count = params.arch().param_count();
        for j in (0..count).step_by(count / 23) {
            let h = 1e-6;
            let mut plus = params.clone();
            plus.data_mut()[j] += h;
            let mut minus = params.clone();
            minus.data_mut()[j] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let err = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(scale);
            assert!(err < 1e-4, "param {j}: fd {fd:.6e} vs {:.6e}", grad[j]);
        }
    }

    /// Affine map with explicit parameter matrix: f(h) = A h + B theta.
    struct LinearMap {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        theta: DVector<f64>,
    }

    impl DifferentiableMap for LinearMap {
        fn dim(&self) -> usize {
            self.a.nrows()
        }
        fn theta_len(&self) -> usize {
            self.theta.len()
        }
        fn apply(&self, h: &DVector<f64>) -> DVector<f64> {
            &self.a * h + &self.b * &self.theta
        }
        fn vjp(&self, _h: &DVector<f64>, v: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
            (
                (self.b.transpose() * v).iter().copied().collect(),
                self.a.transpose() * v,
            )
        }
    }

    fn random_linear_map(seed: u64, dim: usize, theta_len: usize, spectral_cap: f64) -> LinearMap {
        let mut rng = sample_rng(seed, 0);
        let mut a = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
        let norm = crate::baselines::spectral_norm(&a);
        a *= spectral_cap / norm;
        let b = DMatrix::from_fn(dim, theta_len, |_, _| rng.gen_range(-1.0..1.0));
        let theta = DVector::from_fn(theta_len, |_, _| rng.gen_range(-1.0..1.0));
        LinearMap { a, b, theta }
    }

    #[test]
    fn implicit_gradient_matches_closed_form_on_linear_maps() {
        for seed in 0..5u64 {
            let map = random_linear_map(30 + seed, 7, 5, 0.6);
            let h_star = (DMatrix::identity(7, 7) - &map.a)
                .lu()
                .solve(&(&map.b * &map.theta))
                .unwrap();
            let mut rng = sample_rng(40 + seed, 0);
            let upstream = DVector::from_fn(7, |_, _| rng.gen_range(-1.0..1.0));
            let grad = implicit_gradient(&map, &h_star, &upstream);
            // Closed form: B^T (I - A^T)^{-1} upstream.
            let expected = map.b.transpose()
                * (DMatrix::identity(7, 7) - map.a.transpose())
                    .lu()
                    .solve(&upstream)
                    .unwrap();
            for (g, e) in grad.iter().zip(expected.iter()) {
                assert!((g - e).abs() < 1e-8, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn implicit_gradient_reduces_to_one_step_when_jacobian_vanishes() {
        let mut map = random_linear_map(50, 6, 4, 0.5);
        map.a.fill(0.0);
        let h_star = &map.b * &map.theta;
        let mut rng = sample_rng(51, 0);
        let upstream = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let implicit = implicit_gradient(&map, &h_star, &upstream);
        let (one_step, _) = map.vjp(&h_star, &upstream);
        for (a, b) in implicit.iter().zip(&one_step) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn implicit_gradient_matches_end_to_end_finite_differences() {
        // L(theta) = upstream^T h*(theta) with h* found by actually running
        // the fixed-point iteration, matching the production estimate path.
        let map = random_linear_map(60, 6, 4, 0.5);
        let opts = SolveOptions {
            tolerance: 1e-13,
            max_iterations: 500,
        };
        let solve = |m: &LinearMap| {
            crate::fpn::iterate_to_fixed_point(|h| m.apply(h), DVector::zeros(6), &opts).estimate
        };
        let h_star = solve(&map);
        let mut rng = sample_rng(61, 0);
        let upstream = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let grad = implicit_gradient(&map, &h_star, &upstream);
        for j in 0..map.theta_len() {
            let h = 1e-6;
            let mut plus = LinearMap {
                a: map.a.clone(),
                b: map.b.clone(),
                theta: map.theta.clone(),
            };
            plus.theta[j] += h;
            let mut minus = LinearMap {
                a: map.a.clone(),
                b: map.b.clone(),
                theta: map.theta.clone(),
            };
            minus.theta[j] -= h;
            let fd = (upstream.dot(&solve(&plus)) - upstream.dot(&solve(&minus))) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() < 1e-4 * fd.abs().max(grad[j].abs()).max(1e-3),
                "theta {j}: fd {fd} vs {}",
                grad[j]
            );
        }
    }

    #[test]
    fn fpn_map_vjp_matches_finite_differences() {
        let op = tiny_operator(70);
        let geometry = ArrayGeometry::new(1, 4, 5e-4, 5e-4, 3e11).unwrap();
        let params = randomized_params(71, &geometry, 4, 1);
        let mut rng = sample_rng(72, 0);
        let y = DVector::from_fn(op.rows(), |_, _| rng.gen_range(-0.5..0.5));
        let map = FpnMap {
            params: &params,
            op: &op,
            y: &y,
        };
        let h = DVector::from_fn(map.dim(), |_, _| rng.gen_range(-0.5..0.5));
        let v = DVector::from_fn(map.dim(), |_, _| rng.gen_range(-1.0..1.0));
        let (dtheta, dh) = map.vjp(&h, &v);
        // Input side.
        for j in 0..map.dim() {
            let eps = 1e-6;
            let mut plus = h.clone();
            plus[j] += eps;
            let mut minus = h.clone();
            minus[j] -= eps;
            let fd = (v.dot(&map.apply(&plus)) - v.dot(&map.apply(&minus))) / (2.0 * eps);
            assert!(
                (fd - dh[j]).abs() < 1e-5 * fd.abs().max(dh[j].abs()).max(1e-3),
                "dh {j}"
            );
        }
        // Parameter side, spot checks.
        let count = params.arch().param_count();
        for j in (0..count).step_by(count / 17) {
            let eps = 1e-6;
            let mut plus = params.clone();
            plus.data_mut()[j] += eps;
            let mut minus = params.clone();
            minus.data_mut()[j] -= eps;
            let apply_with = |p: &NleParameters| {
                let u = crate::fpn::le_apply(&op, &h, &y);
                DVector::from_vec(nle_forward(p, u.as_slice()).unwrap())
            };
            let fd = (v.dot(&apply_with(&plus)) - v.dot(&apply_with(&minus))) / (2.0 * eps);
            assert!(
                (fd - dtheta[j]).abs() < 1e-5 * fd.abs().max(dtheta[j].abs()).max(1e-3),
                "dtheta {j}"
            );
        }
    }

    #[test]
    fn adam_first_update_has_learning_rate_magnitude() {
        let mut adam = AdamState::new(3);
        let mut params = vec![1.0, -2.0, 0.5];
        let grad = vec![0.4, -0.2, 3.0];
        adam.step(&mut params, &grad, 1e-3);
        // First bias-corrected update is lr * sign(grad) up to epsilon.
        assert!((params[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((params[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert!((params[2] - (0.5 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = AdamState::new(4);
        let mut b = AdamState::new(4);
        let mut pa = vec![0.1, 0.2, 0.3, 0.4];
        let mut pb = pa.clone();
        for k in 0..10 {
            let grad: Vec<f64> = (0..4).map(|i| ((k + i) as f64).sin()).collect();
            a.step(&mut pa, &grad, 1e-2);
            b.step(&mut pb, &grad, 1e-2);
        }
        assert_eq!(pa, pb);
    }

    #[test]
    fn lr_schedule_halves_at_the_configured_cadence() {
        let config = TrainConfig {
            learning_rate: 1e-3,
            lr_halving_epochs: 30,
            ..TrainConfig::default()
        };
        assert_eq!(scheduled_lr(&config, 0), 1e-3);
        assert_eq!(scheduled_lr(&config, 29), 1e-3);
        assert_eq!(scheduled_lr(&config, 30), 5e-4);
        assert_eq!(scheduled_lr(&config, 60), 2.5e-4);
    }

    #[test]
    fn training_runs_deterministically_and_logs_epochs() {
        let op = desk_operator(80);
        let channel = ChannelConfig::default_desk();
        let train_set = generate_dataset(81, 64, &op, &channel, (0.0, 20.0)).unwrap();
        let val_set = generate_dataset(82, 24, &op, &channel, (0.0, 20.0)).unwrap();
        let config = TrainConfig {
            channels: 16,
            blocks: 2,
            epochs: 2,
            batch_size: 32,
            lr_halving_epochs: 1,
            lipschitz_anchors: 8,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let outcome = train(&config, &op, &train_set, &val_set, 83, |entry| {
            assert!(entry.train_loss.is_finite());
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 2);
        assert_eq!(outcome.log.len(), 2);
        assert_eq!(outcome.log[0].learning_rate, 1e-3);
        assert_eq!(outcome.log[1].learning_rate, 5e-4);
        assert!(outcome.best_epoch >= 1 && outcome.best_epoch <= 2);
        assert!(outcome.best_val_nmse_db.is_finite());

        let outcome2 = train(&config, &op, &train_set, &val_set, 83, |_| {}).unwrap();
        assert_eq!(outcome.params.data(), outcome2.params.data());
        for (a, b) in outcome.log.iter().zip(&outcome2.log) {
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.val_nmse_db, b.val_nmse_db);
        }
    }

    #[test]
    fn operator_redraw_changes_the_training_trajectory() {
        let op = desk_operator(90);
        let channel = ChannelConfig::default_desk();
        let train_set = generate_dataset(91, 48, &op, &channel, (0.0, 20.0)).unwrap();
        let val_set = generate_dataset(92, 16, &op, &channel, (0.0, 20.0)).unwrap();
        let base = TrainConfig {
            channels: 16,
            blocks: 2,
            epochs: 1,
            batch_size: 24,
            lipschitz_anchors: 4,
            ..TrainConfig::default()
        };
        let redraw = TrainConfig {
            redraw_operator_each_batch: true,
            ..base.clone()
        };
        let fixed = train(&base, &op, &train_set, &val_set, 93, |_| {}).unwrap();
        let varied = train(&redraw, &op, &train_set, &val_set, 93, |_| {}).unwrap();
        assert_ne!(fixed.log[0].train_loss, varied.log[0].train_loss);
    }

    #[test]
    fn evaluate_reports_consistent_sizes() {
        let op = desk_operator(100);
        let channel = ChannelConfig::default_desk();
        let set = generate_dataset(101, 30, &op, &channel, (10.0, 10.0)).unwrap();
        let geometry = desk_geometry();
        let params = init_params(&mut sample_rng(102, 0), &geometry, 16, 2).unwrap();
        let opts = SolveOptions {
            tolerance: 1e-2,
            max_iterations: 6,
        };
        let summary = evaluate(&params, &op, &set, &opts, 7);
        assert_eq!(summary.per_sample_nmse_db.len(), 30);
        assert_eq!(summary.iterations.len(), 30);
        assert_eq!(summary.converged.len(), 30);
        assert_eq!(summary.residual_traces.len(), 30);
        assert!(summary.nmse_db.is_finite());
        assert!(summary.nmae.is_finite());
        // Chunked evaluation equals one-chunk evaluation.
        let single = evaluate(&params, &op, &set, &opts, 512);
        assert!((summary.nmse_db - single.nmse_db).abs() < 1e-9);
        assert_eq!(summary.iterations, single.iterations);
    }

    #[test]
    fn self_adapt_zero_steps_is_identity_and_steps_change_parameters() {
        let op = desk_operator(110);
        let channel = ChannelConfig::default_desk();
        let set = generate_dataset(111, 16, &op, &channel, (10.0, 10.0)).unwrap();
        let geometry = desk_geometry();
        let params = randomized_params(112, &geometry, 16, 2);
        let opts = SolveOptions {
            tolerance: 1e-2,
            max_iterations: 6,
        };
        let unchanged = self_adapt(&params, &op, &set.y, 0, 1e-3, &opts).unwrap();
        assert_eq!(unchanged.data(), params.data());
        let adapted = self_adapt(&params, &op, &set.y, 3, 1e-3, &opts).unwrap();
        assert_ne!(adapted.data(), params.data());
        assert!(adapted.data().iter().all(|v| v.is_finite()));
        // Deterministic.
        let adapted2 = self_adapt(&params, &op, &set.y, 3, 1e-3, &opts).unwrap();
        assert_eq!(adapted.data(), adapted2.data());
    }

    #[test]
    fn observe_with_specs_matches_generate_for_awgn() {
        let op = desk_operator(120);
        let channel = ChannelConfig::default_desk();
        let set = generate_dataset(121, 8, &op, &channel, (12.0, 12.0)).unwrap();
        let specs: Vec<NoiseSpec> = set
            .snr_db
            .iter()
            .map(|&snr_db| NoiseSpec::Awgn { snr_db })
            .collect();
        let y = observe_with_specs(400, &op, &set.gt, &specs).unwrap();
        assert_eq!(y.nrows(), set.y.nrows());
        // Different seed, same statistics; empirical SNR close to 12 dB.
        let mut ratio = 0.0;
        for j in 0..8 {
            let clean = op.m_real() * set.gt.column(j);
            ratio += clean.norm_squared() / (y.column(j) - &clean).norm_squared();
        }
        let snr_db = 10.0 * (ratio / 8.0).log10();
        assert!((snr_db - 12.0).abs() < 2.0, "empirical snr {snr_db:.2}");
    }
}
