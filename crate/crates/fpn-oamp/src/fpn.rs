//! Fixed-point solver built from a linear estimator and a learned nonlinear
//! estimator, plus the contraction diagnostics and safeguard that keep the
//! composite map convergent.
//!
//! One refinement step is `h -> nle(h + W (y - M h))`. Running the step from
//! the zero vector until the update norm drops below a tolerance yields the
//! channel estimate; when the nonlinear estimator is a contraction the
//! residual sequence decays geometrically and the iterate count stays small.

use crate::measurement::MeasurementOperator;
use crate::nle::{batch_apply, nle_forward, NleParameters};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Anything that can play the role of the nonlinear estimator: the trained
/// network in production, simple analytic maps in tests.
pub trait NonlinearEstimator {
    /// Input and output dimension.
    fn dim(&self) -> usize;
    /// Applies the map to one vector.
    fn apply(&self, u: &DVector<f64>) -> DVector<f64>;
    /// Scales the output stage of the map (the part added on top of the
    /// identity) by `factor`. Used by the contraction safeguard.
    fn scale_output_stage(&mut self, factor: f64);
}

impl NonlinearEstimator for NleParameters {
    fn dim(&self) -> usize {
        self.arch().io_len()
    }

    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        let out = nle_forward(self, u.as_slice()).expect("input length matches arch");
        DVector::from_vec(out)
    }

    fn scale_output_stage(&mut self, factor: f64) {
        self.scale_head_weights(factor);
    }
}

/// Linear estimator: gradient-style correction `h + W (y - M h)`.
pub fn le_apply(
    op: &MeasurementOperator,
    h: &DVector<f64>,
    y: &DVector<f64>,
) -> DVector<f64> {
    h + op.w() * (y - op.m_real() * h)
}

/// One application of the full refinement map.
pub fn contraction_apply<N: NonlinearEstimator>(
    nle: &N,
    op: &MeasurementOperator,
    h: &DVector<f64>,
    y: &DVector<f64>,
) -> DVector<f64> {
    nle.apply(&le_apply(op, h, y))
}

/// Stopping rule for the fixed-point iteration.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Update-norm threshold declaring convergence.
    pub tolerance: f64,
    /// Applications of the map before giving up.
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-2,
            max_iterations: 50,
        }
    }
}

/// Outcome of a fixed-point solve.
#[derive(Debug, Clone)]
pub struct FixedPointResult {
    /// The estimate: the first iterate whose update norm passed the
    /// tolerance, or the last iterate when the budget ran out.
    pub estimate: DVector<f64>,
    /// Whether the tolerance was reached within the budget.
    pub converged: bool,
    /// Number of map applications performed.
    pub iterations: usize,
    /// Update norm after each application.
    pub residuals: Vec<f64>,
}

/// Iterates `h -> f(h)` from `start` until the update norm passes the
/// tolerance. Generic over the map so analytic contractions can exercise the
/// exact production control flow.
pub fn iterate_to_fixed_point<F>(
    map: F,
    start: DVector<f64>,
    opts: &SolveOptions,
) -> FixedPointResult
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut h = start;
    let mut residuals = Vec::new();
    loop {
        let fh = map(&h);
        let r = (&fh - &h).norm();
        residuals.push(r);
        if r <= opts.tolerance {
            return FixedPointResult {
                estimate: h,
                converged: true,
                iterations: residuals.len(),
                residuals,
            };
        }
        if residuals.len() >= opts.max_iterations {
            return FixedPointResult {
                estimate: fh,
                converged: false,
                iterations: residuals.len(),
                residuals,
            };
        }
        h = fh;
    }
}

/// Solves for the channel estimate starting from the zero vector.
pub fn fixed_point_solve<N: NonlinearEstimator>(
    nle: &N,
    op: &MeasurementOperator,
    y: &DVector<f64>,
    opts: &SolveOptions,
) -> FixedPointResult {
    fixed_point_solve_from(nle, op, y, DVector::zeros(nle.dim()), opts)
}

/// Solves from an explicit starting iterate.
pub fn fixed_point_solve_from<N: NonlinearEstimator>(
    nle: &N,
    op: &MeasurementOperator,
    y: &DVector<f64>,
    start: DVector<f64>,
    opts: &SolveOptions,
) -> FixedPointResult {
    iterate_to_fixed_point(|h| contraction_apply(nle, op, h, y), start, opts)
}

/// Like [`fixed_point_solve`] but also returns every iterate produced by the
/// map, for per-iteration error traces.
pub fn fixed_point_solve_traced<N: NonlinearEstimator>(
    nle: &N,
    op: &MeasurementOperator,
    y: &DVector<f64>,
    opts: &SolveOptions,
) -> (FixedPointResult, Vec<DVector<f64>>) {
    let mut h = DVector::zeros(nle.dim());
    let mut residuals = Vec::new();
    let mut iterates = Vec::new();
    loop {
        let fh = contraction_apply(nle, op, &h, y);
        let r = (&fh - &h).norm();
        residuals.push(r);
        iterates.push(fh.clone());
        if r <= opts.tolerance {
            let result = FixedPointResult {
                estimate: h,
                converged: true,
                iterations: residuals.len(),
                residuals,
            };
            return (result, iterates);
        }
        if residuals.len() >= opts.max_iterations {
            let result = FixedPointResult {
                estimate: fh,
                converged: false,
                iterations: residuals.len(),
                residuals,
            };
            return (result, iterates);
        }
        h = fh;
    }
}

/// Outcome of a batched fixed-point solve, one entry per input column.
#[derive(Debug, Clone)]
pub struct BatchSolveResult {
    /// Estimates, one column per sample.
    pub estimates: DMatrix<f64>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
    /// Update norms after each application, per sample.
    pub residual_traces: Vec<Vec<f64>>,
}

/// Solves many measurement columns at once with the batched network engine.
/// Matches [`fixed_point_solve`] sample by sample; samples that pass the
/// tolerance drop out of the active set.
pub fn batch_fixed_point_solve(
    params: &NleParameters,
    op: &MeasurementOperator,
    ys: &DMatrix<f64>,
    opts: &SolveOptions,
) -> BatchSolveResult {
    let dim = params.arch().io_len();
    assert_eq!(ys.nrows(), op.m_real().nrows(), "measurement rows mismatch");
    let n = ys.ncols();
    let wy = op.w() * ys;
    let p_le = DMatrix::identity(dim, dim) - op.w() * op.m_real();

    let mut h = DMatrix::zeros(dim, n);
    let mut estimates = DMatrix::zeros(dim, n);
    let mut converged = vec![false; n];
    let mut iterations = vec![0usize; n];
    let mut residual_traces = vec![Vec::new(); n];
    let mut active: Vec<usize> = (0..n).collect();

    for t in 1..=opts.max_iterations {
        if active.is_empty() {
            break;
        }
        let ha = h.select_columns(active.iter());
        let ua = &p_le * &ha + wy.select_columns(active.iter());
        let fha = batch_apply(params, &ua).expect("dimensions match architecture");
        let mut still = Vec::with_capacity(active.len());
        for (k, &idx) in active.iter().enumerate() {
            let r = (fha.column(k) - ha.column(k)).norm();
            residual_traces[idx].push(r);
            iterations[idx] = t;
            if r <= opts.tolerance {
                converged[idx] = true;
                estimates.column_mut(idx).copy_from(&ha.column(k));
            } else if t == opts.max_iterations {
                estimates.column_mut(idx).copy_from(&fha.column(k));
            } else {
                h.column_mut(idx).copy_from(&fha.column(k));
                still.push(idx);
            }
        }
        active = still;
    }
    BatchSolveResult {
        estimates,
        converged,
        iterations,
        residual_traces,
    }
}

/// Empirical expansion ratio of a map around anchor points: the summed
/// displacement of Gaussian perturbations after one application, divided by
/// the summed perturbation size. Values below one indicate a contraction.
pub fn lipschitz_estimate<N: NonlinearEstimator, R: Rng>(
    nle: &N,
    anchors: &[DVector<f64>],
    perturbation_scale: f64,
    rng: &mut R,
) -> f64 {
    assert!(!anchors.is_empty(), "need at least one anchor point");
    assert!(perturbation_scale > 0.0, "perturbation scale must be positive");
    let dim = nle.dim();
    let mut num = 0.0;
    let mut den = 0.0;
    for anchor in anchors {
        let delta = DVector::from_fn(dim, |_, _| {
            perturbation_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        let base = nle.apply(anchor);
        let moved = nle.apply(&(anchor + &delta));
        num += (moved - base).norm();
        den += delta.norm();
    }
    num / den
}

/// Rescales the output stage so the measured expansion ratio drops strictly
/// below one. Returns the applied factor (1 when the map already contracts).
pub fn safeguard_normalize<N: NonlinearEstimator>(nle: &mut N, lipschitz: f64) -> f64 {
    if lipschitz > 1.0 {
        let factor = (1.0 / lipschitz) * (1.0 - 1e-3);
        nle.scale_output_stage(factor);
        factor
    } else {
        1.0
    }
}

/// Coefficient of determination of a least-squares line fitted to
/// `ln(values)` against the index. Returns `None` when any value is not a
/// positive finite number or fewer than two values are given. A value near
/// one means the sequence decays (or grows) geometrically.
pub fn log_linear_r2(values: &[f64]) -> Option<f64> {
    if values.len() < 2 || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    let n = values.len() as f64;
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let mean_t = (values.len() - 1) as f64 / 2.0;
    let mean_y = logs.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (t, y) in logs.iter().enumerate() {
        let dt = t as f64 - mean_t;
        let dy = y - mean_y;
        sxy += dt * dy;
        sxx += dt * dt;
        syy += dy * dy;
    }
    if syy <= 1e-30 {
        // All residuals equal: the constant fit is exact.
        return Some(1.0);
    }
    Some((sxy * sxy) / (sxx * syy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{assemble_channel, sample_paths, ChannelConfig};
    use crate::geometry::ArrayGeometry;
    use crate::measurement::{draw_operator, CombinerResolution, PilotConfig};
    use crate::nle::init_params;
    use crate::sample_rng;
    use rand::Rng;

    /// Affine contraction test double: `u -> gain * u + offset`.
    struct LinearGain {
        dim: usize,
        gain: f64,
        offset: DVector<f64>,
    }

    impl NonlinearEstimator for LinearGain {
        fn dim(&self) -> usize {
            self.dim
        }
        fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
            u * self.gain + &self.offset
        }
        fn scale_output_stage(&mut self, factor: f64) {
            self.gain *= factor;
            self.offset *= factor;
        }
    }

    fn desk_geometry() -> ArrayGeometry {
        ArrayGeometry::new(4, 16, 5e-4, 8e-3, 3e11).unwrap()
    }

    fn desk_channel_config() -> ChannelConfig {
        ChannelConfig::default_desk()
    }

    fn desk_operator(seed: u64) -> crate::measurement::MeasurementOperator {
        let geometry = desk_geometry();
        let pilot = PilotConfig {
            num_slots: 8,
            resolution: CombinerResolution::OneBit,
        };
        draw_operator(&mut sample_rng(seed, 0), &geometry, &pilot).unwrap()
    }

    #[test]
    fn pure_contraction_converges_to_fixed_point() {
        // f(h) = 0.5 h + b has fixed point 2 b and contraction factor 0.5.
        let dim = 16;
        let mut rng = sample_rng(100, 0);
        let b = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0f64));
        let opts = SolveOptions {
            tolerance: 1e-10,
            max_iterations: 200,
        };
        let result = iterate_to_fixed_point(|h| h * 0.5 + &b, DVector::zeros(dim), &opts);
        assert!(result.converged);
        let target = &b * 2.0;
        assert!((result.estimate - target).norm() < 1e-9);
        // Ratios of residuals well above the floating-point floor are exact.
        for w in result.residuals.windows(2) {
            if w[1] < 1e-6 {
                break;
            }
            let ratio = w[1] / w[0];
            assert!((ratio - 0.5).abs() < 1e-9, "ratio {ratio}");
        }
        assert_eq!(result.iterations, result.residuals.len());
    }

    #[test]
    fn loose_tolerance_stops_after_one_application() {
        let dim = 4;
        let opts = SolveOptions {
            tolerance: 1e6,
            max_iterations: 50,
        };
        let b = DVector::from_element(dim, 1.0);
        let result = iterate_to_fixed_point(|h| h * 0.5 + &b, DVector::zeros(dim), &opts);
        assert!(result.converged);
        assert_eq!(result.iterations, 1);
        // The returned estimate is the iterate that passed the test.
        assert_eq!(result.estimate, DVector::zeros(dim));
    }

    #[test]
    fn budget_exhaustion_is_flagged_not_fatal() {
        // An expanding map never converges; the solver must stop and say so.
        let dim = 4;
        let opts = SolveOptions {
            tolerance: 1e-3,
            max_iterations: 7,
        };
        let b = DVector::from_element(dim, 1.0);
        let result = iterate_to_fixed_point(|h| h * 1.1 + &b, DVector::zeros(dim), &opts);
        assert!(!result.converged);
        assert_eq!(result.iterations, 7);
        assert!(result.estimate.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_estimator_reduces_to_linear_step() {
        let op = desk_operator(3);
        let dim = op.w().nrows();
        let nle = LinearGain {
            dim,
            gain: 1.0,
            offset: DVector::zeros(dim),
        };
        let mut rng = sample_rng(4, 0);
        let h = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0f64));
        let y = DVector::from_fn(op.m_real().nrows(), |_, _| rng.gen_range(-1.0..1.0f64));
        let a = contraction_apply(&nle, &op, &h, &y);
        let b = le_apply(&op, &h, &y);
        assert_eq!(a, b);
    }

    #[test]
    fn linear_step_is_exact_on_noiseless_truth() {
        // y = M h implies h + W (y - M h) = h for any W.
        let op = desk_operator(5);
        let geometry = desk_geometry();
        let config = desk_channel_config();
        let mut rng = sample_rng(6, 0);
        let paths = sample_paths(&mut rng, &config, &geometry).unwrap();
        let sample = assemble_channel(&paths, &geometry, geometry.f_c()).unwrap();
        let h = op.to_estimation_domain(&sample.h_complex).unwrap();
        let y = op.m_real() * &h;
        let stepped = le_apply(&op, &h, &y);
        assert!((stepped - &h).norm() < 1e-12);
    }

    #[test]
    fn linear_step_is_affine_in_the_iterate() {
        let op = desk_operator(7);
        let dim = op.w().nrows();
        let rows = op.m_real().nrows();
        let mut rng = sample_rng(8, 0);
        let y = DVector::from_fn(rows, |_, _| rng.gen_range(-1.0..1.0f64));
        let h1 = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0f64));
        let h2 = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0f64));
        let lhs = le_apply(&op, &(&h1 + &h2), &y);
        let rhs = le_apply(&op, &h1, &y) + le_apply(&op, &h2, &y) - le_apply(&op, &DVector::zeros(dim), &y);
        assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn damped_linear_estimator_contracts_through_solver() {
        // Shrinking the whole step by 0.4 bounds the map's expansion by 0.4,
        // so the full solver must converge with geometric residuals.
        let op = desk_operator(9);
        let dim = op.w().nrows();
        let nle = LinearGain {
            dim,
            gain: 0.4,
            offset: DVector::zeros(dim),
        };
        let mut rng = sample_rng(10, 0);
        let y = DVector::from_fn(op.m_real().nrows(), |_, _| rng.gen_range(-1.0..1.0f64));
        let opts = SolveOptions {
            tolerance: 1e-9,
            max_iterations: 100,
        };
        let result = fixed_point_solve(&nle, &op, &y, &opts);
        assert!(result.converged);
        // The estimate satisfies the fixed-point equation to tolerance scale.
        let moved = contraction_apply(&nle, &op, &result.estimate, &y);
        assert!((moved - &result.estimate).norm() <= 2e-9);
        for w in result.residuals.windows(2) {
            if w[1] < 1e-6 {
                break;
            }
            assert!(w[1] / w[0] <= 0.4 + 1e-9, "ratio {}", w[1] / w[0]);
        }
    }

    #[test]
    fn solver_start_does_not_change_the_fixed_point() {
        let op = desk_operator(11);
        let dim = op.w().nrows();
        let nle = LinearGain {
            dim,
            gain: 0.4,
            offset: DVector::zeros(dim),
        };
        let mut rng = sample_rng(12, 0);
        let y = DVector::from_fn(op.m_real().nrows(), |_, _| rng.gen_range(-1.0..1.0f64));
        let opts = SolveOptions {
            tolerance: 1e-11,
            max_iterations: 200,
        };
        let from_zero = fixed_point_solve(&nle, &op, &y, &opts);
        let start = DVector::from_fn(dim, |_, _| rng.gen_range(-5.0..5.0f64));
        let from_far = fixed_point_solve_from(&nle, &op, &y, start, &opts);
        assert!(from_zero.converged && from_far.converged);
        assert!((from_zero.estimate - from_far.estimate).norm() < 1e-9);
    }

    #[test]
    fn traced_solve_returns_every_iterate() {
        let op = desk_operator(13);
        let dim = op.w().nrows();
        let nle = LinearGain {
            dim,
            gain: 0.4,
            offset: DVector::zeros(dim),
        };
        let mut rng = sample_rng(14, 0);
        let y = DVector::from_fn(op.m_real().nrows(), |_, _| rng.gen_range(-1.0..1.0f64));
        let opts = SolveOptions {
            tolerance: 1e-8,
            max_iterations: 100,
        };
        let (result, iterates) = fixed_point_solve_traced(&nle, &op, &y, &opts);
        assert_eq!(iterates.len(), result.iterations);
        // Replaying the map from zero reproduces the trace.
        let mut h = DVector::zeros(dim);
        for it in &iterates {
            h = contraction_apply(&nle, &op, &h, &y);
            assert_eq!(&h, it);
        }
    }

    #[test]
    fn batch_solver_matches_single_sample_solver() {
        let op = desk_operator(15);
        let geometry = desk_geometry();
        let mut rng = sample_rng(16, 0);
        let mut params = init_params(&mut rng, &geometry, 16, 2).unwrap();
        // Small random head keeps the map close to the linear step but
        // nonlinear enough to exercise the network path.
        for v in params.data_mut() {
            *v += 0.01 * rng.gen_range(-1.0..1.0f64);
        }
        let rows = op.m_real().nrows();
        let n = 6;
        let ys = DMatrix::from_fn(rows, n, |_, _| rng.gen_range(-0.3..0.3f64));
        let opts = SolveOptions {
            tolerance: 1e-2,
            max_iterations: 12,
        };
        let batch = batch_fixed_point_solve(&params, &op, &ys, &opts);
        for j in 0..n {
            let y = ys.column(j).into_owned();
            let single = fixed_point_solve(&params, &op, &y, &opts);
            assert_eq!(batch.converged[j], single.converged, "sample {j}");
            assert_eq!(batch.iterations[j], single.iterations, "sample {j}");
            assert_eq!(
                batch.residual_traces[j].len(),
                single.residuals.len(),
                "sample {j}"
            );
            for (a, b) in batch.residual_traces[j].iter().zip(&single.residuals) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!((batch.estimates.column(j) - single.estimate).norm() < 1e-8);
        }
    }

    #[test]
    fn expansion_ratio_of_simple_maps_is_exact() {
        let dim = 32;
        let identity = LinearGain {
            dim,
            gain: 1.0,
            offset: DVector::zeros(dim),
        };
        let anchors: Vec<DVector<f64>> = (0..8)
            .map(|i| {
                let mut rng = sample_rng(20, i);
                DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0f64))
            })
            .collect();
        let mut rng = sample_rng(21, 0);
        let l_id = lipschitz_estimate(&identity, &anchors, 0.05, &mut rng);
        assert!((l_id - 1.0).abs() < 1e-12);

        let damped = LinearGain {
            dim,
            gain: 0.7,
            offset: DVector::from_element(dim, 3.0),
        };
        let mut rng = sample_rng(22, 0);
        let l_damped = lipschitz_estimate(&damped, &anchors, 0.05, &mut rng);
        assert!((l_damped - 0.7).abs() < 1e-12);
    }

    #[test]
    fn safeguard_pulls_expanding_map_below_one() {
        let dim = 16;
        let mut expanding = LinearGain {
            dim,
            gain: 1.5,
            offset: DVector::zeros(dim),
        };
        let anchors: Vec<DVector<f64>> = (0..4)
            .map(|i| {
                let mut rng = sample_rng(23, i);
                DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0f64))
            })
            .collect();
        let mut rng = sample_rng(24, 0);
        let measured = lipschitz_estimate(&expanding, &anchors, 0.05, &mut rng);
        assert!((measured - 1.5).abs() < 1e-12);
        let factor = safeguard_normalize(&mut expanding, measured);
        assert!(factor < 1.0);
        assert!(expanding.gain <= 1.0 + 1e-3);
        let mut rng = sample_rng(25, 0);
        let after = lipschitz_estimate(&expanding, &anchors, 0.05, &mut rng);
        assert!(after < 1.0, "after safeguard: {after}");
    }

    #[test]
    fn safeguard_leaves_contractions_untouched() {
        let dim = 8;
        let mut contracting = LinearGain {
            dim,
            gain: 0.8,
            offset: DVector::from_element(dim, 1.0),
        };
        let factor = safeguard_normalize(&mut contracting, 0.8);
        assert_eq!(factor, 1.0);
        assert_eq!(contracting.gain, 0.8);
    }

    #[test]
    fn network_expansion_ratio_is_finite_and_positive() {
        let geometry = desk_geometry();
        let mut rng = sample_rng(26, 0);
        let params = init_params(&mut rng, &geometry, 32, 3).unwrap();
        let anchors: Vec<DVector<f64>> = (0..4)
            .map(|i| {
                let mut rng = sample_rng(27, i);
                DVector::from_fn(params.arch().io_len(), |_, _| rng.gen_range(-1.0..1.0f64))
            })
            .collect();
        let mut rng = sample_rng(28, 0);
        let l = lipschitz_estimate(&params, &anchors, 0.05, &mut rng);
        // Identity-initialised network: ratio is exactly one.
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_linear_fit_flags_geometric_decay() {
        let geometric: Vec<f64> = (0..12).map(|t| 3.0 * 0.5f64.powi(t)).collect();
        let r2 = log_linear_r2(&geometric).unwrap();
        assert!((r2 - 1.0).abs() < 1e-12);

        let constant = vec![0.7; 10];
        assert_eq!(log_linear_r2(&constant), Some(1.0));

        let mut rng = sample_rng(29, 0);
        let noisy: Vec<f64> = (0..40).map(|_| rng.gen_range(0.5..1.5f64)).collect();
        let r2_noise = log_linear_r2(&noisy).unwrap();
        assert!(r2_noise < 0.5, "noise should not look geometric: {r2_noise}");

        assert_eq!(log_linear_r2(&[1.0]), None);
        assert_eq!(log_linear_r2(&[1.0, -2.0]), None);
        assert_eq!(log_linear_r2(&[1.0, 0.0]), None);
    }
}
