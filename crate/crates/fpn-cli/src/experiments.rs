//! Experiment runners: each produces typed rows that the binary serialises
//! to CSV, and each is callable directly from tests.

use crate::methods::{evaluate_method, Method, MethodEval};
use anyhow::Result;
use fpn_oamp::baselines::{fista_estimate, oamp_bg_estimate, spectral_norm, FistaConfig, OampBgConfig};
use fpn_oamp::channel::{array_response, ChannelConfig, FieldMode};
use fpn_oamp::config::{AdaptSection, EvalSection, ExperimentConfig};
use fpn_oamp::fpn::{fixed_point_solve_traced, SolveOptions};
use fpn_oamp::geometry::ArrayGeometry;
use fpn_oamp::measurement::{draw_operator, CombinerResolution, MeasurementOperator, PilotConfig};
use fpn_oamp::nle::NleParameters;
use fpn_oamp::noise::NoiseSpec;
use fpn_oamp::sample_rng;
use fpn_oamp::training::{
    evaluate, generate_dataset, observe_with_specs, self_adapt, GeneratedSet,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// RNG stream offsets, disjoint from per-sample dataset streams.
pub mod seeds {
    /// Stream index used when drawing the measurement operator.
    pub const OPERATOR_STREAM: u64 = 1 << 62;
    /// Master-seed offset for the training split.
    pub const TRAIN_OFFSET: u64 = 1;
    /// Master-seed offset for the validation split.
    pub const VAL_OFFSET: u64 = 2;
    /// Master-seed offset for the test split.
    pub const TEST_OFFSET: u64 = 3;
    /// Master-seed offset for unlabeled adaptation measurements.
    pub const ADAPT_OFFSET: u64 = 4;
    /// Master-seed base for per-SNR observation redraws.
    pub const SNR_BASE: u64 = 1000;
    /// Master-seed base for distribution-shift sets.
    pub const SHIFT_BASE: u64 = 5000;
    /// Master-seed base for fresh operator draws.
    pub const FRESH_OP_BASE: u64 = 9000;
}

/// Draws the experiment's measurement operator for a master seed.
pub fn operator_for(
    seed: u64,
    geometry: &ArrayGeometry,
    pilot: &PilotConfig,
) -> Result<MeasurementOperator> {
    Ok(draw_operator(
        &mut sample_rng(seed, seeds::OPERATOR_STREAM),
        geometry,
        pilot,
    )?)
}

fn ratio_to_db(mean_ratio: f64) -> f64 {
    (10.0 * mean_ratio.log10()).max(-200.0)
}

/// Takes the first `count` columns as a fixed-SNR evaluation set with fresh
/// noise drawn from `noise_seed`.
pub fn observe_subset(
    noise_seed: u64,
    op: &MeasurementOperator,
    gt: &DMatrix<f64>,
    count: usize,
    spec: &NoiseSpec,
    snr_label_db: f64,
) -> Result<GeneratedSet> {
    let count = count.min(gt.ncols());
    let sub = gt.columns(0, count).into_owned();
    let specs = vec![spec.clone(); count];
    let y = observe_with_specs(noise_seed, op, &sub, &specs)?;
    Ok(GeneratedSet {
        gt: sub,
        y,
        snr_db: vec![snr_label_db; count],
    })
}

/// One `eval` CSV row.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub snr_db: f64,
    pub method: String,
    pub nmse_db: f64,
    pub mean_iterations: f64,
    pub wall_time: f64,
}

/// Error-versus-SNR table over all methods.
///
/// Observations are redrawn from the test ground truths at every grid SNR;
/// the returned pairs record the soft-threshold weight picked per SNR.
pub fn eval_nmse(
    op: &MeasurementOperator,
    params: &NleParameters,
    test_gt: &DMatrix<f64>,
    eval: &EvalSection,
    seed: u64,
    deterministic: bool,
) -> Result<(Vec<EvalRow>, Vec<(f64, f64)>)> {
    let mut rows = Vec::new();
    let mut lambdas = Vec::new();
    for (k, &snr_db) in eval.snr_grid_db.iter().enumerate() {
        let set = observe_subset(
            seed + seeds::SNR_BASE + k as u64,
            op,
            test_gt,
            eval.samples_per_snr,
            &NoiseSpec::Awgn { snr_db },
            snr_db,
        )?;
        for method in Method::all() {
            let MethodEval {
                nmse_db,
                mean_iterations,
                wall_time,
                fista_lambda,
            } = evaluate_method(method, Some(params), op, &set, eval, deterministic)?;
            if let Some(lambda) = fista_lambda {
                lambdas.push((snr_db, lambda));
            }
            rows.push(EvalRow {
                snr_db,
                method: method.name().to_string(),
                nmse_db,
                mean_iterations,
                wall_time,
            });
        }
    }
    Ok((rows, lambdas))
}

/// One `trace` CSV row.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub method: String,
    pub iteration: usize,
    pub nmse_db: f64,
    pub residual: f64,
}

/// Sample-mean error ratio and residual per iteration; samples that stop
/// early keep contributing their final values.
fn mean_trace(
    method: &str,
    per_sample: &[(Vec<f64>, Vec<f64>)], // (ratios, residuals) per sample
) -> Vec<TraceRow> {
    let longest = per_sample.iter().map(|(r, _)| r.len()).max().unwrap_or(0);
    let n = per_sample.len() as f64;
    (0..longest)
        .map(|i| {
            let mut ratio = 0.0;
            let mut residual = 0.0;
            for (ratios, residuals) in per_sample {
                ratio += ratios[i.min(ratios.len() - 1)];
                residual += residuals[i.min(residuals.len() - 1)];
            }
            TraceRow {
                method: method.to_string(),
                iteration: i + 1,
                nmse_db: ratio_to_db(ratio / n),
                residual: residual / n,
            }
        })
        .collect()
}

/// Per-iteration error and residual traces of the iterative methods on one
/// fixed-SNR set.
pub fn convergence_trace(
    op: &MeasurementOperator,
    params: &NleParameters,
    set: &GeneratedSet,
    eval: &EvalSection,
) -> Result<Vec<TraceRow>> {
    let n = set.len();
    assert!(n > 0, "empty trace set");
    let mut rows = Vec::new();

    let opts = SolveOptions {
        tolerance: eval.tolerance,
        max_iterations: eval.max_iterations,
    };
    let mut fpn = Vec::with_capacity(n);
    for j in 0..n {
        let gt = set.gt.column(j).into_owned();
        let y = set.y.column(j).into_owned();
        let (result, iterates) = fixed_point_solve_traced(params, op, &y, &opts);
        let ratios: Vec<f64> = iterates
            .iter()
            .map(|h| (h - &gt).norm_squared() / gt.norm_squared())
            .collect();
        fpn.push((ratios, result.residuals));
    }
    rows.extend(mean_trace(Method::Fpn.name(), &fpn));

    let lambda = crate::methods::pick_fista_lambda(op, set, eval);
    let fista_config = FistaConfig {
        step_size: Some(1.0 / spectral_norm(op.m_real()).powi(2)),
        max_iterations: eval.fista_max_iterations,
        ..FistaConfig::new(lambda)
    };
    let mut fista = Vec::with_capacity(n);
    for j in 0..n {
        let gt = set.gt.column(j).into_owned();
        let y = set.y.column(j).into_owned();
        let (_, trace) = fista_estimate(op, &y, &fista_config, Some(&gt));
        let ratios: Vec<f64> = trace
            .iter()
            .map(|p| 10f64.powf(p.nmse_db.expect("ground truth supplied") / 10.0))
            .collect();
        let residuals: Vec<f64> = trace.iter().map(|p| p.residual).collect();
        fista.push((ratios, residuals));
    }
    rows.extend(mean_trace(Method::Fista.name(), &fista));

    let mut oamp = Vec::with_capacity(n);
    for j in 0..n {
        let gt = set.gt.column(j).into_owned();
        let y = set.y.column(j).into_owned();
        let config = OampBgConfig {
            sparsity: eval.oamp_sparsity,
            max_iterations: eval.oamp_iterations,
            ..OampBgConfig::new(noise_variance_for(op, set, j))
        };
        let (_, trace) = oamp_bg_estimate(op, &y, &config, Some(&gt));
        let ratios: Vec<f64> = trace
            .iter()
            .map(|p| 10f64.powf(p.nmse_db.expect("ground truth supplied") / 10.0))
            .collect();
        let residuals: Vec<f64> = trace.iter().map(|p| p.residual).collect();
        oamp.push((ratios, residuals));
    }
    rows.extend(mean_trace(Method::OampBg.name(), &oamp));

    Ok(rows)
}

fn noise_variance_for(op: &MeasurementOperator, set: &GeneratedSet, j: usize) -> f64 {
    let clean = op.m_real() * set.gt.column(j);
    let signal_power = clean.norm_squared() / clean.len() as f64;
    signal_power / 10f64.powf(set.snr_db[j] / 10.0)
}

/// One `fig2` CSV row.
#[derive(Debug, Clone)]
pub struct DistanceRow {
    pub config: String,
    /// Distance in meters.
    pub r: f64,
    /// Mean normalised squared error, in dB, of the planar-wavefront
    /// response against the spherical one at distance `r`.
    pub error_db: f64,
}

/// Far-field approximation error versus distance for one geometry. Returns
/// the rows and the geometry's Rayleigh distance.
pub fn farfield_error_curve(
    geometry: &ArrayGeometry,
    label: &str,
    distance_factors: &[f64],
    angle_samples: usize,
    seed: u64,
) -> Result<(Vec<DistanceRow>, f64)> {
    assert!(angle_samples > 0, "need at least one angle");
    let d_ray = geometry.rayleigh_distance();
    let mut rng = sample_rng(seed, 0);
    let angles: Vec<(f64, f64)> = (0..angle_samples)
        .map(|_| {
            (
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
            )
        })
        .collect();
    let mut rows = Vec::with_capacity(distance_factors.len());
    for &factor in distance_factors {
        let r = factor * d_ray;
        let mut ratio = 0.0;
        for &(phi, theta) in &angles {
            let near = array_response(geometry, phi, theta, r, geometry.f_c(), FieldMode::ForceNear)?;
            let far = array_response(geometry, phi, theta, r, geometry.f_c(), FieldMode::ForceFar)?;
            let num: f64 = near
                .iter()
                .zip(&far)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum();
            let den: f64 = near.iter().map(|a| a.norm_sqr()).sum();
            ratio += num / den;
        }
        rows.push(DistanceRow {
            config: label.to_string(),
            r,
            error_db: 10.0 * (ratio / angle_samples as f64).log10(),
        });
    }
    Ok((rows, d_ray))
}

/// One `ood` CSV row.
#[derive(Debug, Clone)]
pub struct OodRow {
    pub shift: String,
    pub in_dist_nmse_db: f64,
    pub ood_nmse_db: f64,
    /// Populated for measurement-side shifts only.
    pub ood_selfadapt_nmse_db: Option<f64>,
}

/// Error of the estimator on a labelled set (energy-mean, dB).
pub fn fpn_nmse_db(
    params: &NleParameters,
    op: &MeasurementOperator,
    set: &GeneratedSet,
    eval: &EvalSection,
) -> f64 {
    let opts = SolveOptions {
        tolerance: eval.tolerance,
        max_iterations: eval.max_iterations,
    };
    evaluate(params, op, set, &opts, 128).nmse_db
}

/// Channel variants exercised by the shift suite; each returns the shifted
/// channel configuration.
pub fn shifted_channels(base: &ChannelConfig, d_ray: f64) -> Vec<(&'static str, ChannelConfig)> {
    let mut shifts = Vec::new();
    let mut blocked = *base;
    blocked.include_los = false;
    shifts.push(("los_blockage", blocked));
    let mut sparse = *base;
    sparse.num_paths = 3;
    shifts.push(("paths_3", sparse));
    let mut dense = *base;
    dense.num_paths = 7;
    shifts.push(("paths_7", dense));
    // All path lengths on one side of the Rayleigh distance.
    let mut near = *base;
    near.los_distance = 0.5 * d_ray;
    near.nlos_distance_range = (0.1 * d_ray, 0.9 * d_ray);
    shifts.push(("near_field_only", near));
    let mut far = *base;
    far.los_distance = 3.0 * d_ray;
    far.nlos_distance_range = (1.2 * d_ray, 6.0 * d_ray);
    shifts.push(("far_field_only", far));
    shifts
}

/// Generates a fixed-SNR set from a channel configuration and operator.
fn shifted_set(
    seed: u64,
    count: usize,
    op: &MeasurementOperator,
    channel: &ChannelConfig,
    snr_db: f64,
) -> Result<GeneratedSet> {
    Ok(generate_dataset(seed, count, op, channel, (snr_db, snr_db))?)
}

/// Under-sampling variants: slot counts giving roughly 70/30/10 percent,
/// never fewer than one slot.
fn rho_slot_grid(s_bar: usize) -> Vec<(&'static str, usize)> {
    vec![
        ("rho_70", ((s_bar * 70 + 50) / 100).max(1)),
        ("rho_30", ((s_bar * 30 + 50) / 100).max(1)),
        ("rho_10", ((s_bar * 10 + 50) / 100).max(1)),
    ]
}

/// Applies multiplicative gain errors to a fraction of antenna entries.
fn miscalibrate(
    gt: &DMatrix<f64>,
    fraction: f64,
    sigma: f64,
    seed: u64,
) -> DMatrix<f64> {
    let half = gt.nrows() / 2;
    let mut out = gt.clone();
    for j in 0..gt.ncols() {
        let mut rng = sample_rng(seed, j as u64);
        for i in 0..half {
            if rng.gen_range(0.0..1.0) < fraction {
                let gain =
                    1.0 + sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                // Same gain scales the real and imaginary parts of an entry.
                out[(i, j)] *= gain;
                out[(i + half, j)] *= gain;
            }
        }
        let norm = out.column(j).norm();
        for i in 0..gt.nrows() {
            out[(i, j)] /= norm;
        }
    }
    out
}

/// Distribution-shift suite. Reports the trained model's error on its own
/// distribution once, then on each shifted distribution; measurement-side
/// shifts also report the error after a few steps of measurement-consistency
/// self-adaptation on unlabeled shifted data.
pub fn ood_suite(
    config: &ExperimentConfig,
    op: &MeasurementOperator,
    params: &NleParameters,
    seed: u64,
) -> Result<Vec<OodRow>> {
    let geometry = *op.geometry();
    let eval = &config.eval;
    let adapt = &config.adapt;
    let count = eval.samples_per_snr;
    let snr_db = 10.0;
    let mut shift_seed = seed + seeds::SHIFT_BASE;
    let mut next_seed = || {
        shift_seed += 1;
        shift_seed
    };

    let in_dist = shifted_set(next_seed(), count, op, &config.channel, snr_db)?;
    let in_dist_nmse_db = fpn_nmse_db(params, op, &in_dist, eval);
    let mut rows = Vec::new();
    let mut push = |shift: &str, ood: f64, adapted: Option<f64>| {
        rows.push(OodRow {
            shift: shift.to_string(),
            in_dist_nmse_db,
            ood_nmse_db: ood,
            ood_selfadapt_nmse_db: adapted,
        });
    };

    // Noise shifts: same operator, SNR outside the training range and
    // impulsive noise at matched generalized SNR.
    for (name, eval_snr) in [("snr_low_minus5db", -5.0), ("snr_high_25db", 25.0)] {
        let set = observe_subset(
            next_seed(),
            op,
            &in_dist.gt,
            count,
            &NoiseSpec::Awgn { snr_db: eval_snr },
            eval_snr,
        )?;
        push(name, fpn_nmse_db(params, op, &set, eval), None);
    }
    let impulsive = NoiseSpec::AlphaStable {
        alpha: 1.8,
        beta: 0.0,
        scale: fpn_oamp::noise::StableScale::GsnrDb(snr_db),
    };
    let set = observe_subset(next_seed(), op, &in_dist.gt, count, &impulsive, snr_db)?;
    push("impulsive_alpha_1p8", fpn_nmse_db(params, op, &set, eval), None);

    // Channel shifts: same operator, shifted propagation statistics.
    for (name, channel) in shifted_channels(&config.channel, geometry.rayleigh_distance()) {
        let set = shifted_set(next_seed(), count, op, &channel, snr_db)?;
        push(name, fpn_nmse_db(params, op, &set, eval), None);
    }

    // Geometry shifts: wider element or subarray pitch; the operator is
    // rebuilt for the new array, the estimator is reused unchanged.
    for (name, d_a_scale, d_sub_scale) in [
        ("element_spacing_1p25x", 1.25, 1.0),
        ("subarray_spacing_1p25x", 1.0, 1.25),
    ] {
        let shifted_geometry = ArrayGeometry::new(
            geometry.s(),
            geometry.s_bar(),
            geometry.d_a() * d_a_scale,
            geometry.d_sub() * d_sub_scale,
            geometry.f_c(),
        )?;
        let shifted_op = operator_for(seed, &shifted_geometry, op.pilot())?;
        let set = shifted_set(next_seed(), count, &shifted_op, &config.channel, snr_db)?;
        push(name, fpn_nmse_db(params, &shifted_op, &set, eval), None);
    }

    // Gain miscalibration: 20% of antennas with Gaussian gain errors.
    let gt = miscalibrate(&in_dist.gt, 0.2, 0.2, next_seed());
    let specs = vec![NoiseSpec::Awgn { snr_db }; gt.ncols()];
    let y = observe_with_specs(next_seed(), op, &gt, &specs)?;
    let set = GeneratedSet {
        gt,
        y,
        snr_db: vec![snr_db; count],
    };
    push("gain_miscalibration", fpn_nmse_db(params, op, &set, eval), None);

    // Measurement shifts: new pilot schedules and combiner resolution; these
    // rows also run self-adaptation on unlabeled shifted measurements.
    let mut measurement_shift = |name: &str, pilot: PilotConfig| -> Result<(String, f64, f64)> {
        let shifted_op = operator_for(seed, &geometry, &pilot)?;
        let set = shifted_set(next_seed(), count, &shifted_op, &config.channel, snr_db)?;
        let ood = fpn_nmse_db(params, &shifted_op, &set, eval);
        let adapt_set = shifted_set(
            seed + seeds::ADAPT_OFFSET,
            adapt.samples,
            &shifted_op,
            &config.channel,
            snr_db,
        )?;
        let opts = SolveOptions {
            tolerance: eval.tolerance,
            max_iterations: eval.max_iterations,
        };
        let adapted = self_adapt(
            params,
            &shifted_op,
            &adapt_set.y,
            adapt.steps,
            adapt.learning_rate,
            &opts,
        )?;
        let after = fpn_nmse_db(&adapted, &shifted_op, &set, eval);
        Ok((name.to_string(), ood, after))
    };
    for (name, slots) in rho_slot_grid(geometry.s_bar()) {
        let pilot = PilotConfig {
            num_slots: slots,
            resolution: config.pilot.resolution,
        };
        let (name, ood, after) = measurement_shift(name, pilot)?;
        push(&name, ood, Some(after));
    }
    let flipped = PilotConfig {
        num_slots: config.pilot.num_slots,
        resolution: match config.pilot.resolution {
            CombinerResolution::OneBit => CombinerResolution::Infinite,
            CombinerResolution::Infinite => CombinerResolution::OneBit,
        },
    };
    let (name, ood, after) = measurement_shift("combiner_resolution", flipped)?;
    push(&name, ood, Some(after));

    // Fresh operator realizations: mean error over newly drawn operators.
    let fresh_count = 20;
    let per_op = count.div_ceil(4).max(25).min(count);
    let mut ratio_mean_db = 0.0;
    for j in 0..fresh_count {
        let fresh = draw_operator(
            &mut sample_rng(seed + seeds::FRESH_OP_BASE + j, seeds::OPERATOR_STREAM),
            &geometry,
            op.pilot(),
        )?;
        let set = shifted_set(next_seed(), per_op, &fresh, &config.channel, snr_db)?;
        ratio_mean_db += fpn_nmse_db(params, &fresh, &set, eval);
    }
    push(
        "fresh_operator",
        ratio_mean_db / fresh_count as f64,
        None,
    );

    Ok(rows)
}

/// One `wideband` CSV row.
#[derive(Debug, Clone)]
pub struct WidebandRow {
    pub k: usize,
    pub f_k: f64,
    pub method: String,
    pub nmse_db: f64,
}

/// Per-subcarrier error of the learned estimator and the least-squares
/// baseline, with the narrowband operator shared across the band.
pub fn wideband_eval(
    op: &MeasurementOperator,
    params: &NleParameters,
    config: &ExperimentConfig,
    snr_db: f64,
    count: usize,
    seed: u64,
    deterministic: bool,
) -> Result<Vec<WidebandRow>> {
    let wide = fpn_oamp::wideband::generate_wideband_dataset(
        seed,
        count,
        op,
        &config.channel,
        &config.wideband,
        (snr_db, snr_db),
    )?;
    let mut rows = Vec::new();
    for (k, set) in wide.per_subcarrier.iter().enumerate() {
        for method in [Method::Fpn, Method::Ls] {
            let result = evaluate_method(method, Some(params), op, set, &config.eval, deterministic)?;
            rows.push(WidebandRow {
                k: k + 1,
                f_k: wide.frequencies[k],
                method: method.name().to_string(),
                nmse_db: result.nmse_db,
            });
        }
    }
    Ok(rows)
}

/// Outcome of a standalone self-adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptReport {
    pub steps: usize,
    pub before_nmse_db: f64,
    pub after_nmse_db: f64,
    /// Parameters after adaptation, for checkpointing.
    pub adapted: NleParameters,
}

/// Adapts the estimator to a target distribution (possibly a different
/// pilot schedule or channel) using unlabeled measurements only, and
/// reports the error before and after on a held-out labelled target set.
pub fn adapt_run(
    source_params: &NleParameters,
    target: &ExperimentConfig,
    adapt: &AdaptSection,
    eval: &EvalSection,
    seed: u64,
) -> Result<AdaptReport> {
    let geometry = target.geometry.build()?;
    let op = operator_for(seed, &geometry, &target.pilot)?;
    let snr_db = 10.0;
    let eval_set = shifted_set(
        seed + seeds::SHIFT_BASE,
        eval.samples_per_snr,
        &op,
        &target.channel,
        snr_db,
    )?;
    let adapt_set = shifted_set(
        seed + seeds::ADAPT_OFFSET,
        adapt.samples,
        &op,
        &target.channel,
        snr_db,
    )?;
    let opts = SolveOptions {
        tolerance: eval.tolerance,
        max_iterations: eval.max_iterations,
    };
    let before_nmse_db = fpn_nmse_db(source_params, &op, &eval_set, eval);
    let adapted = self_adapt(
        source_params,
        &op,
        &adapt_set.y,
        adapt.steps,
        adapt.learning_rate,
        &opts,
    )?;
    let after_nmse_db = fpn_nmse_db(&adapted, &op, &eval_set, eval);
    Ok(AdaptReport {
        steps: adapt.steps,
        before_nmse_db,
        after_nmse_db,
        adapted,
    })
}
