//! `fpn`: dataset generation, training, and evaluation experiments for the
//! fixed-point channel estimator.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fpn_cli::experiments::{
    adapt_run, convergence_trace, eval_nmse, farfield_error_curve, observe_subset, ood_suite,
    seeds, wideband_eval,
};
use fpn_cli::{fmt_f, fmt_t, write_csv, RunContext};
use fpn_oamp::config::ExperimentConfig;
use fpn_oamp::dataset::{load_dataset_for, save_dataset};
use fpn_oamp::measurement::MeasurementOperator;
use fpn_oamp::nle::{load_checkpoint, save_checkpoint, NleParameters};
use fpn_oamp::noise::NoiseSpec;
use fpn_oamp::training::{generate_dataset, train};
use serde_json::json;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fpn",
    about = "Fixed-point network channel estimation experiments",
    version
)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,
    /// Master seed override (defaults to the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for datasets, checkpoints, CSVs, and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Byte-identical reruns: zero wall-time columns, omit timestamps.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test datasets and save them to the output dir.
    GenData,
    /// Train the estimator on the generated datasets.
    Train,
    /// Error-versus-SNR table over all methods (needs a checkpoint).
    Eval,
    /// Per-iteration error and residual traces of the iterative methods.
    Trace {
        /// Evaluation SNR in dB.
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        /// Samples traced (default: min(64, eval.samples_per_snr)).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Far-field approximation error versus distance for the geometry.
    Fig2,
    /// Distribution-shift suite (needs a checkpoint).
    Ood,
    /// Per-subcarrier wideband evaluation (needs a checkpoint).
    Wideband {
        /// Evaluation SNR in dB.
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
    },
    /// Self-adaptation to a target distribution via the consistency loss.
    Adapt {
        /// Target experiment config (defaults to the main config).
        #[arg(long)]
        target_config: Option<PathBuf>,
        /// Override the adaptation step count.
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let ctx = RunContext::load(&cli.config, cli.seed, cli.out.clone(), cli.deterministic)?;
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Train => run_train(&ctx),
        Command::Eval => run_eval(&ctx),
        Command::Trace { snr, samples } => run_trace(&ctx, snr, samples),
        Command::Fig2 => run_fig2(&ctx),
        Command::Ood => run_ood(&ctx),
        Command::Wideband { snr } => run_wideband(&ctx, snr),
        Command::Adapt {
            target_config,
            steps,
        } => run_adapt(&ctx, target_config, steps),
    }
}

fn gen_data(ctx: &RunContext) -> Result<()> {
    let op = ctx.operator()?;
    let splits = [
        ("train", seeds::TRAIN_OFFSET, ctx.config.dataset.train_count),
        ("val", seeds::VAL_OFFSET, ctx.config.dataset.val_count),
        ("test", seeds::TEST_OFFSET, ctx.config.dataset.test_count),
    ];
    let mut files = Vec::new();
    for (name, offset, count) in splits {
        let master = ctx.seed + offset;
        let set = generate_dataset(
            master,
            count,
            &op,
            &ctx.config.channel,
            ctx.config.train.snr_range_db,
        )?;
        let path = ctx.path(&format!("{name}.bin"));
        save_dataset(
            &path,
            &op,
            &ctx.config.channel,
            master,
            ctx.config.train.snr_range_db,
            &set,
        )?;
        println!("wrote {} ({count} samples)", path.display());
        files.push(json!({ "split": name, "path": path, "count": count }));
    }
    ctx.write_manifest(
        "gen-data",
        json!({ "operator_digest": op.digest(), "files": files }),
    )?;
    Ok(())
}

fn run_train(ctx: &RunContext) -> Result<()> {
    let op = ctx.operator()?;
    let train_set = load_dataset_for(&ctx.path("train.bin"), &op)
        .with_context(|| format!("loading {} (run `fpn gen-data` first)", ctx.path("train.bin").display()))?;
    let val_set = load_dataset_for(&ctx.path("val.bin"), &op)
        .with_context(|| format!("loading {}", ctx.path("val.bin").display()))?;
    let mut log_rows = Vec::new();
    let outcome = train(
        &ctx.config.train,
        &op,
        &train_set.set,
        &val_set.set,
        ctx.seed,
        |entry| {
            println!(
                "epoch {:>3}  loss {:.4}  val nmae {:.4}  val nmse {:+.2} dB  lipschitz {:.4}  lr {:.2e}",
                entry.epoch,
                entry.train_loss,
                entry.val_nmae,
                entry.val_nmse_db,
                entry.lipschitz,
                entry.learning_rate
            );
            log_rows.push(format!(
                "{},{},{},{},{},{},{},{},{}",
                entry.epoch,
                fmt_f(entry.train_loss),
                fmt_f(entry.val_nmae),
                fmt_f(entry.val_nmse_db),
                fmt_f(entry.lipschitz),
                fmt_f(entry.safeguard_factor),
                fmt_f(entry.learning_rate),
                fmt_f(entry.val_mean_iterations),
                fmt_f(entry.val_converged_fraction)
            ));
        },
    )?;
    write_csv(
        &ctx.path("train_log.csv"),
        "epoch,train_loss,val_nmae,val_nmse_db,lipschitz,safeguard_factor,learning_rate,val_mean_iterations,val_converged_fraction",
        &log_rows,
    )?;
    let checkpoint = ctx.path("checkpoint.bin");
    save_checkpoint(
        &checkpoint,
        &outcome.params,
        &json!({
            "label": ctx.config.label,
            "seed": ctx.seed,
            "config_digest": ctx.config_digest,
            "operator_digest": op.digest(),
            "best_epoch": outcome.best_epoch,
            "best_val_nmse_db": outcome.best_val_nmse_db,
        }),
    )?;
    println!(
        "best epoch {} (val nmse {:+.2} dB); checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_nmse_db,
        checkpoint.display()
    );
    ctx.write_manifest(
        "train",
        json!({
            "best_epoch": outcome.best_epoch,
            "best_val_nmse_db": outcome.best_val_nmse_db,
            "epochs": outcome.log.len(),
            "checkpoint": checkpoint,
        }),
    )?;
    Ok(())
}

/// Loads the trained parameters and refuses checkpoints from a different
/// operator than the one this run derives from its config and seed.
fn load_params(ctx: &RunContext, op: &MeasurementOperator) -> Result<NleParameters> {
    let path = ctx.path("checkpoint.bin");
    if !path.exists() {
        bail!(
            "missing checkpoint {} (run `fpn train` first)",
            path.display()
        );
    }
    let (params, metadata) = load_checkpoint(&path)?;
    if let Some(digest) = metadata.get("operator_digest").and_then(|v| v.as_str()) {
        if digest != op.digest() {
            bail!(
                "checkpoint {} was trained with a different operator (digest {} vs {})",
                path.display(),
                digest,
                op.digest()
            );
        }
    }
    Ok(params)
}

fn run_eval(ctx: &RunContext) -> Result<()> {
    let op = ctx.operator()?;
    let params = load_params(ctx, &op)?;
    let test = load_dataset_for(&ctx.path("test.bin"), &op)
        .with_context(|| format!("loading {} (run `fpn gen-data` first)", ctx.path("test.bin").display()))?;
    let (rows, lambdas) = eval_nmse(
        &op,
        &params,
        &test.set.gt,
        &ctx.config.eval,
        ctx.seed,
        ctx.deterministic,
    )?;
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                fmt_f(r.snr_db),
                r.method,
                fmt_f(r.nmse_db),
                fmt_f(r.mean_iterations),
                fmt_t(r.wall_time)
            )
        })
        .collect();
    write_csv(
        &ctx.path("eval.csv"),
        "snr_db,method,nmse_db,mean_iterations,wall_time",
        &csv_rows,
    )?;
    for r in &rows {
        println!(
            "snr {:>5.1} dB  {:<10} nmse {:+8.2} dB  iters {:6.2}",
            r.snr_db, r.method, r.nmse_db, r.mean_iterations
        );
    }
    ctx.write_manifest(
        "eval",
        json!({
            "samples_per_snr": ctx.config.eval.samples_per_snr,
            "fista_lambda_per_snr": lambdas,
        }),
    )?;
    Ok(())
}

fn run_trace(ctx: &RunContext, snr_db: f64, samples: Option<usize>) -> Result<()> {
    let op = ctx.operator()?;
    let params = load_params(ctx, &op)?;
    let test = load_dataset_for(&ctx.path("test.bin"), &op)
        .with_context(|| format!("loading {} (run `fpn gen-data` first)", ctx.path("test.bin").display()))?;
    let count = samples.unwrap_or_else(|| ctx.config.eval.samples_per_snr.min(64));
    let set = observe_subset(
        ctx.seed + 2000,
        &op,
        &test.set.gt,
        count,
        &NoiseSpec::Awgn { snr_db },
        snr_db,
    )?;
    let rows = convergence_trace(&op, &params, &set, &ctx.config.eval)?;
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{}",
                r.method,
                r.iteration,
                fmt_f(r.nmse_db),
                format_args!("{:.9e}", r.residual)
            )
        })
        .collect();
    write_csv(
        &ctx.path("trace.csv"),
        "method,iteration,nmse_db,residual",
        &csv_rows,
    )?;
    println!("wrote {} ({} rows)", ctx.path("trace.csv").display(), rows.len());
    ctx.write_manifest("trace", json!({ "snr_db": snr_db, "samples": set.len() }))?;
    Ok(())
}

fn run_fig2(ctx: &RunContext) -> Result<()> {
    let geometry = ctx.geometry()?;
    let (rows, d_ray) = farfield_error_curve(
        &geometry,
        &ctx.config.label,
        &ctx.config.distance_sweep.distance_factors,
        ctx.config.distance_sweep.angle_samples,
        ctx.seed,
    )?;
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{}", r.config, fmt_f(r.r), fmt_f(r.error_db)))
        .collect();
    write_csv(&ctx.path("fig2.csv"), "config,r,error", &csv_rows)?;
    println!(
        "rayleigh distance {:.4} m; wrote {}",
        d_ray,
        ctx.path("fig2.csv").display()
    );
    ctx.write_manifest("fig2", json!({ "d_rayleigh_m": d_ray }))?;
    Ok(())
}

fn run_ood(ctx: &RunContext) -> Result<()> {
    let op = ctx.operator()?;
    let params = load_params(ctx, &op)?;
    let rows = ood_suite(&ctx.config, &op, &params, ctx.seed)?;
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{}",
                r.shift,
                fmt_f(r.in_dist_nmse_db),
                fmt_f(r.ood_nmse_db),
                r.ood_selfadapt_nmse_db.map(fmt_f).unwrap_or_default()
            )
        })
        .collect();
    write_csv(
        &ctx.path("ood.csv"),
        "shift,in_dist_nmse_db,ood_nmse_db,ood_selfadapt_nmse_db",
        &csv_rows,
    )?;
    for r in &rows {
        println!(
            "{:<26} in-dist {:+7.2} dB  ood {:+7.2} dB{}",
            r.shift,
            r.in_dist_nmse_db,
            r.ood_nmse_db,
            r.ood_selfadapt_nmse_db
                .map(|v| format!("  adapted {v:+.2} dB"))
                .unwrap_or_default()
        );
    }
    ctx.write_manifest(
        "ood",
        json!({ "samples_per_shift": ctx.config.eval.samples_per_snr }),
    )?;
    Ok(())
}

fn run_wideband(ctx: &RunContext, snr_db: f64) -> Result<()> {
    let op = ctx.operator()?;
    let params = load_params(ctx, &op)?;
    let count = ctx.config.eval.samples_per_snr;
    let rows = wideband_eval(
        &op,
        &params,
        &ctx.config,
        snr_db,
        count,
        ctx.seed + 3000,
        ctx.deterministic,
    )?;
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{}",
                r.k,
                format_args!("{:.6e}", r.f_k),
                r.method,
                fmt_f(r.nmse_db)
            )
        })
        .collect();
    write_csv(&ctx.path("wideband.csv"), "k,f_k,method,nmse_db", &csv_rows)?;
    println!(
        "wrote {} ({} subcarriers)",
        ctx.path("wideband.csv").display(),
        ctx.config.wideband.k_subcarriers
    );
    ctx.write_manifest(
        "wideband",
        json!({ "snr_db": snr_db, "samples": count, "k": ctx.config.wideband.k_subcarriers }),
    )?;
    Ok(())
}

fn run_adapt(ctx: &RunContext, target_config: Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let op = ctx.operator()?;
    let params = load_params(ctx, &op)?;
    let target = match &target_config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading target config {}", path.display()))?,
        None => ctx.config.clone(),
    };
    let mut adapt = ctx.config.adapt;
    if let Some(steps) = steps {
        adapt.steps = steps;
    }
    let report = adapt_run(&params, &target, &adapt, &ctx.config.eval, ctx.seed)?;
    write_csv(
        &ctx.path("adapt.csv"),
        "stage,nmse_db",
        &[
            format!("before,{}", fmt_f(report.before_nmse_db)),
            format!("after,{}", fmt_f(report.after_nmse_db)),
        ],
    )?;
    let adapted_path = ctx.path("adapted.bin");
    save_checkpoint(
        &adapted_path,
        &report.adapted,
        &json!({
            "label": target.label,
            "seed": ctx.seed,
            "adapted_from": ctx.path("checkpoint.bin"),
            "steps": report.steps,
        }),
    )?;
    println!(
        "before {:+.2} dB, after {:+.2} dB ({} steps); adapted checkpoint {}",
        report.before_nmse_db,
        report.after_nmse_db,
        report.steps,
        adapted_path.display()
    );
    ctx.write_manifest(
        "adapt",
        json!({
            "steps": report.steps,
            "before_nmse_db": report.before_nmse_db,
            "after_nmse_db": report.after_nmse_db,
            "target_label": target.label,
        }),
    )?;
    Ok(())
}
