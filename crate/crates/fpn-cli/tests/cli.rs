//! End-to-end runs of the `fpn` binary on a miniature configuration: every
//! subcommand in sequence inside one scratch directory, byte-identical
//! reruns under --deterministic, and the error paths for missing inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Miniature setup: a single 2 x 2 subarray, 3 pilot slots, a few dozen
/// samples, two training epochs. Small enough that the whole pipeline runs
/// in seconds.
const TINY_CONFIG: &str = r#"
label = "tiny"
seed = 23

[geometry]
subarrays = 1
elements_per_subarray = 4
element_spacing = 5e-4
subarray_spacing = 8e-3
carrier_hz = 3e11

[pilot]
num_slots = 3
resolution = "one_bit"

[channel]
num_paths = 3

[dataset]
train_count = 48
val_count = 16
test_count = 16

[train]
channels = 8
blocks = 1
epochs = 2
batch_size = 16
solve_max_iterations = 8
lipschitz_anchors = 8

[eval]
snr_grid_db = [10.0]
max_iterations = 12
samples_per_snr = 8
fista_lambdas = [1e-3, 1e-2]
fista_max_iterations = 60
omp_atoms = 4
oamp_iterations = 8

[adapt]
steps = 1
samples = 8

[wideband]
k_subcarriers = 4

[distance_sweep]
distance_factors = [0.1, 1.0, 10.0]
angle_samples = 8
"#;

fn fpn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary should launch")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = fpn(dir, args);
    assert!(
        out.status.success(),
        "`fpn {}` failed:\nstdout: {}\nstderr: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY_CONFIG).expect("write config");
    (dir, config)
}

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend_from_slice(extra);
    v
}

fn read_csv(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("read {path:?}: {e}"));
    let mut lines = text.lines();
    let header = lines.next().expect("csv header").to_string();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

#[test]
fn pipeline_runs_every_subcommand() {
    let (dir, config) = setup();
    let cfg = config.to_str().unwrap();
    let base = ["--config", cfg, "--out", "out", "--deterministic"];
    let out = dir.path().join("out");

    run_ok(dir.path(), &with(&base, &["gen-data"]));
    for name in ["train.bin", "val.bin", "test.bin", "gen-data_manifest.json"] {
        assert!(out.join(name).exists(), "gen-data should write {name}");
    }

    let stdout = run_ok(dir.path(), &with(&base, &["train"]));
    assert!(stdout.contains("best epoch"), "train should report the best epoch");
    let (header, rows) = read_csv(&out.join("train_log.csv"));
    assert_eq!(
        header,
        "epoch,train_loss,val_nmae,val_nmse_db,lipschitz,safeguard_factor,learning_rate,val_mean_iterations,val_converged_fraction"
    );
    assert_eq!(rows.len(), 2, "one log row per epoch");
    assert!(out.join("checkpoint.bin").exists());

    run_ok(dir.path(), &with(&base, &["eval"]));
    let (header, rows) = read_csv(&out.join("eval.csv"));
    assert_eq!(header, "snr_db,method,nmse_db,mean_iterations,wall_time");
    let methods: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    for method in ["fpn_oamp", "ls", "omp", "fista", "oamp_bg", "oracle"] {
        assert!(methods.contains(&method), "eval should report {method}");
    }
    for row in &rows {
        let nmse: f64 = row[2].parse().expect("numeric nmse");
        assert!(nmse.is_finite());
        assert_eq!(row[4], "0.000000000", "deterministic runs zero the wall time");
        if row[1] == "oracle" {
            assert_eq!(nmse, -200.0, "exact recovery reports the floor value");
        }
    }

    run_ok(dir.path(), &with(&base, &["trace", "--samples", "4"]));
    let (header, rows) = read_csv(&out.join("trace.csv"));
    assert_eq!(header, "method,iteration,nmse_db,residual");
    for method in ["fpn_oamp", "fista", "oamp_bg"] {
        let iters: Vec<usize> = rows
            .iter()
            .filter(|r| r[0] == method)
            .map(|r| r[1].parse().expect("iteration index"))
            .collect();
        assert!(!iters.is_empty(), "trace should cover {method}");
        assert_eq!(iters[0], 1, "{method} trace starts after one application");
        assert!(iters.windows(2).all(|w| w[1] == w[0] + 1));
        for row in rows.iter().filter(|r| r[0] == method) {
            let residual: f64 = row[3].parse().expect("numeric residual");
            assert!(residual >= 0.0);
        }
    }

    run_ok(dir.path(), &with(&base, &["fig2"]));
    let (header, rows) = read_csv(&out.join("fig2.csv"));
    assert_eq!(header, "config,r,error");
    assert_eq!(rows.len(), 3, "one row per swept distance");
    let errors: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(
        errors.windows(2).all(|w| w[1] < w[0]),
        "far-field mismatch should shrink with distance: {errors:?}"
    );

    run_ok(dir.path(), &with(&base, &["wideband", "--snr", "10"]));
    let (header, rows) = read_csv(&out.join("wideband.csv"));
    assert_eq!(header, "k,f_k,method,nmse_db");
    assert_eq!(rows.len(), 4 * 2, "fpn and ls rows for each subcarrier");
    let mean_f: f64 =
        rows.iter().map(|r| r[1].parse::<f64>().unwrap()).sum::<f64>() / rows.len() as f64;
    assert!((mean_f - 3e11).abs() < 1e6, "subcarriers center on the carrier");

    run_ok(dir.path(), &with(&base, &["ood"]));
    let (header, rows) = read_csv(&out.join("ood.csv"));
    assert_eq!(header, "shift,in_dist_nmse_db,ood_nmse_db,ood_selfadapt_nmse_db");
    let shifts: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    for shift in [
        "snr_low_minus5db",
        "snr_high_25db",
        "impulsive_alpha_1p8",
        "los_blockage",
        "paths_3",
        "paths_7",
        "near_field_only",
        "far_field_only",
        "element_spacing_1p25x",
        "subarray_spacing_1p25x",
        "gain_miscalibration",
        "rho_70",
        "rho_30",
        "rho_10",
        "combiner_resolution",
        "fresh_operator",
    ] {
        assert!(shifts.contains(&shift), "ood suite should cover {shift}");
    }
    for row in &rows {
        let adapted = !row[3].is_empty();
        let expects_adapt = row[0].starts_with("rho_") || row[0] == "combiner_resolution";
        assert_eq!(
            adapted, expects_adapt,
            "self-adaptation column only for measurement shifts: {}",
            row[0]
        );
    }

    run_ok(dir.path(), &with(&base, &["adapt", "--steps", "1"]));
    let (header, rows) = read_csv(&out.join("adapt.csv"));
    assert_eq!(header, "stage,nmse_db");
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "before");
    assert_eq!(rows[1][0], "after");
    assert!(out.join("adapted.bin").exists());

    // Deterministic manifests must make no reference to the clock.
    for name in ["eval_manifest.json", "train_manifest.json", "ood_manifest.json"] {
        let text = fs::read_to_string(out.join(name)).expect("manifest");
        assert!(
            !text.contains("unix_time_s"),
            "{name} should omit timestamps under --deterministic"
        );
    }
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let (dir, config) = setup();
    let cfg = config.to_str().unwrap();
    for out in ["a", "b"] {
        let base = ["--config", cfg, "--out", out, "--deterministic"];
        run_ok(dir.path(), &with(&base, &["gen-data"]));
        run_ok(dir.path(), &with(&base, &["train"]));
        run_ok(dir.path(), &with(&base, &["eval"]));
    }
    for name in [
        "train.bin",
        "val.bin",
        "test.bin",
        "checkpoint.bin",
        "train_log.csv",
        "eval.csv",
        "eval_manifest.json",
    ] {
        let a = fs::read(dir.path().join("a").join(name)).expect("first run output");
        let b = fs::read(dir.path().join("b").join(name)).expect("second run output");
        assert_eq!(a, b, "{name} should be byte-identical across reruns");
    }
}

#[test]
fn eval_without_checkpoint_names_the_missing_file() {
    let (dir, config) = setup();
    let cfg = config.to_str().unwrap();
    run_ok(dir.path(), &["--config", cfg, "--out", "out", "gen-data"]);
    let out = fpn(dir.path(), &["--config", cfg, "--out", "out", "eval"]);
    assert!(!out.status.success(), "eval without a checkpoint should fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("checkpoint"), "stderr: {stderr}");
    assert!(stderr.contains("fpn train"), "stderr: {stderr}");
}

#[test]
fn train_without_datasets_points_at_gen_data() {
    let (dir, config) = setup();
    let cfg = config.to_str().unwrap();
    let out = fpn(dir.path(), &["--config", cfg, "--out", "out", "train"]);
    assert!(!out.status.success(), "train without datasets should fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gen-data"), "stderr: {stderr}");
}

#[test]
fn rejects_config_with_invalid_geometry() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[geometry]\nsubarrays = 0\n").expect("write config");
    let out = fpn(
        dir.path(),
        &["--config", config.to_str().unwrap(), "--out", "out", "gen-data"],
    );
    assert!(!out.status.success(), "zero subarrays should be rejected");
}
