//! End-to-end exercises of the `tailcast` binary: stage outputs, exit
//! codes, and the resume contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_tailcast")
}

fn base_config(out_dir: &Path) -> String {
    format!(
        r#"
[dataset.synth]
m = 3000
dt = 0.1
ou_theta = 1.0
ou_sigma = 1.4142135623730951
trigger_level = 2.4
burst_amp = 3.0
burst_width = 3.0
precursor_lead_steps = 15
noise_std = 0.5
seed = 11

[model]
history_len = 10
pre_dense = [2]
recurrent_units = 3
post_dense = []
activation = "tanh"

[train]
lr = 0.001
batch_size = 64
max_epochs = 3
patience = 5
noise_frac = 0.1

[experiment]
losses = ["mse", "re"]
lead_times = [2]
ensemble = 2
seeds = [7, 8]

[metrics]
n_b = 40
omega_points = 6
eps_points = 6
omega_min = 0.02
omega_max = 0.3

[output]
dir = "{}"
"#,
        out_dir.display()
    )
}

fn run(args: &[&str]) -> Output {
    Command::new(binary())
        .args(args)
        .output()
        .expect("failed to spawn tailcast")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

struct Workspace {
    _dir: tempfile::TempDir,
    config_path: PathBuf,
    out_dir: PathBuf,
}

fn setup() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, base_config(&out_dir)).unwrap();
    Workspace {
        _dir: dir,
        config_path,
        out_dir,
    }
}

#[test]
fn synth_writes_deterministic_csv_and_manifest() {
    let ws = setup();
    let cfg = ws.config_path.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);
    let csv = ws.out_dir.join("data/synth.csv");
    assert!(csv.exists());
    assert!(ws.out_dir.join("data/synth_manifest.toml").exists());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3001); // header + m rows
    assert!(text.starts_with("t,latent_obs,latent_diff,baseline_noise,target\n"));

    let first = std::fs::read(&csv).unwrap();
    run_ok(&["synth", "--config", cfg]);
    let second = std::fs::read(&csv).unwrap();
    assert_eq!(first, second, "rerun must produce byte-identical CSV");
}

#[test]
fn synth_rejects_invalid_parameters_with_exit_2() {
    let ws = setup();
    let text = std::fs::read_to_string(&ws.config_path)
        .unwrap()
        .replace("dt = 0.1", "dt = 0.0");
    std::fs::write(&ws.config_path, text).unwrap();
    let out = run(&["synth", "--config", ws.config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn fit_density_is_reproducible_and_reports_diagnostics() {
    let ws = setup();
    let cfg = ws.config_path.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);
    let stdout = run_ok(&["fit-density", "--config", cfg]);
    assert!(stdout.contains("lengthscale="), "diagnostics: {stdout}");
    assert!(stdout.contains("sigma2="));
    let density = ws.out_dir.join("density/density.txt");
    assert!(density.exists());
    assert!(ws.out_dir.join("density/normalization.toml").exists());
    let first = std::fs::read(&density).unwrap();
    run_ok(&["fit-density", "--config", cfg]);
    let second = std::fs::read(&density).unwrap();
    assert_eq!(first, second, "rerun must produce bit-identical density");
}

#[test]
fn fit_density_degenerate_target_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("flat.csv");
    let mut text = String::from("t,x,target\n");
    for i in 0..600 {
        text.push_str(&format!("{},{},1.0\n", i as f64 * 0.5, (i % 7) as f64));
    }
    std::fs::write(&csv_path, text).unwrap();
    let out_dir = dir.path().join("out");
    let config = format!(
        r#"
[dataset]
csv = "{}"

[dataset.schema]
time = "t"
target = "target"
inputs = ["x"]

[experiment]
losses = ["mse"]
lead_times = [2]
ensemble = 1
seeds = [1]

[output]
dir = "{}"
"#,
        csv_path.display(),
        out_dir.display()
    );
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, config).unwrap();
    let out = run(&["fit-density", "--config", config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_resumes_by_skipping_completed_members() {
    let ws = setup();
    let cfg = ws.config_path.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);
    run_ok(&["fit-density", "--config", cfg]);
    let stdout = run_ok(&["train", "--config", cfg, "--workers", "2"]);
    assert!(stdout.contains("trained 4 member(s)"), "{stdout}");
    for loss in ["mse", "re"] {
        for seed in [7, 8] {
            assert!(ws
                .out_dir
                .join(format!("models/{loss}_tau2_seed{seed}.model"))
                .exists());
            assert!(ws
                .out_dir
                .join(format!("logs/{loss}_tau2_seed{seed}_epochs.csv"))
                .exists());
        }
    }
    // deleting one model file retrains only that member
    std::fs::remove_file(ws.out_dir.join("models/re_tau2_seed8.model")).unwrap();
    let stdout = run_ok(&["train", "--config", cfg, "--workers", "1", "--resume"]);
    assert!(
        stdout.contains("trained 1 member(s), skipped 3"),
        "{stdout}"
    );
}

#[test]
fn train_refuses_mismatched_manifest_with_exit_4() {
    let ws = setup();
    let cfg = ws.config_path.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);
    run_ok(&["fit-density", "--config", cfg]);
    run_ok(&["train", "--config", cfg, "--workers", "2"]);
    let text = std::fs::read_to_string(&ws.config_path)
        .unwrap()
        .replace("lr = 0.001", "lr = 0.002");
    std::fs::write(&ws.config_path, text).unwrap();
    let out = run(&["train", "--config", cfg]);
    assert_eq!(exit_code(&out), 4);
}

#[test]
fn evaluate_without_models_exits_5() {
    let ws = setup();
    let cfg = ws.config_path.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);
    run_ok(&["fit-density", "--config", cfg]);
    let out = run(&["evaluate", "--config", cfg]);
    assert_eq!(exit_code(&out), 5);
}

#[test]
fn evaluate_perfect_mode_reports_ideal_scores() {
    let ws = setup();
    let cfg = ws.config_path.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);
    run_ok(&["fit-density", "--config", cfg]);
    run_ok(&["evaluate", "--config", cfg, "--perfect"]);

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(ws.out_dir.join("metrics/report_mse_tau2_seed7.json")).unwrap(),
    )
    .unwrap();
    assert!(report["d"].as_f64().unwrap() < 1e-10);
    for p in report["alpha_curve"].as_array().unwrap() {
        assert!((p["value"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
    for p in report["f1_curve"].as_array().unwrap() {
        assert!((p["value"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
    let d_summary = std::fs::read_to_string(ws.out_dir.join("metrics/d_summary.csv")).unwrap();
    assert!(d_summary.starts_with("loss,tau,d_mean,d_p10,d_p90\n"));
    for line in d_summary.lines().skip(1) {
        let mean: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(mean < 1e-10);
    }
}

#[test]
fn evaluate_curves_parse_back_with_declared_grids() {
    let ws = setup();
    let cfg = ws.config_path.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);
    run_ok(&["fit-density", "--config", cfg]);
    // single member so aggregates must equal that member exactly
    let text = std::fs::read_to_string(&ws.config_path)
        .unwrap()
        .replace("ensemble = 2", "ensemble = 1")
        .replace("losses = [\"mse\", \"re\"]", "losses = [\"mse\"]");
    std::fs::write(&ws.config_path, text).unwrap();
    run_ok(&["train", "--config", cfg]);
    run_ok(&["evaluate", "--config", cfg]);

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(ws.out_dir.join("metrics/report_mse_tau2_seed7.json")).unwrap(),
    )
    .unwrap();
    let alpha_csv = std::fs::read_to_string(ws.out_dir.join("metrics/alpha_mse_tau2.csv")).unwrap();
    let mut lines = alpha_csv.lines();
    assert_eq!(lines.next().unwrap(), "omega,alpha_mean,alpha_p10,alpha_p90");
    let curve = report["alpha_curve"].as_array().unwrap();
    let omega_grid = report["omega_grid"].as_array().unwrap();
    let mut n_rows = 0;
    for (line, point) in lines.zip(curve) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 4);
        // grid echoed bit-exactly, aggregate of one member equals the member
        assert_eq!(cells[0], point["omega"].as_f64().unwrap());
        let v = point["value"].as_f64().unwrap();
        assert_eq!(cells[1], v);
        assert_eq!(cells[2], v);
        assert_eq!(cells[3], v);
        n_rows += 1;
    }
    assert_eq!(n_rows, omega_grid.len());
}
