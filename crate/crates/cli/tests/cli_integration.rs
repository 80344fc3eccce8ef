//! End-to-end tests of the four subcommands through the real binary and
//! the library entry points: output schemas, determinism, exit codes, and
//! the documented reporting behaviors.

use std::fs;
use std::path::Path;
use std::process::Command;

use rootsa_cli::commands::{cmd_estimate, cmd_run, cmd_sweep};
use rootsa_cli::CmdOptions;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rootsa"))
}

fn write_config(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, contents).unwrap();
    path
}

fn opts(config: &Path, out: &Path) -> CmdOptions {
    CmdOptions {
        config: config.to_path_buf(),
        out: Some(out.to_path_buf()),
        workers: 1,
        seed_offset: 0,
        dry_run: false,
    }
}

const SMALL_MDP: &str = r#"
[experiment]
algorithm = "rootsa"
horizons = [512]
seeds = [0]
delta = 0.1

[problem]
kind = "mdp"

[problem.generator]
seed = 11
states = 4
actions = 2
discount = 0.7

[problem.noise]
kind = "rademacher"
amplitude = 1.0
"#;

#[test]
fn run_writes_one_row_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.toml", SMALL_MDP);
    let out = dir.path().join("out");
    cmd_run(&opts(&config, &out)).unwrap();
    let csv = fs::read_to_string(out.join("records.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "header plus exactly one data row");
    assert!(lines[0].starts_with("problem,algorithm,seed,n,alpha,burnin"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["command"], "run");
    // The resolved tuning echoes exact alpha and burn-in values.
    assert!(summary["resolved_tuning"][0]["alpha"].as_f64().unwrap() > 0.0);
    assert!(summary["resolved_tuning"][0]["burnin"].as_u64().unwrap() >= 2);
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.toml", SMALL_MDP);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    cmd_run(&opts(&config, &out1)).unwrap();
    cmd_run(&opts(&config, &out2)).unwrap();
    let a = fs::read(out1.join("records.csv")).unwrap();
    let b = fs::read(out2.join("records.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_noise_run_matches_geometric_formula() {
    // Deterministic kernel + no noise + constant-shift start: the final
    // defect equals (1 - alpha (1 - gamma))^(n - B0) * initial defect.
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.toml",
        r#"
[experiment]
algorithm = "rootsa"
horizons = [400]
seeds = [0]
delta = 0.1
theta0 = { shift = 5.0 }

[tuning]
alpha = 0.1
burnin = 8

[problem]
kind = "mdp"

[problem.generator]
seed = 5
states = 4
actions = 2
discount = 0.8
deterministic = true

[problem.noise]
kind = "none"
"#,
    );
    let out = dir.path().join("out");
    cmd_run(&opts(&config, &out)).unwrap();
    let csv = fs::read_to_string(out.join("records.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let final_defect: f64 = row.split(',').nth(8).unwrap().parse().unwrap();
    // Initial defect of theta* + c 1 is (1 - gamma) c.
    let d0 = 0.2 * 5.0;
    let expected = (1.0f64 - 0.1 * 0.2).powi(400 - 8) * d0;
    assert!(
        (final_defect - expected).abs() <= 1e-9 * expected,
        "got {final_defect}, expected {expected}"
    );
}

#[test]
fn sweep_dry_run_replays_injected_series() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.toml",
        r#"
[experiment]
algorithm = "rootsa"
horizons = [1024, 4096, 16384]
seeds = [0, 1, 2, 3, 4]
delta = 0.1

[problem]
kind = "mdp"

[problem.generator]
seed = 1
states = 2
actions = 1
discount = 0.5

[dryrun]
series = [[1024, 0.03125], [4096, 0.015625], [16384, 0.0078125]]
"#,
    );
    let out = dir.path().join("out");
    let mut o = opts(&config, &out);
    o.dry_run = true;
    cmd_sweep(&o).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let slope = summary["report"]["defect_slope"].as_f64().unwrap();
    assert!((slope + 0.5).abs() <= 1e-12, "dry-run slope {slope}");
}

#[test]
fn sweep_preconditions_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let two_horizons = SMALL_MDP.replace("horizons = [512]", "horizons = [512, 1024]");
    let config = write_config(dir.path(), "config.toml", &two_horizons);
    let status = binary()
        .args(["sweep", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Three horizons but only one seed still fails the precondition.
    let few_seeds = SMALL_MDP.replace("horizons = [512]", "horizons = [512, 1024, 2048]");
    let config = write_config(dir.path(), "config2.toml", &few_seeds);
    let status = binary()
        .args(["sweep", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out2"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn sweep_output_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let sweep_config = r#"
[experiment]
algorithm = "rootsa"
horizons = [256, 512, 1024]
seeds = [0, 1, 2, 3, 4]
delta = 0.1

[problem]
kind = "mdp"

[problem.generator]
seed = 11
states = 4
actions = 2
discount = 0.7

[problem.noise]
kind = "rademacher"
amplitude = 1.0
"#;
    let config = write_config(dir.path(), "config.toml", sweep_config);
    for workers in ["1", "4"] {
        let status = binary()
            .args(["sweep", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(format!("w{workers}")))
            .args(["--workers", workers])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(dir.path().join("w1/records.csv")).unwrap();
    let b = fs::read(dir.path().join("w4/records.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_offset_changes_draws() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.toml", SMALL_MDP);
    for (name, offset) in [("a", "0"), ("b", "1000")] {
        let status = binary()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(name))
            .args(["--seed-offset", offset])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(dir.path().join("a/records.csv")).unwrap();
    let b = fs::read(dir.path().join("b/records.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn config_parse_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.toml",
        "[experiment]\nhorizonz = [512]\n",
    );
    let output = binary()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("config error"), "stderr: {stderr}");

    // Missing file is also a config error.
    let status = binary()
        .args(["run", "--config"])
        .arg(dir.path().join("nope.toml"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn audit_passes_well_formed_mdp() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.toml", SMALL_MDP);
    let out = dir.path().join("out");
    let status = binary()
        .args(["audit", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = fs::read_to_string(out.join("audit.txt")).unwrap();
    assert!(text.contains("[check sup_contraction]"));
    assert!(!text.contains("status = fail"));
}

#[test]
fn audit_flags_substochastic_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.toml",
        r#"
[experiment]
horizons = [512]
seeds = [0]

[problem]
kind = "mdp"

[problem.inline]
kernel_mdp = [[[0.5, 0.4], [0.0, 1.0]]]
rewards = [[1.0], [0.0]]
discount = 0.5
"#,
    );
    let out = dir.path().join("out");
    let status = binary()
        .args(["audit", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    let text = fs::read_to_string(out.join("audit.txt")).unwrap();
    assert!(text.contains("[check kernel_stochasticity]"));
    assert!(text.contains("status = fail"));
}

#[test]
fn audit_reports_improper_ssp() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.toml",
        r#"
[experiment]
horizons = [512]
seeds = [0]

[problem]
kind = "ssp"

[problem.inline]
kernel_mdp = [[[1.0, 0.0], [0.0, 1.0]]]
rewards = [[0.0], [1.0]]
"#,
    );
    let out = dir.path().join("out");
    let status = binary()
        .args(["audit", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    let text = fs::read_to_string(out.join("audit.txt")).unwrap();
    assert!(text.contains("[check ssp_weights_convergence]"));
    assert!(text.contains("status = fail"));
}

const SCALAR_TOY: &str = r#"
[experiment]
algorithm = "rootsa"
horizons = [1024]
seeds = [0]
delta = 0.1

[tuning]
alpha = 0.01
burnin = 64

[problem]
kind = "mdp"

[problem.inline]
kernel_mdp = [[[1.0]]]
rewards = [[0.0]]
discount = 0.5

[problem.noise]
kind = "rademacher"
amplitude = 1.0

[estimate]
cov_samples = 40000
mc_draws = 20000
rate_horizons = [1024]
"#;

#[test]
fn estimate_scalar_toy_matches_closed_form() {
    // One self-looping state, gamma = 0.5, unit Rademacher noise: the noise
    // covariance at the fixed point is exactly 1 and the resolvent gain is
    // 2, so the predicted error at n is (1/sqrt(n)) * 2 * sqrt(2/pi).
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.toml", SCALAR_TOY);
    let out = dir.path().join("out");
    cmd_estimate(&opts(&config, &out)).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let report = &summary["report"];
    let predicted = report["predictions"][0]["predicted_error"].as_f64().unwrap();
    let closed_form = 2.0 * (2.0 / std::f64::consts::PI).sqrt() / 1024f64.sqrt();
    let se = report["resolvent"]["std_error"].as_f64().unwrap() / 1024f64.sqrt();
    assert!(
        (predicted - closed_form).abs() <= 4.0 * se + 1e-4,
        "predicted {predicted} vs closed form {closed_form}"
    );
    // The rate fixed point solves and sits inside its band.
    assert!(report["predictions"][0]["rate_fixed_point"].as_f64().unwrap() > 0.0);
}

#[test]
fn estimate_zero_noise_predicts_zero() {
    let dir = tempfile::tempdir().unwrap();
    let toml = SCALAR_TOY.replace("kind = \"rademacher\"", "kind = \"none\"");
    let config = write_config(dir.path(), "config.toml", &toml);
    let out = dir.path().join("out");
    cmd_estimate(&opts(&config, &out)).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let report = &summary["report"];
    assert_eq!(report["wbar"].as_f64().unwrap(), 0.0);
    assert_eq!(report["nu"].as_f64().unwrap(), 0.0);
    assert_eq!(report["predictions"][0]["predicted_error"].as_f64().unwrap(), 0.0);
}

#[test]
fn estimate_joins_measured_errors_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    // First produce run data at the same horizon.
    let config = write_config(dir.path(), "runs.toml", SCALAR_TOY);
    let runs_out = dir.path().join("runs");
    cmd_run(&opts(&config, &runs_out)).unwrap();
    let runs_csv = runs_out.join("records.csv");
    let estimate_toml = format!(
        "{SCALAR_TOY}runs_csv = \"{}\"\n",
        runs_csv.display().to_string().replace('\\', "/")
    );
    let config = write_config(dir.path(), "estimate.toml", &estimate_toml);
    let out = dir.path().join("est");
    cmd_estimate(&opts(&config, &out)).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let prediction = &summary["report"]["predictions"][0];
    assert!(prediction["measured_rms_error"].as_f64().unwrap() > 0.0);
    assert!(prediction["measured_over_predicted"].as_f64().unwrap() > 0.0);
}

#[test]
fn estimate_supports_final_iterate_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let toml = SCALAR_TOY.replace(
        "[estimate]",
        "[estimate]\nat = \"final-iterate\"",
    );
    let config = write_config(dir.path(), "config.toml", &toml);
    let out = dir.path().join("out");
    cmd_estimate(&opts(&config, &out)).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    // Near the fixed point the plug-in covariance matches the certified
    // one, so wbar stays near the half-normal mean.
    let wbar = summary["report"]["wbar"].as_f64().unwrap();
    assert!((wbar - 0.7978845608028654).abs() < 0.05, "wbar {wbar}");
}

#[test]
fn estimate_on_games_skips_resolvent() {
    // No local-linearity construction for a non-degenerate column player:
    // the report carries the Gaussian complexity but no resolvent or rate
    // sections.
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.toml",
        r#"
[experiment]
algorithm = "rootsa"
horizons = [1024]
seeds = [0]
delta = 0.1

[problem]
kind = "game"

[problem.generator]
seed = 3
states = 3
actions = 2
actions2 = 2
discount = 0.6

[problem.noise]
kind = "rademacher"
amplitude = 1.0

[estimate]
cov_samples = 5000
mc_draws = 2000
rate_horizons = [1024]
"#,
    );
    let out = dir.path().join("out");
    cmd_estimate(&opts(&config, &out)).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let report = &summary["report"];
    assert!(report["wbar"].as_f64().unwrap() > 0.0);
    assert!(report["resolvent"].is_null());
    assert!(report["predictions"][0]["rate_fixed_point"].is_null());
}

#[test]
fn explicit_weighted_norm_requires_ssp() {
    let dir = tempfile::tempdir().unwrap();
    let toml = SMALL_MDP.replace("delta = 0.1", "delta = 0.1\nnorm = \"weighted\"");
    let config = write_config(dir.path(), "config.toml", &toml);
    let status = binary()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn divergence_is_recorded_not_fatal() {
    // Starting beyond the divergence guard trips it on the first step; the
    // run must complete with the divergence flagged in the record rather
    // than failing the batch.
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.toml",
        r#"
[experiment]
algorithm = "vanilla"
horizons = [4096]
seeds = [0]
delta = 0.1
theta0 = { shift = 2e12 }

[tuning]
alpha = 1.0
burnin = 4

[problem]
kind = "mdp"

[problem.generator]
seed = 11
states = 4
actions = 2
discount = 0.99

[problem.noise]
kind = "uniform"
amplitude = 100.0
"#,
    );
    let out = dir.path().join("out");
    cmd_run(&opts(&config, &out)).unwrap();
    let csv = fs::read_to_string(out.join("records.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let diverged = row.split(',').nth(7).unwrap();
    assert_eq!(diverged, "true");
}
