//! CLI and command-level behavior: error paths, exit codes, report
//! idempotence, and cross-command consistency.

use std::path::PathBuf;
use std::process::Command;

use ape_harness::{
    cmd_ablate_ood, cmd_eval, cmd_generate, cmd_report, cmd_train, ExperimentConfig, RunPaths,
};

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ape-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig::parse(
        "n_train_scenes = 96\nn_eval_scenes = 64\nepochs = 2\nseeds = 4\nt_future = 8\nood_ratios = 0.0, 0.5, 1.0\n",
    )
    .unwrap()
}

#[test]
fn eval_without_checkpoint_fails_with_clear_error() {
    let dir = temp_dir("nockpt");
    let config = small_config();
    let paths = RunPaths::new(&dir);
    let err = cmd_eval(&config, &paths, 4).unwrap_err();
    assert!(err.to_string().contains("missing checkpoint"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn report_on_empty_run_dir_lists_missing_files() {
    let dir = temp_dir("emptyreport");
    let err = cmd_report(&RunPaths::new(&dir)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("missing report inputs"));
    assert!(msg.contains("eval.csv"));
    assert!(msg.contains("epochs.csv"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn report_regeneration_is_byte_identical() {
    let dir = temp_dir("reportidem");
    let config = small_config();
    let paths = RunPaths::new(&dir);
    cmd_train(&config, &paths, 4).unwrap();
    cmd_eval(&config, &paths, 4).unwrap();
    cmd_ablate_ood(&config, &paths, 4).unwrap();

    cmd_report(&paths).unwrap();
    let first = std::fs::read(paths.report()).unwrap();
    let first_curve = std::fs::read(paths.curves_dir().join("ood_gain.csv")).unwrap();
    cmd_report(&paths).unwrap();
    assert_eq!(std::fs::read(paths.report()).unwrap(), first);
    assert_eq!(
        std::fs::read(paths.curves_dir().join("ood_gain.csv")).unwrap(),
        first_curve
    );

    // Row count in the table equals methods x datasets evaluated.
    let text = String::from_utf8(first).unwrap();
    let rows: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("rows: "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(rows, config.router_kinds.len() + 1);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn full_ood_sweep_point_matches_cross_dist_eval() {
    // The ratio-1.0 mixture is the cross-distribution eval set itself, so the
    // sweep's last gain must equal the gain recomputed from eval.csv rows.
    let dir = temp_dir("consistency");
    let config = small_config();
    let paths = RunPaths::new(&dir);
    cmd_train(&config, &paths, 4).unwrap();
    let rows = cmd_eval(&config, &paths, 4).unwrap();
    let curve = cmd_ablate_ood(&config, &paths, 4).unwrap();

    let ape = rows
        .iter()
        .find(|r| r.method == "learned" && r.dataset_tag == config.eval_spec)
        .unwrap()
        .report
        .min_ade;
    let solo = rows
        .iter()
        .find(|r| r.method == "learned_only" && r.dataset_tag == config.eval_spec)
        .unwrap()
        .report
        .min_ade;
    let expected = ape_core::perf_gain(ape, solo).unwrap();
    let (ratio, gain) = *curve.last().unwrap();
    assert_eq!(ratio, 1.0);
    assert!(
        (gain - expected).abs() < 1e-12,
        "sweep gain {gain} != eval-derived gain {expected}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn scene_files_regenerate_byte_identically() {
    let dir_a = temp_dir("gen-a");
    let dir_b = temp_dir("gen-b");
    let config = small_config();
    cmd_generate(&config, &RunPaths::new(&dir_a), 4).unwrap();
    cmd_generate(&config, &RunPaths::new(&dir_b), 4).unwrap();
    for name in ["train.jsonl", "eval_in.jsonl", "eval_ood.jsonl"] {
        let a = std::fs::read(dir_a.join("scenes").join(name)).unwrap();
        let b = std::fs::read(dir_b.join("scenes").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs across identical generate runs");
    }
    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
}

#[test]
fn cli_reports_errors_on_stderr_with_nonzero_exit() {
    let dir = temp_dir("clierr");
    let ape = env!("CARGO_BIN_EXE_ape");

    // Eval before train: machine-readable error line, nonzero exit.
    let output = Command::new(ape)
        .args(["eval", "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.starts_with("error: "), "stderr was: {stderr}");

    // Bad config file.
    let bad = dir.join("bad.cfg");
    std::fs::write(&bad, "definitely_not_a_key = 1\n").unwrap();
    let output = Command::new(ape)
        .args([
            "generate",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("definitely_not_a_key"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn csvs_embed_config_hash_and_seed() {
    let dir = temp_dir("stamp");
    let config = small_config();
    let paths = RunPaths::new(&dir);
    cmd_train(&config, &paths, 4).unwrap();
    cmd_eval(&config, &paths, 4).unwrap();
    for file in [paths.eval_csv(), paths.epochs_csv()] {
        let text = std::fs::read_to_string(&file).unwrap();
        let first = text.lines().next().unwrap();
        assert!(
            first.starts_with(&format!("# config_hash={} seed=4", config.hash())),
            "{} stamp line was `{first}`",
            file.display()
        );
    }
    std::fs::remove_dir_all(&dir).ok();
}
