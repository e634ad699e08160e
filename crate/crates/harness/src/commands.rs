//! The experiment commands behind the CLI: scene generation, training,
//! cross-distribution evaluation, the two ablation sweeps, and report
//! emission. Every artifact lands in one run directory and every CSV embeds
//! the config hash and seed, so reruns with the same inputs are
//! byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ape_core::{
    attach_bootstrap, checkpoint, derive_seed, evaluate, generate, generate_mixture, infer,
    load_scenes, perf_gain, pipeline, save_scenes, train_with_dims, DistributionSpec, MetricReport,
    MissTolerance, MixSpec, PredictionSet, RouterKind, Scene, TrainedEnsemble, Trajectory,
};

use crate::config::ExperimentConfig;

/// File layout of one run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn scenes_dir(&self) -> PathBuf {
        self.root.join("scenes")
    }
    pub fn train_scenes(&self) -> PathBuf {
        self.scenes_dir().join("train.jsonl")
    }
    pub fn eval_in_scenes(&self) -> PathBuf {
        self.scenes_dir().join("eval_in.jsonl")
    }
    pub fn eval_ood_scenes(&self) -> PathBuf {
        self.scenes_dir().join("eval_ood.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.ape")
    }
    pub fn buffer(&self) -> PathBuf {
        self.root.join("buffer.jsonl")
    }
    pub fn epochs_csv(&self) -> PathBuf {
        self.root.join("epochs.csv")
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.root.join("eval.csv")
    }
    pub fn ood_sweep_csv(&self) -> PathBuf {
        self.root.join("ood_sweep.csv")
    }
    pub fn horizon_sweep_csv(&self) -> PathBuf {
        self.root.join("horizon_sweep.csv")
    }
    pub fn horizon_dir(&self, t_future: usize) -> PathBuf {
        self.root.join("horizon").join(format!("h{t_future}"))
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn curves_dir(&self) -> PathBuf {
        self.root.join("curves")
    }
}

fn stamp(config: &ExperimentConfig, seed: u64) -> String {
    format!("# config_hash={} seed={seed}\n", config.hash())
}

fn write_csv(path: &Path, config: &ExperimentConfig, seed: u64, body: &str) -> Result<()> {
    let mut out = stamp(config, seed);
    out.push_str(body);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn resolved_specs(config: &ExperimentConfig) -> Result<(DistributionSpec, DistributionSpec)> {
    let horizon = config.horizon()?;
    Ok((
        DistributionSpec::preset(&config.train_spec, horizon)?,
        DistributionSpec::preset(&config.eval_spec, horizon)?,
    ))
}

fn eval_mixture(config: &ExperimentConfig, seed: u64, ratio: f64) -> Result<Vec<Scene>> {
    let (in_dist, out_dist) = resolved_specs(config)?;
    Ok(generate_mixture(&MixSpec {
        in_dist,
        out_dist,
        ood_ratio: ratio,
        n_scenes: config.n_eval_scenes,
        seed: derive_seed(seed, "eval-scenes"),
    })?)
}

/// Generate the run's scene files: the training set plus ratio-0 and ratio-1
/// evaluation mixtures (the in-distribution and cross-distribution sets).
pub fn cmd_generate(config: &ExperimentConfig, paths: &RunPaths, seed: u64) -> Result<()> {
    fs::create_dir_all(paths.scenes_dir())?;
    let (train_spec, _) = resolved_specs(config)?;
    let train = generate(
        &train_spec,
        config.n_train_scenes,
        derive_seed(seed, "train-scenes"),
    )?;
    save_scenes(paths.train_scenes(), &train)?;
    save_scenes(paths.eval_in_scenes(), &eval_mixture(config, seed, 0.0)?)?;
    save_scenes(paths.eval_ood_scenes(), &eval_mixture(config, seed, 1.0)?)?;
    fs::write(paths.config(), config.canonical())?;
    Ok(())
}

fn ensure_scenes(config: &ExperimentConfig, paths: &RunPaths, seed: u64) -> Result<()> {
    if !paths.train_scenes().exists()
        || !paths.eval_in_scenes().exists()
        || !paths.eval_ood_scenes().exists()
    {
        cmd_generate(config, paths, seed)?;
    }
    Ok(())
}

/// Train the ensemble (expert, router, bootstrap members) and persist the
/// run artifacts: checkpoint, routing-pair buffer, per-epoch loss curves.
pub fn cmd_train(config: &ExperimentConfig, paths: &RunPaths, seed: u64) -> Result<()> {
    ensure_scenes(config, paths, seed)?;
    let dataset = load_scenes(paths.train_scenes())?;
    let train_config = config.train_config(seed);
    let dims = config.model_dims();

    let mut output = train_with_dims(&dataset, &train_config, dims)?;
    if config.n_bootstrap >= 2 {
        attach_bootstrap(&mut output, &dataset, dims, config.n_bootstrap)?;
    }

    checkpoint::save_ensemble(paths.checkpoint(), &output.ensemble)?;
    pipeline::save_buffer_jsonl(paths.buffer(), &output.buffer)?;
    write_csv(
        &paths.epochs_csv(),
        config,
        seed,
        &pipeline::epochs_csv(&output.epochs),
    )?;
    Ok(())
}

fn load_checkpoint(paths: &RunPaths) -> Result<TrainedEnsemble> {
    if !paths.checkpoint().exists() {
        bail!(
            "missing checkpoint {} (run `train` first)",
            paths.checkpoint().display()
        );
    }
    Ok(checkpoint::load_ensemble(paths.checkpoint())?)
}

fn evaluate_method(
    ensemble: &TrainedEnsemble,
    scenes: &[Scene],
    kind: RouterKind,
    tol: &MissTolerance,
) -> Result<MetricReport> {
    let mut sets: Vec<PredictionSet> = Vec::with_capacity(scenes.len());
    let mut gts: Vec<&Trajectory> = Vec::with_capacity(scenes.len());
    for scene in scenes {
        sets.push(infer(ensemble, scene, kind)?);
        gts.push(scene.ground_truth()?);
    }
    let items: Vec<(&PredictionSet, &Trajectory)> =
        sets.iter().zip(gts.iter().copied()).collect();
    Ok(evaluate(&items, tol)?)
}

/// One labeled row of the cross-distribution evaluation table.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub dataset_tag: String,
    pub method: String,
    pub report: MetricReport,
}

/// Evaluate every configured router kind on the cross-distribution set, plus
/// the learned expert alone on held-out in-distribution data.
pub fn cmd_eval(config: &ExperimentConfig, paths: &RunPaths, seed: u64) -> Result<Vec<EvalRow>> {
    ensure_scenes(config, paths, seed)?;
    let ensemble = load_checkpoint(paths)?;
    let tol = MissTolerance::new(config.tol_lateral, config.tol_longitudinal, config.t_future)?;

    let eval_ood = load_scenes(paths.eval_ood_scenes())?;
    let eval_in = load_scenes(paths.eval_in_scenes())?;

    let mut rows = Vec::new();
    for &kind in &config.router_kinds {
        let report = evaluate_method(&ensemble, &eval_ood, kind, &tol)?;
        rows.push(EvalRow {
            dataset_tag: config.eval_spec.clone(),
            method: kind.name().to_string(),
            report,
        });
    }
    // The in-distribution reference row.
    let report = evaluate_method(&ensemble, &eval_in, RouterKind::LearnedOnly, &tol)?;
    rows.push(EvalRow {
        dataset_tag: config.train_spec.clone(),
        method: RouterKind::LearnedOnly.name().to_string(),
        report,
    });

    let mut body = String::from(MetricReport::CSV_HEADER);
    body.push('\n');
    for row in &rows {
        body.push_str(&row.report.csv_row(&row.dataset_tag, &row.method));
        body.push('\n');
    }
    write_csv(&paths.eval_csv(), config, seed, &body)?;
    Ok(rows)
}

/// Gain of the routed ensemble over the learned expert alone, by OOD ratio.
pub fn cmd_ablate_ood(
    config: &ExperimentConfig,
    paths: &RunPaths,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let ensemble = load_checkpoint(paths)?;
    let tol = MissTolerance::new(config.tol_lateral, config.tol_longitudinal, config.t_future)?;

    let mut curve = Vec::with_capacity(config.ood_ratios.len());
    for &ratio in &config.ood_ratios {
        let scenes = eval_mixture(config, seed, ratio)?;
        let ape = evaluate_method(&ensemble, &scenes, RouterKind::Learned, &tol)?;
        let solo = evaluate_method(&ensemble, &scenes, RouterKind::LearnedOnly, &tol)?;
        curve.push((ratio, perf_gain(ape.min_ade, solo.min_ade)?));
    }

    let mut body = String::from("ratio,gain_percent\n");
    for (ratio, gain) in &curve {
        body.push_str(&format!("{ratio},{gain}\n"));
    }
    write_csv(&paths.ood_sweep_csv(), config, seed, &body)?;
    Ok(curve)
}

/// Gain of the routed ensemble over the learned expert alone, by prediction
/// horizon. Each horizon gets its own trained ensemble (reused if its
/// checkpoint already exists) and its own cross-distribution evaluation set.
pub fn cmd_ablate_horizon(
    config: &ExperimentConfig,
    paths: &RunPaths,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let mut curve = Vec::with_capacity(config.horizons.len());
    for &t_future in &config.horizons {
        let mut sub_config = config.at_horizon(t_future);
        // The sweep compares the routed ensemble against the learned expert
        // alone; bootstrap members are dead weight here.
        sub_config.n_bootstrap = 0;
        let sub_paths = RunPaths::new(paths.horizon_dir(t_future));
        fs::create_dir_all(&sub_paths.root)?;
        if !sub_paths.checkpoint().exists() {
            cmd_train(&sub_config, &sub_paths, seed)?;
        }
        let ensemble = load_checkpoint(&sub_paths)?;
        let tol = MissTolerance::new(config.tol_lateral, config.tol_longitudinal, t_future)?;
        let scenes = load_scenes(sub_paths.eval_ood_scenes())?;
        let ape = evaluate_method(&ensemble, &scenes, RouterKind::Learned, &tol)?;
        let solo = evaluate_method(&ensemble, &scenes, RouterKind::LearnedOnly, &tol)?;
        curve.push((t_future, perf_gain(ape.min_ade, solo.min_ade)?));
    }

    // Soft check: the per-step increase should flatten toward long horizons.
    if curve.len() >= 3 {
        let first = curve[0];
        let mid = curve[curve.len() - 2];
        let last = curve[curve.len() - 1];
        let early_slope = (mid.1 - first.1) / (mid.0 - first.0).max(1) as f64;
        let late_slope = (last.1 - mid.1) / (last.0 - mid.0).max(1) as f64;
        if late_slope > early_slope {
            eprintln!(
                "note: horizon gain curve is not concave (late slope {late_slope:.3} > early slope {early_slope:.3})"
            );
        }
    }

    let mut body = String::from("horizon,gain_percent\n");
    for (t_future, gain) in &curve {
        body.push_str(&format!("{t_future},{gain}\n"));
    }
    write_csv(&paths.horizon_sweep_csv(), config, seed, &body)?;
    Ok(curve)
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|line| !line.starts_with('#') && !line.trim().is_empty())
        .skip(1)
        .map(|line| line.split(',').map(str::to_string).collect())
        .collect())
}

/// Render a plain-text summary plus plot-ready x,y files from the CSVs in a
/// run directory. Pure function of its inputs: regenerating is byte-stable.
pub fn cmd_report(paths: &RunPaths) -> Result<()> {
    let mut missing = Vec::new();
    for required in [paths.eval_csv(), paths.epochs_csv()] {
        if !required.exists() {
            missing.push(required.display().to_string());
        }
    }
    if !missing.is_empty() {
        bail!("missing report inputs: {}", missing.join(", "));
    }

    let mut report = String::new();
    report.push_str("prediction ensemble run report\n");
    report.push_str("==============================\n\n");

    let eval_rows = read_csv_rows(&paths.eval_csv())?;
    report.push_str("cross-distribution evaluation (per method):\n");
    report.push_str(&format!(
        "{:<12} {:<14} {:>10} {:>10} {:>10} {:>10} {:>8}\n",
        "dataset", "method", "minADE", "minFDE", "missrate", "mAP", "scenes"
    ));
    for row in &eval_rows {
        if row.len() == 7 {
            let fmt = |s: &str| -> String {
                s.parse::<f64>()
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|_| s.to_string())
            };
            report.push_str(&format!(
                "{:<12} {:<14} {:>10} {:>10} {:>10} {:>10} {:>8}\n",
                row[0],
                row[1],
                fmt(&row[2]),
                fmt(&row[3]),
                fmt(&row[4]),
                fmt(&row[5]),
                row[6]
            ));
        }
    }
    report.push_str(&format!("rows: {}\n", eval_rows.len()));
    report.push_str(
        "note: learned sets carry the configured number of modes, rule sets one candidate; \
         sets are scored as returned.\n",
    );

    fs::create_dir_all(paths.curves_dir())?;
    let mut curve_files = Vec::new();
    let mut copy_curve = |src: PathBuf, name: &str, x: &str, y: &str| -> Result<()> {
        if src.exists() {
            let rows = read_csv_rows(&src)?;
            let mut body = format!("{x},{y}\n");
            for row in rows {
                if row.len() >= 2 {
                    body.push_str(&format!("{},{}\n", row[0], row[1]));
                }
            }
            let dest = paths.curves_dir().join(name);
            fs::write(&dest, body)?;
            curve_files.push(name.to_string());
        }
        Ok(())
    };
    copy_curve(paths.ood_sweep_csv(), "ood_gain.csv", "ood_ratio", "gain_percent")?;
    copy_curve(
        paths.horizon_sweep_csv(),
        "horizon_gain.csv",
        "horizon_steps",
        "gain_percent",
    )?;

    let epoch_rows = read_csv_rows(&paths.epochs_csv())?;
    {
        let mut body = String::from("epoch,predictor_loss\n");
        let mut body_router = String::from("epoch,router_loss\n");
        for row in &epoch_rows {
            if row.len() >= 3 {
                body.push_str(&format!("{},{}\n", row[0], row[1]));
                body_router.push_str(&format!("{},{}\n", row[0], row[2]));
            }
        }
        fs::write(paths.curves_dir().join("predictor_loss.csv"), body)?;
        fs::write(paths.curves_dir().join("router_loss.csv"), body_router)?;
        curve_files.push("predictor_loss.csv".into());
        curve_files.push("router_loss.csv".into());
    }

    if let Ok(rows) = read_csv_rows(&paths.ood_sweep_csv()) {
        report.push_str("\nood-ratio gain sweep:\n");
        for row in rows {
            if row.len() >= 2 {
                report.push_str(&format!("  ratio {:<6} gain {}%\n", row[0], trim4(&row[1])));
            }
        }
    }
    if let Ok(rows) = read_csv_rows(&paths.horizon_sweep_csv()) {
        report.push_str("\nhorizon gain sweep:\n");
        for row in rows {
            if row.len() >= 2 {
                report.push_str(&format!(
                    "  horizon {:<5} gain {}%\n",
                    row[0],
                    trim4(&row[1])
                ));
            }
        }
    }
    report.push_str(&format!("\ncurve files: {}\n", curve_files.join(", ")));
    fs::write(paths.report(), report)?;
    Ok(())
}

fn trim4(s: &str) -> String {
    s.parse::<f64>()
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|_| s.to_string())
}
