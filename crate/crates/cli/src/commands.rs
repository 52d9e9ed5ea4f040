use std::fs;
use std::path::{Path, PathBuf};

use pote_core::datagen::{Dataset, Part, Splits};
use pote_core::eval::{
    emit_plot_data, unit_clouds, Orientation, OutcomePoint, OutcomeSource, PlotUnit,
};
use pote_core::experiment::{
    aggregate, ladder, run_seed, run_sweep, score, AblationMode, ExperimentConfig, SeedMetrics,
};
use pote_core::model::{EstimatorModel, PolicyModel};
use pote_core::Error;

use crate::args::{Cli, Command};
use crate::error::{CliError, Result};
use crate::manifest::{record_artifact, write_artifact, Manifest, SeedArtifacts, DATA_FILE};

pub const ESTIMATOR: &str = "estimator.json";
pub const POLICY: &str = "policy.json";
pub const POE_LOG: &str = "poe_log.json";
pub const POPL_LOG: &str = "popl_log.json";
pub const SPLITS: &str = "splits.json";

pub fn run(cli: Cli) -> Result<()> {
    let out_dir = cli.command.common().out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(CliError::io(&out_dir))?;
    match &cli.command {
        Command::Generate {
            common,
            n,
            covariates,
        } => {
            let mut cfg = common.resolve(existing_config(&out_dir), true)?;
            if let Some(n) = n {
                cfg.dataset.n = *n;
            }
            if let Some(path) = covariates {
                cfg.dataset.covariates = Some(path.clone());
            }
            generate(&cfg, &out_dir)
        }
        Command::Train { common, data } => {
            let cfg = common.resolve(None, false)?;
            train(&cfg, &out_dir, data.as_deref())
        }
        Command::Eval { common, plot_units } => {
            let manifest = Manifest::read(&out_dir)?;
            let cfg = common.resolve(Some(manifest.config.clone()), false)?;
            evaluate(&cfg, manifest, &out_dir, *plot_units)
        }
        Command::Ladder { common, data } => {
            let cfg = common.resolve(None, false)?;
            run_ladder(&cfg, &out_dir, data.as_deref())
        }
        Command::Sweep {
            common,
            data,
            alphas,
        } => {
            let mut cfg = common.resolve(None, false)?;
            if let Some(a) = alphas {
                cfg.sweep_alphas = a.clone();
                cfg.validate()?;
            }
            sweep(&cfg, &out_dir, data.as_deref())
        }
    }
}

fn existing_config(out_dir: &Path) -> Option<ExperimentConfig> {
    Manifest::read(out_dir).ok().map(|m| m.config)
}

/// The data path as stored in the manifest: relative to `out_dir` when the
/// file lives inside it, absolute otherwise.
fn stored_path(out_dir: &Path, path: &Path) -> PathBuf {
    if let Ok(rel) = path.strip_prefix(out_dir) {
        return rel.to_path_buf();
    }
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Opens the directory's manifest, or starts one. Only the commands that
/// produce snapshots (`own_config`) replace the recorded configuration.
fn load_or_new(
    out_dir: &Path,
    cfg: &ExperimentConfig,
    data_path: &Path,
    data: &Dataset,
    own_config: bool,
) -> Result<Manifest> {
    let stored = stored_path(out_dir, data_path);
    let mut m = match Manifest::read(out_dir) {
        Ok(m) => m,
        Err(_) => Manifest::new(
            cfg.dataset.name.as_str(),
            stored.clone(),
            data.checksum(),
            cfg.clone(),
        )?,
    };
    if own_config {
        m.dataset = cfg.dataset.name.to_string();
        m.data_path = stored;
        m.data_checksum = data.checksum();
        m.set_config(cfg.clone())?;
    }
    Ok(m)
}

pub fn generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let data = cfg.dataset.generate()?;
    let path = out_dir.join(DATA_FILE);
    data.write_csv(&path)?;
    let mut m = load_or_new(out_dir, cfg, &path, &data, true)?;
    m.commands.push("generate".into());
    m.put_output(record_artifact(out_dir, DATA_FILE, "data")?);
    let dm = serde_json::to_vec_pretty(&data.manifest(cfg.dataset.fractions))?;
    m.put_output(write_artifact(
        out_dir,
        "dataset_manifest.json",
        "dataset_manifest",
        &dm,
    )?);
    m.write(out_dir)?;
    println!(
        "{}: {} rows x {} covariates -> {} ({})",
        data.name,
        data.n(),
        data.m_x(),
        path.display(),
        data.checksum()
    );
    Ok(())
}

/// Reads the dataset CSV and attaches the named process and seed.
pub fn load_data(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    data: Option<&Path>,
) -> Result<(PathBuf, Dataset)> {
    let path = data
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join(DATA_FILE));
    if !path.exists() {
        return Err(Error::MissingArtifact(path).into());
    }
    let mut ds = Dataset::read_csv(&path, cfg.dataset.name.as_str())?;
    let expected = cfg.dataset.name.covariates();
    if ds.m_x() != expected {
        return Err(Error::ColumnMismatch {
            expected,
            found: ds.m_x(),
        }
        .into());
    }
    ds.dgp = Some(cfg.dataset.name);
    ds.seed = cfg.dataset.seed;
    Ok((path, ds))
}

fn seed_dir(seed: u64) -> PathBuf {
    PathBuf::from(format!("seed_{seed}"))
}

pub fn train(cfg: &ExperimentConfig, out_dir: &Path, data: Option<&Path>) -> Result<()> {
    let (data_path, data) = load_data(cfg, out_dir, data)?;
    let mut m = load_or_new(out_dir, cfg, &data_path, &data, true)?;
    m.commands.push(format!("train --mode {}", cfg.mode));
    for &seed in &cfg.seeds {
        let split = cfg.split_for(&data, seed)?;
        let run = run_seed(&split, cfg, cfg.mode, seed, true)?;
        let dir = seed_dir(seed);
        let policy = run.policy.as_ref().expect("policy stage ran");
        let artifacts = vec![
            write_artifact(
                out_dir,
                dir.join(ESTIMATOR),
                "estimator",
                run.estimator.to_json()?.as_bytes(),
            )?,
            write_artifact(
                out_dir,
                dir.join(POLICY),
                "policy",
                policy.to_json()?.as_bytes(),
            )?,
            write_artifact(
                out_dir,
                dir.join(POE_LOG),
                "poe_log",
                &serde_json::to_vec_pretty(&run.poe_log)?,
            )?,
            write_artifact(
                out_dir,
                dir.join(POPL_LOG),
                "popl_log",
                &serde_json::to_vec_pretty(&run.popl_log)?,
            )?,
            write_artifact(
                out_dir,
                dir.join(SPLITS),
                "splits",
                &serde_json::to_vec(&split.splits)?,
            )?,
        ];
        m.put_seed(SeedArtifacts { seed, artifacts });
        m.write(out_dir)?;
        print_metrics(&run.metrics);
    }
    Ok(())
}

fn print_metrics(m: &SeedMetrics) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
    println!(
        "seed {} {}: val {:.5} mse_s {} mse_y {} hit {} hit_true {} ({:.1}s)",
        m.seed,
        m.mode,
        m.val_loss,
        opt(m.mse_s),
        opt(m.mse_y),
        opt(m.hit_rate),
        opt(m.hit_rate_true),
        m.runtime_s
    );
}

fn read_artifact(
    out_dir: &Path,
    m: &Manifest,
    seed: u64,
    name: &str,
    file: &str,
) -> Result<String> {
    let path = match m.find(seed, name) {
        Some(a) => out_dir.join(&a.path),
        None => out_dir.join(seed_dir(seed)).join(file),
    };
    if !path.exists() {
        return Err(Error::MissingArtifact(path).into());
    }
    fs::read_to_string(&path).map_err(CliError::io(&path))
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    mut m: Manifest,
    out_dir: &Path,
    plot_units: usize,
) -> Result<()> {
    let data_path = out_dir.join(&m.data_path);
    let (_, data) = load_data(cfg, out_dir, Some(&data_path))?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let estimator =
            EstimatorModel::from_json(&read_artifact(out_dir, &m, seed, "estimator", ESTIMATOR)?)?;
        let policy = PolicyModel::from_json(&read_artifact(out_dir, &m, seed, "policy", POLICY)?)?;
        let splits: Option<Splits> =
            serde_json::from_str(&read_artifact(out_dir, &m, seed, "splits", SPLITS)?)?;
        let mut split = data.clone();
        split.splits = splits;
        let mut poe = cfg.mode.apply(&cfg.poe);
        poe.seed = seed;
        let mut metrics = score(&split, cfg, &estimator, Some(&policy), &poe)?;
        metrics.mode = cfg.mode;
        print_metrics(&metrics);
        let dir = seed_dir(seed);
        m.put_output(write_artifact(
            out_dir,
            dir.join("metrics.json"),
            &format!("metrics_{seed}"),
            &serde_json::to_vec_pretty(&metrics)?,
        )?);
        let plot = dir.join("plot_data.csv");
        write_plot(&split, cfg, &policy, plot_units, &out_dir.join(&plot))?;
        m.put_output(record_artifact(
            out_dir,
            &plot,
            &format!("plot_data_{seed}"),
        )?);
        all.push(metrics);
    }
    let report = aggregate(&m.dataset, cfg.mode.as_str(), &all)?;
    println!(
        "{} {} over {} seeds: mse_s {} mse_y {}{}",
        report.dataset,
        report.mode,
        report.seeds.len(),
        report.mse_s,
        report.mse_y,
        report
            .frontier_hit_rate
            .as_ref()
            .map_or(String::new(), |h| format!(" hit {h}"))
    );
    m.put_output(write_artifact(
        out_dir,
        "eval_report.json",
        "eval_report",
        &serde_json::to_vec_pretty(&report)?,
    )?);
    m.commands.push("eval".into());
    m.write(out_dir)
}

/// Ground-truth clouds of the first `units` test units plus the policy point.
fn write_plot(
    data: &Dataset,
    cfg: &ExperimentConfig,
    policy: &PolicyModel,
    units: usize,
    path: &Path,
) -> Result<()> {
    let test = data.part(Part::Test)?;
    let dgp = test
        .dgp
        .ok_or_else(|| Error::UnsupportedDataset(test.name.clone()))?;
    let k = units.min(test.n());
    let idx: Vec<usize> = (0..k).collect();
    let sub = test.select(&idx);
    let grid = cfg.eval.grid(&sub)?;
    let clouds = unit_clouds(&dgp, sub.x.view(), &grid, Orientation::Maximize)?;
    let t = policy.act_batch(sub.x.view())?;
    let at = dgp.outcomes_each(sub.x.view(), &t)?;
    let plot: Vec<PlotUnit> = clouds
        .into_iter()
        .zip(t.iter().zip(at))
        .enumerate()
        .map(|(unit, (cloud, (&t, (s, y))))| PlotUnit {
            unit,
            cloud,
            policy: Some(OutcomePoint { t, s, y }),
        })
        .collect();
    emit_plot_data(&plot, path)?;
    Ok(())
}

pub fn run_ladder(cfg: &ExperimentConfig, out_dir: &Path, data: Option<&Path>) -> Result<()> {
    let (data_path, data) = load_data(cfg, out_dir, data)?;
    let mut m = load_or_new(out_dir, cfg, &data_path, &data, false)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let split = cfg.split_for(&data, seed)?;
        for mode in AblationMode::ALL {
            let run = run_seed(&split, cfg, mode, seed, false)?;
            print_metrics(&run.metrics);
            runs.push(run.metrics);
        }
    }
    let report = ladder(&data.name, &runs)?;
    println!("{:<20} {:>18} {:>18}", "mode", "mse_s", "mse_y");
    for r in &report.rows {
        println!(
            "{:<20} {:>18} {:>18}",
            r.mode,
            r.mse_s.to_string(),
            r.mse_y.to_string()
        );
    }
    m.put_output(write_artifact(
        out_dir,
        "ladder_report.json",
        "ladder_report",
        &serde_json::to_vec_pretty(&report)?,
    )?);
    m.commands.push("ladder".into());
    m.write(out_dir)
}

pub fn sweep(cfg: &ExperimentConfig, out_dir: &Path, data: Option<&Path>) -> Result<()> {
    let (data_path, data) = load_data(cfg, out_dir, data)?;
    let mut m = load_or_new(out_dir, cfg, &data_path, &data, false)?;
    let report = run_sweep(&data, cfg)?;
    let opt = |s: &Option<pote_core::eval::Summary>| {
        s.as_ref().map_or("-".to_string(), ToString::to_string)
    };
    println!(
        "{:<8} {:>18} {:>18} {:>18}",
        "alpha", "val_loss", "mse_s", "mse_y"
    );
    for r in &report.rows {
        println!(
            "{:<8} {:>18} {:>18} {:>18}",
            r.alpha,
            r.val_loss.to_string(),
            opt(&r.mse_s),
            opt(&r.mse_y)
        );
    }
    let sel = report.selected_row();
    println!(
        "{:<8} {:>18} {:>18} {:>18}",
        "selected",
        format!("a={}", sel.alpha),
        opt(&sel.mse_s),
        opt(&sel.mse_y)
    );
    m.put_output(write_artifact(
        out_dir,
        "sweep_report.json",
        "sweep_report",
        &serde_json::to_vec_pretty(&report)?,
    )?);
    m.commands.push("sweep".into());
    m.write(out_dir)
}
