use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pote_core::datagen::DgpName;
use pote_core::experiment::{AblationMode, ExperimentConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "pote",
    version,
    about = "Multi-outcome treatment effect estimation and policy learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset (data.csv) from a named process.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Rows to generate (0 keeps every ingested covariate row).
        #[arg(long)]
        n: Option<usize>,
        /// Covariate CSV for ihdp, jobs or twins.
        #[arg(long)]
        covariates: Option<PathBuf>,
    },
    /// Train estimator and policy for every seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV; defaults to <out-dir>/data.csv.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score trained snapshots and aggregate over seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Test units written to each plot_data.csv.
        #[arg(long, default_value_t = 20)]
        plot_units: usize,
    },
    /// Train every ablation mode (estimator only) and report the ladder.
    Ladder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep the initial short-term weight and select by validation loss.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated α grid.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ladder { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ladder { .. } => "ladder",
            Command::Sweep { .. } => "sweep",
        }
    }
}

/// Flags shared by every command; they override the config file.
#[derive(Clone, Debug, Args)]
pub struct Common {
    /// simulation, ihdp, jobs or twins.
    #[arg(long)]
    pub dataset: Option<String>,
    /// TOML file with `seeds`, `mode`, `sweep_alphas` and
    /// [dataset] / [poe] / [popl] / [eval] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generation seed for `generate`; a single training seed otherwise.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// separate_s, separate_y, joint, joint_shat or joint_shat_pareto.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Points of the evaluation grid.
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub t_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub t_max: Option<f64>,
}

impl Common {
    /// The config file (or defaults) with flags applied.
    pub fn resolve(
        &self,
        base: Option<ExperimentConfig>,
        seed_is_data_seed: bool,
    ) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => load_config(path)?,
            (None, Some(base)) => base,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(name) = &self.dataset {
            cfg.dataset.name = name.parse::<DgpName>()?;
        }
        if let Some(seed) = self.seed {
            if seed_is_data_seed {
                cfg.dataset.seed = seed;
            } else {
                cfg.seeds = vec![seed];
            }
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(mode) = &self.mode {
            cfg.mode = mode.parse::<AblationMode>()?;
        }
        if let Some(points) = self.grid_points {
            cfg.eval.grid_points = points;
        }
        if let Some(lo) = self.t_min {
            cfg.eval.t_min = Some(lo);
            cfg.popl.t_min = Some(lo);
        }
        if let Some(hi) = self.t_max {
            cfg.eval.t_max = Some(hi);
            cfg.popl.t_max = Some(hi);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.clone(),
        message: e.to_string(),
    })
}
