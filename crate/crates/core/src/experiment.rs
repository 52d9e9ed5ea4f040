//! Ablation modes, per-seed runs, seed aggregation and the α sweep.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    generate, ingest_covariates, split, Dataset, DgpName, DgpSpec, Part, SplitFractions,
};
use crate::error::{Error, Result};
use crate::eval::{mse_on_grid, policy_hit_rate, EvalGrid, EvalReport, Summary};
use crate::model::{EstimatorModel, PolicyModel};
use crate::poe::{selection_loss, train_poe, LossReport, Outcomes, PoeConfig};
use crate::popl::{run_workflow, PoplConfig, RegretReport};

/// Rungs of the ablation ladder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Short-term head only.
    SeparateS,
    /// Long-term head only, without the ŝ input.
    SeparateY,
    /// Both heads, fixed weights, no ŝ input.
    Joint,
    /// Both heads with the ŝ input, fixed weights.
    JointShat,
    /// Full method: ŝ input and Pareto epochs.
    #[default]
    JointShatPareto,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::SeparateS,
        AblationMode::SeparateY,
        AblationMode::Joint,
        AblationMode::JointShat,
        AblationMode::JointShatPareto,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::SeparateS => "separate_s",
            AblationMode::SeparateY => "separate_y",
            AblationMode::Joint => "joint",
            AblationMode::JointShat => "joint_shat",
            AblationMode::JointShatPareto => "joint_shat_pareto",
        }
    }

    /// The estimator configuration this rung trains with. MI balancing is
    /// kept on every rung.
    pub fn apply(self, base: &PoeConfig) -> PoeConfig {
        let mut cfg = base.clone();
        match self {
            AblationMode::SeparateS => {
                cfg.outcomes = Outcomes::ShortOnly;
                cfg.shat_feed = false;
                cfg.pareto_epochs = 0;
            }
            AblationMode::SeparateY => {
                cfg.outcomes = Outcomes::LongOnly;
                cfg.shat_feed = false;
                cfg.pareto_epochs = 0;
            }
            AblationMode::Joint => {
                cfg.outcomes = Outcomes::Both;
                cfg.shat_feed = false;
                cfg.pareto_epochs = 0;
            }
            AblationMode::JointShat => {
                cfg.outcomes = Outcomes::Both;
                cfg.shat_feed = true;
                cfg.pareto_epochs = 0;
            }
            AblationMode::JointShatPareto => {
                cfg.outcomes = Outcomes::Both;
                cfg.shat_feed = true;
            }
        }
        cfg
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub name: DgpName,
    /// Rows to generate; 0 takes every ingested covariate row.
    pub n: usize,
    pub seed: u64,
    /// Covariate table for the semi-synthetic processes.
    pub covariates: Option<PathBuf>,
    pub fractions: SplitFractions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: DgpName::Simulation,
            n: 20_000,
            seed: 0,
            covariates: None,
            fractions: SplitFractions::default(),
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> Result<DgpSpec> {
        if !self.name.needs_covariates() {
            return Ok(DgpSpec::simulation());
        }
        let path = self
            .covariates
            .as_ref()
            .ok_or_else(|| Error::MissingSource(self.name.to_string()))?;
        let ingested = ingest_covariates(path, self.name.covariates())?;
        if !ingested.rejected.is_empty() {
            log::warn!(
                "{}: dropped {} incomplete covariate rows",
                path.display(),
                ingested.rejected.len()
            );
        }
        Ok(DgpSpec::semi_synthetic(self.name, ingested.x))
    }

    pub fn generate(&self) -> Result<Dataset> {
        generate(&self.spec()?, self.n, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub grid_points: usize,
    /// Interval of the evaluation grid; defaults to the dataset's.
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    /// Componentwise tolerance of the frontier check.
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid_points: EvalGrid::DEFAULT_POINTS,
            t_min: None,
            t_max: None,
            epsilon: 0.01,
        }
    }
}

impl EvalConfig {
    pub fn grid(&self, data: &Dataset) -> Result<EvalGrid> {
        let (lo, hi) = match data.dgp {
            Some(d) => d.treatment_range(),
            None => return Err(Error::UnsupportedDataset(data.name.clone())),
        };
        EvalGrid::new(
            self.t_min.unwrap_or(lo),
            self.t_max.unwrap_or(hi),
            self.grid_points,
        )
    }
}

/// Everything a command needs; loaded from TOML and overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub mode: AblationMode,
    pub sweep_alphas: Vec<f64>,
    pub dataset: DatasetConfig,
    pub poe: PoeConfig,
    pub popl: PoplConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: (0..10).collect(),
            mode: AblationMode::JointShatPareto,
            sweep_alphas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            dataset: DatasetConfig::default(),
            poe: PoeConfig::default(),
            popl: PoplConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if self.sweep_alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidConfig(format!(
                "sweep alphas must lie in [0, 1], got {:?}",
                self.sweep_alphas
            )));
        }
        self.poe.validate()?;
        self.popl.validate()
    }

    /// Splits `data` for `seed` with the configured fractions.
    pub fn split_for(&self, data: &Dataset, seed: u64) -> Result<Dataset> {
        split(data, self.dataset.fractions, seed)
    }
}

/// One trained and scored configuration.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub mode: AblationMode,
    pub estimator: EstimatorModel,
    pub policy: Option<PolicyModel>,
    pub poe_log: Vec<LossReport>,
    pub popl_log: Vec<RegretReport>,
    pub metrics: SeedMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub mode: AblationMode,
    /// Validation L_s + L_y (active outcomes only).
    pub val_loss: f64,
    pub mse_s: Option<f64>,
    pub mse_y: Option<f64>,
    /// Policy hits against the estimator's own outcome clouds.
    pub hit_rate: Option<f64>,
    /// Policy hits against the ground-truth clouds.
    pub hit_rate_true: Option<f64>,
    pub runtime_s: f64,
}

/// Trains one seed of `mode` on a split dataset and scores it on the test
/// part. The policy stage runs only when `with_policy` is set.
pub fn run_seed(
    data: &Dataset,
    cfg: &ExperimentConfig,
    mode: AblationMode,
    seed: u64,
    with_policy: bool,
) -> Result<SeedRun> {
    let started = Instant::now();
    let poe = PoeConfig {
        seed,
        ..mode.apply(&cfg.poe)
    };
    let popl = PoplConfig {
        seed,
        ..cfg.popl.clone()
    };
    let (estimator, policy, poe_log, popl_log) = if with_policy {
        let wf = run_workflow(data, &poe, &popl)?;
        (wf.estimator, Some(wf.policy), wf.poe_log, wf.popl_log)
    } else {
        let out = train_poe(&data.part(Part::Train)?, &data.part(Part::Val)?, &poe)?;
        if let Some(epoch) = out.diverged_at {
            return Err(Error::Diverged {
                stage: "estimator",
                epoch,
            });
        }
        (out.model, None, out.log, Vec::new())
    };
    let mut metrics = score(data, cfg, &estimator, policy.as_ref(), &poe)?;
    metrics.seed = seed;
    metrics.mode = mode;
    metrics.runtime_s = started.elapsed().as_secs_f64();
    Ok(SeedRun {
        seed,
        mode,
        estimator,
        policy,
        poe_log,
        popl_log,
        metrics,
    })
}

/// Validation loss, grid MSE and frontier hit rates of trained models.
pub fn score(
    data: &Dataset,
    cfg: &ExperimentConfig,
    estimator: &EstimatorModel,
    policy: Option<&PolicyModel>,
    poe: &PoeConfig,
) -> Result<SeedMetrics> {
    let val = data.part(Part::Val)?;
    let test = data.part(Part::Test)?;
    let val_loss = selection_loss(estimator, &val, poe.outcomes)?;
    let (mut mse_s, mut mse_y, mut hit_rate, mut hit_rate_true) = (None, None, None, None);
    if let Some(dgp) = test.dgp {
        let grid = cfg.eval.grid(&test)?;
        let (s, y) = mse_on_grid(estimator, &test, &grid)?;
        mse_s = Some(s);
        mse_y = Some(y);
        if let Some(pi) = policy {
            let eps = cfg.eval.epsilon;
            hit_rate = Some(policy_hit_rate(pi, estimator, test.x.view(), &grid, eps)?.hit_rate);
            hit_rate_true = Some(policy_hit_rate(pi, &dgp, test.x.view(), &grid, eps)?.hit_rate);
        }
    }
    Ok(SeedMetrics {
        seed: poe.seed,
        mode: AblationMode::default(),
        val_loss,
        mse_s,
        mse_y,
        hit_rate,
        hit_rate_true,
        runtime_s: 0.0,
    })
}

/// Mean ± std over seeds of per-seed metrics sharing one mode.
pub fn aggregate(dataset: &str, mode: &str, runs: &[SeedMetrics]) -> Result<EvalReport> {
    let collect = |f: &dyn Fn(&SeedMetrics) -> Option<f64>| -> Option<Vec<f64>> {
        runs.iter().map(f).collect()
    };
    let mse_s =
        collect(&|m| m.mse_s).ok_or_else(|| Error::UnsupportedDataset(dataset.to_string()))?;
    let mse_y =
        collect(&|m| m.mse_y).ok_or_else(|| Error::UnsupportedDataset(dataset.to_string()))?;
    Ok(EvalReport {
        dataset: dataset.to_string(),
        mode: mode.to_string(),
        seeds: runs.iter().map(|m| m.seed).collect(),
        mse_s: Summary::new(mse_s),
        mse_y: Summary::new(mse_y),
        frontier_hit_rate: collect(&|m| m.hit_rate)
            .filter(|v| !v.is_empty())
            .map(Summary::new),
        runtime_s: runs.iter().map(|m| m.runtime_s).sum(),
    })
}

/// Rows of the ablation ladder. The `separate` row pairs the short-term
/// errors of `separate_s` with the long-term errors of `separate_y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub rows: Vec<EvalReport>,
}

impl LadderReport {
    pub fn row(&self, mode: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Whether mean MSE is non-increasing down separate, joint, joint_shat,
    /// joint_shat_pareto for one outcome.
    pub fn ordered(&self, outcome: fn(&EvalReport) -> f64) -> Option<bool> {
        let means: Option<Vec<f64>> = ["separate", "joint", "joint_shat", "joint_shat_pareto"]
            .iter()
            .map(|m| self.row(m).map(outcome))
            .collect();
        Some(means?.windows(2).all(|w| w[0] >= w[1]))
    }
}

pub fn ladder(dataset: &str, runs: &[SeedMetrics]) -> Result<LadderReport> {
    let of = |mode: AblationMode| -> Vec<SeedMetrics> {
        runs.iter().filter(|m| m.mode == mode).cloned().collect()
    };
    let mut rows = Vec::new();
    let (ss, sy) = (of(AblationMode::SeparateS), of(AblationMode::SeparateY));
    if !ss.is_empty() && !sy.is_empty() {
        let s = aggregate(dataset, "separate_s", &ss)?;
        let y = aggregate(dataset, "separate_y", &sy)?;
        rows.push(EvalReport {
            dataset: dataset.to_string(),
            mode: "separate".into(),
            seeds: s.seeds.clone(),
            mse_s: s.mse_s.clone(),
            mse_y: y.mse_y.clone(),
            frontier_hit_rate: None,
            runtime_s: s.runtime_s + y.runtime_s,
        });
    }
    for mode in AblationMode::ALL {
        let group = of(mode);
        if !group.is_empty() {
            rows.push(aggregate(dataset, mode.as_str(), &group)?);
        }
    }
    Ok(LadderReport { rows })
}

/// One α of the sweep, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub val_loss: Summary,
    pub mse_s: Option<Summary>,
    pub mse_y: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dataset: String,
    pub mode: AblationMode,
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the α with the lowest mean validation loss.
    pub selected: usize,
}

impl SweepReport {
    pub fn selected_row(&self) -> &SweepRow {
        &self.rows[self.selected]
    }
}

/// Builds the report from per-α metric groups and selects by validation loss.
pub fn sweep_report(
    dataset: &str,
    mode: AblationMode,
    groups: &[(f64, Vec<SeedMetrics>)],
) -> Result<SweepReport> {
    if groups.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let rows: Vec<SweepRow> = groups
        .iter()
        .map(|(alpha, runs)| {
            let opt = |f: fn(&SeedMetrics) -> Option<f64>| {
                runs.iter()
                    .map(f)
                    .collect::<Option<Vec<f64>>>()
                    .map(Summary::new)
            };
            SweepRow {
                alpha: *alpha,
                val_loss: Summary::new(runs.iter().map(|m| m.val_loss).collect()),
                mse_s: opt(|m| m.mse_s),
                mse_y: opt(|m| m.mse_y),
            }
        })
        .collect();
    let selected = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.val_loss.mean.total_cmp(&b.1.val_loss.mean))
        .map(|(i, _)| i)
        .expect("non-empty");
    Ok(SweepReport {
        dataset: dataset.to_string(),
        mode,
        rows,
        selected,
    })
}

/// Trains every α of the sweep grid for every seed (estimator only).
pub fn run_sweep(data: &Dataset, cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.sweep_alphas.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let mut groups = Vec::new();
    for &alpha in &cfg.sweep_alphas {
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let split = cfg.split_for(data, seed)?;
            let mut c = cfg.clone();
            c.poe.alpha = alpha;
            runs.push(run_seed(&split, &c, cfg.mode, seed, false)?.metrics);
        }
        groups.push((alpha, runs));
    }
    sweep_report(&data.name, cfg.mode, &groups)
}
