//! Pareto-optimal policy learning against a frozen estimator, and the
//! end-to-end workflow that trains both.

use std::time::Instant;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Part};
use crate::diff::{Binding, Optimizer, OptimizerState, Tape};
use crate::error::{Error, Result};
use crate::eval::EvalGrid;
use crate::model::{EstimatorModel, PolicyModel};
use crate::pareto::SolverConfig;
use crate::poe::{pareto_direction, train_poe, LossReport, PoeConfig};

pub const TASK_RS: &str = "r_s";
pub const TASK_RY: &str = "r_y";

/// Source of the best-achievable outcome each regret is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Per-unit maximum of the estimator's prediction over a treatment grid.
    #[default]
    GridMax,
    /// Dataset-wide maxima of the observed S and Y.
    DatasetMax,
}

/// Per-unit regret targets. In `DatasetMax` mode every entry is the same.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretTargets {
    pub mode: TargetMode,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    /// Treatments scanned in `GridMax` mode; empty otherwise.
    pub grid: Vec<f64>,
}

impl RegretTargets {
    pub fn grid_max(
        estimator: &EstimatorModel,
        x: ArrayView2<'_, f64>,
        grid: &EvalGrid,
    ) -> Result<Self> {
        let rep = estimator.represent(x)?;
        let n = x.nrows();
        let mut s_best = vec![f64::NEG_INFINITY; n];
        let mut y_best = vec![f64::NEG_INFINITY; n];
        for &t in &grid.t {
            let (s, y) = estimator.predict_from_rep(rep.view(), &vec![t; n])?;
            for i in 0..n {
                s_best[i] = s_best[i].max(s[i]);
                y_best[i] = y_best[i].max(y[i]);
            }
        }
        if s_best.iter().chain(&y_best).any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow {
                layer: "regret targets".into(),
            });
        }
        Ok(RegretTargets {
            mode: TargetMode::GridMax,
            s: s_best,
            y: y_best,
            grid: grid.t.clone(),
        })
    }

    pub fn dataset_max(data: &Dataset) -> Result<Self> {
        if data.n() == 0 {
            return Err(Error::EmptySplit("regret targets"));
        }
        let s = data.s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y = data.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(RegretTargets {
            mode: TargetMode::DatasetMax,
            s: vec![s; data.n()],
            y: vec![y; data.n()],
            grid: Vec::new(),
        })
    }

    pub fn build(
        mode: TargetMode,
        estimator: &EstimatorModel,
        data: &Dataset,
        grid: &EvalGrid,
    ) -> Result<Self> {
        match mode {
            TargetMode::GridMax => Self::grid_max(estimator, data.x.view(), grid),
            TargetMode::DatasetMax => Self::dataset_max(data),
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        RegretTargets {
            mode: self.mode,
            s: idx.iter().map(|&i| self.s[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            grid: self.grid.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoplConfig {
    pub hidden: usize,
    pub warmup_epochs: usize,
    /// Pareto epochs after warm-up.
    pub pareto_epochs: usize,
    pub warmup_lr: f64,
    /// Step size of the Pareto epochs.
    pub lr: f64,
    pub batch_size: usize,
    /// Treatment interval; falls back to the dataset default, then to the
    /// observed range.
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub grid_points: usize,
    pub targets: TargetMode,
    /// Regret weights used for warm-up and as the solver's starting point.
    pub init_weights: [f64; 2],
    pub normalize: bool,
    pub solver: SolverConfig,
    pub optimizer: Optimizer,
    pub pareto_optimizer: Optimizer,
    pub seed: u64,
}

impl Default for PoplConfig {
    fn default() -> Self {
        PoplConfig {
            hidden: 32,
            warmup_epochs: 20,
            pareto_epochs: 20,
            warmup_lr: 1e-2,
            lr: 1e-2,
            batch_size: 256,
            t_min: None,
            t_max: None,
            grid_points: 101,
            targets: TargetMode::GridMax,
            init_weights: [0.5, 0.5],
            normalize: true,
            solver: SolverConfig::default(),
            optimizer: Optimizer::default(),
            pareto_optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl PoplConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if let (Some(lo), Some(hi)) = (self.t_min, self.t_max) {
            if !(lo < hi) {
                return bad(format!(
                    "policy interval needs t_min < t_max, got [{lo}, {hi}]"
                ));
            }
        }
        if self.grid_points < 2 {
            return bad(format!(
                "grid_points must be at least 2, got {}",
                self.grid_points
            ));
        }
        if !(self.lr > 0.0) || !(self.warmup_lr > 0.0) {
            return bad(format!(
                "step sizes must be positive, got {} / {}",
                self.warmup_lr, self.lr
            ));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return bad("batch_size and hidden must be positive".into());
        }
        if self.init_weights.iter().any(|w| !(*w >= 0.0))
            || self.init_weights.iter().sum::<f64>() <= 0.0
        {
            return bad(format!(
                "init_weights must be non-negative and not all zero, got {:?}",
                self.init_weights
            ));
        }
        Ok(())
    }

    /// Resolves the treatment interval for `data`.
    pub fn interval(&self, data: &Dataset) -> Result<(f64, f64)> {
        let (dlo, dhi) = match data.dgp {
            Some(d) => d.treatment_range(),
            None => observed_range(&data.t)?,
        };
        let (lo, hi) = (self.t_min.unwrap_or(dlo), self.t_max.unwrap_or(dhi));
        if !(lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "empty treatment interval [{lo}, {hi}]"
            )));
        }
        Ok((lo, hi))
    }
}

fn observed_range(t: &[f64]) -> Result<(f64, f64)> {
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(Error::InvalidConfig(
            "observed treatments span an empty interval".into(),
        ));
    }
    Ok((lo, hi))
}

fn check_pair(
    policy: &PolicyModel,
    estimator: &EstimatorModel,
    x: ArrayView2<'_, f64>,
    targets: &RegretTargets,
) -> Result<()> {
    let m = policy.net.input_width();
    if m != estimator.covariates() {
        return Err(Error::dims(
            "policy vs estimator covariates",
            estimator.covariates(),
            m,
        ));
    }
    if x.ncols() != m {
        return Err(Error::dims("policy covariates", m, x.ncols()));
    }
    if targets.len() != x.nrows() {
        return Err(Error::dims("regret targets", x.nrows(), targets.len()));
    }
    Ok(())
}

/// Mean short- and long-term regret of the policy's treatments.
pub fn regret_losses(
    policy: &PolicyModel,
    estimator: &EstimatorModel,
    x: ArrayView2<'_, f64>,
    targets: &RegretTargets,
) -> Result<(f64, f64)> {
    check_pair(policy, estimator, x, targets)?;
    if x.nrows() == 0 {
        return Err(Error::EmptySplit("batch"));
    }
    let t = policy.act_batch(x)?;
    let (s, y) = estimator.predict_batch(x, &t)?;
    let n = x.nrows() as f64;
    let r_s = targets.s.iter().zip(&s).map(|(a, b)| a - b).sum::<f64>() / n;
    let r_y = targets.y.iter().zip(&y).map(|(a, b)| a - b).sum::<f64>() / n;
    Ok((r_s, r_y))
}

/// Regret values and ζ-gradients on one batch.
#[derive(Clone, Debug)]
pub struct RegretGradients {
    pub r_s: f64,
    pub r_y: f64,
    pub g_s: Vec<f64>,
    pub g_y: Vec<f64>,
}

/// `rep` is Φ(x) of the frozen estimator, precomputed by the caller.
pub fn regret_gradients(
    policy: &PolicyModel,
    estimator: &EstimatorModel,
    x: ArrayView2<'_, f64>,
    rep: ArrayView2<'_, f64>,
    targets: &RegretTargets,
) -> Result<RegretGradients> {
    check_pair(policy, estimator, x, targets)?;
    let mut tape = Tape::for_store(&policy.params);
    let xv = tape.constant_view(x);
    let t = policy.record(&mut tape, xv)?;
    let psi = estimator.arch.embedding.record(&mut tape, t)?;
    let rep = tape.constant_view(rep);
    let nodes = estimator.record_heads(&mut tape, rep, psi, Binding::Frozen)?;
    tape.set_scope("regret");
    let ts = tape.column(&targets.s);
    let ds = tape.sub(ts, nodes.s_hat)?;
    let r_s = tape.mean(ds);
    let ty = tape.column(&targets.y);
    let dy = tape.sub(ty, nodes.y_hat)?;
    let r_y = tape.mean(dy);
    tape.clear_scope();
    let (vs, vy) = (tape.scalar(r_s), tape.scalar(r_y));
    if !vs.is_finite() || !vy.is_finite() {
        return Err(Error::NumericalOverflow {
            layer: "regret".into(),
        });
    }
    Ok(RegretGradients {
        r_s: vs,
        r_y: vy,
        g_s: tape.gradient(r_s)?,
        g_y: tape.gradient(r_y)?,
    })
}

/// Per-epoch policy training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub phase: String,
    pub epoch: usize,
    pub r_s: f64,
    pub r_y: f64,
    pub w: Vec<f64>,
    pub direction_norm: f64,
    /// Smallest `g_i · d − ||d||²` over the epoch.
    pub certificate_slack: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct PoplOutcome {
    pub policy: PolicyModel,
    pub log: Vec<RegretReport>,
    /// Epoch at which a non-finite regret stopped training; the policy is the
    /// snapshot from before that epoch.
    pub diverged_at: Option<usize>,
}

/// Warm-up on the fixed-weight regret sum, then Pareto epochs on the
/// min-norm combination of the two regret gradients. The estimator is only
/// read.
pub fn train_popl(
    policy: PolicyModel,
    estimator: &EstimatorModel,
    x: ArrayView2<'_, f64>,
    targets: &RegretTargets,
    cfg: &PoplConfig,
) -> Result<PoplOutcome> {
    cfg.validate()?;
    check_pair(&policy, estimator, x, targets)?;
    let mut policy = policy;
    let rep = estimator.represent(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x504f_504c);
    let mask = vec![true; policy.params.len()];
    let mut log = Vec::new();
    let w0 = cfg.init_weights;
    let total = w0[0] + w0[1];
    let w0 = [w0[0] / total, w0[1] / total];

    let phases = [
        ("warmup", cfg.warmup_epochs, cfg.optimizer, cfg.warmup_lr),
        ("pareto", cfg.pareto_epochs, cfg.pareto_optimizer, cfg.lr),
    ];
    let mut epoch_base = 0;
    for (phase, epochs, rule, lr) in phases {
        let mut opt = OptimizerState::new(rule, mask.clone());
        for epoch in 0..epochs {
            let started = Instant::now();
            let snapshot = policy.params.clone();
            let mut idx: Vec<usize> = (0..x.nrows()).collect();
            idx.shuffle(&mut rng);
            let mut acc = Acc::default();
            let mut failed = false;
            for batch in idx.chunks(cfg.batch_size) {
                let xb = x.select(Axis(0), batch);
                let rb = rep.select(Axis(0), batch);
                let tb = targets.select(batch);
                let rg = match regret_gradients(&policy, estimator, xb.view(), rb.view(), &tb) {
                    Ok(rg) => rg,
                    Err(Error::NumericalOverflow { layer }) => {
                        log::warn!("policy {phase} epoch {epoch}: non-finite value in `{layer}`");
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                let step = if phase == "warmup" {
                    let d: Vec<f64> = rg
                        .g_s
                        .iter()
                        .zip(&rg.g_y)
                        .map(|(a, b)| w0[0] * a + w0[1] * b)
                        .collect();
                    Step {
                        d,
                        w: w0.to_vec(),
                        slack: None,
                    }
                } else {
                    pareto_step(&rg, cfg, &w0)?
                };
                opt.step(policy.params.values_mut(), &step.d, lr)?;
                acc.add(&rg, &step);
            }
            if failed || policy.params.values().iter().any(|v| !v.is_finite()) {
                policy.params = snapshot;
                return Ok(PoplOutcome {
                    policy,
                    log,
                    diverged_at: Some(epoch_base + epoch),
                });
            }
            log.push(acc.report(phase, epoch, started.elapsed().as_secs_f64() * 1e3));
        }
        epoch_base += epochs;
    }
    Ok(PoplOutcome {
        policy,
        log,
        diverged_at: None,
    })
}

struct Step {
    d: Vec<f64>,
    w: Vec<f64>,
    slack: Option<f64>,
}

fn pareto_step(rg: &RegretGradients, cfg: &PoplConfig, init: &[f64; 2]) -> Result<Step> {
    let rows = vec![rg.g_s.clone(), rg.g_y.clone()];
    let (d, w, trace) =
        pareto_direction(rows, &[TASK_RS, TASK_RY], cfg.normalize, &cfg.solver, init)?;
    let slack = trace.map(|t| t.certificate_min - t.direction_norm.powi(2));
    Ok(Step { d, w: w.w, slack })
}

#[derive(Default)]
struct Acc {
    steps: usize,
    r_s: f64,
    r_y: f64,
    w: Vec<f64>,
    d_norm: f64,
    slack: Option<f64>,
}

impl Acc {
    fn add(&mut self, rg: &RegretGradients, step: &Step) {
        self.steps += 1;
        self.r_s += rg.r_s;
        self.r_y += rg.r_y;
        if self.w.len() != step.w.len() {
            self.w = vec![0.0; step.w.len()];
        }
        self.w.iter_mut().zip(&step.w).for_each(|(a, b)| *a += b);
        self.d_norm += step.d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if let Some(s) = step.slack {
            self.slack = Some(self.slack.map_or(s, |m: f64| m.min(s)));
        }
    }

    fn report(self, phase: &str, epoch: usize, wall_ms: f64) -> RegretReport {
        let k = self.steps.max(1) as f64;
        RegretReport {
            phase: phase.to_string(),
            epoch,
            r_s: self.r_s / k,
            r_y: self.r_y / k,
            w: self.w.iter().map(|v| v / k).collect(),
            direction_norm: self.d_norm / k,
            certificate_slack: self.slack,
            wall_ms,
        }
    }
}

/// Everything produced by one end-to-end run.
#[derive(Clone, Debug)]
pub struct Workflow {
    pub estimator: EstimatorModel,
    pub policy: PolicyModel,
    pub poe_log: Vec<LossReport>,
    pub popl_log: Vec<RegretReport>,
    pub targets: TargetMode,
    pub interval: (f64, f64),
    pub estimator_checksum: u64,
}

/// Estimator training on the train/val parts, target construction on the
/// train part, then policy training. The dataset must be split.
pub fn run_workflow(data: &Dataset, poe: &PoeConfig, popl: &PoplConfig) -> Result<Workflow> {
    poe.validate()?;
    popl.validate()?;
    let train = data.part(Part::Train)?;
    let val = data.part(Part::Val)?;
    let est = train_poe(&train, &val, poe)?;
    if let Some(epoch) = est.diverged_at {
        return Err(Error::Diverged {
            stage: "estimator",
            epoch,
        });
    }
    let estimator = est.model;
    let checksum = estimator.params.checksum();

    let interval = popl.interval(data)?;
    let grid = EvalGrid::new(interval.0, interval.1, popl.grid_points)?;
    let targets = RegretTargets::build(popl.targets, &estimator, &train, &grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(popl.seed);
    let policy = PolicyModel::new(train.m_x(), popl.hidden, interval.0, interval.1, &mut rng)?;
    let out = train_popl(policy, &estimator, train.x.view(), &targets, popl)?;
    if let Some(epoch) = out.diverged_at {
        return Err(Error::Diverged {
            stage: "policy",
            epoch,
        });
    }
    debug_assert_eq!(checksum, estimator.params.checksum());
    Ok(Workflow {
        estimator,
        policy: out.policy,
        poe_log: est.log,
        popl_log: out.log,
        targets: popl.targets,
        interval,
        estimator_checksum: checksum,
    })
}
