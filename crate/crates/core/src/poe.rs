//! Pareto-optimal estimation: a scalarized warm-up followed by epochs whose
//! update direction is the min-norm combination of the balancing, short-term
//! and long-term task gradients.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::diff::{Activation, Binding, Optimizer, OptimizerState, Tape};
use crate::error::{Error, Result};
use crate::mi::{record_lld, record_mi, LogLikForm};
use crate::model::{EstimatorArch, EstimatorModel};
use crate::pareto::{
    combine_direction, descent_certificate, min_norm_weights, normalize_gradients, GradientMatrix,
    ParetoTrace, ParetoWeights, SolverConfig,
};

/// Which observed outcomes contribute a loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcomes {
    #[default]
    Both,
    ShortOnly,
    LongOnly,
}

impl Outcomes {
    pub fn short(self) -> bool {
        self != Outcomes::LongOnly
    }

    pub fn long(self) -> bool {
        self != Outcomes::ShortOnly
    }
}

/// How the swept α and the fixed γ map onto the three task losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightAssignment {
    /// α on L_s, 1 − α on L_y, γ on L_MI.
    #[default]
    OutcomeFirst,
    /// α on L_MI, 1 − α on L_s, γ on L_y.
    Literal,
}

/// Fixed scalarization weights of the three task losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub mi: f64,
    pub s: f64,
    pub y: f64,
}

pub const TASK_MI: &str = "mi";
pub const TASK_S: &str = "s";
pub const TASK_Y: &str = "y";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoeConfig {
    pub phi_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub q_hidden: usize,
    pub activation: Activation,
    /// Feed ŝ into the long-term head.
    pub shat_feed: bool,
    pub outcomes: Outcomes,
    pub warmup_epochs: usize,
    /// Pareto epochs after warm-up.
    pub pareto_epochs: usize,
    pub warmup_lr: f64,
    pub pareto_lr: f64,
    /// Step size of the variational heads.
    pub q_lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub assignment: WeightAssignment,
    /// Rescale task gradients to unit norm before solving.
    pub normalize: bool,
    pub solver: SolverConfig,
    pub optimizer: Optimizer,
    /// Update rule of the Pareto epochs.
    pub pareto_optimizer: Optimizer,
    /// Epochs without validation improvement before stopping a phase.
    pub patience: usize,
    /// Return the best-validation snapshot of each phase instead of the last.
    pub restore_best: bool,
    pub loglik: LogLikForm,
    pub seed: u64,
}

impl Default for PoeConfig {
    fn default() -> Self {
        PoeConfig {
            phi_hidden: vec![64, 32],
            head_hidden: 32,
            q_hidden: 16,
            activation: Activation::Tanh,
            shat_feed: true,
            outcomes: Outcomes::Both,
            warmup_epochs: 60,
            pareto_epochs: 20,
            warmup_lr: 1e-2,
            pareto_lr: 3e-3,
            q_lr: 1e-2,
            batch_size: 256,
            alpha: 0.5,
            gamma: 0.001,
            assignment: WeightAssignment::OutcomeFirst,
            normalize: true,
            solver: SolverConfig::default(),
            optimizer: Optimizer::default(),
            pareto_optimizer: Optimizer::Sgd,
            patience: 20,
            restore_best: false,
            loglik: LogLikForm::Gaussian,
            seed: 0,
        }
    }
}

impl PoeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.alpha) || self.gamma < 0.0 {
            return bad(format!(
                "weights need 0 <= alpha <= 1 and gamma >= 0, got {} / {}",
                self.alpha, self.gamma
            ));
        }
        for (name, lr) in [
            ("warmup_lr", self.warmup_lr),
            ("pareto_lr", self.pareto_lr),
            ("q_lr", self.q_lr),
        ] {
            if !(lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.phi_hidden.is_empty() {
            return bad("phi_hidden needs at least one layer".into());
        }
        Ok(())
    }

    /// Warm-up weights after the assignment and the active outcomes.
    pub fn task_weights(&self) -> TaskWeights {
        let (a, b, g) = (self.alpha, 1.0 - self.alpha, self.gamma);
        let mut w = match self.assignment {
            WeightAssignment::OutcomeFirst => TaskWeights { mi: g, s: a, y: b },
            WeightAssignment::Literal => TaskWeights { mi: a, s: b, y: g },
        };
        if !self.outcomes.short() {
            w.s = 0.0;
        }
        if !self.outcomes.long() {
            w.y = 0.0;
        }
        w
    }

    pub fn arch(&self, covariates: usize) -> EstimatorArch {
        let mut arch = EstimatorArch::new(covariates);
        arch.phi_hidden = self.phi_hidden.clone();
        arch.head_hidden = self.head_hidden;
        arch.q_hidden = self.q_hidden;
        arch.activation = self.activation;
        arch.shat_feed = self.shat_feed;
        arch
    }
}

/// One epoch summarized for the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub phase: String,
    pub epoch: usize,
    /// Batch-averaged training losses over the epoch.
    pub l_mi: f64,
    pub l_s: f64,
    pub l_y: f64,
    /// Validation selection loss at the end of the epoch.
    pub val_loss: f64,
    /// Mean task weights over the epoch's steps.
    pub w: Vec<f64>,
    pub direction_norm: f64,
    /// Smallest `⟨d, g_i⟩ − ||d||²` seen over the epoch (Pareto phase).
    pub certificate_slack: Option<f64>,
    pub converged: bool,
    pub wall_ms: f64,
}

/// Mean squared errors of ŝ and ŷ (ŷ consuming ŝ) against observed S, Y.
pub fn outcome_losses(model: &EstimatorModel, data: &Dataset) -> Result<(f64, f64)> {
    if data.n() == 0 {
        return Err(Error::EmptySplit("batch"));
    }
    let (s_hat, y_hat) = model.predict_batch(data.x.view(), &data.t)?;
    let n = data.n() as f64;
    let l_s = s_hat
        .iter()
        .zip(&data.s)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    let l_y = y_hat
        .iter()
        .zip(&data.y)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    Ok((l_s, l_y))
}

/// Sum of the active outcome losses; used for early stopping and selection.
pub fn selection_loss(model: &EstimatorModel, data: &Dataset, outcomes: Outcomes) -> Result<f64> {
    let (l_s, l_y) = outcome_losses(model, data)?;
    Ok(if outcomes.short() { l_s } else { 0.0 } + if outcomes.long() { l_y } else { 0.0 })
}

/// Loss values and ξ-gradients of the three tasks on one batch. The MI
/// gradient is zero on the variational heads.
#[derive(Clone, Debug)]
pub struct TaskGradients {
    pub l_mi: f64,
    pub l_s: f64,
    pub l_y: f64,
    pub g_mi: Vec<f64>,
    pub g_s: Vec<f64>,
    pub g_y: Vec<f64>,
}

pub fn task_gradients(
    model: &EstimatorModel,
    x: &Array2<f64>,
    t: &[f64],
    s: &[f64],
    y: &[f64],
    form: LogLikForm,
) -> Result<TaskGradients> {
    let mut tape = Tape::for_store(&model.params);
    let xv = tape.constant_view(x.view());
    let psi = tape.constant(model.arch.embedding.embed_batch(t));
    let nodes = model.record_outcomes(&mut tape, xv, psi, Binding::Trainable)?;
    let (mu, lv) = model.record_q(&mut tape, nodes.rep, Binding::Frozen)?;
    let l_mi = record_mi(&mut tape, mu, lv, t, form)?;
    tape.set_scope("loss_s");
    let sc = tape.column(s);
    let ds = tape.sub(nodes.s_hat, sc)?;
    let ds = tape.square(ds);
    let l_s = tape.mean(ds);
    tape.set_scope("loss_y");
    let yc = tape.column(y);
    let dy = tape.sub(nodes.y_hat, yc)?;
    let dy = tape.square(dy);
    let l_y = tape.mean(dy);
    tape.clear_scope();
    Ok(TaskGradients {
        l_mi: tape.scalar(l_mi),
        l_s: tape.scalar(l_s),
        l_y: tape.scalar(l_y),
        g_mi: tape.gradient(l_mi)?,
        g_s: tape.gradient(l_s)?,
        g_y: tape.gradient(l_y)?,
    })
}

/// L_LLD gradient on the variational heads with Φ held fixed.
fn lld_step(
    model: &mut EstimatorModel,
    x: &Array2<f64>,
    t: &[f64],
    opt: &mut OptimizerState,
    lr: f64,
    form: LogLikForm,
) -> Result<()> {
    let rep = model.represent(x.view())?;
    let mut tape = Tape::for_store(&model.params);
    let rep = tape.constant(rep);
    let (mu, lv) = model.record_q(&mut tape, rep, Binding::Trainable)?;
    let loss = record_lld(&mut tape, mu, lv, t, form)?;
    let g = tape.gradient(loss)?;
    opt.step(model.params.values_mut(), &g, lr)
}

/// Min-norm direction over the supplied task gradients. Exactly-zero rows
/// (inactive tasks) are left out of the solve and get weight 0.
pub fn pareto_direction(
    rows: Vec<Vec<f64>>,
    labels: &[&str],
    normalize: bool,
    solver: &SolverConfig,
    init: &[f64],
) -> Result<(Vec<f64>, ParetoWeights, Option<ParetoTrace>)> {
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    let g = GradientMatrix::new(rows, labels.iter().map(|s| s.to_string()).collect())?;
    let active: Vec<usize> = (0..g.n_tasks())
        .filter(|&i| g.row(i).iter().any(|v| *v != 0.0))
        .collect();
    let mut full = ParetoWeights::new(vec![0.0; g.n_tasks()], solver.rho);
    let Some(sub) = g.select(|i| active.contains(&i)) else {
        full.converged = true;
        return Ok((vec![0.0; dim], full, None));
    };
    let sub = if normalize {
        normalize_gradients(&sub)
    } else {
        sub
    };
    let mut start: Vec<f64> = active
        .iter()
        .map(|&i| init.get(i).copied().unwrap_or(1.0).max(0.0))
        .collect();
    let total: f64 = start.iter().sum();
    if total > 0.0 {
        start.iter_mut().for_each(|v| *v /= total);
    } else {
        start = vec![1.0 / active.len() as f64; active.len()];
    }
    let w = if active.len() == 1 {
        ParetoWeights {
            w: vec![1.0],
            mu: 0.0,
            rho: solver.rho,
            converged: true,
        }
    } else {
        min_norm_weights(&sub, &ParetoWeights::new(start, solver.rho), solver)?
    };
    let d = combine_direction(&sub, &w)?;
    let trace = ParetoTrace::new(&sub, &w, &d);
    for (k, &i) in active.iter().enumerate() {
        full.w[i] = w.w[k];
    }
    full.mu = w.mu;
    full.converged = w.converged;
    Ok((d, full, Some(trace)))
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct PoeOutcome {
    pub model: EstimatorModel,
    pub log: Vec<LossReport>,
    /// Epoch at which a non-finite value stopped training, if any.
    pub diverged_at: Option<usize>,
}

struct Trainer<'a> {
    cfg: &'a PoeConfig,
    train: &'a Dataset,
    val: &'a Dataset,
    rng: ChaCha8Rng,
    q_opt: OptimizerState,
    body_mask: Vec<bool>,
}

impl<'a> Trainer<'a> {
    fn new(
        cfg: &'a PoeConfig,
        model: &EstimatorModel,
        train: &'a Dataset,
        val: &'a Dataset,
        salt: u64,
    ) -> Self {
        let q_mask = model.q_mask();
        let body_mask = q_mask.iter().map(|m| !m).collect();
        Trainer {
            cfg,
            train,
            val,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ salt),
            q_opt: OptimizerState::new(cfg.optimizer, q_mask),
            body_mask,
        }
    }

    fn batches(&mut self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.train.n()).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn batch_data(&self, idx: &[usize]) -> (Array2<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.train;
        (
            d.x.select(Axis(0), idx),
            idx.iter().map(|&i| d.t[i]).collect(),
            idx.iter().map(|&i| d.s[i]).collect(),
            idx.iter().map(|&i| d.y[i]).collect(),
        )
    }

    /// Runs up to `epochs` epochs of `step`, keeping the best validation
    /// snapshot. Returns the epoch of divergence if a non-finite value showed up.
    fn run_phase(
        &mut self,
        model: &mut EstimatorModel,
        phase: &str,
        epochs: usize,
        log: &mut Vec<LossReport>,
        mut step: impl FnMut(&mut Self, &mut EstimatorModel, &[usize], &mut EpochAcc) -> Result<()>,
    ) -> Result<Option<usize>> {
        let outcomes = self.cfg.outcomes;
        let mut best = selection_loss(model, self.val, outcomes)?;
        let mut best_params = model.params.clone();
        let mut stale = 0;
        let mut diverged = None;
        for epoch in 0..epochs {
            let started = Instant::now();
            let mut acc = EpochAcc::default();
            let mut failed = false;
            for idx in self.batches() {
                match step(self, model, &idx, &mut acc) {
                    Ok(()) => {}
                    Err(Error::NumericalOverflow { layer }) => {
                        log::warn!("{phase} epoch {epoch}: non-finite value in `{layer}`");
                        failed = true;
                        break;
                    }
                    Err(Error::NonFiniteGradient { task }) => {
                        log::warn!("{phase} epoch {epoch}: non-finite gradient for `{task}`");
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let val_loss = if failed {
                f64::NAN
            } else {
                selection_loss(model, self.val, outcomes)?
            };
            if failed || !val_loss.is_finite() {
                diverged = Some(epoch);
                break;
            }
            log.push(acc.report(
                phase,
                epoch,
                val_loss,
                started.elapsed().as_secs_f64() * 1e3,
            ));
            if val_loss < best {
                best = val_loss;
                best_params = model.params.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.patience {
                    break;
                }
            }
        }
        if self.cfg.restore_best || diverged.is_some() {
            model.params = best_params;
        }
        Ok(diverged)
    }
}

#[derive(Default)]
struct EpochAcc {
    steps: usize,
    l_mi: f64,
    l_s: f64,
    l_y: f64,
    w: Vec<f64>,
    d_norm: f64,
    slack: Option<f64>,
    converged: bool,
}

impl EpochAcc {
    fn add(&mut self, tg: &TaskGradients, w: &[f64], d_norm: f64) {
        self.steps += 1;
        self.l_mi += tg.l_mi;
        self.l_s += tg.l_s;
        self.l_y += tg.l_y;
        if self.w.len() != w.len() {
            self.w = vec![0.0; w.len()];
        }
        self.w.iter_mut().zip(w).for_each(|(a, b)| *a += b);
        self.d_norm += d_norm;
    }

    fn report(self, phase: &str, epoch: usize, val_loss: f64, wall_ms: f64) -> LossReport {
        let k = self.steps.max(1) as f64;
        LossReport {
            phase: phase.to_string(),
            epoch,
            l_mi: self.l_mi / k,
            l_s: self.l_s / k,
            l_y: self.l_y / k,
            val_loss,
            w: self.w.iter().map(|v| v / k).collect(),
            direction_norm: self.d_norm / k,
            certificate_slack: self.slack,
            converged: self.converged || self.slack.is_none(),
            wall_ms,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scalarized training with fixed task weights; each minibatch also takes a
/// maximum-likelihood step on the variational heads.
pub fn warmup(
    model: EstimatorModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &PoeConfig,
) -> Result<PoeOutcome> {
    cfg.validate()?;
    let mut model = model;
    let mut log = Vec::new();
    let mut trainer = Trainer::new(cfg, &model, train, val, 0x5741_524d);
    let mut opt = OptimizerState::new(cfg.optimizer, trainer.body_mask.clone());
    let tw = cfg.task_weights();
    let diverged_at = trainer.run_phase(
        &mut model,
        "warmup",
        cfg.warmup_epochs,
        &mut log,
        |tr, m, idx, acc| {
            let (x, t, s, y) = tr.batch_data(idx);
            let tg = task_gradients(m, &x, &t, &s, &y, tr.cfg.loglik)?;
            let dir: Vec<f64> = (0..tg.g_s.len())
                .map(|i| tw.mi * tg.g_mi[i] + tw.s * tg.g_s[i] + tw.y * tg.g_y[i])
                .collect();
            opt.step(m.params.values_mut(), &dir, tr.cfg.warmup_lr)?;
            lld_step(m, &x, &t, &mut tr.q_opt, tr.cfg.q_lr, tr.cfg.loglik)?;
            acc.add(&tg, &[tw.mi, tw.s, tw.y], norm(&dir));
            Ok(())
        },
    )?;
    Ok(PoeOutcome {
        model,
        log,
        diverged_at,
    })
}

/// Pareto epochs: per minibatch, task gradients of the active losses are
/// normalized, combined by min-norm weights and applied as one step; the
/// variational heads only take their likelihood step.
pub fn pareto_phase(
    model: EstimatorModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &PoeConfig,
) -> Result<PoeOutcome> {
    cfg.validate()?;
    let mut model = model;
    let mut log = Vec::new();
    let mut trainer = Trainer::new(cfg, &model, train, val, 0x5041_5245);
    let mut opt = OptimizerState::new(cfg.pareto_optimizer, trainer.body_mask.clone());
    let tw = cfg.task_weights();
    let init = [tw.mi, tw.s, tw.y];
    let diverged_at = trainer.run_phase(
        &mut model,
        "pareto",
        cfg.pareto_epochs,
        &mut log,
        |tr, m, idx, acc| {
            let (x, t, s, y) = tr.batch_data(idx);
            let tg = task_gradients(m, &x, &t, &s, &y, tr.cfg.loglik)?;
            let (d, w, trace) = pareto_step_direction(&tg, tr.cfg, &init)?;
            opt.step(m.params.values_mut(), &d, tr.cfg.pareto_lr)?;
            lld_step(m, &x, &t, &mut tr.q_opt, tr.cfg.q_lr, tr.cfg.loglik)?;
            acc.add(&tg, &w.w, norm(&d));
            if let Some(tr) = trace {
                let slack = tr.certificate_min - tr.direction_norm.powi(2);
                acc.slack = Some(acc.slack.map_or(slack, |s: f64| s.min(slack)));
                acc.converged = if acc.steps == 1 {
                    w.converged
                } else {
                    acc.converged && w.converged
                };
            }
            Ok(())
        },
    )?;
    Ok(PoeOutcome {
        model,
        log,
        diverged_at,
    })
}

/// The combined direction for one batch's task gradients under `cfg`.
pub fn pareto_step_direction(
    tg: &TaskGradients,
    cfg: &PoeConfig,
    init: &[f64],
) -> Result<(Vec<f64>, ParetoWeights, Option<ParetoTrace>)> {
    let zero = || vec![0.0; tg.g_s.len()];
    let rows = vec![
        if cfg.task_weights().mi > 0.0 {
            tg.g_mi.clone()
        } else {
            zero()
        },
        if cfg.outcomes.short() {
            tg.g_s.clone()
        } else {
            zero()
        },
        if cfg.outcomes.long() {
            tg.g_y.clone()
        } else {
            zero()
        },
    ];
    pareto_direction(
        rows,
        &[TASK_MI, TASK_S, TASK_Y],
        cfg.normalize,
        &cfg.solver,
        init,
    )
}

/// Warm-up followed by the Pareto epochs, from a freshly initialized model.
pub fn train_poe(train: &Dataset, val: &Dataset, cfg: &PoeConfig) -> Result<PoeOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = EstimatorModel::new(cfg.arch(train.m_x()), &mut rng)?;
    train_poe_from(model, train, val, cfg)
}

pub fn train_poe_from(
    model: EstimatorModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &PoeConfig,
) -> Result<PoeOutcome> {
    let warm = warmup(model, train, val, cfg)?;
    if warm.diverged_at.is_some() {
        return Ok(warm);
    }
    let mut out = pareto_phase(warm.model, train, val, cfg)?;
    let mut log = warm.log;
    log.append(&mut out.log);
    out.log = log;
    Ok(out)
}

/// Checks that a descent certificate holds for a direction, for tests and
/// diagnostics.
pub fn certificate_holds(rows: &[Vec<f64>], d: &[f64], tol: f64) -> bool {
    let g = match GradientMatrix::unlabeled(rows.to_vec()) {
        Ok(g) => g,
        Err(_) => return false,
    };
    let dd: f64 = d.iter().map(|v| v * v).sum();
    dd.sqrt() <= 1e-6 || descent_certificate(&g, d).iter().all(|&c| c >= dd - tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, split, DgpSpec, Part, SplitFractions};

    fn tiny_cfg() -> PoeConfig {
        PoeConfig {
            phi_hidden: vec![8, 6],
            head_hidden: 6,
            q_hidden: 4,
            warmup_epochs: 3,
            pareto_epochs: 3,
            batch_size: 32,
            ..PoeConfig::default()
        }
    }

    fn sim(n: usize, seed: u64) -> (Dataset, Dataset, Dataset) {
        let ds = split(
            &generate(&DgpSpec::simulation(), n, seed).unwrap(),
            SplitFractions::default(),
            seed,
        )
        .unwrap();
        (
            ds.part(Part::Train).unwrap(),
            ds.part(Part::Val).unwrap(),
            ds.part(Part::Test).unwrap(),
        )
    }

    #[test]
    fn outcome_losses_match_naive_loop() {
        let (train, _, _) = sim(60, 1);
        let cfg = tiny_cfg();
        let m = EstimatorModel::new(cfg.arch(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (l_s, l_y) = outcome_losses(&m, &train).unwrap();
        let (mut es, mut ey) = (0.0, 0.0);
        for i in 0..train.n() {
            let x = train.x.row(i).to_vec();
            let s_hat = m.predict_s(&x, train.t[i]).unwrap();
            let y_hat = m.predict_y(&x, train.t[i], s_hat).unwrap();
            es += (s_hat - train.s[i]).powi(2);
            ey += (y_hat - train.y[i]).powi(2);
        }
        let n = train.n() as f64;
        assert!((l_s - es / n).abs() < 1e-12 && (l_y - ey / n).abs() < 1e-12);
    }

    #[test]
    fn outcome_losses_arithmetic() {
        // A model whose ŝ is its output bias: constant predictions.
        let cfg = tiny_cfg();
        let mut m = EstimatorModel::new(cfg.arch(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        m.params
            .get_mut("head_s.1.w")
            .unwrap()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        m.params.get_mut("head_s.1.b").unwrap()[0] = 1.5;
        let x = Array2::zeros((2, 2));
        let ds = Dataset::new("toy", x, vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]).unwrap();
        let (l_s, _) = outcome_losses(&m, &ds).unwrap();
        assert!((l_s - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weights_follow_assignment() {
        let mut cfg = PoeConfig {
            alpha: 0.3,
            ..PoeConfig::default()
        };
        assert_eq!(
            cfg.task_weights(),
            TaskWeights {
                mi: 0.001,
                s: 0.3,
                y: 0.7
            }
        );
        cfg.assignment = WeightAssignment::Literal;
        assert_eq!(
            cfg.task_weights(),
            TaskWeights {
                mi: 0.3,
                s: 0.7,
                y: 0.001
            }
        );
        cfg.outcomes = Outcomes::ShortOnly;
        assert_eq!(cfg.task_weights().y, 0.0);
    }

    #[test]
    fn zero_warmup_returns_model_unchanged() {
        let (train, val, _) = sim(80, 2);
        let cfg = PoeConfig {
            warmup_epochs: 0,
            ..tiny_cfg()
        };
        let m = EstimatorModel::new(cfg.arch(2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let out = warmup(m.clone(), &train, &val, &cfg).unwrap();
        assert_eq!(out.model.params.values(), m.params.values());
        assert!(out.log.is_empty());
    }

    #[test]
    fn mi_only_warmup_leaves_heads_untouched() {
        let (train, val, _) = sim(80, 3);
        // Literal mapping with alpha = 1 and gamma = 0 leaves only L_MI.
        let cfg = PoeConfig {
            alpha: 1.0,
            gamma: 0.0,
            assignment: WeightAssignment::Literal,
            ..tiny_cfg()
        };
        let tw = cfg.task_weights();
        assert_eq!((tw.s, tw.y), (0.0, 0.0));
        let m = EstimatorModel::new(cfg.arch(2), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut tr = Trainer::new(&cfg, &m, &train, &val, 1);
        let mut opt = OptimizerState::new(cfg.optimizer, tr.body_mask.clone());
        let mut m2 = m.clone();
        let (x, t, s, y) = tr.batch_data(&(0..train.n()).collect::<Vec<_>>());
        let tg = task_gradients(&m2, &x, &t, &s, &y, cfg.loglik).unwrap();
        let dir: Vec<f64> = tg.g_mi.iter().map(|g| tw.mi * g).collect();
        opt.step(m2.params.values_mut(), &dir, 1e-2).unwrap();
        lld_step(&mut m2, &x, &t, &mut tr.q_opt, 1e-2, cfg.loglik).unwrap();
        for head in ["head_s", "head_y"] {
            let mask = m.mask(head);
            for (i, &on) in mask.iter().enumerate() {
                if on {
                    assert_eq!(
                        m.params.values()[i].to_bits(),
                        m2.params.values()[i].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn zero_gradients_give_zero_direction() {
        let rows = vec![vec![0.0; 4]; 3];
        let (d, w, trace) = pareto_direction(
            rows,
            &[TASK_MI, TASK_S, TASK_Y],
            true,
            &SolverConfig::default(),
            &[1.0; 3],
        )
        .unwrap();
        assert_eq!(d, vec![0.0; 4]);
        assert!(trace.is_none());
        assert_eq!(w.w, vec![0.0; 3]);
    }

    #[test]
    fn single_task_matches_plain_gradient() {
        let g_s = vec![0.3, -1.2, 4.0];
        let rows = vec![vec![0.0; 3], g_s.clone(), vec![0.0; 3]];
        let (d, w, _) = pareto_direction(
            rows,
            &[TASK_MI, TASK_S, TASK_Y],
            false,
            &SolverConfig::default(),
            &[0.0, 1.0, 0.0],
        )
        .unwrap();
        assert_eq!(d, g_s);
        assert_eq!(w.w, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn pareto_directions_certify_descent() {
        let (train, _, _) = sim(120, 4);
        let cfg = tiny_cfg();
        let m = EstimatorModel::new(cfg.arch(2), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let tg = task_gradients(&m, &train.x, &train.t, &train.s, &train.y, cfg.loglik).unwrap();
        let (d, _, trace) = pareto_step_direction(&tg, &cfg, &[0.001, 0.5, 0.5]).unwrap();
        let trace = trace.unwrap();
        let dd = d.iter().map(|v| v * v).sum::<f64>();
        assert!(trace.direction_norm <= 1e-6 || trace.certificate_min >= dd - 1e-6);
        let normed =
            normalize_gradients(&GradientMatrix::unlabeled(vec![tg.g_mi, tg.g_s, tg.g_y]).unwrap());
        assert!(certificate_holds(normed.rows(), &d, 1e-6));
    }

    #[test]
    fn training_is_deterministic_and_touches_only_estimator() {
        let (train, val, _) = sim(150, 5);
        let cfg = tiny_cfg();
        let a = train_poe(&train, &val, &cfg).unwrap();
        let b = train_poe(&train, &val, &cfg).unwrap();
        assert_eq!(a.model.params.checksum(), b.model.params.checksum());
        assert_eq!(a.model.params.len(), b.model.params.len());
        assert!(a
            .log
            .iter()
            .all(|r| r.l_s.is_finite() && r.l_y.is_finite() && r.l_mi.is_finite()));
    }

    #[test]
    fn warmup_reduces_training_short_term_loss() {
        let (train, val, _) = sim(2000, 6);
        let cfg = PoeConfig {
            warmup_epochs: 10,
            ..tiny_cfg()
        };
        let m = EstimatorModel::new(cfg.arch(2), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let before = outcome_losses(&m, &train).unwrap().0;
        let out = warmup(m, &train, &val, &cfg).unwrap();
        let after = outcome_losses(&out.model, &train).unwrap().0;
        assert!(after < before, "{after} !< {before}");
    }
}
