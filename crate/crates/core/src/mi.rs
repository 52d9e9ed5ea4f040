//! Variational confounder balancing for a continuous treatment.
//!
//! A Gaussian q_θ(t | Φ(x)) with mean μ_θ(Φ(x)) and log-variance
//! log Var_θ(Φ(x)) is fit by maximum likelihood (the `fit_q` phase), then the
//! contrastive upper bound
//!
//! ```text
//! L_MI = 1/n² Σ_i Σ_j [ log q(t_i | Φ(x_i)) − log q(t_j | Φ(x_i)) ]
//! ```
//!
//! is minimized with respect to Φ (the `min_mi` phase). For the Gaussian form
//! the inner mean over j only needs the first two moments of t, so the double
//! sum is evaluated in O(n):
//! `mean_j (μ_i − t_j)² = (μ_i − t̄)² + var(t)`.

use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diff::{Binding, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::EstimatorModel;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Which conditional log-likelihood to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLikForm {
    /// −(μ − t)² / Var − log Var (Gaussian up to a constant).
    #[default]
    Gaussian,
    /// (μ − t) / Var − log Var, kept for comparison only.
    Linear,
}

/// log q(t | rep) given the head outputs at `rep`.
pub fn log_q_from(mu: f64, logvar: f64, t: f64, form: LogLikForm) -> f64 {
    let lv = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX);
    let inv_var = (-lv).exp();
    match form {
        LogLikForm::Gaussian => -(mu - t).powi(2) * inv_var - lv,
        LogLikForm::Linear => (mu - t) * inv_var - lv,
    }
}

pub fn log_q(rep: &[f64], t: f64, model: &EstimatorModel, form: LogLikForm) -> Result<f64> {
    let mu = model.q_mean.forward(&model.params, rep)?[0];
    let lv = model.q_logvar.forward(&model.params, rep)?[0];
    Ok(log_q_from(mu, lv, t, form))
}

/// Representations Φ(x_i) paired with their treatments t_i.
#[derive(Clone, Debug)]
pub struct MiBatch {
    pub reps: Array2<f64>,
    pub treatments: Vec<f64>,
}

impl MiBatch {
    pub fn new(reps: Array2<f64>, treatments: Vec<f64>) -> Result<Self> {
        if reps.nrows() == 0 {
            return Err(Error::EmptySplit("mi batch"));
        }
        if reps.nrows() != treatments.len() {
            return Err(Error::dims(
                "mi batch treatments",
                reps.nrows(),
                treatments.len(),
            ));
        }
        if reps.iter().chain(&treatments).any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow {
                layer: "mi batch".into(),
            });
        }
        Ok(MiBatch { reps, treatments })
    }

    pub fn from_covariates(
        model: &EstimatorModel,
        x: ArrayView2<'_, f64>,
        t: &[f64],
    ) -> Result<Self> {
        Self::new(model.represent(x)?, t.to_vec())
    }

    pub fn len(&self) -> usize {
        self.treatments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatments.is_empty()
    }
}

/// L_LLD = −mean_i log q(t_i | Φ(x_i)).
pub fn lld_loss(batch: &MiBatch, model: &EstimatorModel, form: LogLikForm) -> Result<f64> {
    let (mu, lv) = model.q_params(batch.reps.view())?;
    let n = batch.len() as f64;
    Ok(-mu
        .iter()
        .zip(&lv)
        .zip(&batch.treatments)
        .map(|((&m, &l), &t)| log_q_from(m, l, t, form))
        .sum::<f64>()
        / n)
}

/// The contrastive bound from a full matrix `L[i][j] = log q(t_j | Φ(x_i))`.
pub fn mi_from_log_q_matrix(l: ArrayView2<'_, f64>) -> f64 {
    let n = l.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += l[[i, i]] - l[[i, j]];
        }
    }
    acc / (n * n) as f64
}

fn moments(t: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// L_MI evaluated in closed form over the batch.
pub fn mi_loss(batch: &MiBatch, model: &EstimatorModel, form: LogLikForm) -> Result<f64> {
    let (mu, lv) = model.q_params(batch.reps.view())?;
    let (t_mean, t_var) = moments(&batch.treatments);
    let n = batch.len() as f64;
    let total: f64 = mu
        .iter()
        .zip(&lv)
        .zip(&batch.treatments)
        .map(|((&m, &l), &t)| {
            let inv_var = (-l.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp();
            match form {
                LogLikForm::Gaussian => inv_var * ((m - t_mean).powi(2) + t_var - (m - t).powi(2)),
                LogLikForm::Linear => inv_var * (t_mean - t),
            }
        })
        .sum();
    Ok(total / n)
}

/// Records L_LLD on a tape from μ and log-variance nodes (n x 1).
pub fn record_lld(
    tape: &mut Tape,
    mu: Var,
    logvar: Var,
    t: &[f64],
    form: LogLikForm,
) -> Result<Var> {
    tape.set_scope("lld");
    let lv = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
    let tc = tape.column(t);
    let diff = tape.sub(mu, tc)?;
    let neg_lv = tape.scale(lv, -1.0);
    let inv_var = tape.exp(neg_lv);
    let data = match form {
        LogLikForm::Gaussian => tape.square(diff),
        LogLikForm::Linear => tape.scale(diff, -1.0),
    };
    let fit = tape.mul(data, inv_var)?;
    // −log q = fit + lv for both forms.
    let nll = tape.add(fit, lv)?;
    let out = tape.mean(nll);
    tape.clear_scope();
    Ok(out)
}

/// Records L_MI on a tape in closed form.
pub fn record_mi(
    tape: &mut Tape,
    mu: Var,
    logvar: Var,
    t: &[f64],
    form: LogLikForm,
) -> Result<Var> {
    tape.set_scope("mi");
    let (t_mean, t_var) = moments(t);
    let lv = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
    let neg_lv = tape.scale(lv, -1.0);
    let inv_var = tape.exp(neg_lv);
    let inner = match form {
        LogLikForm::Gaussian => {
            let tc = tape.column(t);
            let own = tape.sub(mu, tc)?;
            let own = tape.square(own);
            let centered = tape.offset(mu, -t_mean);
            let spread = tape.square(centered);
            let spread = tape.offset(spread, t_var);
            tape.sub(spread, own)?
        }
        LogLikForm::Linear => {
            let shifted: Vec<f64> = t.iter().map(|v| t_mean - v).collect();
            tape.column(&shifted)
        }
    };
    let per_unit = tape.mul(inner, inv_var)?;
    let out = tape.mean(per_unit);
    tape.clear_scope();
    Ok(out)
}

/// The two alternating phases of the MI estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Fit μ_θ, log Var_θ by descending L_LLD with Φ frozen.
    FitQ,
    /// Descend L_MI with μ_θ, log Var_θ frozen.
    MinMi,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fit_q" => Ok(Phase::FitQ),
            "min_mi" => Ok(Phase::MinMi),
            other => Err(Error::UnknownPhase(other.to_string())),
        }
    }
}

/// Gradient of L_LLD restricted to the variational heads.
pub fn lld_gradient(
    model: &EstimatorModel,
    x: ArrayView2<'_, f64>,
    t: &[f64],
    form: LogLikForm,
) -> Result<Vec<f64>> {
    let rep = model.represent(x)?;
    let mut tape = Tape::for_store(&model.params);
    let rep = tape.constant(rep);
    let (mu, lv) = model.record_q(&mut tape, rep, Binding::Trainable)?;
    let loss = record_lld(&mut tape, mu, lv, t, form)?;
    tape.gradient(loss)
}

/// Gradient of L_MI with respect to every estimator parameter. The variational
/// heads are not masked here; callers apply [`EstimatorModel::q_mask`].
pub fn mi_gradient(
    model: &EstimatorModel,
    x: ArrayView2<'_, f64>,
    t: &[f64],
    form: LogLikForm,
) -> Result<Vec<f64>> {
    let mut tape = Tape::for_store(&model.params);
    let xv = tape.constant_view(x);
    let rep = model
        .phi
        .record(&mut tape, &model.params, xv, Binding::Trainable)?;
    let (mu, lv) = model.record_q(&mut tape, rep, Binding::Trainable)?;
    let loss = record_mi(&mut tape, mu, lv, t, form)?;
    tape.gradient(loss)
}

/// One gradient step of the given phase; only the permitted slots change.
pub fn alternate_phase_step(
    model: &EstimatorModel,
    x: ArrayView2<'_, f64>,
    t: &[f64],
    phase: Phase,
    step: f64,
    form: LogLikForm,
) -> Result<ParamStore> {
    let q_mask = model.q_mask();
    let grad = match phase {
        Phase::FitQ => lld_gradient(model, x, t, form)?,
        Phase::MinMi => {
            let mut g = mi_gradient(model, x, t, form)?;
            g.iter_mut()
                .zip(&q_mask)
                .filter(|(_, &m)| m)
                .for_each(|(g, _)| *g = 0.0);
            g
        }
    };
    let mut params = model.params.clone();
    let allowed = |i: usize| match phase {
        Phase::FitQ => q_mask[i],
        Phase::MinMi => !q_mask[i],
    };
    for (i, (p, g)) in params.values_mut().iter_mut().zip(&grad).enumerate() {
        if allowed(i) && *g != 0.0 {
            *p -= step * g;
        }
    }
    Ok(params)
}
