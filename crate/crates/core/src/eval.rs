//! Counterfactual scoring on a treatment grid, Pareto frontiers of outcome
//! pairs, policy-on-frontier checks, correlation matching for binary
//! treatments, and plot-data output.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, DgpName};
use crate::error::{Error, Result};
use crate::model::{EstimatorModel, PolicyModel};

/// Uniformly spaced counterfactual treatments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub t: Vec<f64>,
}

impl EvalGrid {
    pub const DEFAULT_POINTS: usize = 50;

    pub fn new(t_min: f64, t_max: f64, points: usize) -> Result<Self> {
        if !(t_min < t_max) || points < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid needs t_min < t_max and at least 2 points, got [{t_min}, {t_max}] x {points}"
            )));
        }
        let step = (t_max - t_min) / (points - 1) as f64;
        let mut t: Vec<f64> = (0..points).map(|k| t_min + step * k as f64).collect();
        t[points - 1] = t_max;
        Ok(EvalGrid { t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Anything that maps (x, t) to an (s, y) pair.
pub trait OutcomeSource {
    /// Outcomes of every unit (row of `x`) at the shared treatment `t`.
    fn outcomes_at(&self, x: ArrayView2<'_, f64>, t: f64) -> Result<Vec<(f64, f64)>>;

    /// Outcomes of unit i at treatment `t[i]`.
    fn outcomes_each(&self, x: ArrayView2<'_, f64>, t: &[f64]) -> Result<Vec<(f64, f64)>>;
}

impl OutcomeSource for DgpName {
    fn outcomes_at(&self, x: ArrayView2<'_, f64>, t: f64) -> Result<Vec<(f64, f64)>> {
        Ok(x.rows()
            .into_iter()
            .map(|r| self.counterfactual(&r.to_vec(), t))
            .collect())
    }

    fn outcomes_each(&self, x: ArrayView2<'_, f64>, t: &[f64]) -> Result<Vec<(f64, f64)>> {
        if x.nrows() != t.len() {
            return Err(Error::dims("treatments", x.nrows(), t.len()));
        }
        Ok(x.rows()
            .into_iter()
            .zip(t)
            .map(|(r, &ti)| self.counterfactual(&r.to_vec(), ti))
            .collect())
    }
}

impl OutcomeSource for EstimatorModel {
    fn outcomes_at(&self, x: ArrayView2<'_, f64>, t: f64) -> Result<Vec<(f64, f64)>> {
        self.outcomes_each(x, &vec![t; x.nrows()])
    }

    fn outcomes_each(&self, x: ArrayView2<'_, f64>, t: &[f64]) -> Result<Vec<(f64, f64)>> {
        let (s, y) = self.predict_batch(x, t)?;
        Ok(s.into_iter().zip(y).collect())
    }
}

/// Estimator predictions with Φ(x) computed once for repeated grid queries.
pub struct CachedEstimator<'a> {
    model: &'a EstimatorModel,
    rep: Array2<f64>,
}

impl<'a> CachedEstimator<'a> {
    pub fn new(model: &'a EstimatorModel, x: ArrayView2<'_, f64>) -> Result<Self> {
        Ok(CachedEstimator {
            model,
            rep: model.represent(x)?,
        })
    }

    pub fn at(&self, t: f64) -> Result<Vec<(f64, f64)>> {
        let (s, y) = self
            .model
            .predict_from_rep(self.rep.view(), &vec![t; self.rep.nrows()])?;
        Ok(s.into_iter().zip(y).collect())
    }
}

/// Mean over units × grid points of (ŝ − s_cf)² and (ŷ − y_cf)², with ŷ
/// computed from the model's own ŝ.
pub fn mse_on_grid(model: &EstimatorModel, data: &Dataset, grid: &EvalGrid) -> Result<(f64, f64)> {
    let dgp = data
        .dgp
        .ok_or_else(|| Error::UnsupportedDataset(data.name.clone()))?;
    if data.n() == 0 {
        return Err(Error::EmptySplit("evaluation"));
    }
    let cached = CachedEstimator::new(model, data.x.view())?;
    let (mut es, mut ey) = (0.0, 0.0);
    for &t in &grid.t {
        let pred = cached.at(t)?;
        let truth = dgp.outcomes_at(data.x.view(), t)?;
        for ((ps, py), (ts, ty)) in pred.into_iter().zip(truth) {
            es += (ps - ts).powi(2);
            ey += (py - ty).powi(2);
        }
    }
    let count = (data.n() * grid.len()) as f64;
    Ok((es / count, ey / count))
}

/// Whether larger or smaller outcomes are preferred.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    Maximize,
    Minimize,
}

impl Orientation {
    fn sign(self) -> f64 {
        match self {
            Orientation::Maximize => 1.0,
            Orientation::Minimize => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomePoint {
    pub t: f64,
    pub s: f64,
    pub y: f64,
}

/// `a` dominates `b`: at least as good in both outcomes, strictly in one.
pub fn dominates(a: &OutcomePoint, b: &OutcomePoint, orientation: Orientation) -> bool {
    let k = orientation.sign();
    let (as_, ay, bs, by) = (k * a.s, k * a.y, k * b.s, k * b.y);
    as_ >= bs && ay >= by && (as_ > bs || ay > by)
}

/// A point cloud with per-point frontier membership.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierSet {
    pub points: Vec<OutcomePoint>,
    pub on_frontier: Vec<bool>,
    pub orientation: Orientation,
}

impl FrontierSet {
    pub fn frontier(&self) -> impl Iterator<Item = &OutcomePoint> {
        self.points
            .iter()
            .zip(&self.on_frontier)
            .filter(|(_, &f)| f)
            .map(|(p, _)| p)
    }

    /// Not dominated by any point of the cloud.
    pub fn is_non_dominated(&self, p: &OutcomePoint) -> bool {
        !self
            .points
            .iter()
            .any(|q| dominates(q, p, self.orientation))
    }

    /// Within `eps` in both outcomes of some frontier member.
    pub fn is_near_frontier(&self, p: &OutcomePoint, eps: f64) -> bool {
        self.frontier()
            .any(|f| (f.s - p.s).abs() <= eps && (f.y - p.y).abs() <= eps)
    }
}

/// Non-dominated subset in O(n log n): sweep by decreasing s, grouping equal
/// s values. Identical points are all kept.
pub fn extract_frontier(points: Vec<OutcomePoint>, orientation: Orientation) -> FrontierSet {
    let k = orientation.sign();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| (k * points[b].s).total_cmp(&(k * points[a].s)));
    let mut on_frontier = vec![false; points.len()];
    let mut best_y_above = f64::NEG_INFINITY;
    let mut start = 0;
    while start < order.len() {
        let s = k * points[order[start]].s;
        let mut end = start;
        while end < order.len() && k * points[order[end]].s == s {
            end += 1;
        }
        let group = &order[start..end];
        let group_max = group
            .iter()
            .map(|&i| k * points[i].y)
            .fold(f64::NEG_INFINITY, f64::max);
        for &i in group {
            let y = k * points[i].y;
            on_frontier[i] = !(best_y_above >= y || group_max > y);
        }
        best_y_above = best_y_above.max(group_max);
        start = end;
    }
    FrontierSet {
        points,
        on_frontier,
        orientation,
    }
}

/// Per-unit frontier hits of a treatment assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierCheck {
    pub hit_rate: f64,
    pub hits: Vec<bool>,
    pub epsilon: f64,
}

/// Grid cloud of one unit under `source`.
pub fn unit_clouds<S: OutcomeSource + ?Sized>(
    source: &S,
    x: ArrayView2<'_, f64>,
    grid: &EvalGrid,
    orientation: Orientation,
) -> Result<Vec<FrontierSet>> {
    let mut per_unit: Vec<Vec<OutcomePoint>> = vec![Vec::with_capacity(grid.len()); x.nrows()];
    for &t in &grid.t {
        for (i, (s, y)) in source.outcomes_at(x, t)?.into_iter().enumerate() {
            per_unit[i].push(OutcomePoint { t, s, y });
        }
    }
    Ok(per_unit
        .into_iter()
        .map(|pts| extract_frontier(pts, orientation))
        .collect())
}

/// Fraction of units whose outcome pair at `policy_t[i]` is non-dominated by,
/// or within `eps` of the frontier of, the unit's grid cloud.
pub fn policy_frontier_check<S: OutcomeSource + ?Sized>(
    source: &S,
    x: ArrayView2<'_, f64>,
    policy_t: &[f64],
    grid: &EvalGrid,
    eps: f64,
    orientation: Orientation,
) -> Result<FrontierCheck> {
    if x.nrows() == 0 {
        return Err(Error::EmptySplit("frontier check"));
    }
    let clouds = unit_clouds(source, x, grid, orientation)?;
    let at_policy = source.outcomes_each(x, policy_t)?;
    let hits: Vec<bool> = clouds
        .iter()
        .zip(at_policy.iter().zip(policy_t))
        .map(|(cloud, (&(s, y), &t))| {
            let p = OutcomePoint { t, s, y };
            cloud.is_non_dominated(&p) || cloud.is_near_frontier(&p, eps)
        })
        .collect();
    let hit_rate = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    Ok(FrontierCheck {
        hit_rate,
        hits,
        epsilon: eps,
    })
}

/// [`policy_frontier_check`] for a trained policy network.
pub fn policy_hit_rate<S: OutcomeSource + ?Sized>(
    policy: &PolicyModel,
    source: &S,
    x: ArrayView2<'_, f64>,
    grid: &EvalGrid,
    eps: f64,
) -> Result<FrontierCheck> {
    let t = policy.act_batch(x)?;
    policy_frontier_check(source, x, &t, grid, eps, Orientation::Maximize)
}

/// Pearson correlation; `None` when either vector has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Pseudo ground truth for each treated unit: the outcomes of its `k` most
/// correlated control units, averaged with weights ρ / Σρ (unweighted if all
/// selected ρ ≤ 0). Units with constant covariates get `None`.
pub fn pearson_match_truth(
    treated: ArrayView2<'_, f64>,
    control: ArrayView2<'_, f64>,
    control_outcomes: &[(f64, f64)],
    k: usize,
) -> Result<Vec<Option<(f64, f64)>>> {
    if control.nrows() != control_outcomes.len() {
        return Err(Error::dims(
            "control outcomes",
            control.nrows(),
            control_outcomes.len(),
        ));
    }
    if k == 0 || control.nrows() < k {
        return Err(Error::InsufficientControls {
            needed: k.max(1),
            found: control.nrows(),
        });
    }
    let controls: Vec<Vec<f64>> = control.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut out = Vec::with_capacity(treated.nrows());
    for (i, row) in treated.rows().into_iter().enumerate() {
        let xi = row.to_vec();
        let mut scored: Vec<(f64, usize)> = controls
            .iter()
            .enumerate()
            .filter_map(|(j, xj)| pearson(&xi, xj).map(|r| (r, j)))
            .collect();
        if scored.len() < k {
            log::warn!(
                "treated unit {i} has constant covariates or too few usable controls; skipped"
            );
            out.push(None);
            continue;
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &scored[..k];
        let total: f64 = top.iter().map(|(r, _)| r).sum();
        let positive = top.iter().all(|(r, _)| *r > 0.0);
        let (mut s, mut y) = (0.0, 0.0);
        for &(r, j) in top {
            let w = if positive { r / total } else { 1.0 / k as f64 };
            s += w * control_outcomes[j].0;
            y += w * control_outcomes[j].1;
        }
        out.push(Some((s, y)));
    }
    Ok(out)
}

/// One unit's cloud plus its policy point for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotUnit {
    pub unit: usize,
    pub cloud: FrontierSet,
    pub policy: Option<OutcomePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub unit: usize,
    pub t: f64,
    pub s: f64,
    pub y: f64,
    pub on_frontier: bool,
    pub is_policy: bool,
}

/// Writes `unit,t,s,y,on_frontier,is_policy` rows: every grid point, then the
/// unit's policy point flagged by non-dominance against the grid cloud.
pub fn emit_plot_data(units: &[PlotUnit], path: impl AsRef<Path>) -> Result<usize> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(["unit", "t", "s", "y", "on_frontier", "is_policy"])?;
    let mut rows = 0;
    for u in units {
        for (p, &f) in u.cloud.points.iter().zip(&u.cloud.on_frontier) {
            w.serialize(PlotRow {
                unit: u.unit,
                t: p.t,
                s: p.s,
                y: p.y,
                on_frontier: f,
                is_policy: false,
            })?;
            rows += 1;
        }
        if let Some(p) = &u.policy {
            w.serialize(PlotRow {
                unit: u.unit,
                t: p.t,
                s: p.s,
                y: p.y,
                on_frontier: u.cloud.is_non_dominated(p),
                is_policy: true,
            })?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn read_plot_data(path: impl AsRef<Path>) -> Result<Vec<PlotRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Mean and population standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Summary { mean, std, values }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

/// Aggregated results of one configuration over a seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub mse_s: Summary,
    pub mse_y: Summary,
    pub frontier_hit_rate: Option<Summary>,
    pub runtime_s: f64,
}
