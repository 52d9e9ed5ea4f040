//! Min-norm combination of per-task gradients.
//!
//! Weights on the simplex minimizing `||Σ w_i g_i||²` are found with an
//! augmented-Lagrangian loop on the equality `Σ w = 1`. Each inner step
//! minimizes
//!
//! ```text
//! L(w, μ) = ½ wᵀMw + μ (1ᵀw − 1) + ρ/2 (1ᵀw − 1)²,   w ≥ 0,   M = GGᵀ
//! ```
//!
//! exactly by enumerating supports (the number of tasks is tiny), then moves
//! the multiplier `μ ← μ + ρ (1ᵀw − 1)`. The stationarity conditions of each
//! step read `Mw = λ1 + ν` with `ν ≥ 0` on the inactive set, so once `λ > 0`
//! the rescaled iterate is already the simplex min-norm point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-task gradients over one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMatrix {
    rows: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl GradientMatrix {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig(
                "gradient matrix needs at least one task".into(),
            ));
        }
        if rows.len() != labels.len() {
            return Err(Error::dims("gradient labels", rows.len(), labels.len()));
        }
        let dim = rows[0].len();
        for (row, label) in rows.iter().zip(&labels) {
            if row.len() != dim {
                return Err(Error::dims(
                    format!("gradient row `{label}`"),
                    dim,
                    row.len(),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    task: label.clone(),
                });
            }
        }
        Ok(GradientMatrix { rows, labels })
    }

    /// Rows labelled `g1`, `g2`, ...
    pub fn unlabeled(rows: Vec<Vec<f64>>) -> Result<Self> {
        let labels = (1..=rows.len()).map(|i| format!("g{i}")).collect();
        Self::new(rows, labels)
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// M = GGᵀ.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.n_tasks();
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = dot(&self.rows[i], &self.rows[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// Keeps only the rows whose index satisfies `keep`.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> Option<GradientMatrix> {
        let (rows, labels): (Vec<_>, Vec<_>) = self
            .rows
            .iter()
            .zip(&self.labels)
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, (r, l))| (r.clone(), l.clone()))
            .unzip();
        if rows.is_empty() {
            None
        } else {
            Some(GradientMatrix { rows, labels })
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rescales each nonzero row to unit Euclidean norm; zero rows stay zero.
pub fn normalize_gradients(g: &GradientMatrix) -> GradientMatrix {
    let rows = g
        .rows
        .iter()
        .map(|r| {
            let n = norm(r);
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.clone()
            }
        })
        .collect();
    GradientMatrix {
        rows,
        labels: g.labels.clone(),
    }
}

/// Simplex weights plus the augmented-Lagrangian state that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoWeights {
    pub w: Vec<f64>,
    pub mu: f64,
    pub rho: f64,
    /// Whether `|Σw − 1|` fell under the tolerance before the final rescale.
    pub converged: bool,
}

impl ParetoWeights {
    pub fn new(w: Vec<f64>, rho: f64) -> Self {
        ParetoWeights {
            w,
            mu: 0.0,
            rho,
            converged: false,
        }
    }

    pub fn uniform(m: usize, rho: f64) -> Self {
        Self::new(vec![1.0 / m as f64; m], rho)
    }
}

/// How each inner step updates w.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerUpdate {
    /// Exact minimizer of the augmented Lagrangian over w ≥ 0.
    #[default]
    Exact,
    /// `max(0, (M + ρI)⁻¹ (ρ − μ) 1)`, a diagonal-regularized shortcut.
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rho: f64,
    pub inner_iters: usize,
    pub tol: f64,
    pub update: InnerUpdate,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rho: 1.0,
            inner_iters: 50,
            tol: 1e-6,
            update: InnerUpdate::Exact,
        }
    }
}

/// L(w, μ) for the Gram matrix `m`.
pub fn augmented_objective(m: &DMatrix<f64>, w: &[f64], mu: f64, rho: f64) -> f64 {
    let wv = DVector::from_column_slice(w);
    let quad = 0.5 * wv.dot(&(m * &wv));
    let gap = w.iter().sum::<f64>() - 1.0;
    quad + mu * gap + 0.5 * rho * gap * gap
}

fn exact_step(m: &DMatrix<f64>, mu: f64, rho: f64) -> Vec<f64> {
    let k = m.nrows();
    let mut best = vec![0.0; k];
    let mut best_val = augmented_objective(m, &best, mu, rho);
    for support in 1u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|i| support & (1 << i) != 0).collect();
        let f = idx.len();
        let a = DMatrix::from_fn(f, f, |r, c| m[(idx[r], idx[c])] + rho);
        let b = DVector::from_element(f, rho - mu);
        let Ok(sol) = a.clone().svd(true, true).solve(&b, 1e-12) else {
            continue;
        };
        if (&a * &sol - &b).norm() > 1e-9 * (1.0 + b.norm()) || sol.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut w = vec![0.0; k];
        for (slot, v) in idx.iter().zip(sol.iter()) {
            w[*slot] = v.max(0.0);
        }
        let val = augmented_objective(m, &w, mu, rho);
        if val < best_val {
            best_val = val;
            best = w;
        }
    }
    best
}

fn diagonal_step(m: &DMatrix<f64>, mu: f64, rho: f64) -> Vec<f64> {
    let k = m.nrows();
    let a = m + DMatrix::identity(k, k) * rho;
    let b = DVector::from_element(k, rho - mu);
    let sol = a.cholesky().expect("M + ρI is positive definite").solve(&b);
    sol.iter().map(|v| v.max(0.0)).collect()
}

/// Runs `inner_iters` augmented-Lagrangian steps from `state` and rescales
/// the result onto the simplex (uniform if every weight was clipped to zero).
pub fn min_norm_weights(
    g: &GradientMatrix,
    state: &ParetoWeights,
    cfg: &SolverConfig,
) -> Result<ParetoWeights> {
    min_norm_weights_traced(g, state, cfg, |_, _| {})
}

/// As [`min_norm_weights`], calling `observe(w, μ)` after every inner step.
pub fn min_norm_weights_traced(
    g: &GradientMatrix,
    state: &ParetoWeights,
    cfg: &SolverConfig,
    mut observe: impl FnMut(&[f64], f64),
) -> Result<ParetoWeights> {
    if !(cfg.rho > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "rho must be positive, got {}",
            cfg.rho
        )));
    }
    let k = g.n_tasks();
    if state.w.len() != k {
        return Err(Error::dims("pareto weights", k, state.w.len()));
    }
    let m = g.gram();
    let mut w = state.w.clone();
    let mut mu = state.mu;
    for _ in 0..cfg.inner_iters {
        w = match cfg.update {
            InnerUpdate::Exact => exact_step(&m, mu, cfg.rho),
            InnerUpdate::Diagonal => diagonal_step(&m, mu, cfg.rho),
        };
        let gap = w.iter().sum::<f64>() - 1.0;
        mu += cfg.rho * gap;
        observe(&w, mu);
        if gap.abs() <= 1e-14 {
            break;
        }
    }
    let total: f64 = w.iter().sum();
    let converged = (total - 1.0).abs() <= cfg.tol;
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        w = vec![1.0 / k as f64; k];
    }
    Ok(ParetoWeights {
        w,
        mu,
        rho: cfg.rho,
        converged,
    })
}

/// d = Σ_i w_i g_i.
pub fn combine_direction(g: &GradientMatrix, w: &ParetoWeights) -> Result<Vec<f64>> {
    if w.w.len() != g.n_tasks() {
        return Err(Error::dims("direction weights", g.n_tasks(), w.w.len()));
    }
    let mut d = vec![0.0; g.dim()];
    for (row, &wi) in g.rows.iter().zip(&w.w) {
        if wi != 0.0 {
            d.iter_mut().zip(row).for_each(|(di, gi)| *di += wi * gi);
        }
    }
    Ok(d)
}

/// ⟨d, g_i⟩ for every task.
pub fn descent_certificate(g: &GradientMatrix, d: &[f64]) -> Vec<f64> {
    g.rows.iter().map(|r| dot(r, d)).collect()
}

/// One solver call summarized for the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoTrace {
    pub tasks: Vec<String>,
    pub w: Vec<f64>,
    pub mu: f64,
    pub direction_norm: f64,
    pub certificate_min: f64,
    pub converged: bool,
}

impl ParetoTrace {
    pub fn new(g: &GradientMatrix, w: &ParetoWeights, d: &[f64]) -> Self {
        let cert = descent_certificate(g, d);
        ParetoTrace {
            tasks: g.labels.clone(),
            w: w.w.clone(),
            mu: w.mu,
            direction_norm: norm(d),
            certificate_min: cert.into_iter().fold(f64::INFINITY, f64::min),
            converged: w.converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solve(rows: Vec<Vec<f64>>) -> ParetoWeights {
        let g = GradientMatrix::unlabeled(rows).unwrap();
        let k = g.n_tasks();
        min_norm_weights(
            &g,
            &ParetoWeights::uniform(k, 1.0),
            &SolverConfig::default(),
        )
        .unwrap()
    }

    fn direction_norm(rows: &[Vec<f64>], w: &[f64]) -> f64 {
        let dim = rows[0].len();
        let mut d = vec![0.0; dim];
        for (r, wi) in rows.iter().zip(w) {
            for (dj, rj) in d.iter_mut().zip(r) {
                *dj += wi * rj;
            }
        }
        norm(&d)
    }

    #[test]
    fn normalize_examples() {
        let g = GradientMatrix::unlabeled(vec![vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let n = normalize_gradients(&g);
        assert!((n.row(0)[0] - 0.6).abs() < 1e-15 && (n.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_row_names_task() {
        let err = GradientMatrix::new(
            vec![vec![1.0], vec![f64::NAN]],
            vec!["s".into(), "y".into()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { task } if task == "y"));
    }

    #[test]
    fn diagonal_step_orthonormal_fixed_point() {
        let g = GradientMatrix::unlabeled(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cfg = SolverConfig {
            inner_iters: 1,
            update: InnerUpdate::Diagonal,
            ..SolverConfig::default()
        };
        let mut seen = Vec::new();
        let w = min_norm_weights_traced(&g, &ParetoWeights::uniform(2, 1.0), &cfg, |w, mu| {
            seen.push((w.to_vec(), mu))
        })
        .unwrap();
        assert_eq!(seen.len(), 1);
        let (w1, mu1) = &seen[0];
        assert!(w1.iter().all(|v| (v - 0.5).abs() < 1e-15) && mu1.abs() < 1e-15);
        assert!(w.w.iter().all(|v| (v - 0.5).abs() < 1e-15) && w.mu.abs() < 1e-15);
    }

    #[test]
    fn two_task_closed_example() {
        let w = solve(vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
        assert!(
            (w.w[0] - 0.2).abs() < 1e-9 && (w.w[1] - 0.8).abs() < 1e-9,
            "{:?}",
            w.w
        );
        assert!(w.converged);
        // Oracle: grid over w in [0, 1] with step 1e-4.
        let best = (0..=10_000)
            .map(|i| i as f64 * 1e-4)
            .min_by(|a, b| {
                let f = |w: f64| 4.0 * w * w + (1.0 - w).powi(2);
                f(*a).total_cmp(&f(*b))
            })
            .unwrap();
        assert!((best - 0.2).abs() < 1e-4);
        let g = GradientMatrix::unlabeled(vec![vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = combine_direction(&g, &w).unwrap();
        assert!((d[0] - 0.4).abs() < 1e-9 && (d[1] - 0.8).abs() < 1e-9);
        let cert = descent_certificate(&g, &d);
        assert!(cert.iter().all(|c| (c - 0.8).abs() < 1e-9));
    }

    #[test]
    fn opposed_gradients_are_stationary() {
        let w = solve(vec![vec![1.0, -2.0, 0.5], vec![-1.0, 2.0, -0.5]]);
        assert!((w.w[0] - 0.5).abs() < 1e-9);
        assert!(direction_norm(&[vec![1.0, -2.0, 0.5], vec![-1.0, 2.0, -0.5]], &w.w) < 1e-9);
    }

    #[test]
    fn combine_vertex_and_identical_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let g = GradientMatrix::unlabeled(rows).unwrap();
        let d = combine_direction(&g, &ParetoWeights::new(vec![1.0, 0.0, 0.0], 1.0)).unwrap();
        assert_eq!(d, vec![1.0, 2.0]);
        let same = GradientMatrix::unlabeled(vec![vec![0.3, -0.7]; 3]).unwrap();
        let d = combine_direction(&same, &ParetoWeights::new(vec![0.2, 0.5, 0.3], 1.0)).unwrap();
        assert!((d[0] - 0.3).abs() < 1e-15 && (d[1] + 0.7).abs() < 1e-15);
        assert!(combine_direction(&g, &ParetoWeights::uniform(2, 1.0)).is_err());
    }

    #[test]
    fn two_task_oracle_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let dim = rng.gen_range(1..=10);
            let rows: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let w = solve(rows.clone());
            let got = direction_norm(&rows, &w.w);
            let oracle = (0..=10_000)
                .map(|i| {
                    let a = i as f64 * 1e-4;
                    direction_norm(&rows, &[a, 1.0 - a])
                })
                .fold(f64::INFINITY, f64::min);
            assert!((got - oracle).abs() <= 1e-3, "{got} vs {oracle}");
            assert!(got <= oracle + 1e-12);
        }
    }

    #[test]
    fn three_task_oracle_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let dim = rng.gen_range(3..=10);
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let w = solve(rows.clone());
            let got = direction_norm(&rows, &w.w);
            let mut oracle = f64::INFINITY;
            for i in 0..=100 {
                for j in 0..=(100 - i) {
                    let (a, b) = (i as f64 * 1e-2, j as f64 * 1e-2);
                    oracle = oracle.min(direction_norm(&rows, &[a, b, 1.0 - a - b]));
                }
            }
            assert!((got - oracle).abs() <= 1e-2, "{got} vs {oracle}");
            assert!(got <= oracle + 1e-12);
        }
    }

    #[test]
    fn inner_steps_never_increase_current_subproblem() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let g = GradientMatrix::unlabeled(rows).unwrap();
            let m = g.gram();
            let mut prev_w = vec![1.0 / 3.0; 3];
            let mut prev_mu = 0.0;
            let mut ok = true;
            min_norm_weights_traced(
                &g,
                &ParetoWeights::uniform(3, 1.0),
                &SolverConfig::default(),
                |w, mu| {
                    let before = augmented_objective(&m, &prev_w, prev_mu, 1.0);
                    let after = augmented_objective(&m, w, prev_mu, 1.0);
                    ok &= after <= before + 1e-9;
                    prev_w = w.to_vec();
                    prev_mu = mu;
                },
            )
            .unwrap();
            assert!(ok);
        }
    }

    #[test]
    fn rejects_non_positive_rho() {
        let g = GradientMatrix::unlabeled(vec![vec![1.0]]).unwrap();
        let cfg = SolverConfig {
            rho: 0.0,
            ..SolverConfig::default()
        };
        assert!(min_norm_weights(&g, &ParetoWeights::uniform(1, 0.0), &cfg).is_err());
    }

    fn gradient_rows(max_tasks: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1..=max_tasks, 1usize..8).prop_flat_map(|(k, dim)| {
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), k)
        })
    }

    proptest! {
        #[test]
        fn normalized_rows_have_unit_norm(rows in gradient_rows(4)) {
            let g = normalize_gradients(&GradientMatrix::unlabeled(rows.clone()).unwrap());
            for (orig, r) in rows.iter().zip(g.rows()) {
                if norm(orig) > 0.0 {
                    prop_assert!((norm(r) - 1.0).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn weights_on_simplex(rows in gradient_rows(4)) {
            let w = solve(rows);
            prop_assert!(w.w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn common_descent_on_normalized_rows(rows in gradient_rows(4)) {
            let g = normalize_gradients(&GradientMatrix::unlabeled(rows).unwrap());
            let w = min_norm_weights(&g, &ParetoWeights::uniform(g.n_tasks(), 1.0), &SolverConfig::default()).unwrap();
            let d = combine_direction(&g, &w).unwrap();
            let dn = dot(&d, &d);
            if dn.sqrt() > 1e-6 {
                // Zero rows never certify descent; they carry no signal.
                for (c, r) in descent_certificate(&g, &d).iter().zip(g.rows()) {
                    if norm(r) > 0.0 {
                        prop_assert!(*c >= dn - 1e-6, "{} < {}", c, dn);
                    }
                }
            }
        }
    }
}
