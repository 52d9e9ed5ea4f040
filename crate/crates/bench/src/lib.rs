//! Seeded fixtures shared by the benchmarks under `benches/`.

use ndarray::Array2;
use pote_core::datagen::{generate, Dataset, DgpSpec};
use pote_core::eval::OutcomePoint;
use pote_core::model::{EstimatorArch, EstimatorModel, PolicyModel};
use pote_core::pareto::GradientMatrix;
use pote_core::poe::PoeConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `tasks` standard-normal-ish gradient rows of length `dim`.
pub fn gradients(tasks: usize, dim: usize, seed: u64) -> GradientMatrix {
    let mut r = rng(seed);
    let rows = (0..tasks)
        .map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    GradientMatrix::unlabeled(rows).expect("finite rows")
}

pub fn cloud(n: usize, seed: u64) -> Vec<OutcomePoint> {
    let mut r = rng(seed);
    (0..n)
        .map(|k| OutcomePoint {
            t: k as f64,
            s: r.gen_range(0.0..1.0),
            y: r.gen_range(0.0..1.0),
        })
        .collect()
}

pub fn simulation(n: usize) -> Dataset {
    generate(&DgpSpec::simulation(), n, 0).expect("simulation needs no covariates")
}

/// An estimator with the default architecture for `covariates` inputs.
pub fn estimator(covariates: usize) -> EstimatorModel {
    let arch: EstimatorArch = PoeConfig::default().arch(covariates);
    EstimatorModel::new(arch, &mut rng(1)).expect("valid arch")
}

pub fn policy(covariates: usize) -> PolicyModel {
    PolicyModel::new(covariates, 32, 1.0, 3.0, &mut rng(2)).expect("valid interval")
}

pub fn batch(data: &Dataset, n: usize) -> (Array2<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let idx: Vec<usize> = (0..n.min(data.n())).collect();
    let b = data.select(&idx);
    (b.x, b.t, b.s, b.y)
}
