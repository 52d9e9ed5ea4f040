//! The estimator (covariate representation, treatment embedding, outcome
//! heads, variational heads) and the policy network.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Activation, Binding, DenseNet, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// One coordinate of the fixed treatment embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentFeature {
    Identity,
    Sin,
    Cos,
    Square,
    SqrtAbs,
    Log1pAbs,
    Gaussian,
    ExpM1,
}

impl TreatmentFeature {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            TreatmentFeature::Identity => t,
            TreatmentFeature::Sin => t.sin(),
            TreatmentFeature::Cos => t.cos(),
            TreatmentFeature::Square => t * t,
            TreatmentFeature::SqrtAbs => t.abs().sqrt(),
            TreatmentFeature::Log1pAbs => t.abs().ln_1p(),
            TreatmentFeature::Gaussian => (-t * t).exp(),
            TreatmentFeature::ExpM1 => t.exp_m1(),
        }
    }

    fn record(self, tape: &mut Tape, t: Var) -> Var {
        match self {
            TreatmentFeature::Identity => t,
            TreatmentFeature::Sin => tape.sin(t),
            TreatmentFeature::Cos => tape.cos(t),
            TreatmentFeature::Square => tape.square(t),
            TreatmentFeature::SqrtAbs => {
                let a = tape.abs(t);
                tape.sqrt(a)
            }
            TreatmentFeature::Log1pAbs => {
                let a = tape.abs(t);
                let a = tape.offset(a, 1.0);
                tape.ln(a)
            }
            TreatmentFeature::Gaussian => {
                let sq = tape.square(t);
                let neg = tape.scale(sq, -1.0);
                tape.exp(neg)
            }
            TreatmentFeature::ExpM1 => {
                let e = tape.exp(t);
                tape.offset(e, -1.0)
            }
        }
    }
}

/// Fixed, non-learned treatment map Ψ. The first coordinate is always the
/// identity, so the map is injective.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentEmbedding {
    features: Vec<TreatmentFeature>,
}

impl Default for TreatmentEmbedding {
    fn default() -> Self {
        use TreatmentFeature::*;
        TreatmentEmbedding {
            features: vec![
                Identity, Sin, Cos, Square, SqrtAbs, Log1pAbs, Gaussian, Identity,
            ],
        }
    }
}

impl TreatmentEmbedding {
    pub fn new(features: Vec<TreatmentFeature>) -> Result<Self> {
        if features.first() != Some(&TreatmentFeature::Identity) {
            return Err(Error::InvalidConfig(
                "treatment embedding must start with the identity feature".into(),
            ));
        }
        Ok(TreatmentEmbedding { features })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[TreatmentFeature] {
        &self.features
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        self.features.iter().map(|f| f.eval(t)).collect()
    }

    pub fn embed_batch(&self, ts: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((ts.len(), self.dim()), |(i, j)| {
            self.features[j].eval(ts[i])
        })
    }

    /// Records Ψ on a tape so gradients reach whatever produced `t` (n x 1).
    pub fn record(&self, tape: &mut Tape, t: Var) -> Result<Var> {
        tape.set_scope("psi");
        let cols: Vec<Var> = self.features.iter().map(|f| f.record(tape, t)).collect();
        let out = tape.concat(&cols);
        tape.clear_scope();
        out
    }
}

/// Layer sizes and wiring of the estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorArch {
    pub covariates: usize,
    pub phi_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub q_hidden: usize,
    pub activation: Activation,
    /// Feed ŝ into the long-term head.
    pub shat_feed: bool,
    pub embedding: TreatmentEmbedding,
}

impl EstimatorArch {
    pub fn new(covariates: usize) -> Self {
        EstimatorArch {
            covariates,
            phi_hidden: vec![64, 32],
            head_hidden: 32,
            q_hidden: 16,
            activation: Activation::Elu,
            shat_feed: true,
            embedding: TreatmentEmbedding::default(),
        }
    }

    pub fn rep_dim(&self) -> usize {
        *self.phi_hidden.last().expect("phi has at least one layer")
    }
}

pub const PHI: &str = "phi";
pub const HEAD_S: &str = "head_s";
pub const HEAD_Y: &str = "head_y";
pub const Q_MEAN: &str = "q_mean";
pub const Q_LOGVAR: &str = "q_logvar";

/// Forward-pass handles for one batch on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorNodes {
    pub rep: Var,
    pub s_hat: Var,
    pub y_hat: Var,
}

/// Φ, Ψ, h_s, h_y, μ_θ and log Var_θ over one flat parameter vector ξ.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimatorModel {
    pub arch: EstimatorArch,
    pub phi: DenseNet,
    pub head_s: DenseNet,
    pub head_y: DenseNet,
    pub q_mean: DenseNet,
    pub q_logvar: DenseNet,
    pub params: ParamStore,
}

impl EstimatorModel {
    pub fn new<R: Rng + ?Sized>(arch: EstimatorArch, rng: &mut R) -> Result<Self> {
        let act = arch.activation;
        let mut phi_widths = vec![arch.covariates];
        phi_widths.extend(&arch.phi_hidden);
        let phi = DenseNet::new(PHI, &phi_widths, act, act)?;
        let d = arch.rep_dim() + arch.embedding.dim();
        let head_s = DenseNet::new(HEAD_S, &[d, arch.head_hidden, 1], act, Activation::Identity)?;
        let dy = d + usize::from(arch.shat_feed);
        let head_y = DenseNet::new(
            HEAD_Y,
            &[dy, arch.head_hidden, 1],
            act,
            Activation::Identity,
        )?;
        let qw = [arch.rep_dim(), arch.q_hidden, 1];
        let q_mean = DenseNet::new(Q_MEAN, &qw, act, Activation::Identity)?;
        let q_logvar = DenseNet::new(Q_LOGVAR, &qw, act, Activation::Identity)?;

        let mut params = ParamStore::new();
        for net in [&phi, &head_s, &head_y, &q_mean, &q_logvar] {
            net.register(&mut params)?;
        }
        params.init_glorot(rng);
        Ok(EstimatorModel {
            arch,
            phi,
            head_s,
            head_y,
            q_mean,
            q_logvar,
            params,
        })
    }

    pub fn covariates(&self) -> usize {
        self.arch.covariates
    }

    pub fn embed_treatment(&self, t: f64) -> Vec<f64> {
        self.arch.embedding.embed(t)
    }

    fn check_x(&self, n: usize) -> Result<()> {
        if n != self.covariates() {
            return Err(Error::dims("covariates", self.covariates(), n));
        }
        Ok(())
    }

    /// Φ(x) for every row.
    pub fn represent(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.phi.forward_batch(&self.params, x)
    }

    fn head_s_input(&self, rep: ArrayView2<'_, f64>, ts: &[f64]) -> Array2<f64> {
        let psi = self.arch.embedding.embed_batch(ts);
        ndarray::concatenate(Axis(1), &[rep.view(), psi.view()]).expect("row counts agree")
    }

    /// ŝ and ŷ for each row of `rep` (already Φ(x)) at treatments `ts`.
    pub fn predict_from_rep(
        &self,
        rep: ArrayView2<'_, f64>,
        ts: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if rep.nrows() != ts.len() {
            return Err(Error::dims("treatments", rep.nrows(), ts.len()));
        }
        let zs = self.head_s_input(rep, ts);
        let s = self.head_s.forward_batch(&self.params, zs.view())?;
        let zy = if self.arch.shat_feed {
            ndarray::concatenate(Axis(1), &[zs.view(), s.view()]).expect("rows agree")
        } else {
            zs
        };
        let y = self.head_y.forward_batch(&self.params, zy.view())?;
        Ok((s.column(0).to_vec(), y.column(0).to_vec()))
    }

    /// ŝ and ŷ for each (x_i, t_i); ŷ always consumes the predicted ŝ.
    pub fn predict_batch(
        &self,
        x: ArrayView2<'_, f64>,
        ts: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_x(x.ncols())?;
        let rep = self.represent(x)?;
        self.predict_from_rep(rep.view(), ts)
    }

    pub fn predict_s(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_x(x.len())?;
        let rep = self.phi.forward(&self.params, x)?;
        let mut z = rep;
        z.extend(self.embed_treatment(t));
        Ok(self.head_s.forward(&self.params, &z)?[0])
    }

    /// ŷ = h_y(Φ(x) ⊕ Ψ(t) ⊕ ŝ). Without the ŝ feed, `s_hat` is ignored.
    pub fn predict_y(&self, x: &[f64], t: f64, s_hat: f64) -> Result<f64> {
        self.check_x(x.len())?;
        let mut z = self.phi.forward(&self.params, x)?;
        z.extend(self.embed_treatment(t));
        if self.arch.shat_feed {
            z.push(s_hat);
        }
        Ok(self.head_y.forward(&self.params, &z)?[0])
    }

    /// Records the outcome path given a covariate node and a Ψ(t) node.
    pub fn record_outcomes(
        &self,
        tape: &mut Tape,
        x: Var,
        psi: Var,
        binding: Binding,
    ) -> Result<EstimatorNodes> {
        let rep = self.phi.record(tape, &self.params, x, binding)?;
        self.record_heads(tape, rep, psi, binding)
    }

    /// Records h_s and h_y on top of an existing representation node.
    pub fn record_heads(
        &self,
        tape: &mut Tape,
        rep: Var,
        psi: Var,
        binding: Binding,
    ) -> Result<EstimatorNodes> {
        let zs = tape.concat(&[rep, psi])?;
        let s_hat = self.head_s.record(tape, &self.params, zs, binding)?;
        let zy = if self.arch.shat_feed {
            tape.concat(&[zs, s_hat])?
        } else {
            zs
        };
        let y_hat = self.head_y.record(tape, &self.params, zy, binding)?;
        Ok(EstimatorNodes { rep, s_hat, y_hat })
    }

    /// μ_θ and (unclamped) log Var_θ on top of a representation node.
    pub fn record_q(&self, tape: &mut Tape, rep: Var, binding: Binding) -> Result<(Var, Var)> {
        let mu = self.q_mean.record(tape, &self.params, rep, binding)?;
        let lv = self.q_logvar.record(tape, &self.params, rep, binding)?;
        Ok((mu, lv))
    }

    /// μ_θ(rep), log Var_θ(rep) evaluated directly.
    pub fn q_params(&self, rep: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mu = self.q_mean.forward_batch(&self.params, rep)?;
        let lv = self.q_logvar.forward_batch(&self.params, rep)?;
        Ok((mu.column(0).to_vec(), lv.column(0).to_vec()))
    }

    /// Flat-vector mask of the variational heads μ_θ and log Var_θ.
    pub fn q_mask(&self) -> Vec<bool> {
        let a = self.params.mask_for_prefix(&format!("{Q_MEAN}."));
        let b = self.params.mask_for_prefix(&format!("{Q_LOGVAR}."));
        a.into_iter().zip(b).map(|(a, b)| a || b).collect()
    }

    /// Flat-vector mask of the slots of one sub-network.
    pub fn mask(&self, prefix: &str) -> Vec<bool> {
        self.params.mask_for_prefix(&format!("{prefix}."))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut m: EstimatorModel = serde_json::from_str(s)?;
        m.params.reindex()?;
        Ok(m)
    }
}

/// Maps an unbounded score onto `[t_min, t_max]` via tanh.
pub fn squash(raw: f64, t_min: f64, t_max: f64) -> f64 {
    let mid = 0.5 * (t_min + t_max);
    let half = 0.5 * (t_max - t_min);
    (mid + half * raw.tanh()).clamp(t_min, t_max)
}

pub const POLICY: &str = "pi";

/// Deterministic policy Π(x) → t ∈ [t_min, t_max].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyModel {
    pub net: DenseNet,
    pub t_min: f64,
    pub t_max: f64,
    pub params: ParamStore,
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(
        covariates: usize,
        hidden: usize,
        t_min: f64,
        t_max: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(t_min < t_max) {
            return Err(Error::InvalidConfig(format!(
                "empty treatment interval [{t_min}, {t_max}]"
            )));
        }
        let net = DenseNet::new(
            POLICY,
            &[covariates, hidden, 1],
            Activation::Elu,
            Activation::Identity,
        )?;
        let mut params = ParamStore::new();
        net.register(&mut params)?;
        params.init_glorot(rng);
        Ok(PolicyModel {
            net,
            t_min,
            t_max,
            params,
        })
    }

    pub fn act(&self, x: &[f64]) -> Result<f64> {
        let raw = self.net.forward(&self.params, x)?[0];
        Ok(squash(raw, self.t_min, self.t_max))
    }

    pub fn act_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let raw = self.net.forward_batch(&self.params, x)?;
        Ok(raw
            .column(0)
            .iter()
            .map(|&r| squash(r, self.t_min, self.t_max))
            .collect())
    }

    /// Records Π(x) as an n x 1 treatment node.
    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let raw = self.net.record(tape, &self.params, x, Binding::Trainable)?;
        tape.set_scope("pi.squash");
        let th = tape.activation(raw, Activation::Tanh);
        let half = tape.scale(th, 0.5 * (self.t_max - self.t_min));
        let t = tape.offset(half, 0.5 * (self.t_min + self.t_max));
        tape.clear_scope();
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut m: PolicyModel = serde_json::from_str(s)?;
        m.params.reindex()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(shat: bool) -> EstimatorModel {
        let mut arch = EstimatorArch::new(3);
        arch.phi_hidden = vec![6, 4];
        arch.head_hidden = 5;
        arch.q_hidden = 3;
        arch.shat_feed = shat;
        EstimatorModel::new(arch, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn embedding_values() {
        use TreatmentFeature::*;
        let e = TreatmentEmbedding::new(vec![Identity, Sin, Square, ExpM1]).unwrap();
        assert_eq!(e.embed(0.0), vec![0.0, 0.0, 0.0, 0.0]);
        let v = e.embed(1.0);
        let want = [1.0, 1f64.sin(), 1.0, std::f64::consts::E - 1.0];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(TreatmentEmbedding::new(vec![Sin]).is_err());
    }

    #[test]
    fn embedding_is_injective_through_first_coordinate() {
        let e = TreatmentEmbedding::default();
        for (a, b) in [(0.3, 0.31), (-1.0, 1.0), (2.0, 2.0 + 1e-9)] {
            assert_ne!(e.embed(a), e.embed(b));
            assert_eq!(e.embed(a)[0], a);
        }
    }

    #[test]
    fn parameter_partition_is_exact() {
        let m = model(true);
        let prefixes = [PHI, HEAD_S, HEAD_Y, Q_MEAN, Q_LOGVAR];
        let mut covered = vec![0u8; m.params.len()];
        for p in prefixes {
            for (c, on) in covered.iter_mut().zip(m.mask(p)) {
                *c += on as u8;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        assert_eq!(m.head_y.input_width(), m.head_s.input_width() + 1);
    }

    #[test]
    fn constant_heads_return_their_bias() {
        let mut m = model(true);
        m.params
            .get_mut("head_s.1.w")
            .unwrap()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        m.params.get_mut("head_s.1.b").unwrap()[0] = 0.7;
        m.params
            .get_mut("head_y.1.w")
            .unwrap()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        m.params.get_mut("head_y.1.b").unwrap()[0] = -1.5;
        for (x, t) in [([0.1, 0.2, 0.3], 1.0), ([5.0, -1.0, 0.0], -2.0)] {
            assert_eq!(m.predict_s(&x, t).unwrap(), 0.7);
            assert_eq!(m.predict_y(&x, t, 3.0).unwrap(), -1.5);
        }
    }

    #[test]
    fn predict_s_matches_hand_composition() {
        let m = model(true);
        let x = [0.4, -0.2, 1.1];
        let t = 1.7;
        let mut z = m.phi.forward(&m.params, &x).unwrap();
        z.extend(m.arch.embedding.embed(t));
        let want = m.head_s.forward(&m.params, &z).unwrap()[0];
        assert!((m.predict_s(&x, t).unwrap() - want).abs() <= 1e-12);
        let xs = ndarray::arr2(&[x]);
        let (s, _) = m.predict_batch(xs.view(), &[t]).unwrap();
        assert!((s[0] - want).abs() <= 1e-12);
    }

    #[test]
    fn y_depends_on_shat_slot() {
        let mut m = model(true);
        // Make sure the ŝ slot has a nonzero weight into the first hidden unit.
        let w = m.params.get_mut("head_y.0.w").unwrap();
        let last_row = w.len() - 5;
        w[last_row] = 0.9;
        let x = [0.1, 0.2, 0.3];
        assert_ne!(
            m.predict_y(&x, 1.0, 0.0).unwrap(),
            m.predict_y(&x, 1.0, 2.0).unwrap()
        );
    }

    #[test]
    fn y_gradient_wrt_shat_matches_finite_difference() {
        let m = model(true);
        let x = [0.3, 0.9, -0.4];
        let (t, s) = (1.3, 0.8);
        // Treat ŝ as the single "parameter" of a tiny store.
        let mut sp = ParamStore::new();
        sp.push_slot("s", (1, 1)).unwrap();
        sp.set_values(&[s]).unwrap();
        let g = grad(&sp, |tape, sp| {
            let xs = tape.constant(ndarray::arr2(&[x]));
            let rep = m.phi.record(tape, &m.params, xs, Binding::Frozen)?;
            let psi = tape.constant(m.arch.embedding.embed_batch(&[t]));
            let sv = tape.param(sp, "s")?;
            let z = tape.concat(&[rep, psi, sv])?;
            let y = m.head_y.record(tape, &m.params, z, Binding::Frozen)?;
            Ok(tape.sum(y))
        })
        .unwrap()[0];
        let h = 1e-5;
        let fd =
            (m.predict_y(&x, t, s + h).unwrap() - m.predict_y(&x, t, s - h).unwrap()) / (2.0 * h);
        assert!((g - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "{g} vs {fd}");
    }

    #[test]
    fn squash_limits_and_midpoint() {
        assert_eq!(squash(0.0, 1.0, 3.0), 2.0);
        assert_eq!(squash(1e6, 1.0, 3.0), 3.0);
        assert_eq!(squash(-1e6, 1.0, 3.0), 1.0);
        assert_eq!(squash(f64::INFINITY, 4.0, 6.0), 6.0);
    }

    #[test]
    fn policy_outputs_stay_in_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = PolicyModel::new(4, 8, 1.0, 3.0, &mut rng).unwrap();
        // Large weights push tanh into saturation.
        p.params.values_mut().iter_mut().for_each(|v| *v *= 50.0);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let t = p.act(&x).unwrap();
            assert!((1.0..=3.0).contains(&t));
        }
        assert!(PolicyModel::new(4, 8, 3.0, 3.0, &mut rng).is_err());
    }

    #[test]
    fn snapshot_roundtrip() {
        let m = model(false);
        let back = EstimatorModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.params.checksum(), m.params.checksum());
        let x = [0.5, 0.5, 0.5];
        assert_eq!(
            back.predict_s(&x, 2.0).unwrap(),
            m.predict_s(&x, 2.0).unwrap()
        );
    }
}
