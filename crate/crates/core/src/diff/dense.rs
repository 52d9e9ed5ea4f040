use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{Activation, Tape, Var};
use crate::error::{Error, Result};

/// How a network's weights enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Parameter leaves; gradients flow to them.
    Trainable,
    /// Constants; used when a frozen network sits inside another's loss.
    Frozen,
}

/// Fully connected feed-forward net reading its weights from a [`ParamStore`].
///
/// Slot names are `{prefix}.{layer}.w` (shape `in x out`) and
/// `{prefix}.{layer}.b` (shape `1 x out`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseNet {
    pub prefix: String,
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl DenseNet {
    pub fn new(
        prefix: impl Into<String>,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must be >= 2 positive entries, got {widths:?}"
            )));
        }
        Ok(DenseNet {
            prefix: prefix.into(),
            widths: widths.to_vec(),
            hidden,
            output,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.b", self.prefix)
    }

    fn layer_activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Adds this net's slots to `store`.
    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for (l, pair) in self.widths.windows(2).enumerate() {
            store.push_slot(self.weight_name(l), (pair[0], pair[1]))?;
            store.push_slot(self.bias_name(l), (1, pair[1]))?;
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Evaluates the net on a single input vector.
    pub fn forward(&self, params: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row shape");
        Ok(self.forward_batch(params, x)?.into_raw_vec_and_offset().0)
    }

    /// Evaluates the net on every row of `input` without recording.
    pub fn forward_batch(
        &self,
        params: &ParamStore,
        input: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        if input.ncols() != self.input_width() {
            return Err(Error::dims(
                format!("{} input", self.prefix),
                self.input_width(),
                input.ncols(),
            ));
        }
        let mut h: Array2<f64> = input.to_owned();
        for l in 0..self.n_layers() {
            let w = params.matrix(&self.weight_name(l))?;
            let b = params.matrix(&self.bias_name(l))?;
            h = h.dot(&w) + b;
            let act = self.layer_activation(l);
            if act != Activation::Identity {
                h.mapv_inplace(|v| act.apply(v));
            }
        }
        Ok(h)
    }

    /// Records the forward pass on `tape`.
    pub fn record(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        input: Var,
        binding: Binding,
    ) -> Result<Var> {
        let cols = tape.shape(input).1;
        if cols != self.input_width() {
            return Err(Error::dims(
                format!("{} input", self.prefix),
                self.input_width(),
                cols,
            ));
        }
        let mut h = input;
        for l in 0..self.n_layers() {
            tape.set_scope(&format!("{}.{l}", self.prefix));
            let (w, b) = match binding {
                Binding::Trainable => (
                    tape.param(params, &self.weight_name(l))?,
                    tape.param(params, &self.bias_name(l))?,
                ),
                Binding::Frozen => (
                    tape.frozen_param(params, &self.weight_name(l))?,
                    tape.frozen_param(params, &self.bias_name(l))?,
                ),
            };
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            h = tape.activation(z, self.layer_activation(l));
        }
        tape.clear_scope();
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::tape::grad;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(
        w: &[f64],
        b: &[f64],
        inp: usize,
        out: usize,
        act: Activation,
    ) -> (DenseNet, ParamStore) {
        let net = DenseNet::new("n", &[inp, out], act, act).unwrap();
        let mut p = ParamStore::new();
        net.register(&mut p).unwrap();
        p.get_mut("n.0.w").unwrap().copy_from_slice(w);
        p.get_mut("n.0.b").unwrap().copy_from_slice(b);
        (net, p)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let (net, p) = single(
            &[1.0, 0.0, 0.0, 1.0],
            &[0.0, 0.0],
            2,
            2,
            Activation::Identity,
        );
        assert_eq!(net.forward(&p, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        let (net, p) = single(&[2.0], &[1.0], 1, 1, Activation::Relu);
        assert_eq!(net.forward(&p, &[-3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn wrong_input_width_rejected() {
        let (net, p) = single(&[2.0], &[1.0], 1, 1, Activation::Relu);
        assert!(matches!(
            net.forward(&p, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Straight-line affine + activation chain, written without ndarray.
    fn naive_forward(net: &DenseNet, p: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in 0..net.n_layers() {
            let (i, o) = (net.widths[l], net.widths[l + 1]);
            let w = p.get(&net.weight_name(l)).unwrap();
            let b = p.get(&net.bias_name(l)).unwrap();
            let act = if l + 1 == net.n_layers() {
                net.output
            } else {
                net.hidden
            };
            let mut next = vec![0.0; o];
            for (j, nj) in next.iter_mut().enumerate() {
                let mut acc = b[j];
                for k in 0..i {
                    acc += h[k] * w[k * o + j];
                }
                *nj = act.apply(acc);
            }
            h = next;
        }
        h
    }

    #[test]
    fn forward_matches_naive_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Relu, Activation::Elu, Activation::Tanh] {
            let net = DenseNet::new("n", &[3, 5, 2], act, Activation::Identity).unwrap();
            let mut p = ParamStore::new();
            net.register(&mut p).unwrap();
            p.values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = net.forward(&p, &x).unwrap();
            let want = naive_forward(&net, &p, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn recorded_forward_equals_batch_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNet::new("n", &[2, 4, 1], Activation::Elu, Activation::Identity).unwrap();
        let mut p = ParamStore::new();
        net.register(&mut p).unwrap();
        p.init_glorot(&mut rng);
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i as f64) * 0.3 - j as f64);
        let direct = net.forward_batch(&p, x.view()).unwrap();
        let mut tape = Tape::for_store(&p);
        let xin = tape.constant(x);
        let out = net.record(&mut tape, &p, xin, Binding::Trainable).unwrap();
        assert_eq!(tape.value(out), &direct);
    }

    #[test]
    fn frozen_binding_yields_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNet::new("n", &[2, 3, 1], Activation::Tanh, Activation::Identity).unwrap();
        let mut p = ParamStore::new();
        net.register(&mut p).unwrap();
        p.init_glorot(&mut rng);
        let g = grad(&p, |t, p| {
            let x = t.constant(Array2::ones((4, 2)));
            let y = net.record(t, p, x, Binding::Frozen)?;
            Ok(t.mean(y))
        })
        .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
