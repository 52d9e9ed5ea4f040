//! Reverse-mode differentiation over a recorded list of matrix operations.
//!
//! A [`Tape`] records every operation of a forward pass together with its
//! value. [`Tape::gradient`] replays the list backwards from a scalar node and
//! scatters the adjoints of parameter leaves into a flat vector laid out like
//! the [`ParamStore`] the leaves were read from. One tape can be
//! differentiated from several roots, which is how per-task gradients share a
//! single forward pass.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearity of a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Act(Activation),
    Exp,
    Log,
    Sin,
    Cos,
    Square,
    Sqrt,
    Abs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param { offset: usize },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Mean(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
    scope: usize,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    scopes: Vec<String>,
    scope: usize,
    n_params: usize,
}

impl Tape {
    /// A tape whose parameter leaves index into a vector of `n_params`.
    pub fn new(n_params: usize) -> Self {
        Tape {
            nodes: Vec::new(),
            scopes: vec!["<root>".to_string()],
            scope: 0,
            n_params,
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.len())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label attached to subsequently recorded nodes; reported on overflow.
    pub fn set_scope(&mut self, name: &str) {
        self.scope = match self.scopes.iter().position(|s| s == name) {
            Some(i) => i,
            None => {
                self.scopes.push(name.to_string());
                self.scopes.len() - 1
            }
        };
    }

    pub fn clear_scope(&mut self) {
        self.scope = 0;
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param { .. } => true,
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Unary(a, _)
            | Op::Clamp(a, _, _)
            | Op::Mean(a)
            | Op::Sum(a) => self.nodes[a.0].needs_grad,
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_view(&mut self, value: ArrayView2<'_, f64>) -> Var {
        self.constant(value.to_owned())
    }

    /// A column vector constant.
    pub fn column(&mut self, values: &[f64]) -> Var {
        let m = Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape");
        self.constant(m)
    }

    /// A trainable leaf read from `store`. Its gradient lands at the slot's
    /// offset in the vector returned by [`Tape::gradient`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if store.len() != self.n_params {
            return Err(Error::dims(
                "tape parameter space",
                self.n_params,
                store.len(),
            ));
        }
        let offset = store.slot(name)?.offset;
        let value = store.matrix_owned(name)?;
        Ok(self.push(value, Op::Param { offset }))
    }

    /// The same slot as a constant (no gradient flows to it).
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.constant(store.matrix_owned(name)?))
    }

    fn check_same(&self, context: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dims(context, sa.0 * sa.1, sb.0 * sb.1));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ka, kb) = (self.shape(a).1, self.shape(b).0);
        if ka != kb {
            return Err(Error::dims("matmul inner dimension", kb, ka));
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a + bias` with a `1 x cols` bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (cols, (br, bc)) = (self.shape(a).1, self.shape(bias));
        if br != 1 || bc != cols {
            return Err(Error::dims("bias width", cols, bc));
        }
        let value = self.value(a) + self.value(bias);
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::Offset(a))
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Act(Activation::Identity) => return a,
            Unary::Act(Activation::Relu) => |x| x.max(0.0),
            Unary::Act(Activation::Elu) => |x| if x > 0.0 { x } else { x.exp_m1() },
            Unary::Act(Activation::Tanh) => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Square => |x| x * x,
            Unary::Sqrt => f64::sqrt,
            Unary::Abs => f64::abs,
        };
        let value = self.value(a).mapv(f);
        self.push(value, Op::Unary(a, u))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        self.unary(a, Unary::Act(act))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::dims("concat rows", rows, self.shape(p).0));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Mean over all entries, as a 1x1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    /// `Σ c_k · x_k` over scalar (1x1) nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(c, v) in terms {
            let scaled = self.scale(v, c);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidConfig("empty weighted sum".into()))
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|v| !v.is_finite()))
    }

    /// Gradient of the scalar node `root` with respect to every parameter
    /// leaf, as a flat vector of length `n_params`.
    pub fn gradient(&self, root: Var) -> Result<Vec<f64>> {
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::dims("gradient root", 1, r * c));
        }
        if let Some(i) = self.first_non_finite() {
            return Err(Error::NumericalOverflow {
                layer: self.scopes[self.nodes[i].scope].clone(),
            });
        }
        let mut grad = vec![0.0; self.n_params];
        if !self.nodes[root.0].needs_grad {
            return Ok(grad);
        }

        let mut adj: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param { offset } => {
                    let dst = &mut grad[*offset..*offset + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.iter()) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut adj, *b, gb);
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, -&g);
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, &g * self.value(*b));
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g * *c),
                Op::Offset(a) => accumulate(&mut adj, *a, g),
                Op::Unary(a, u) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = g;
                    Zip::from(&mut ga).and(x).and(y).for_each(|g, &x, &y| {
                        *g *= match u {
                            Unary::Act(Activation::Identity) => 1.0,
                            Unary::Act(Activation::Relu) => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Act(Activation::Elu) => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    y + 1.0
                                }
                            }
                            Unary::Act(Activation::Tanh) => 1.0 - y * y,
                            Unary::Exp => y,
                            Unary::Log => 1.0 / x,
                            Unary::Sin => x.cos(),
                            Unary::Cos => -x.sin(),
                            Unary::Square => 2.0 * x,
                            Unary::Sqrt => 0.5 / y,
                            Unary::Abs => x.signum() * (x != 0.0) as u8 as f64,
                        }
                    });
                    accumulate(&mut adj, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        if x < *lo || x > *hi {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut adj, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.nodes[p.0].needs_grad {
                            accumulate(&mut adj, *p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let v = g[[0, 0]] / (r * c).max(1) as f64;
                    accumulate(&mut adj, *a, Array2::from_elem((r, c), v));
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    accumulate(&mut adj, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
            }
        }

        if let Some(pos) = grad.iter().position(|v| !v.is_finite()) {
            let layer = self
                .nodes
                .iter()
                .find(|n| matches!(n.op, Op::Param { offset } if offset <= pos && pos < offset + n.value.len()))
                .map(|n| self.scopes[n.scope].clone())
                .unwrap_or_else(|| "<gradient>".into());
            return Err(Error::NumericalOverflow { layer });
        }
        Ok(grad)
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut adj[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradient of the scalar loss built by `loss` with respect to `params`.
pub fn grad<F>(params: &ParamStore, loss: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::for_store(params);
    let root = loss(&mut tape, params)?;
    tape.gradient(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store(values: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.push_slot("w", (1, values.len())).unwrap();
        p.set_values(values).unwrap();
        p
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let p = store(&[0.5, -2.0, 3.0]);
        let g = grad(&p, |t, p| {
            let w = t.param(p, "w")?;
            let sq = t.square(w);
            let s = t.sum(sq);
            Ok(t.scale(s, 0.5))
        })
        .unwrap();
        assert_eq!(g, vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = store(&[1.0, 2.0]);
        let g = grad(&p, |t, _| {
            let c = t.constant(array![[4.0]]);
            Ok(t.square(c))
        })
        .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn overflow_names_scope() {
        let p = store(&[1000.0]);
        let err = grad(&p, |t, p| {
            t.set_scope("blowup");
            let w = t.param(p, "w")?;
            let e = t.exp(w);
            Ok(t.sum(e))
        })
        .unwrap_err();
        match err {
            Error::NumericalOverflow { layer } => assert_eq!(layer, "blowup"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut t = Tape::new(0);
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn shared_forward_many_roots() {
        let p = store(&[2.0, 3.0]);
        let mut t = Tape::for_store(&p);
        let w = t.param(&p, "w").unwrap();
        let sq = t.square(w);
        let a = t.sum(sq);
        let b = t.sum(w);
        assert_eq!(t.gradient(a).unwrap(), vec![4.0, 6.0]);
        assert_eq!(t.gradient(b).unwrap(), vec![1.0, 1.0]);
    }
}
