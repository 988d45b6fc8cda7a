//! Reverse-mode differentiation on a flat tape.
//!
//! Nodes live in creation order inside a [`Tape`]; a [`Var`] is an index
//! into it. `backward` walks the tape once in reverse, so every gradient is
//! complete by the time its node is visited. Named leaves collect into a
//! [`GradientMap`] keyed by name; leaves the loss never touched get exact
//! zero gradients so optimizers can iterate the map blindly.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{dot, Tensor};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Swish,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            // y = sigmoid(x), reuse it.
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "swish" => Ok(Activation::Swish),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MaskMul(Var, Tensor),
    ScaleVar { scalar: Var, tensor: Var },
    MatMul(Var, Var),
    MatVec(Var, Var),
    AddBias { input: Var, bias: Var },
    ColScale { input: Var, scales: Var },
    Unary(Var, Activation),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    AbsSum(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    name: Option<String>,
}

/// Gradients of a scalar loss with respect to every named leaf.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|t| t.all_finite())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_names: BTreeSet<String>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, name: None });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input. Names must be unique per tape.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let name = name.into();
        assert!(
            self.leaf_names.insert(name.clone()),
            "duplicate leaf name '{name}'"
        );
        self.nodes.push(Node { value, op: Op::Leaf, name: Some(name) });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input (data, targets, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// Elementwise product with a fixed mask (not differentiated).
    pub fn mask_mul(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let v = self.value(a).hadamard(mask)?;
        Ok(self.push(v, Op::MaskMul(a, mask.clone())))
    }

    /// Scalar variable times tensor variable.
    pub fn scale_var(&mut self, scalar: Var, tensor: Var) -> Result<Var> {
        let s = self.value(scalar).scalar_value().ok_or_else(|| Error::ShapeMismatch {
            op: "scale_var",
            detail: format!("scalar operand has shape {:?}", self.value(scalar).shape()),
        })?;
        let v = self.value(tensor).scale(s);
        Ok(self.push(v, Op::ScaleVar { scalar, tensor }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).rank() == 1 {
            let v = self.value(a).matvec(self.value(b))?;
            return Ok(self.push(v, Op::MatVec(a, b)));
        }
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a `[c]` bias to every row of a `[n,c]` input.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.value(input).dims2()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("input {:?}, bias {:?}", self.value(input).shape(), self.value(bias).shape()),
            });
        }
        let mut data = self.value(input).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..n {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        let v = Tensor::new(vec![n, c], data)?;
        Ok(self.push(v, Op::AddBias { input, bias }))
    }

    /// Scales column `j` of a `[n,d]` input by `scales[j]`.
    pub fn col_scale(&mut self, input: Var, scales: Var) -> Result<Var> {
        let (n, d) = self.value(input).dims2()?;
        if self.value(scales).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "col_scale",
                detail: format!("input {:?}, scales {:?}", self.value(input).shape(), self.value(scales).shape()),
            });
        }
        let s = self.value(scales).data();
        let mut data = self.value(input).data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] *= s[j];
            }
        }
        let v = Tensor::new(vec![n, d], data)?;
        Ok(self.push(v, Op::ColScale { input, scales }))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let v = self.value(a).map(|x| act.apply(x));
        self.push(v, Op::Unary(a, act))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid_all(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Swish)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum_sq());
        self.push(v, Op::SumSq(a))
    }

    /// Sum of absolute values; subgradient 0 at 0.
    pub fn abs_sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).l1_norm());
        self.push(v, Op::AbsSum(a))
    }

    /// Mean softmax cross-entropy over rows of `[n,c]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{n} rows vs {} labels", labels.len()),
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let y = labels[i];
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[i * c + j] /= denom;
            }
            loss += denom.ln() + m - row[y];
        }
        loss /= n as f64;
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    /// Gradients of the scalar `loss` with respect to every named leaf on
    /// the tape, including leaves the loss does not depend on (zeros).
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    let name = node.name.clone().expect("leaf without name");
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.insert(name, t);
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, &self.nodes), &g, 1.0);
                    add_into(slot(&mut grads, *b, &self.nodes), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, &self.nodes), &g, 1.0);
                    add_into(slot(&mut grads, *b, &self.nodes), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let ga = slot(&mut grads, *a, &self.nodes);
                    for (s, (&gi, &bi)) in ga.iter_mut().zip(g.iter().zip(bv)) {
                        *s += gi * bi;
                    }
                    let gb = slot(&mut grads, *b, &self.nodes);
                    for (s, (&gi, &ai)) in gb.iter_mut().zip(g.iter().zip(av)) {
                        *s += gi * ai;
                    }
                }
                Op::Scale(a, c) => add_into(slot(&mut grads, *a, &self.nodes), &g, *c),
                Op::MaskMul(a, mask) => {
                    let ga = slot(&mut grads, *a, &self.nodes);
                    for (s, (&gi, &mi)) in ga.iter_mut().zip(g.iter().zip(mask.data())) {
                        *s += gi * mi;
                    }
                }
                Op::ScaleVar { scalar, tensor } => {
                    let s = self.nodes[scalar.0].value.scalar_value().expect("checked scalar");
                    let tv = self.nodes[tensor.0].value.data();
                    slot(&mut grads, *scalar, &self.nodes)[0] += dot(tv, &g);
                    add_into(slot(&mut grads, *tensor, &self.nodes), &g, s);
                }
                Op::MatMul(a, b) => {
                    let at = &self.nodes[a.0].value;
                    let bt = &self.nodes[b.0].value;
                    let (m, _k) = at.dims2()?;
                    let n = bt.shape()[1];
                    let gt = Tensor::new(vec![m, n], g)?;
                    let da = gt.matmul(&bt.transpose()?)?;
                    add_into(slot(&mut grads, *a, &self.nodes), da.data(), 1.0);
                    let db = at.transpose()?.matmul(&gt)?;
                    add_into(slot(&mut grads, *b, &self.nodes), db.data(), 1.0);
                }
                Op::MatVec(a, x) => {
                    let at = &self.nodes[a.0].value;
                    let xv = self.nodes[x.0].value.data();
                    let (m, k) = at.dims2()?;
                    {
                        let ga = slot(&mut grads, *a, &self.nodes);
                        for i in 0..m {
                            let gi = g[i];
                            for j in 0..k {
                                ga[i * k + j] += gi * xv[j];
                            }
                        }
                    }
                    let gt = Tensor::new(vec![m], g)?;
                    let dx = at.matvec_t(&gt)?;
                    add_into(slot(&mut grads, *x, &self.nodes), dx.data(), 1.0);
                }
                Op::AddBias { input, bias } => {
                    let (n, c) = self.nodes[input.0].value.dims2()?;
                    add_into(slot(&mut grads, *input, &self.nodes), &g, 1.0);
                    let gb = slot(&mut grads, *bias, &self.nodes);
                    for i in 0..n {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                Op::ColScale { input, scales } => {
                    let (n, d) = self.nodes[input.0].value.dims2()?;
                    let sv = self.nodes[scales.0].value.data();
                    let iv = self.nodes[input.0].value.data();
                    {
                        let gi = slot(&mut grads, *input, &self.nodes);
                        for i in 0..n {
                            for j in 0..d {
                                gi[i * d + j] += g[i * d + j] * sv[j];
                            }
                        }
                    }
                    let gs = slot(&mut grads, *scales, &self.nodes);
                    for i in 0..n {
                        for j in 0..d {
                            gs[j] += g[i * d + j] * iv[i * d + j];
                        }
                    }
                }
                Op::Unary(a, act) => {
                    let xv = self.nodes[a.0].value.data();
                    let yv = node.value.data();
                    let ga = slot(&mut grads, *a, &self.nodes);
                    for i in 0..ga.len() {
                        ga[i] += g[i] * act.deriv(xv[i], yv[i]);
                    }
                }
                Op::Sum(a) => {
                    add_into(slot(&mut grads, *a, &self.nodes), &vec![g[0]; self.nodes[a.0].value.numel()], 1.0);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let c = g[0] / n as f64;
                    add_into(slot(&mut grads, *a, &self.nodes), &vec![c; n], 1.0);
                }
                Op::SumSq(a) => {
                    let xv = self.nodes[a.0].value.data();
                    let ga = slot(&mut grads, *a, &self.nodes);
                    for (s, &x) in ga.iter_mut().zip(xv) {
                        *s += 2.0 * x * g[0];
                    }
                }
                Op::AbsSum(a) => {
                    let xv = self.nodes[a.0].value.data();
                    let ga = slot(&mut grads, *a, &self.nodes);
                    for (s, &x) in ga.iter_mut().zip(xv) {
                        *s += g[0] * sign0(x);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let (n, c) = self.nodes[logits.0].value.dims2()?;
                    let gl = slot(&mut grads, *logits, &self.nodes);
                    let scale = g[0] / n as f64;
                    for i in 0..n {
                        for j in 0..c {
                            let ind = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - ind);
                        }
                    }
                }
            }
        }

        // Leaves untouched by the loss still appear, with zero gradient.
        for node in &self.nodes {
            if let (Op::Leaf, Some(name)) = (&node.op, &node.name) {
                out.entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(GradientMap { grads: out })
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, nodes: &[Node]) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

fn add_into(acc: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(acc.len(), src.len());
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += scale * s;
    }
}

/// Central finite differences of `f` at `x`. Independent check for every
/// analytic gradient in this crate.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        pt[i] = x[i] + h;
        let fp = f(&pt);
        pt[i] = x[i] - h;
        let fm = f(&pt);
        pt[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}
