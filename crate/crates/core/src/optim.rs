//! Optimizers for the smooth factored objective: SGD with momentum, Adam,
//! and a limited-memory BFGS with backtracking line search.

use std::collections::{BTreeMap, VecDeque};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::GradientMap;
use crate::spred::SpredModel;
use crate::tensor::{dot, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Lbfgs,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "lbfgs" => Ok(OptimizerKind::Lbfgs),
            other => Err(Error::InvalidArgument(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Lbfgs => "lbfgs",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    /// v <- mu*v + g; p <- p - lr*v.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        check_shapes("sgd_step", param, grad)?;
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        for ((vi, pi), gi) in v.data_mut().iter_mut().zip(param.data_mut()).zip(grad.data()) {
            *vi = self.momentum * *vi + gi;
            *pi -= self.lr * *vi;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        check_shapes("adam_step", param, grad)?;
        assert!(self.t > 0, "begin_step must run before update");
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((mi, vi), pi), gi) in m
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(param.data_mut())
            .zip(grad.data())
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// First-order optimizer over a model's named parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum FirstOrder {
    Sgd(Sgd),
    Adam(Adam),
}

impl FirstOrder {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Adam => FirstOrder::Adam(Adam::new(lr)),
            _ => FirstOrder::Sgd(Sgd::new(lr, momentum)),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            FirstOrder::Sgd(s) => s.lr,
            FirstOrder::Adam(a) => a.lr,
        }
    }

    /// One optimization step over every parameter of the model. Parameters
    /// absent from the gradient map are treated as zero-gradient.
    pub fn step_model(&mut self, model: &mut SpredModel, grads: &GradientMap) -> Result<()> {
        if let FirstOrder::Adam(a) = self {
            a.begin_step();
        }
        let mut result = Ok(());
        model.for_each_param_mut(|name, param| {
            if result.is_err() {
                return;
            }
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(param.shape().to_vec());
                    &zero
                }
            };
            result = match self {
                FirstOrder::Sgd(s) => s.update(name, param, g),
                FirstOrder::Adam(a) => a.update(name, param, g),
            };
        });
        result
    }
}

fn check_shapes(op: &'static str, param: &Tensor, grad: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Sufficient-decrease constant for the Armijo condition.
    pub c1: f64,
    /// Step shrink factor per backtrack.
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub init_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 10, c1: 1e-4, backtrack: 0.5, max_backtracks: 30, init_step: 1.0 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LbfgsState {
    /// (s, y) pairs, oldest first.
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl LbfgsState {
    pub fn reset(&mut self) {
        self.pairs.clear();
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LbfgsStep {
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
    pub step_size: f64,
    /// Line search failed; a damped plain gradient step was taken instead.
    pub fell_back: bool,
}

/// Search direction from the standard two-loop recursion.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push((a, rho));
    }
    if let Some((s, y)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y), (a, rho)) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += si * (a - b);
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

/// One L-BFGS step on `x`. `eval` returns loss and gradient at a point. The
/// accepted step satisfies the Armijo sufficient-decrease condition; when no
/// such step exists within the backtrack budget the state resets and a small
/// plain gradient step is taken, flagged in the result.
pub fn lbfgs_step(
    x: &mut [f64],
    eval: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    state: &mut LbfgsState,
    opts: &LbfgsOptions,
) -> LbfgsStep {
    let (f0, g0) = eval(x);
    let grad_norm = g0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if grad_norm == 0.0 {
        return LbfgsStep { loss_before: f0, loss_after: f0, grad_norm, step_size: 0.0, fell_back: false };
    }

    let mut dir = two_loop(&g0, &state.pairs);
    let mut slope = dot(&g0, &dir);
    if !(slope < 0.0) || !slope.is_finite() {
        // Curvature information is stale; restart from steepest descent.
        state.reset();
        dir = g0.iter().map(|v| -v).collect();
        slope = dot(&g0, &dir);
    }

    let mut t = opts.init_step;
    let mut candidate = vec![0.0; x.len()];
    for _ in 0..=opts.max_backtracks {
        for ((c, xi), di) in candidate.iter_mut().zip(x.iter()).zip(&dir) {
            *c = xi + t * di;
        }
        let (f1, g1) = eval(&candidate);
        if f1.is_finite() && f1 <= f0 + opts.c1 * t * slope {
            let s: Vec<f64> = dir.iter().map(|d| t * d).collect();
            let y: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            let s_norm = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let y_norm = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if sy > 1e-12 * s_norm * y_norm * x.len() as f64 {
                state.pairs.push_back((s, y));
                while state.pairs.len() > opts.memory {
                    state.pairs.pop_front();
                }
            }
            x.copy_from_slice(&candidate);
            return LbfgsStep { loss_before: f0, loss_after: f1, grad_norm, step_size: t, fell_back: false };
        }
        t *= opts.backtrack;
    }

    // Give up on the quasi-Newton direction entirely.
    state.reset();
    let t = opts.init_step * opts.backtrack.powi(opts.max_backtracks as i32);
    for (xi, gi) in x.iter_mut().zip(&g0) {
        *xi -= t * gi;
    }
    let (f1, _) = eval(x);
    LbfgsStep { loss_before: f0, loss_after: f1, grad_norm, step_size: t, fell_back: true }
}

/// Runs `lbfgs_step` until the gradient sup-norm falls under `gtol` or the
/// iteration budget runs out. Returns the step reports in order.
pub fn lbfgs_minimize(
    x: &mut [f64],
    eval: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    opts: &LbfgsOptions,
    gtol: f64,
    max_iters: usize,
) -> Vec<LbfgsStep> {
    let mut state = LbfgsState::default();
    let mut log = Vec::new();
    for _ in 0..max_iters {
        let step = lbfgs_step(x, eval, &mut state, opts);
        let done = step.grad_norm <= gtol;
        log.push(step);
        if done {
            break;
        }
    }
    log
}
