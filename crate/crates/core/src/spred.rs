//! Factored sparse parameters.
//!
//! A sparse parameter `V` is stored as a product of two factors: `U ⊗ W`
//! elementwise, or a scalar `u` times a block `W` in group mode. The factors
//! carry an L2 penalty `α‖U‖² + β‖W‖²`. At every minimum the factors
//! balance (`|Uᵢ| = |Wᵢ|`, or `|u| = ‖W‖₂`), where the smooth factored
//! objective equals the L1 objective:
//!
//! - elementwise, with αβ = κ²: penalty at balance is `2κ‖V‖₁`;
//! - group, with αβ = (κ/2)²: penalty at balance is `κ‖V‖₂`.
//!
//! The group constant halves because the reference group objective carries
//! `κ‖V‖₂` rather than `2κ‖V‖₁`; both defaults keep the factored and
//! reference objectives identical on the balanced manifold.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpredMode {
    Elementwise,
    Group,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorInit {
    /// Both factors get std (1/fan_in)^(1/4): the product then matches the
    /// standard 1/sqrt(fan_in) initialization in distribution.
    SqrtStandard,
    /// U has unit variance, W gets the full standard deviation.
    FactorUnit,
}

impl FromStr for FactorInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sqrt-standard" => Ok(FactorInit::SqrtStandard),
            "factor-unit" => Ok(FactorInit::FactorUnit),
            other => Err(Error::InvalidArgument(format!("unknown init '{other}'"))),
        }
    }
}

/// One factored sparse parameter with its penalty split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpredParam {
    pub mode: SpredMode,
    /// Elementwise: same shape as `w`. Group: scalar (rank 0).
    pub u: Tensor,
    pub w: Tensor,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl SpredParam {
    /// Elementwise factorization with the symmetric split α = β = κ.
    pub fn elementwise(u: Tensor, w: Tensor, kappa: f64) -> Result<Self> {
        if u.shape() != w.shape() {
            return Err(Error::ShapeMismatch {
                op: "SpredParam::elementwise",
                detail: format!("U {:?} vs W {:?}", u.shape(), w.shape()),
            });
        }
        check_kappa(kappa)?;
        Ok(SpredParam { mode: SpredMode::Elementwise, u, w, alpha: kappa, beta: kappa, kappa })
    }

    /// Group factorization (scalar `u` times block `w`) with the symmetric
    /// split α = β = κ/2.
    pub fn group(u: f64, w: Tensor, kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        Ok(SpredParam {
            mode: SpredMode::Group,
            u: Tensor::scalar(u),
            w,
            alpha: kappa / 2.0,
            beta: kappa / 2.0,
            kappa,
        })
    }

    /// Product of the two penalty weights implied by `kappa`: κ² in
    /// elementwise mode, (κ/2)² in group mode.
    pub fn canonical_split_product(&self) -> f64 {
        match self.mode {
            SpredMode::Elementwise => self.kappa * self.kappa,
            SpredMode::Group => (self.kappa / 2.0) * (self.kappa / 2.0),
        }
    }

    /// Replaces the symmetric split by a general (α, β) with the same
    /// product; any such split is equivalent up to a factor rescaling.
    pub fn with_split(mut self, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !(beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "penalty split must be nonnegative, got ({alpha}, {beta})"
            )));
        }
        let want = self.canonical_split_product();
        let got = alpha * beta;
        if (got - want).abs() > 1e-12 * want.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha*beta = {got} does not match the required product {want}"
            )));
        }
        self.alpha = alpha;
        self.beta = beta;
        Ok(self)
    }

    /// The sparse parameter this factorization represents.
    pub fn effective_value(&self) -> Tensor {
        match self.mode {
            SpredMode::Elementwise => self.u.hadamard(&self.w).expect("shapes checked"),
            SpredMode::Group => self.w.scale(self.u.scalar_value().expect("scalar u")),
        }
    }

    /// α‖U‖² + β‖W‖².
    pub fn penalty_value(&self) -> f64 {
        self.alpha * self.u.sum_sq() + self.beta * self.w.sum_sq()
    }

    /// 2κ‖V‖₁ (elementwise) or κ‖V‖₂ (group): this parameter's share of the
    /// reference L1 objective.
    pub fn l1_term(&self, v: &Tensor) -> f64 {
        match self.mode {
            SpredMode::Elementwise => 2.0 * self.kappa * v.l1_norm(),
            SpredMode::Group => self.kappa * v.l2_norm(),
        }
    }

    /// Max deviation from the balance condition: `max_i ||Uᵢ|−|Wᵢ||`
    /// elementwise, `||u|−‖W‖₂|` in group mode.
    pub fn balance_gap(&self) -> f64 {
        match self.mode {
            SpredMode::Elementwise => self
                .u
                .data()
                .iter()
                .zip(self.w.data())
                .fold(0.0, |m, (&a, &b)| m.max((a.abs() - b.abs()).abs())),
            SpredMode::Group => {
                (self.u.scalar_value().expect("scalar u").abs() - self.w.l2_norm()).abs()
            }
        }
    }

    /// Rewrites the factors so they balance while keeping the product. The
    /// penalty never increases (arithmetic-geometric mean inequality) and
    /// strictly drops whenever the input was unbalanced.
    pub fn rebalance(&self) -> SpredParam {
        let mut out = self.clone();
        match self.mode {
            SpredMode::Elementwise => {
                for i in 0..self.u.numel() {
                    let p = self.u.data()[i] * self.w.data()[i];
                    let s = p.abs().sqrt();
                    out.u.data_mut()[i] = if p < 0.0 { -s } else { s };
                    out.w.data_mut()[i] = s;
                }
            }
            SpredMode::Group => {
                let u = self.u.scalar_value().expect("scalar u");
                let wn = self.w.l2_norm();
                if u == 0.0 || wn == 0.0 {
                    out.u = Tensor::scalar(0.0);
                    out.w = Tensor::zeros(self.w.shape().to_vec());
                } else {
                    let t = (u.abs() / wn).sqrt();
                    out.u = Tensor::scalar(u / t);
                    out.w = self.w.scale(t);
                }
            }
        }
        out
    }

    /// Pushes the factor leaves onto a tape and returns
    /// (u var, w var, effective var). Leaves are named `{name}.u` / `{name}.w`.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<(Var, Var, Var)> {
        let u = tape.leaf(format!("{name}.u"), self.u.clone());
        let w = tape.leaf(format!("{name}.w"), self.w.clone());
        let v = match self.mode {
            SpredMode::Elementwise => tape.mul(u, w)?,
            SpredMode::Group => tape.scale_var(u, w)?,
        };
        Ok((u, w, v))
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "kappa must be finite and nonnegative, got {kappa}"
        )));
    }
    Ok(())
}

/// Seeded factory for a factored parameter. `fan_in` is the first extent of
/// `shape`; the product of the factors matches a 1/sqrt(fan_in) Gaussian
/// initialization in distribution for either init scheme.
pub fn make_spred_param(
    shape: &[usize],
    kappa: f64,
    mode: SpredMode,
    init: FactorInit,
    seed: u64,
) -> Result<SpredParam> {
    if shape.is_empty() || shape.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!(
            "factored parameter needs a nonempty positive shape, got {shape:?}"
        )));
    }
    let fan_in = shape[0] as f64;
    let product_std = fan_in.powf(-0.5);
    let (u_std, w_std) = match init {
        FactorInit::SqrtStandard => (product_std.sqrt(), product_std.sqrt()),
        FactorInit::FactorUnit => (1.0, product_std),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SpredMode::Elementwise => {
            let u = Tensor::randn(shape.to_vec(), u_std, &mut rng);
            let w = Tensor::randn(shape.to_vec(), w_std, &mut rng);
            SpredParam::elementwise(u, w, kappa)
        }
        SpredMode::Group => {
            let u = u_std * crate::tensor::standard_normal(&mut rng);
            let w = Tensor::randn(shape.to_vec(), w_std, &mut rng);
            SpredParam::group(u, w, kappa)
        }
    }
}

/// How to zero out small entries of a recovered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SparsifyMeasure {
    Absolute,
    RelativeToMax,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SparsifyPolicy {
    pub loose: f64,
    pub tight: f64,
    pub measure: SparsifyMeasure,
}

impl Default for SparsifyPolicy {
    fn default() -> Self {
        SparsifyPolicy { loose: 1e-3, tight: 1e-5, measure: SparsifyMeasure::RelativeToMax }
    }
}

impl SparsifyPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.loose >= self.tight && self.tight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must satisfy loose >= tight >= 0, got ({}, {})",
                self.loose, self.tight
            )));
        }
        Ok(())
    }

    /// Absolute cutoffs (loose, tight) for a tensor with the given max
    /// magnitude.
    pub fn cutoffs(&self, max_abs: f64) -> (f64, f64) {
        match self.measure {
            SparsifyMeasure::Absolute => (self.loose, self.tight),
            SparsifyMeasure::RelativeToMax => (self.loose * max_abs, self.tight * max_abs),
        }
    }
}

/// Result of zeroing a tensor at the two policy thresholds.
#[derive(Clone, Debug)]
pub struct Sparsified {
    pub v_loose: Tensor,
    pub v_tight: Tensor,
    pub sparsity_loose: f64,
    pub sparsity_tight: f64,
}

/// Zeroes entries with magnitude strictly below each threshold and reports
/// the resulting zero fractions. Applied once at a stopping point, never
/// inside the optimization loop.
pub fn threshold_sparsify(v: &Tensor, policy: &SparsifyPolicy) -> Sparsified {
    let (cut_loose, cut_tight) = policy.cutoffs(v.max_abs());
    let zero_below = |cut: f64| v.map(|x| if x.abs() < cut { 0.0 } else { x });
    let v_loose = zero_below(cut_loose);
    let v_tight = zero_below(cut_tight);
    let frac = |t: &Tensor| t.data().iter().filter(|&&x| x == 0.0).count() as f64 / t.numel() as f64;
    Sparsified {
        sparsity_loose: frac(&v_loose),
        sparsity_tight: frac(&v_tight),
        v_loose,
        v_tight,
    }
}

/// Convergence rule: the loose and tight sparsities have merged and stayed
/// constant for the trailing `window` entries of the history.
pub fn converged_by_two_thresholds(history: &[(f64, f64)], window: usize) -> bool {
    let window = window.max(1);
    if history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    let first = tail[0];
    tail.iter().all(|&(l, t)| l == t && l == first.0)
}

/// Per-run view of everything the base loss may reference.
pub struct Bindings {
    effective: BTreeMap<String, Var>,
    dense: BTreeMap<String, Var>,
}

impl Bindings {
    /// Effective value (product of factors) of a sparse parameter.
    pub fn value(&self, name: &str) -> Var {
        *self
            .effective
            .get(name)
            .unwrap_or_else(|| panic!("no sparse parameter named '{name}'"))
    }

    pub fn dense(&self, name: &str) -> Var {
        *self
            .dense
            .get(name)
            .unwrap_or_else(|| panic!("no dense parameter named '{name}'"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseParam {
    pub value: Tensor,
    /// Small ridge coefficient; 0 disables.
    pub decay: f64,
}

type LossFn = dyn Fn(&mut Tape, &Bindings) -> Result<Var>;

/// A differentiable objective over named factored and dense parameters.
///
/// The base loss sees sparse parameters only through their effective values,
/// so the same closure serves both the factored objective and the reference
/// L1 objective.
pub struct SpredModel {
    sparse: BTreeMap<String, SpredParam>,
    dense: BTreeMap<String, DenseParam>,
    base_loss: Box<LossFn>,
}

impl SpredModel {
    pub fn new(base_loss: impl Fn(&mut Tape, &Bindings) -> Result<Var> + 'static) -> Self {
        SpredModel { sparse: BTreeMap::new(), dense: BTreeMap::new(), base_loss: Box::new(base_loss) }
    }

    pub fn add_sparse(&mut self, name: impl Into<String>, p: SpredParam) -> &mut Self {
        let name = name.into();
        assert!(
            self.sparse.insert(name.clone(), p).is_none() && !self.dense.contains_key(&name),
            "duplicate parameter name '{name}'"
        );
        self
    }

    pub fn add_dense(&mut self, name: impl Into<String>, value: Tensor, decay: f64) -> &mut Self {
        let name = name.into();
        assert!(
            self.dense.insert(name.clone(), DenseParam { value, decay }).is_none()
                && !self.sparse.contains_key(&name),
            "duplicate parameter name '{name}'"
        );
        self
    }

    pub fn sparse(&self, name: &str) -> &SpredParam {
        &self.sparse[name]
    }

    pub fn sparse_mut(&mut self, name: &str) -> &mut SpredParam {
        self.sparse.get_mut(name).expect("unknown sparse parameter")
    }

    pub fn sparse_params(&self) -> impl Iterator<Item = (&String, &SpredParam)> {
        self.sparse.iter()
    }

    pub fn dense_value(&self, name: &str) -> &Tensor {
        &self.dense[name].value
    }

    pub fn dense_params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.dense.iter().map(|(n, d)| (n, &d.value))
    }

    /// Whether any parameter is factored. Dense-only models skip the
    /// two-threshold stopping rule.
    pub fn has_sparse(&self) -> bool {
        !self.sparse.is_empty()
    }

    pub fn effective_values(&self) -> BTreeMap<String, Tensor> {
        self.sparse
            .iter()
            .map(|(n, p)| (n.clone(), p.effective_value()))
            .collect()
    }

    /// Builds the factored objective on `tape`:
    /// base loss at the effective values plus Σ α‖U‖² + β‖W‖² plus the dense
    /// ridge terms. Zero-coefficient terms are skipped so κ = 0 contributes
    /// exactly nothing.
    pub fn spred_objective(&self, tape: &mut Tape) -> Result<Var> {
        let mut effective = BTreeMap::new();
        let mut dense = BTreeMap::new();
        let mut penalty: Option<Var> = None;
        let add_term = |tape: &mut Tape, term: Var, acc: &mut Option<Var>| -> Result<()> {
            *acc = Some(match acc.take() {
                None => term,
                Some(p) => tape.add(p, term)?,
            });
            Ok(())
        };

        for (name, p) in &self.sparse {
            let (u, w, v) = p.bind(tape, name)?;
            effective.insert(name.clone(), v);
            if p.alpha != 0.0 {
                let uu = tape.sum_sq(u);
                let t = tape.scale(uu, p.alpha);
                add_term(tape, t, &mut penalty)?;
            }
            if p.beta != 0.0 {
                let ww = tape.sum_sq(w);
                let t = tape.scale(ww, p.beta);
                add_term(tape, t, &mut penalty)?;
            }
        }
        for (name, d) in &self.dense {
            let v = tape.leaf(name.clone(), d.value.clone());
            dense.insert(name.clone(), v);
            if d.decay != 0.0 {
                let vv = tape.sum_sq(v);
                let t = tape.scale(vv, d.decay);
                add_term(tape, t, &mut penalty)?;
            }
        }

        let bindings = Bindings { effective, dense };
        let base = (self.base_loss)(tape, &bindings)?;
        match penalty {
            None => Ok(base),
            Some(p) => tape.add(base, p),
        }
    }

    /// Value of the factored objective at the current parameters.
    pub fn spred_objective_value(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.spred_objective(&mut tape)?;
        Ok(tape.value(loss).scalar_value().expect("scalar loss"))
    }

    /// The reference objective: base loss at the given sparse values (the
    /// current effective values if `overrides` is None) plus 2κ‖V‖₁ per
    /// elementwise parameter, κ‖V‖₂ per group parameter, plus the same dense
    /// ridge terms as the factored objective.
    pub fn l1_objective(&self, overrides: Option<&BTreeMap<String, Tensor>>) -> Result<f64> {
        let mut tape = Tape::new();
        let mut effective = BTreeMap::new();
        let mut dense = BTreeMap::new();
        let mut extra = 0.0;
        for (name, p) in &self.sparse {
            let v = match overrides.and_then(|m| m.get(name)) {
                Some(t) => t.clone(),
                None => p.effective_value(),
            };
            extra += p.l1_term(&v);
            effective.insert(name.clone(), tape.constant(v));
        }
        for (name, d) in &self.dense {
            extra += d.decay * d.value.sum_sq();
            dense.insert(name.clone(), tape.constant(d.value.clone()));
        }
        let bindings = Bindings { effective, dense };
        let base = (self.base_loss)(&mut tape, &bindings)?;
        Ok(tape.value(base).scalar_value().expect("scalar loss") + extra)
    }

    /// Worst balance gap over the sparse parameters.
    pub fn balance_gap(&self) -> f64 {
        self.sparse.values().fold(0.0, |m, p| m.max(p.balance_gap()))
    }

    pub fn rebalance_all(&mut self) {
        for p in self.sparse.values_mut() {
            *p = p.rebalance();
        }
    }

    /// Visits every trainable tensor under the same names the tape uses
    /// (`{name}.u`, `{name}.w`, dense names).
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (name, p) in self.sparse.iter_mut() {
            f(&format!("{name}.u"), &mut p.u);
            f(&format!("{name}.w"), &mut p.w);
        }
        for (name, d) in self.dense.iter_mut() {
            f(name, &mut d.value);
        }
    }

    /// Flattened parameter order: sparse (u then w per name) then dense,
    /// both in name order. Used by the L-BFGS loop.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.sparse.values() {
            out.extend_from_slice(p.u.data());
            out.extend_from_slice(p.w.data());
        }
        for d in self.dense.values() {
            out.extend_from_slice(d.value.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut pos = 0;
        let mut take = |dst: &mut Tensor| {
            let n = dst.numel();
            dst.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        };
        for p in self.sparse.values_mut() {
            take(&mut p.u);
            take(&mut p.w);
        }
        for d in self.dense.values_mut() {
            take(&mut d.value);
        }
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    /// Gradient map flattened in the same order as `flatten_params`.
    pub fn flatten_grads(&self, grads: &crate::graph::GradientMap) -> Vec<f64> {
        let mut out = Vec::new();
        for (name, p) in &self.sparse {
            for suffix in [".u", ".w"] {
                let key = format!("{name}{suffix}");
                match grads.get(&key) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat(0.0).take(if suffix == ".u" {
                        p.u.numel()
                    } else {
                        p.w.numel()
                    })),
                }
            }
        }
        for (name, d) in &self.dense {
            match grads.get(name) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(d.value.numel())),
            }
        }
        out
    }

    /// Aggregate sparsity of all effective values under `policy`:
    /// (loose fraction, tight fraction), counting zeros over every entry.
    /// Relative cutoffs are taken against the largest magnitude across the
    /// whole model, so a parameter that dies as a block still reads as
    /// sparse.
    pub fn aggregate_sparsity(&self, policy: &SparsifyPolicy) -> (f64, f64) {
        let values: Vec<Tensor> = self.sparse.values().map(|p| p.effective_value()).collect();
        let global_max = values.iter().fold(0.0f64, |m, v| m.max(v.max_abs()));
        let (cut_loose, cut_tight) = policy.cutoffs(global_max);
        let mut zeros_loose = 0usize;
        let mut zeros_tight = 0usize;
        let mut total = 0usize;
        for v in &values {
            for &x in v.data() {
                zeros_loose += usize::from(x == 0.0 || x.abs() < cut_loose);
                zeros_tight += usize::from(x == 0.0 || x.abs() < cut_tight);
            }
            total += v.numel();
        }
        if total == 0 {
            return (1.0, 1.0);
        }
        (zeros_loose as f64 / total as f64, zeros_tight as f64 / total as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::assert_close;
    use proptest::prelude::*;
    use rand::Rng;

    fn quadratic_model(kappa: f64, u: Tensor, w: Tensor, target: Vec<f64>) -> SpredModel {
        // Base loss sum((v - target)^2), enough structure for the identity
        // checks without a design matrix.
        let mut m = SpredModel::new(move |tape, b| {
            let t = tape.constant(Tensor::from_vec(target.clone()));
            let d = tape.sub(b.value("v"), t)?;
            Ok(tape.sum_sq(d))
        });
        m.add_sparse("v", SpredParam::elementwise(u, w, kappa).unwrap());
        m
    }

    #[test]
    fn effective_value_both_modes() {
        let p = SpredParam::elementwise(
            Tensor::from_vec(vec![1.0, 2.0]),
            Tensor::from_vec(vec![3.0, -4.0]),
            0.5,
        )
        .unwrap();
        assert_eq!(p.effective_value().data(), &[3.0, -8.0]);

        let g = SpredParam::group(2.0, Tensor::from_vec(vec![1.0, 0.0, -1.0]), 0.5).unwrap();
        assert_eq!(g.effective_value().data(), &[2.0, 0.0, -2.0]);

        let z = SpredParam::elementwise(
            Tensor::zeros(vec![3]),
            Tensor::from_vec(vec![9.0, -9.0, 9.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(z.effective_value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn balanced_penalty_matches_l1_term() {
        // U=(1,-2), W=(1,2), alpha=beta=1: penalty 1+4+1+4 = 10 = 2*(1+4).
        let p = SpredParam::elementwise(
            Tensor::from_vec(vec![1.0, -2.0]),
            Tensor::from_vec(vec![1.0, 2.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(p.penalty_value(), 10.0);
        assert_eq!(p.l1_term(&p.effective_value()), 10.0);
    }

    #[test]
    fn objective_identity_on_balanced_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = 8;
            let w = Tensor::randn(vec![n], 1.0, &mut rng);
            // Force |u_i| = |w_i| with random signs.
            let signs: Vec<f64> =
                (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let u = Tensor::new(
                vec![n],
                w.data().iter().zip(&signs).map(|(&x, &s)| s * x.abs()).collect(),
            )
            .unwrap();
            let target: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let m = quadratic_model(0.7, u, w, target);
            let spred = m.spred_objective_value().unwrap();
            let l1 = m.l1_objective(None).unwrap();
            assert_close(spred, l1, 1e-12, "balanced identity");
        }
    }

    #[test]
    fn spred_objective_dominates_l1_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = 6;
            let u = Tensor::randn(vec![n], 1.3, &mut rng);
            let w = Tensor::randn(vec![n], 0.6, &mut rng);
            let gap = SpredParam::elementwise(u.clone(), w.clone(), 0.4).unwrap().balance_gap();
            let target: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let m = quadratic_model(0.4, u, w, target);
            let spred = m.spred_objective_value().unwrap();
            let l1 = m.l1_objective(None).unwrap();
            assert!(spred >= l1 - 1e-12, "descent bound violated: {spred} < {l1}");
            if gap > 1e-6 {
                assert!(spred > l1, "strict inequality expected off balance");
            }
        }
    }

    #[test]
    fn kappa_zero_penalty_is_exactly_zero() {
        let u = Tensor::from_vec(vec![0.3, -0.7]);
        let w = Tensor::from_vec(vec![1.1, 0.9]);
        let m = quadratic_model(0.0, u.clone(), w.clone(), vec![0.0, 0.0]);
        let v = u.hadamard(&w).unwrap();
        let base: f64 = v.data().iter().map(|x| x * x).sum();
        assert_eq!(m.spred_objective_value().unwrap(), base);
    }

    #[test]
    fn group_l1_term_is_euclidean_norm() {
        // One group holding (3,4) at kappa=1 contributes exactly 5.
        let p = SpredParam::group(1.0, Tensor::from_vec(vec![3.0, 4.0]), 1.0).unwrap();
        assert_eq!(p.l1_term(&Tensor::from_vec(vec![3.0, 4.0])), 5.0);
    }

    #[test]
    fn group_identity_when_norms_match() {
        // |u| = ||W|| = 5: penalty (k/2)(u^2 + ||W||^2) = k*25 = k*||uW||.
        let p = SpredParam::group(5.0, Tensor::from_vec(vec![3.0, 4.0]), 0.8).unwrap();
        assert_close(p.balance_gap(), 0.0, 1e-15, "gap");
        assert_close(p.penalty_value(), 0.8 * 25.0, 1e-12, "penalty");
        assert_close(p.l1_term(&p.effective_value()), 0.8 * 25.0, 1e-12, "l1 term");
    }

    #[test]
    fn rebalance_preserves_product_and_drops_penalty() {
        // U=(4), W=(1): penalty 17k -> 8k, product stays 4.
        let p = SpredParam::elementwise(
            Tensor::from_vec(vec![4.0]),
            Tensor::from_vec(vec![1.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(p.penalty_value(), 17.0);
        let r = p.rebalance();
        assert_eq!(r.u.data(), &[2.0]);
        assert_eq!(r.w.data(), &[2.0]);
        assert_eq!(r.penalty_value(), 8.0);
        assert_eq!(r.effective_value().data(), &[4.0]);

        let neg = SpredParam::elementwise(
            Tensor::from_vec(vec![-9.0]),
            Tensor::from_vec(vec![1.0]),
            1.0,
        )
        .unwrap()
        .rebalance();
        assert_eq!(neg.u.data(), &[-3.0]);
        assert_eq!(neg.w.data(), &[3.0]);
        assert_eq!(neg.effective_value().data(), &[-9.0]);
        assert_eq!(neg.balance_gap(), 0.0);
    }

    #[test]
    fn group_rebalance_matches_norms() {
        let p = SpredParam::group(9.0, Tensor::from_vec(vec![0.6, 0.8]), 1.0).unwrap();
        let r = p.rebalance();
        assert_close(r.balance_gap(), 0.0, 1e-12, "group gap");
        assert!(r.effective_value().max_abs_diff(&p.effective_value()) < 1e-12);
        assert!(r.penalty_value() <= p.penalty_value());

        let z = SpredParam::group(0.0, Tensor::from_vec(vec![1.0, 2.0]), 1.0).unwrap().rebalance();
        assert_eq!(z.w.data(), &[0.0, 0.0]);
        assert_eq!(z.balance_gap(), 0.0);
    }

    #[test]
    fn split_rescaling_preserves_objective() {
        // alpha*beta = kappa^2 split maps to the symmetric value by
        // U <- U (alpha/beta)^(1/4), W <- W (beta/alpha)^(1/4).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let kappa = 0.9;
            let n = 5;
            let u = Tensor::randn(vec![n], 1.0, &mut rng);
            let w = Tensor::randn(vec![n], 1.0, &mut rng);
            let ratio = 0.25 + 3.0 * rng.gen::<f64>();
            let alpha = kappa * ratio;
            let beta = kappa / ratio;
            let skew = SpredParam::elementwise(u.clone(), w.clone(), kappa)
                .unwrap()
                .with_split(alpha, beta)
                .unwrap();
            let c = (alpha / beta).powf(0.25);
            let sym =
                SpredParam::elementwise(u.scale(c), w.scale(1.0 / c), kappa).unwrap();
            assert_close(skew.penalty_value(), sym.penalty_value(), 1e-10, "penalty map");
            assert!(skew.effective_value().max_abs_diff(&sym.effective_value()) < 1e-10);
        }
    }

    #[test]
    fn with_split_rejects_wrong_product() {
        let p = SpredParam::elementwise(
            Tensor::from_vec(vec![1.0]),
            Tensor::from_vec(vec![1.0]),
            2.0,
        )
        .unwrap();
        assert!(p.clone().with_split(4.0, 1.0).is_ok());
        assert!(p.clone().with_split(4.0, 1.1).is_err());
        assert!(p.with_split(-4.0, -1.0).is_err());
    }

    #[test]
    fn make_spred_param_is_seed_deterministic() {
        let a = make_spred_param(&[50], 0.3, SpredMode::Elementwise, FactorInit::SqrtStandard, 11)
            .unwrap();
        let b = make_spred_param(&[50], 0.3, SpredMode::Elementwise, FactorInit::SqrtStandard, 11)
            .unwrap();
        assert_eq!(a.u.data(), b.u.data());
        assert_eq!(a.w.data(), b.w.data());
        let c = make_spred_param(&[50], 0.3, SpredMode::Elementwise, FactorInit::SqrtStandard, 12)
            .unwrap();
        assert_ne!(a.u.data(), c.u.data());
        assert!(make_spred_param(&[], 0.3, SpredMode::Elementwise, FactorInit::SqrtStandard, 1)
            .is_err());
        assert!(
            make_spred_param(&[3], -0.1, SpredMode::Elementwise, FactorInit::SqrtStandard, 1)
                .is_err()
        );
    }

    #[test]
    fn sqrt_standard_product_std_tracks_fan_in() {
        // fan-in 100: product entries should have std near 0.1.
        let p = make_spred_param(
            &[100, 100],
            0.0,
            SpredMode::Elementwise,
            FactorInit::SqrtStandard,
            5,
        )
        .unwrap();
        let v = p.effective_value();
        let n = v.numel() as f64;
        let mean = v.mean();
        let std = (v.sum_sq() / n - mean * mean).sqrt();
        assert!((std - 0.1).abs() < 0.02, "product std {std}");

        let q =
            make_spred_param(&[100, 100], 0.0, SpredMode::Elementwise, FactorInit::FactorUnit, 6)
                .unwrap();
        let v = q.effective_value();
        let std = (v.sum_sq() / n).sqrt();
        assert!((std - 0.1).abs() < 0.02, "factor-unit product std {std}");
    }

    #[test]
    fn threshold_sparsify_examples() {
        let v = Tensor::from_vec(vec![1e-7, 0.5]);
        let s = threshold_sparsify(
            &v,
            &SparsifyPolicy { loose: 1e-4, tight: 1e-6, measure: SparsifyMeasure::Absolute },
        );
        assert_eq!(s.v_loose.data(), &[0.0, 0.5]);
        assert_eq!(s.v_tight.data(), &[0.0, 0.5]);
        assert_eq!((s.sparsity_loose, s.sparsity_tight), (0.5, 0.5));

        let zeros = Tensor::zeros(vec![4]);
        let s = threshold_sparsify(&zeros, &SparsifyPolicy::default());
        assert_eq!((s.sparsity_loose, s.sparsity_tight), (1.0, 1.0));

        let s = threshold_sparsify(
            &v,
            &SparsifyPolicy { loose: 0.0, tight: 0.0, measure: SparsifyMeasure::Absolute },
        );
        assert_eq!(s.v_loose.data(), v.data());
        assert_eq!(s.sparsity_loose, 0.0);
    }

    #[test]
    fn two_threshold_rule_examples() {
        let merged = vec![(0.8, 0.8); 10];
        assert!(converged_by_two_thresholds(&merged, 5));
        let split = vec![(0.9, 0.7); 10];
        assert!(!converged_by_two_thresholds(&split, 5));

        // Merges at index 6; becomes true once the trailing window is all
        // merged and constant.
        let mut series = vec![(0.9, 0.5); 6];
        series.extend(vec![(0.8, 0.8); 10]);
        let window = 4;
        for t in 1..=series.len() {
            let got = converged_by_two_thresholds(&series[..t], window);
            let want = t >= 6 + window;
            assert_eq!(got, want, "at t={t}");
        }
        assert!(!converged_by_two_thresholds(&[], 3));
    }

    #[test]
    fn flatten_round_trip_and_grad_order() {
        let mut m = quadratic_model(
            0.5,
            Tensor::from_vec(vec![0.2, -0.3]),
            Tensor::from_vec(vec![0.4, 0.1]),
            vec![1.0, -1.0],
        );
        m.add_dense("b", Tensor::from_vec(vec![0.7]), 0.0);
        let flat = m.flatten_params();
        assert_eq!(flat.len(), 5);
        let mut m2 = quadratic_model(
            0.5,
            Tensor::zeros(vec![2]),
            Tensor::zeros(vec![2]),
            vec![1.0, -1.0],
        );
        m2.add_dense("b", Tensor::zeros(vec![1]), 0.0);
        m2.set_flat_params(&flat);
        assert_eq!(m2.flatten_params(), flat);

        let mut tape = Tape::new();
        let loss = m.spred_objective(&mut tape).unwrap();
        let grads = tape.backward(loss).unwrap();
        let flat_g = m.flatten_grads(&grads);
        assert_eq!(flat_g.len(), flat.len());
        // "b" does not feed the loss; its slot must be exactly zero.
        assert_eq!(flat_g[4], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_rebalance_invariants(
            seed in 0u64..1000,
            kappa in 0.01f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Tensor::randn(vec![12], 1.5, &mut rng);
            let w = Tensor::randn(vec![12], 0.5, &mut rng);
            let p = SpredParam::elementwise(u, w, kappa).unwrap();
            let r = p.rebalance();
            prop_assert!(r.balance_gap() <= 1e-12);
            prop_assert!(r.effective_value().max_abs_diff(&p.effective_value()) <= 1e-12);
            prop_assert!(r.penalty_value() <= p.penalty_value() + 1e-12);
            if p.balance_gap() > 1e-6 {
                prop_assert!(r.penalty_value() < p.penalty_value());
            }
        }

        #[test]
        fn prop_sparsify_monotone(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Tensor::randn(vec![20], 1.0, &mut rng);
            let s = threshold_sparsify(&v, &SparsifyPolicy::default());
            // Loose threshold zeroes at least as much as tight.
            prop_assert!(s.sparsity_loose >= s.sparsity_tight);
            // Surviving entries are untouched.
            for (orig, kept) in v.data().iter().zip(s.v_loose.data()) {
                prop_assert!(*kept == 0.0 || kept == orig);
            }
        }
    }
}
