//! Independent reference solvers used to ground-truth the factored-training
//! results: closed-form soft thresholding, coordinate descent, ISTA/FISTA,
//! the group proximal operator, and alternating-minimization sparse coding.
//!
//! Conventions, shared with the rest of the crate:
//! - elementwise lasso objective: ‖y − Xw‖² + 2κ‖w‖₁ (no 1/2 on the
//!   residual),
//! - group lasso objective: ‖y − Xw‖² + κ Σ_g ‖w_g‖₂,
//! - sparse coding objective: ‖X − BS‖² + 2κ‖S‖₁.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{dot, Tensor};
use crate::{Error, Result};

/// sign(c) · max(|c| − κ, 0): the minimizer of (w−c)² + 2κ|w|.
pub fn soft_threshold(c: f64, kappa: f64) -> f64 {
    if c > kappa {
        c - kappa
    } else if c < -kappa {
        c + kappa
    } else {
        0.0
    }
}

/// v · max(1 − κ/‖v‖₂, 0): the block proximal map of κ‖·‖₂.
pub fn group_soft_threshold(v: &[f64], kappa: f64) -> Vec<f64> {
    let norm = dot(v, v).sqrt();
    if norm <= kappa {
        return vec![0.0; v.len()];
    }
    let shrink = 1.0 - kappa / norm;
    v.iter().map(|&x| shrink * x).collect()
}

/// Lasso instance: minimize ‖y − Xw‖² + 2κ‖w‖₁. Multi-output targets
/// (`y: [N,m]`) are solved column by column.
#[derive(Clone, Debug)]
pub struct LassoProblem {
    pub x: Tensor,
    pub y: Tensor,
    pub kappa: f64,
}

impl LassoProblem {
    pub fn new(x: Tensor, y: Tensor, kappa: f64) -> Result<Self> {
        let (n, _d) = x.dims2()?;
        let rows_ok = match y.rank() {
            1 => y.shape()[0] == n,
            2 => y.shape()[0] == n,
            _ => false,
        };
        if !rows_ok {
            return Err(Error::ShapeMismatch {
                op: "LassoProblem",
                detail: format!("X {:?} vs y {:?}", x.shape(), y.shape()),
            });
        }
        if !(kappa >= 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be nonnegative, got {kappa}")));
        }
        Ok(LassoProblem { x, y, kappa })
    }

    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.x.shape()[1]
    }

    /// Number of output columns (1 for a vector target).
    pub fn outputs(&self) -> usize {
        if self.y.rank() == 1 {
            1
        } else {
            self.y.shape()[1]
        }
    }

    fn y_col(&self, j: usize) -> Vec<f64> {
        if self.y.rank() == 1 {
            self.y.data().to_vec()
        } else {
            self.y.col(j)
        }
    }

    fn w_col(w: &Tensor, j: usize) -> Vec<f64> {
        if w.rank() == 1 {
            w.data().to_vec()
        } else {
            w.col(j)
        }
    }

    /// ‖y − Xw‖² + 2κ‖w‖₁, summed over output columns.
    pub fn objective(&self, w: &Tensor) -> f64 {
        let mut total = 2.0 * self.kappa * w.l1_norm();
        for j in 0..self.outputs() {
            let wj = Tensor::from_vec(Self::w_col(w, j));
            let pred = self.x.matvec(&wj).expect("shape checked");
            let yj = self.y_col(j);
            total += pred
                .data()
                .iter()
                .zip(&yj)
                .fold(0.0, |acc, (&p, &y)| acc + (p - y) * (p - y));
        }
        total
    }

    /// Worst violation of the lasso optimality conditions at `w`:
    /// with g = 2Xᵀ(Xw − y), each coordinate must satisfy |gᵢ| ≤ 2κ where
    /// wᵢ = 0 and gᵢ = −2κ·sign(wᵢ) elsewhere. Unnormalized.
    pub fn kkt_residual(&self, w: &Tensor) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.outputs() {
            let wj = Tensor::from_vec(Self::w_col(w, j));
            let pred = self.x.matvec(&wj).expect("shape checked");
            let yj = self.y_col(j);
            let resid = Tensor::from_vec(
                pred.data().iter().zip(&yj).map(|(&p, &y)| p - y).collect(),
            );
            let g = self.x.matvec_t(&resid).expect("shape checked").scale(2.0);
            for (gi, wi) in g.data().iter().zip(wj.data()) {
                let viol = if *wi == 0.0 {
                    (gi.abs() - 2.0 * self.kappa).max(0.0)
                } else {
                    (gi + 2.0 * self.kappa * wi.signum()).abs()
                };
                worst = worst.max(viol);
            }
        }
        worst
    }
}

/// Exact lasso solution when XᵀX = I: wᵢ = soft_threshold((Xᵀy)ᵢ, κ),
/// column-wise for multi-output targets.
pub fn closed_form_lasso_orthonormal(p: &LassoProblem) -> Result<Tensor> {
    let (_, d) = p.x.dims2()?;
    let gram = p.x.transpose()?.matmul(&p.x)?;
    let mut deviation = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let want = if i == j { 1.0 } else { 0.0 };
            deviation = deviation.max((gram.at(i, j) - want).abs());
        }
    }
    if deviation > 1e-8 {
        return Err(Error::NotOrthonormal { deviation });
    }
    let m = p.outputs();
    let mut out = vec![0.0; d * m];
    for j in 0..m {
        let yj = Tensor::from_vec(p.y_col(j));
        let c = p.x.matvec_t(&yj)?;
        for i in 0..d {
            out[i * m + j] = soft_threshold(c.data()[i], p.kappa);
        }
    }
    if p.y.rank() == 1 {
        Tensor::new(vec![d], out)
    } else {
        Tensor::new(vec![d, m], out)
    }
}

#[derive(Clone, Debug)]
pub struct CdSolution {
    pub w: Tensor,
    pub sweeps: usize,
    pub converged: bool,
}

/// Cyclic coordinate descent with exact per-coordinate soft-threshold
/// updates and residual caching. The sweep stops once the largest
/// coordinate change, measured on the gradient scale (2‖xⱼ‖²·|Δwⱼ|), falls
/// under `tol`; the returned point then carries a KKT residual of order
/// `tol`.
pub fn coordinate_descent_lasso(p: &LassoProblem, tol: f64, max_sweeps: usize) -> CdSolution {
    coordinate_descent_lasso_observed(p, tol, max_sweeps, &mut |_, _| true)
}

/// Same solver with a per-sweep observer (first output column only): it
/// receives the completed sweep count and the current coefficients, and may
/// return false to abort, which reports the run as not converged.
pub fn coordinate_descent_lasso_observed(
    p: &LassoProblem,
    tol: f64,
    max_sweeps: usize,
    observer: &mut dyn FnMut(usize, &[f64]) -> bool,
) -> CdSolution {
    let (n, d) = (p.n(), p.d());
    let cols: Vec<Vec<f64>> = (0..d).map(|j| p.x.col(j)).collect();
    let col_sq: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let m = p.outputs();
    let mut w_all = vec![0.0; d * m];
    let mut sweeps_total = 0;
    let mut converged = true;
    for out_col in 0..m {
        let y = p.y_col(out_col);
        let mut w = vec![0.0; d];
        let mut r = y.clone();
        let mut sweeps = 0;
        loop {
            let mut max_change = 0.0f64;
            for j in 0..d {
                if col_sq[j] == 0.0 {
                    continue;
                }
                let cj = dot(&cols[j], &r) + col_sq[j] * w[j];
                let wj = soft_threshold(cj, p.kappa) / col_sq[j];
                let delta = wj - w[j];
                if delta != 0.0 {
                    for (ri, xi) in r.iter_mut().zip(&cols[j]) {
                        *ri -= delta * xi;
                    }
                    w[j] = wj;
                }
                max_change = max_change.max(2.0 * col_sq[j] * delta.abs());
            }
            sweeps += 1;
            if out_col == 0 && !observer(sweeps, &w) {
                converged = false;
                break;
            }
            if max_change < tol {
                break;
            }
            if sweeps >= max_sweeps {
                converged = false;
                break;
            }
        }
        sweeps_total = sweeps_total.max(sweeps);
        for j in 0..d {
            w_all[j * m + out_col] = w[j];
        }
        let _ = n;
    }
    let w = if p.y.rank() == 1 {
        Tensor::new(vec![d], w_all).expect("shape")
    } else {
        Tensor::new(vec![d, m], w_all).expect("shape")
    };
    CdSolution { w, sweeps: sweeps_total, converged }
}

/// Power-iteration estimate of the largest eigenvalue of 2XᵀX, with a small
/// safety margin. Deterministic: fixed start vector, fixed iteration count.
pub fn lipschitz_2xtx(x: &Tensor) -> f64 {
    let (_, d) = x.dims2().expect("rank 2");
    let mut v = Tensor::from_vec(vec![(d as f64).powf(-0.5); d]);
    let mut lambda = 0.0;
    for _ in 0..100 {
        let xv = x.matvec(&v).expect("shape");
        let mut next = x.matvec_t(&xv).expect("shape").scale(2.0);
        let norm = next.l2_norm();
        if norm < 1e-300 {
            return 1e-12;
        }
        next = next.scale(1.0 / norm);
        lambda = norm;
        v = next;
    }
    lambda * 1.02
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxVariant {
    Ista,
    Fista,
}

#[derive(Clone, Debug)]
pub struct ProxOptions {
    pub variant: ProxVariant,
    /// Stop when the objective change per iteration falls under this.
    pub tol: f64,
    pub max_iters: usize,
    /// Fixed step size; `None` uses 1/L from power iteration.
    pub step: Option<f64>,
}

impl Default for ProxOptions {
    fn default() -> Self {
        ProxOptions { variant: ProxVariant::Ista, tol: 1e-10, max_iters: 50_000, step: None }
    }
}

#[derive(Clone, Debug)]
pub struct ProxSolution {
    pub w: Tensor,
    pub iters: usize,
    pub objective: f64,
    pub converged: bool,
    pub trace: Vec<f64>,
}

/// Proximal-gradient lasso. One output column at a time; the prox of the
/// penalty 2κ‖·‖₁ at step t is soft thresholding at level 2κt.
pub fn ista_fista_lasso(p: &LassoProblem, opts: &ProxOptions) -> ProxSolution {
    ista_fista_lasso_observed(p, opts, &mut |_, _| true)
}

/// Same solver with a per-iteration observer (first output column only). A
/// false return aborts and reports the run as not converged.
pub fn ista_fista_lasso_observed(
    p: &LassoProblem,
    opts: &ProxOptions,
    observer: &mut dyn FnMut(usize, &Tensor) -> bool,
) -> ProxSolution {
    let d = p.d();
    let m = p.outputs();
    let step = opts.step.unwrap_or_else(|| 1.0 / lipschitz_2xtx(&p.x));
    let mut w_all = vec![0.0; d * m];
    let mut iters_max = 0;
    let mut converged = true;
    let mut trace = Vec::new();

    for out_col in 0..m {
        let y = Tensor::from_vec(p.y_col(out_col));
        let single = LassoProblem { x: p.x.clone(), y: y.clone(), kappa: p.kappa };
        let mut w = Tensor::zeros(vec![d]);
        let mut momentum = w.clone();
        let mut t_k = 1.0f64;
        let mut f_prev = single.objective(&w);
        if out_col == 0 {
            trace.push(f_prev);
        }
        let mut iters = 0;
        let mut done = false;
        while iters < opts.max_iters {
            let point = if opts.variant == ProxVariant::Fista { &momentum } else { &w };
            let pred = p.x.matvec(point).expect("shape");
            let resid = pred.sub(&y).expect("shape");
            let grad = p.x.matvec_t(&resid).expect("shape").scale(2.0);
            let mut next = Tensor::zeros(vec![d]);
            for i in 0..d {
                let z = point.data()[i] - step * grad.data()[i];
                next.data_mut()[i] = soft_threshold(z, 2.0 * p.kappa * step);
            }
            let f_next = single.objective(&next);
            match opts.variant {
                ProxVariant::Ista => {
                    w = next;
                }
                ProxVariant::Fista => {
                    if f_next > f_prev {
                        // Restart the momentum sequence; keeps the trace
                        // effectively monotone.
                        t_k = 1.0;
                        momentum = w.clone();
                        iters += 1;
                        continue;
                    }
                    let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
                    let coef = (t_k - 1.0) / t_next;
                    let mut mom = Tensor::zeros(vec![d]);
                    for i in 0..d {
                        mom.data_mut()[i] =
                            next.data()[i] + coef * (next.data()[i] - w.data()[i]);
                    }
                    momentum = mom;
                    t_k = t_next;
                    w = next;
                }
            }
            iters += 1;
            if out_col == 0 {
                trace.push(f_next);
                if !observer(iters, &w) {
                    f_prev = f_next;
                    break;
                }
            }
            if (f_prev - f_next).abs() < opts.tol {
                f_prev = f_next;
                done = true;
                break;
            }
            f_prev = f_next;
        }
        if !done {
            converged = false;
        }
        iters_max = iters_max.max(iters);
        for i in 0..d {
            w_all[i * m + out_col] = w.data()[i];
        }
    }

    let w = if p.y.rank() == 1 {
        Tensor::new(vec![d], w_all).expect("shape")
    } else {
        Tensor::new(vec![d, m], w_all).expect("shape")
    };
    let objective = p.objective(&w);
    ProxSolution { w, iters: iters_max, objective, converged, trace }
}

/// Group lasso instance: minimize ‖y − Xw‖² + κ Σ_g ‖w_g‖₂ over a declared
/// partition of the coordinates.
#[derive(Clone, Debug)]
pub struct GroupLassoProblem {
    pub x: Tensor,
    pub y: Tensor,
    pub kappa: f64,
    pub groups: Vec<Vec<usize>>,
}

impl GroupLassoProblem {
    pub fn new(x: Tensor, y: Tensor, kappa: f64, groups: Vec<Vec<usize>>) -> Result<Self> {
        let (n, d) = x.dims2()?;
        if y.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "GroupLassoProblem",
                detail: format!("X {:?} vs y {:?}", x.shape(), y.shape()),
            });
        }
        let mut seen = vec![false; d];
        for g in &groups {
            for &i in g {
                if i >= d || seen[i] {
                    return Err(Error::InvalidArgument(format!(
                        "groups must partition 0..{d}; index {i} repeated or out of range"
                    )));
                }
                seen[i] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidArgument(format!("groups must cover all {d} coordinates")));
        }
        if !(kappa >= 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be nonnegative, got {kappa}")));
        }
        Ok(GroupLassoProblem { x, y, kappa, groups })
    }

    pub fn objective(&self, w: &Tensor) -> f64 {
        let pred = self.x.matvec(w).expect("shape");
        let resid = pred.sub(&self.y).expect("shape");
        let mut total = resid.sum_sq();
        for g in &self.groups {
            let sq: f64 = g.iter().map(|&i| w.data()[i] * w.data()[i]).sum();
            total += self.kappa * sq.sqrt();
        }
        total
    }

    pub fn group_norms(&self, w: &Tensor) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|&i| w.data()[i] * w.data()[i]).sum::<f64>().sqrt())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct GroupSolution {
    pub w: Tensor,
    pub iters: usize,
    pub objective: f64,
    pub converged: bool,
    /// Per-group: does the group survive (nonzero norm)?
    pub support: Vec<bool>,
}

/// Proximal gradient for the group objective: gradient step on the residual
/// term, then the block prox per group at level κ·step.
pub fn group_ista(p: &GroupLassoProblem, tol: f64, max_iters: usize) -> GroupSolution {
    let d = p.x.shape()[1];
    let step = 1.0 / lipschitz_2xtx(&p.x);
    let mut w = Tensor::zeros(vec![d]);
    let mut f_prev = p.objective(&w);
    let mut iters = 0;
    let mut converged = false;
    while iters < max_iters {
        let pred = p.x.matvec(&w).expect("shape");
        let resid = pred.sub(&p.y).expect("shape");
        let grad = p.x.matvec_t(&resid).expect("shape").scale(2.0);
        let z: Vec<f64> = w
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&wi, &gi)| wi - step * gi)
            .collect();
        let mut next = vec![0.0; d];
        for g in &p.groups {
            let block: Vec<f64> = g.iter().map(|&i| z[i]).collect();
            let shrunk = group_soft_threshold(&block, p.kappa * step);
            for (gi, &i) in g.iter().enumerate() {
                next[i] = shrunk[gi];
            }
        }
        w = Tensor::from_vec(next);
        iters += 1;
        let f_next = p.objective(&w);
        if (f_prev - f_next).abs() < tol {
            converged = true;
            break;
        }
        f_prev = f_next;
    }
    let support = p.group_norms(&w).iter().map(|&n| n > 0.0).collect();
    let objective = p.objective(&w);
    GroupSolution { w, iters, objective, converged, support }
}

#[derive(Clone, Debug)]
pub struct ScSolution {
    pub b: Tensor,
    pub s: Tensor,
    /// Full objective after every outer iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn sc_objective(x: &Tensor, b: &Tensor, s: &Tensor, kappa: f64) -> f64 {
    let recon = b.matmul(s).expect("shape");
    x.sub(&recon).expect("shape").sum_sq() + 2.0 * kappa * s.l1_norm()
}

fn normalize_cols_keeping_old(candidate: &mut Tensor, old: &Tensor) {
    let (rows, cols) = candidate.dims2().expect("rank 2");
    for j in 0..cols {
        let mut sq = 0.0;
        for i in 0..rows {
            let v = candidate.at(i, j);
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm < 1e-12 {
            for i in 0..rows {
                candidate.data_mut()[i * cols + j] = old.at(i, j);
            }
        } else {
            for i in 0..rows {
                candidate.data_mut()[i * cols + j] /= norm;
            }
        }
    }
}

/// Alternating minimization for ‖X − BS‖² + 2κ‖S‖₁ with unit-norm columns
/// of B: coordinate-descent lasso per column of S, then projected gradient
/// steps on B accepted only when the objective drops. The objective trace is
/// non-increasing by construction.
pub fn alternating_sparse_coding(
    x: &Tensor,
    k: usize,
    kappa: f64,
    max_outer: usize,
    tol: f64,
    seed: u64,
) -> Result<ScSolution> {
    let (d0, n) = x.dims2()?;
    if k < 1 {
        return Err(Error::InvalidArgument("dictionary size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Tensor::randn(vec![d0, k], 1.0, &mut rng);
    let drawn = b.clone();
    normalize_cols_keeping_old(&mut b, &drawn);
    let mut s = Tensor::zeros(vec![k, n]);
    let mut trace = vec![sc_objective(x, &b, &s, kappa)];
    let mut t_step = 1.0;
    let mut converged = false;

    for _ in 0..max_outer {
        // S-step: per-column lasso with the current dictionary, warm started.
        let cols_b: Vec<Vec<f64>> = (0..k).map(|j| b.col(j)).collect();
        let col_sq: Vec<f64> = cols_b.iter().map(|c| dot(c, c)).collect();
        for col in 0..n {
            let y = x.col(col);
            let mut w: Vec<f64> = (0..k).map(|i| s.at(i, col)).collect();
            let mut r = y.clone();
            for (j, cb) in cols_b.iter().enumerate() {
                if w[j] != 0.0 {
                    for (ri, xi) in r.iter_mut().zip(cb) {
                        *ri -= w[j] * xi;
                    }
                }
            }
            for _ in 0..50 {
                let mut max_change = 0.0f64;
                for j in 0..k {
                    if col_sq[j] == 0.0 {
                        continue;
                    }
                    let cj = dot(&cols_b[j], &r) + col_sq[j] * w[j];
                    let wj = soft_threshold(cj, kappa) / col_sq[j];
                    let delta = wj - w[j];
                    if delta != 0.0 {
                        for (ri, xi) in r.iter_mut().zip(&cols_b[j]) {
                            *ri -= delta * xi;
                        }
                        w[j] = wj;
                    }
                    max_change = max_change.max(2.0 * col_sq[j] * delta.abs());
                }
                if max_change < tol.max(1e-12) {
                    break;
                }
            }
            for j in 0..k {
                s.data_mut()[j * n + col] = w[j];
            }
        }

        // B-step: a few projected gradient steps, each accepted only if the
        // reconstruction improves after column renormalization.
        for _ in 0..5 {
            let recon = b.matmul(&s)?;
            let resid = x.sub(&recon)?;
            let current = resid.sum_sq();
            let grad = resid.matmul(&s.transpose()?)?.scale(-2.0);
            let mut accepted = false;
            let mut t = t_step;
            for _ in 0..30 {
                let mut candidate = b.clone();
                for (ci, gi) in candidate.data_mut().iter_mut().zip(grad.data()) {
                    *ci -= t * gi;
                }
                normalize_cols_keeping_old(&mut candidate, &b);
                let cand_recon = candidate.matmul(&s)?;
                let cand_obj = x.sub(&cand_recon)?.sum_sq();
                if cand_obj <= current {
                    b = candidate;
                    t_step = t * 1.5;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                t_step = (t_step * 0.5).max(1e-12);
                break;
            }
        }

        let f = sc_objective(x, &b, &s, kappa);
        let f_prev = *trace.last().expect("nonempty");
        trace.push(f);
        if (f_prev - f).abs() < tol {
            converged = true;
            break;
        }
    }

    Ok(ScSolution { b, s, trace, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{assert_close, assert_slice_close};
    use rand::Rng;

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(1.5, 0.5), 1.0);
        assert_eq!(soft_threshold(0.5, 0.5), 0.0);
        assert_eq!(soft_threshold(-1.5, 0.5), -1.0);
        assert_eq!(soft_threshold(0.3, 0.0), 0.3);
        // Minimizer property: f(w*) <= f(w* + eps) for (w-c)^2 + 2k|w|.
        let f = |w: f64, c: f64, k: f64| (w - c) * (w - c) + 2.0 * k * w.abs();
        for &(c, k) in &[(1.5, 0.5), (0.4, 0.7), (-2.0, 1.0), (0.0, 0.3)] {
            let w = soft_threshold(c, k);
            for eps in [-1e-3, 1e-3, -0.1, 0.1] {
                assert!(f(w, c, k) <= f(w + eps, c, k) + 1e-12);
            }
        }
    }

    #[test]
    fn group_soft_threshold_cases() {
        assert_eq!(group_soft_threshold(&[1.0, 1.0], 2.0), vec![0.0, 0.0]);
        assert_slice_close(&group_soft_threshold(&[3.0, 4.0], 2.5), &[1.5, 2.0], 1e-15, "shrink");
        assert_eq!(group_soft_threshold(&[0.7, -0.2], 0.0), vec![0.7, -0.2]);
    }

    #[test]
    fn closed_form_on_identity_design() {
        let p = LassoProblem::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::from_vec(vec![3.0, 0.2]),
            1.0,
        )
        .unwrap();
        let w = closed_form_lasso_orthonormal(&p).unwrap();
        assert_eq!(w.data(), &[2.0, 0.0]);

        let p0 = LassoProblem { kappa: 0.0, ..p.clone() };
        assert_eq!(closed_form_lasso_orthonormal(&p0).unwrap().data(), &[3.0, 0.2]);

        let pbig = LassoProblem { kappa: 3.5, ..p };
        assert_eq!(closed_form_lasso_orthonormal(&pbig).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn closed_form_rejects_skewed_design() {
        let p = LassoProblem::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.0, 1.0]).unwrap(),
            Tensor::from_vec(vec![1.0, 1.0]),
            0.1,
        )
        .unwrap();
        assert!(matches!(
            closed_form_lasso_orthonormal(&p),
            Err(Error::NotOrthonormal { .. })
        ));
    }

    /// Gaussian elimination, test-only least-squares oracle.
    fn solve_normal_equations(x: &Tensor, y: &[f64]) -> Vec<f64> {
        let d = x.shape()[1];
        let xt = x.transpose().unwrap();
        let gram = xt.matmul(x).unwrap();
        let rhs_t = x.matvec_t(&Tensor::from_vec(y.to_vec())).unwrap();
        let mut m: Vec<Vec<f64>> = (0..d).map(|i| gram.row(i).to_vec()).collect();
        let mut rhs = rhs_t.data().to_vec();
        for col in 0..d {
            let piv = (col..d).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
            m.swap(col, piv);
            rhs.swap(col, piv);
            for row in col + 1..d {
                let f = m[row][col] / m[col][col];
                for k in col..d {
                    m[row][k] -= f * m[col][k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
        let mut sol = vec![0.0; d];
        for row in (0..d).rev() {
            let mut acc = rhs[row];
            for k in row + 1..d {
                acc -= m[row][k] * sol[k];
            }
            sol[row] = acc / m[row][row];
        }
        sol
    }

    #[test]
    fn cd_matches_closed_form_on_orthonormal_design() {
        // Random rotation: orthonormal 2x2.
        let theta = 0.6f64;
        let x = Tensor::new(
            vec![2, 2],
            vec![theta.cos(), -theta.sin(), theta.sin(), theta.cos()],
        )
        .unwrap();
        let p = LassoProblem::new(x, Tensor::from_vec(vec![1.2, -0.4]), 0.3).unwrap();
        let closed = closed_form_lasso_orthonormal(&p).unwrap();
        let cd = coordinate_descent_lasso(&p, 1e-12, 10_000);
        assert!(cd.converged);
        assert!(cd.w.max_abs_diff(&closed) < 1e-8, "gap {}", cd.w.max_abs_diff(&closed));
    }

    #[test]
    fn cd_with_zero_kappa_is_least_squares() {
        let x = randn(vec![30, 6], 3);
        let y = randn(vec![30], 4);
        let p = LassoProblem::new(x.clone(), y.clone(), 0.0).unwrap();
        let cd = coordinate_descent_lasso(&p, 1e-12, 50_000);
        let ols = solve_normal_equations(&x, y.data());
        assert_slice_close(cd.w.data(), &ols, 1e-6, "cd vs ols");
    }

    #[test]
    fn cd_kkt_residual_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let n = 20 + (trial * 7) % 60;
            let d = 5 + (trial * 11) % 40;
            let x = Tensor::randn(vec![n, d], 1.0, &mut rng);
            let y = Tensor::randn(vec![n], 1.0, &mut rng);
            let kappa = 0.05 + rng.gen::<f64>();
            let p = LassoProblem::new(x, y, kappa).unwrap();
            let tol = 1e-9;
            let cd = coordinate_descent_lasso(&p, tol, 100_000);
            assert!(cd.converged, "trial {trial}");
            let kkt = p.kkt_residual(&cd.w);
            assert!(kkt <= 10.0 * tol, "trial {trial}: kkt {kkt}");
        }
    }

    #[test]
    fn ista_agrees_with_cd() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..5 {
            let x = Tensor::randn(vec![50, 20], 1.0, &mut rng);
            let y = Tensor::randn(vec![50], 1.0, &mut rng);
            let kappa = 0.3 + rng.gen::<f64>();
            let p = LassoProblem::new(x, y, kappa).unwrap();
            let cd = coordinate_descent_lasso(&p, 1e-10, 100_000);
            let f_cd = p.objective(&cd.w);
            for variant in [ProxVariant::Ista, ProxVariant::Fista] {
                let sol = ista_fista_lasso(
                    &p,
                    &ProxOptions { variant, tol: 1e-12, max_iters: 100_000, step: None },
                );
                let rel = (sol.objective - f_cd).abs() / f_cd.abs().max(1e-12);
                assert!(rel < 1e-6, "trial {trial} {variant:?}: rel {rel}");
            }
        }
    }

    #[test]
    fn ista_objective_trace_is_non_increasing() {
        let x = randn(vec![40, 15], 5);
        let y = randn(vec![40], 6);
        let p = LassoProblem::new(x, y, 0.4).unwrap();
        let sol = ista_fista_lasso(
            &p,
            &ProxOptions { variant: ProxVariant::Ista, tol: 1e-12, max_iters: 2000, step: None },
        );
        for pair in sol.trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn ista_single_step_on_orthonormal_design_is_closed_form() {
        let theta = 1.1f64;
        let x = Tensor::new(
            vec![2, 2],
            vec![theta.cos(), -theta.sin(), theta.sin(), theta.cos()],
        )
        .unwrap();
        let p = LassoProblem::new(x, Tensor::from_vec(vec![2.0, -0.7]), 0.5).unwrap();
        let closed = closed_form_lasso_orthonormal(&p).unwrap();
        // From w=0 with step exactly 1/2: z = X'y, threshold at kappa.
        let sol = ista_fista_lasso(
            &p,
            &ProxOptions { variant: ProxVariant::Ista, tol: 1e30, max_iters: 1, step: Some(0.5) },
        );
        assert!(sol.w.max_abs_diff(&closed) < 1e-13);
    }

    #[test]
    fn ista_huge_kappa_returns_zero() {
        let x = randn(vec![20, 8], 7);
        let y = randn(vec![20], 8);
        let xty = x.matvec_t(&y).unwrap();
        let p = LassoProblem::new(x, y, xty.max_abs() * 2.0).unwrap();
        let sol = ista_fista_lasso(&p, &ProxOptions::default());
        assert_eq!(sol.w.data().iter().filter(|&&v| v != 0.0).count(), 0);
    }

    #[test]
    fn multi_output_lasso_solves_columns_independently() {
        let x = randn(vec![25, 8], 11);
        let y = randn(vec![25, 3], 12);
        let p = LassoProblem::new(x.clone(), y.clone(), 0.2).unwrap();
        let cd = coordinate_descent_lasso(&p, 1e-10, 50_000);
        assert_eq!(cd.w.shape(), &[8, 3]);
        for j in 0..3 {
            let single =
                LassoProblem::new(x.clone(), Tensor::from_vec(y.col(j)), 0.2).unwrap();
            let wj = coordinate_descent_lasso(&single, 1e-10, 50_000).w;
            assert_slice_close(&cd.w.col(j), wj.data(), 1e-9, "column");
        }
        let kkt = p.kkt_residual(&cd.w);
        assert!(kkt <= 1e-8, "kkt {kkt}");
    }

    #[test]
    fn group_ista_with_singletons_matches_elementwise_cd() {
        // Group objective kappa*sum|v_i| equals elementwise objective at
        // kappa/2 (whose penalty is 2*(kappa/2)*||w||_1).
        let x = randn(vec![30, 6], 13);
        let y = randn(vec![30], 14);
        let kappa = 0.8;
        let groups: Vec<Vec<usize>> = (0..6).map(|i| vec![i]).collect();
        let gp = GroupLassoProblem::new(x.clone(), y.clone(), kappa, groups).unwrap();
        let gs = group_ista(&gp, 1e-13, 200_000);
        let ep = LassoProblem::new(x, y, kappa / 2.0).unwrap();
        let cd = coordinate_descent_lasso(&ep, 1e-12, 100_000);
        assert_slice_close(gs.w.data(), cd.w.data(), 1e-4, "singleton reduction");
        assert_close(gs.objective, gp.objective(&cd.w), 1e-7, "objective");
    }

    #[test]
    fn group_ista_solution_is_a_local_min_of_convex_objective() {
        let x = randn(vec![40, 10], 15);
        let y = randn(vec![40], 16);
        let groups = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7, 8, 9]];
        let p = GroupLassoProblem::new(x, y, 1.5, groups).unwrap();
        let sol = group_ista(&p, 1e-13, 200_000);
        assert!(sol.converged);
        let f = sol.objective;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let delta = Tensor::randn(vec![10], 1.0, &mut rng);
            for eps in [1e-4, 1e-3, 1e-2] {
                let mut probe = sol.w.clone();
                for (pi, di) in probe.data_mut().iter_mut().zip(delta.data()) {
                    *pi += eps * di;
                }
                assert!(p.objective(&probe) >= f - 1e-10);
            }
        }
    }

    #[test]
    fn group_problem_validates_partition() {
        let x = randn(vec![5, 4], 18);
        let y = randn(vec![5], 19);
        assert!(GroupLassoProblem::new(x.clone(), y.clone(), 1.0, vec![vec![0, 1], vec![2, 3]])
            .is_ok());
        assert!(GroupLassoProblem::new(x.clone(), y.clone(), 1.0, vec![vec![0, 1], vec![1, 2]])
            .is_err());
        assert!(GroupLassoProblem::new(x.clone(), y.clone(), 1.0, vec![vec![0, 1]]).is_err());
        assert!(GroupLassoProblem::new(x, y, 1.0, vec![vec![0, 1], vec![2, 4]]).is_err());
    }

    #[test]
    fn sparse_coding_recovers_exact_factorization_without_penalty() {
        // Planted B*, S*: with k = rank and kappa = 0 the reconstruction
        // should go to zero.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (d0, k, n) = (6, 3, 12);
        let mut b_true = Tensor::randn(vec![d0, k], 1.0, &mut rng);
        let old = b_true.clone();
        normalize_cols_keeping_old(&mut b_true, &old);
        let s_true = Tensor::randn(vec![k, n], 1.0, &mut rng);
        let x = b_true.matmul(&s_true).unwrap();
        let sol = alternating_sparse_coding(&x, k, 0.0, 400, 1e-12, 5).unwrap();
        let recon = sol.b.matmul(&sol.s).unwrap();
        let err = x.sub(&recon).unwrap().sum_sq();
        assert!(err <= 1e-6, "reconstruction error {err}");
    }

    #[test]
    fn sparse_coding_trace_monotone_and_huge_kappa_kills_codes() {
        let x = randn(vec![8, 20], 29);
        let sol = alternating_sparse_coding(&x, 4, 0.3, 60, 1e-10, 6).unwrap();
        for pair in sol.trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{} -> {}", pair[0], pair[1]);
        }
        // Unit dictionary columns.
        let (rows, cols) = sol.b.dims2().unwrap();
        for j in 0..cols {
            let sq: f64 = (0..rows).map(|i| sol.b.at(i, j).powi(2)).sum();
            assert_close(sq.sqrt(), 1.0, 1e-8, "column norm");
        }

        let big = alternating_sparse_coding(&x, 4, 1e6, 10, 1e-10, 6).unwrap();
        assert_eq!(big.s.data().iter().filter(|&&v| v != 0.0).count(), 0);
        assert_close(*big.trace.last().unwrap(), x.sum_sq(), 1e-9, "objective at S=0");
    }
}
