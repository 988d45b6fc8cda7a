//! Dictionary learning: reconstruct patch columns as B·S with unit-norm
//! dictionary columns and factored sparse codes.
//!
//! Protocol per epoch: visit column batches (all columns when unbatched);
//! for each batch run a fixed number of plain gradient steps on the code
//! factors restricted to that batch's slice, then quasi-Newton steps on the
//! dictionary against the same batch, renormalizing dictionary columns after
//! every update. The dictionary objective is evaluated through the column
//! normalization, so its accepted steps never increase the batch loss. A
//! full-data objective is recorded once per epoch; in unbatched mode an
//! epoch that would increase it is rolled back and retried with a halved
//! code step size.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::Tape;
use crate::optim::{lbfgs_step, Adam, LbfgsOptions, LbfgsState};
use crate::spred::{
    converged_by_two_thresholds, make_spred_param, threshold_sparsify, SpredMode, SpredParam,
};
use crate::tasks::config::{RunStatus, SolveReport, Trace, TrainConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SparseCodingOptions {
    pub k: usize,
    /// Columns per batch; 0 trains on all columns at once.
    pub batch_cols: usize,
    /// Code-factor gradient steps per batch visit.
    pub steps_per_batch: usize,
    /// Dictionary quasi-Newton steps per batch visit.
    pub b_steps_per_batch: usize,
    pub epochs: usize,
    /// Stop after this many consecutive epochs with relative objective
    /// change below `plateau_tol`.
    pub plateau_tol: f64,
    pub plateau_epochs: usize,
}

impl Default for SparseCodingOptions {
    fn default() -> Self {
        SparseCodingOptions {
            k: 64,
            batch_cols: 0,
            steps_per_batch: 10,
            b_steps_per_batch: 3,
            epochs: 400,
            plateau_tol: 1e-7,
            plateau_epochs: 5,
        }
    }
}

pub struct SparseCodingOutcome {
    /// Unit-column dictionary.
    pub b: Tensor,
    pub report: SolveReport,
}

fn gather_cols(t: &Tensor, idx: &[usize]) -> Tensor {
    let (rows, cols) = t.dims2().expect("matrix");
    let mut data = Vec::with_capacity(rows * idx.len());
    for r in 0..rows {
        for &c in idx {
            debug_assert!(c < cols);
            data.push(t.data()[r * cols + c]);
        }
    }
    Tensor::new(vec![rows, idx.len()], data).expect("shape")
}

fn scatter_cols(t: &mut Tensor, idx: &[usize], block: &Tensor) {
    let (rows, cols) = t.dims2().expect("matrix");
    for r in 0..rows {
        for (bi, &c) in idx.iter().enumerate() {
            t.data_mut()[r * cols + c] = block.data()[r * idx.len() + bi];
        }
    }
    let _ = rows;
    let _ = cols;
}

fn normalize_columns(b: &mut Tensor) -> f64 {
    let (rows, cols) = b.dims2().expect("matrix");
    let mut max_dev = 0.0f64;
    for c in 0..cols {
        let mut norm_sq = 0.0;
        for r in 0..rows {
            let v = b.data()[r * cols + c];
            norm_sq += v * v;
        }
        let norm = norm_sq.sqrt();
        if norm < 1e-12 {
            // Dead column: leave it; it contributes nothing either way.
            max_dev = max_dev.max((norm - 1.0).abs());
            continue;
        }
        for r in 0..rows {
            b.data_mut()[r * cols + c] /= norm;
        }
        let mut check = 0.0;
        for r in 0..rows {
            let v = b.data()[r * cols + c];
            check += v * v;
        }
        max_dev = max_dev.max((check.sqrt() - 1.0).abs());
    }
    max_dev
}

fn column_normalized(b: &Tensor) -> Tensor {
    let mut out = b.clone();
    normalize_columns(&mut out);
    out
}

/// Loss and raw-coordinate gradient of ‖X_b − Π(B)·S‖² where Π normalizes
/// columns. The chain rule through one column y = b/‖b‖ sends a gradient g
/// to (g − (ŷ'g)ŷ)/‖b‖.
fn dictionary_eval(b_raw: &[f64], rows: usize, k: usize, xb: &Tensor, s: &Tensor) -> (f64, Vec<f64>) {
    let b = Tensor::new(vec![rows, k], b_raw.to_vec()).expect("shape");
    let bn = column_normalized(&b);
    let pred = bn.matmul(s).expect("shape");
    let resid = pred.sub(xb).expect("shape");
    let loss = resid.sum_sq();
    let g_bn = resid.matmul(&s.transpose().expect("rank 2")).expect("shape").scale(2.0);

    let mut g_raw = vec![0.0; b_raw.len()];
    for c in 0..k {
        let mut norm_sq = 0.0;
        for r in 0..rows {
            let v = b.data()[r * k + c];
            norm_sq += v * v;
        }
        let norm = norm_sq.sqrt();
        if norm < 1e-12 {
            continue;
        }
        let mut dot = 0.0;
        for r in 0..rows {
            dot += bn.data()[r * k + c] * g_bn.data()[r * k + c];
        }
        for r in 0..rows {
            let ghat = g_bn.data()[r * k + c] - dot * bn.data()[r * k + c];
            g_raw[r * k + c] = ghat / norm;
        }
    }
    (loss, g_raw)
}

struct CodeSlices {
    u: Tensor,
    w: Tensor,
}

/// Ten (by default) plain gradient steps on the code factors of one batch.
fn code_steps(
    slices: &mut CodeSlices,
    b_norm: &Tensor,
    xb: &Tensor,
    kappa: f64,
    lr: f64,
    steps: usize,
) -> Result<()> {
    for _ in 0..steps {
        let mut tape = Tape::new();
        let u = tape.leaf("u", slices.u.clone());
        let w = tape.leaf("w", slices.w.clone());
        let v = tape.mul(u, w)?;
        let bc = tape.constant(b_norm.clone());
        let pred = tape.matmul(bc, v)?;
        let xc = tape.constant(xb.clone());
        let r = tape.sub(pred, xc)?;
        let fit = tape.sum_sq(r);
        let loss = if kappa == 0.0 {
            fit
        } else {
            let uu = tape.sum_sq(u);
            let ww = tape.sum_sq(w);
            let pen_sum = tape.add(uu, ww)?;
            let pen = tape.scale(pen_sum, kappa);
            tape.add(fit, pen)?
        };
        let grads = tape.backward(loss)?;
        let gu = grads.get("u").expect("u grad");
        let gw = grads.get("w").expect("w grad");
        for (p, g) in slices.u.data_mut().iter_mut().zip(gu.data()) {
            *p -= lr * g;
        }
        for (p, g) in slices.w.data_mut().iter_mut().zip(gw.data()) {
            *p -= lr * g;
        }
    }
    Ok(())
}

fn full_objective(x: &Tensor, b_norm: &Tensor, s_param: &SpredParam) -> Result<f64> {
    let s = s_param.effective_value();
    let pred = b_norm.matmul(&s)?;
    let resid = pred.sub(x)?;
    Ok(resid.sum_sq() + s_param.penalty_value())
}

/// Reference objective ‖X − BS‖² + 2κ‖S‖₁ at given codes.
pub fn reference_objective(x: &Tensor, b: &Tensor, s: &Tensor, kappa: f64) -> Result<f64> {
    let pred = b.matmul(s)?;
    let resid = pred.sub(x)?;
    Ok(resid.sum_sq() + 2.0 * kappa * s.l1_norm())
}

pub fn run_sparse_coding(
    x: &Tensor,
    cfg: &TrainConfig,
    opts: &SparseCodingOptions,
) -> Result<SparseCodingOutcome> {
    cfg.validate()?;
    let (rows, n) = x.dims2()?;
    if n == 0 || rows == 0 {
        return Err(Error::InvalidArgument("empty patch matrix".into()));
    }
    let k = opts.k;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut s_param =
        make_spred_param(&[k, n], cfg.kappa, SpredMode::Elementwise, cfg.init, cfg.seed)?;
    let mut b = Tensor::randn(vec![rows, k], (rows as f64).powf(-0.5), &mut rng);
    let mut bnorm_max_dev: f64 = normalize_columns(&mut b);

    let batch_cols = if opts.batch_cols == 0 { n } else { opts.batch_cols.min(n) };
    let full_batch = batch_cols == n;
    let mut lr = cfg.lr;
    let lbfgs_opts = LbfgsOptions::default();
    let mut adam_b: Option<Adam> = None;
    let mut fallback_batches = 0usize;

    let mut trace = Trace::default();
    let mut history = Vec::new();
    let mut flags = Vec::new();
    let mut status = RunStatus::BudgetExhausted;
    let mut merge_step = None;
    let mut streak_start: Option<usize> = None;
    let mut plateau_run = 0usize;
    let mut epochs_run = 0usize;

    let mut f_prev = full_objective(x, &b, &s_param)?;
    {
        let sp = threshold_sparsify(&s_param.effective_value(), &cfg.policy);
        trace.push(0, f_prev, sp.sparsity_loose, sp.sparsity_tight, s_param.balance_gap());
    }

    'outer: for epoch in 1..=opts.epochs {
        let snapshot = if full_batch { Some((s_param.clone(), b.clone())) } else { None };
        let mut retries = 0usize;
        loop {
            let mut order: Vec<usize> = (0..n).collect();
            if !full_batch {
                order.shuffle(&mut rng);
            }
            for batch in order.chunks(batch_cols) {
                let xb = gather_cols(x, batch);
                let mut slices = CodeSlices {
                    u: gather_cols(&s_param.u, batch),
                    w: gather_cols(&s_param.w, batch),
                };
                code_steps(&mut slices, &b, &xb, cfg.kappa, lr, opts.steps_per_batch)?;
                scatter_cols(&mut s_param.u, batch, &slices.u);
                scatter_cols(&mut s_param.w, batch, &slices.w);

                let s_block = gather_cols(&s_param.effective_value(), batch);
                let mut fell_back_all = true;
                match &mut adam_b {
                    None => {
                        let mut state = LbfgsState::default();
                        let mut flat = b.data().to_vec();
                        for _ in 0..opts.b_steps_per_batch {
                            let step = {
                                let mut eval = |p: &[f64]| dictionary_eval(p, rows, k, &xb, &s_block);
                                lbfgs_step(&mut flat, &mut eval, &mut state, &lbfgs_opts)
                            };
                            if !step.fell_back {
                                fell_back_all = false;
                            }
                            b = Tensor::new(vec![rows, k], flat.clone())?;
                            bnorm_max_dev = bnorm_max_dev.max(normalize_columns(&mut b));
                            flat = b.data().to_vec();
                        }
                        if fell_back_all {
                            fallback_batches += 1;
                            if fallback_batches >= 3 {
                                adam_b = Some(Adam::new(lr));
                                flags.push(format!("dictionary_adam_fallback_epoch_{epoch}"));
                            }
                        } else {
                            fallback_batches = 0;
                        }
                    }
                    Some(adam) => {
                        for _ in 0..opts.b_steps_per_batch {
                            let (_, g) = dictionary_eval(b.data(), rows, k, &xb, &s_block);
                            let g = Tensor::new(vec![rows, k], g)?;
                            adam.begin_step();
                            adam.update("b", &mut b, &g)?;
                            bnorm_max_dev = bnorm_max_dev.max(normalize_columns(&mut b));
                        }
                    }
                }
            }

            let f_epoch = full_objective(x, &b, &s_param)?;
            if !f_epoch.is_finite() {
                status = RunStatus::Diverged;
                flags.push(format!("non_finite_objective_at_epoch_{epoch}"));
                epochs_run = epoch;
                break 'outer;
            }
            if full_batch && f_epoch > f_prev * (1.0 + 1e-12) + 1e-15 {
                let (s_snap, b_snap) = snapshot.clone().expect("snapshot in full batch mode");
                s_param = s_snap;
                b = b_snap;
                retries += 1;
                lr *= 0.5;
                if retries <= 8 {
                    continue;
                }
                flags.push(format!("epoch_increase_accepted_at_{epoch}"));
            }

            let rel_change = (f_prev - f_epoch).abs() / f_prev.abs().max(1.0);
            plateau_run = if rel_change < opts.plateau_tol { plateau_run + 1 } else { 0 };
            f_prev = f_epoch.min(f_prev);

            let sp = threshold_sparsify(&s_param.effective_value(), &cfg.policy);
            trace.push(epoch, f_prev, sp.sparsity_loose, sp.sparsity_tight, s_param.balance_gap());
            let merged = sp.sparsity_loose == sp.sparsity_tight;
            let continues = merged
                && history
                    .last()
                    .map(|&(l, t): &(f64, f64)| l == t && l == sp.sparsity_loose)
                    .unwrap_or(false);
            if merged && !continues {
                streak_start = Some(epoch);
            } else if !merged {
                streak_start = None;
            }
            history.push((sp.sparsity_loose, sp.sparsity_tight));
            epochs_run = epoch;

            if converged_by_two_thresholds(&history, cfg.window) && plateau_run >= opts.plateau_epochs
            {
                status = RunStatus::Converged;
                merge_step = streak_start;
                break 'outer;
            }
            if plateau_run >= opts.plateau_epochs {
                status = RunStatus::Converged;
                merge_step = streak_start;
                flags.push("objective_plateau_before_threshold_merge".into());
                break 'outer;
            }
            break;
        }
    }

    if lr < cfg.lr {
        flags.push(format!("code_lr_reduced_to_{lr}"));
    }

    let s_final = s_param.effective_value();
    let sp = threshold_sparsify(&s_final, &cfg.policy);
    let diverged = status == RunStatus::Diverged;
    let mut metrics = BTreeMap::new();
    if !diverged {
        let pred = b.matmul(&s_final)?;
        metrics.insert("reconstruction_error".into(), pred.sub(x)?.sum_sq());
        metrics.insert("bnorm_max_dev".into(), bnorm_max_dev);
        metrics.insert("code_sparsity_tight".into(), sp.sparsity_tight);
    }

    let mut timings = BTreeMap::new();
    timings.insert("train".into(), started.elapsed().as_secs_f64());

    let report = SolveReport {
        task: "sparse_coding".into(),
        status,
        seed: cfg.seed,
        config: cfg.clone(),
        steps_run: epochs_run,
        merge_step,
        trace,
        recovered: BTreeMap::from([("s".into(), sp.v_tight.clone())]),
        factors: BTreeMap::from([("s".into(), s_param.clone())]),
        sparsity_loose: sp.sparsity_loose,
        sparsity_tight: sp.sparsity_tight,
        balance_gap: s_param.balance_gap(),
        spred_objective: if diverged { f64::NAN } else { f_prev },
        l1_objective: if diverged {
            f64::NAN
        } else {
            reference_objective(x, &b, &sp.v_tight, cfg.kappa)?
        },
        metrics,
        flags,
        timings,
    };
    report.validate()?;
    Ok(SparseCodingOutcome { b, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::alternating_sparse_coding;
    use crate::tasks::data::gen_texture_patches;

    #[test]
    fn exact_factorization_when_unregularized_and_overcomplete() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let cfg = TrainConfig {
            lr: 0.02,
            kappa: 0.0,
            seed: 0,
            window: 10,
            ..TrainConfig::default()
        };
        let opts = SparseCodingOptions {
            k: 6,
            epochs: 4000,
            plateau_tol: 1e-12,
            b_steps_per_batch: 4,
            ..SparseCodingOptions::default()
        };
        let out = run_sparse_coding(&x, &cfg, &opts).unwrap();
        let err = out.report.metrics["reconstruction_error"];
        assert!(err <= 1e-4, "reconstruction error {err:.3e}");
    }

    #[test]
    fn epoch_trace_is_non_increasing_and_dictionary_stays_unit() {
        let x = gen_texture_patches(80, 6, 11).unwrap();
        let cfg = TrainConfig { lr: 0.05, kappa: 0.05, seed: 11, ..TrainConfig::default() };
        let opts = SparseCodingOptions { k: 16, epochs: 120, ..SparseCodingOptions::default() };
        let out = run_sparse_coding(&x, &cfg, &opts).unwrap();
        for w in out.report.trace.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "epoch increase: {} -> {}", w[0], w[1]);
        }
        assert!(out.report.metrics["bnorm_max_dev"] <= 1e-8);
        let (rows, k) = out.b.dims2().unwrap();
        assert_eq!((rows, k), (36, 16));
    }

    #[test]
    fn tracks_alternating_oracle_on_small_patches() {
        let x = gen_texture_patches(120, 6, 3).unwrap();
        let kappa = 0.2;
        let cfg = TrainConfig { lr: 0.05, kappa, seed: 3, ..TrainConfig::default() };
        let opts = SparseCodingOptions { k: 12, epochs: 300, ..SparseCodingOptions::default() };
        let out = run_sparse_coding(&x, &cfg, &opts).unwrap();

        let oracle = alternating_sparse_coding(&x, 12, kappa, 200, 1e-9, 3).unwrap();
        let f_oracle = oracle.trace.last().copied().unwrap();
        let f_run = out.report.l1_objective;
        let rel = (f_run - f_oracle) / f_oracle.abs().max(1e-300);
        assert!(rel <= 0.05, "objective {f_run:.6} vs oracle {f_oracle:.6} (rel {rel:.3})");
        assert!(out.report.metrics["code_sparsity_tight"] > 0.3);
    }

    #[test]
    fn batched_mode_touches_only_active_slices() {
        let x = gen_texture_patches(60, 6, 7).unwrap();
        let cfg = TrainConfig { lr: 0.05, kappa: 0.05, seed: 7, ..TrainConfig::default() };
        let opts = SparseCodingOptions {
            k: 10,
            batch_cols: 15,
            epochs: 40,
            ..SparseCodingOptions::default()
        };
        let out = run_sparse_coding(&x, &cfg, &opts).unwrap();
        assert!(out.report.status != RunStatus::Diverged);
        assert!(out.report.trace.len() >= 2);
        assert!(out.report.metrics["bnorm_max_dev"] <= 1e-8);
    }
}
