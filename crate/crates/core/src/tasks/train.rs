//! Generic full-batch training loop shared by the task drivers.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::graph::Tape;
use crate::optim::{lbfgs_step, FirstOrder, LbfgsOptions, LbfgsState, OptimizerKind};
use crate::spred::{converged_by_two_thresholds, threshold_sparsify, SpredModel};
use crate::tasks::config::{RunStatus, SolveReport, Trace, TrainConfig};
use crate::Result;

pub struct TrainOutcome {
    pub status: RunStatus,
    pub merge_step: Option<usize>,
    pub trace: Trace,
    /// Cumulative wall seconds at each trace row. Parallel to the trace,
    /// kept out of it so the trace stays seed-reproducible.
    pub eval_seconds: Vec<f64>,
    pub steps_run: usize,
    pub seconds: f64,
    pub flags: Vec<String>,
}

/// Tracks when the loose and tight sparsities merged and stayed put.
struct MergeTracker {
    history: Vec<(f64, f64)>,
    streak_start: Option<usize>,
}

impl MergeTracker {
    fn new() -> Self {
        MergeTracker { history: Vec::new(), streak_start: None }
    }

    fn observe(&mut self, step: usize, loose: f64, tight: f64) {
        let merged = loose == tight;
        let continues = merged
            && self
                .history
                .last()
                .map(|&(l, t)| l == t && l == loose)
                .unwrap_or(false);
        if merged && !continues {
            self.streak_start = Some(step);
        } else if !merged {
            self.streak_start = None;
        }
        self.history.push((loose, tight));
    }

    fn converged(&self, window: usize) -> bool {
        converged_by_two_thresholds(&self.history, window)
    }
}

/// Sparsity columns for the trace: factored parameters when the model has
/// any, otherwise the dense parameters (so baselines stay comparable).
fn measured_sparsity(model: &SpredModel, policy: &crate::spred::SparsifyPolicy) -> (f64, f64) {
    if model.has_sparse() {
        return model.aggregate_sparsity(policy);
    }
    let mut zeros_loose = 0usize;
    let mut zeros_tight = 0usize;
    let mut total = 0usize;
    for (_, v) in model.dense_params() {
        let s = threshold_sparsify(v, policy);
        let n = v.numel();
        zeros_loose += (s.sparsity_loose * n as f64).round() as usize;
        zeros_tight += (s.sparsity_tight * n as f64).round() as usize;
        total += n;
    }
    if total == 0 {
        return (1.0, 1.0);
    }
    (zeros_loose as f64 / total as f64, zeros_tight as f64 / total as f64)
}

fn note_increase(trace: &Trace, flags: &mut Vec<String>) {
    if flags.iter().any(|f| f.starts_with("objective_increased")) {
        return;
    }
    let n = trace.objective.len();
    if n < 2 {
        return;
    }
    let prev = trace.objective[n - 2];
    let cur = trace.objective[n - 1];
    if cur > prev + 1e-9 * prev.abs().max(1.0) {
        flags.push(format!("objective_increased_at_step_{}", trace.steps[n - 1]));
    }
}

/// Full-batch training until the two-threshold criterion fires or the step
/// budget runs out. A non-finite objective halts immediately with a diverged
/// status; the partial trace is preserved for diagnosis.
pub fn train(model: &mut SpredModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.optimizer {
        OptimizerKind::Lbfgs => train_lbfgs(model, cfg, &LbfgsOptions::default()),
        _ => train_first_order(model, cfg),
    }
}

pub fn train_first_order(model: &mut SpredModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let mut opt = FirstOrder::new(cfg.optimizer, cfg.lr, cfg.momentum);
    let mut trace = Trace::default();
    let mut eval_seconds = Vec::new();
    let mut tracker = MergeTracker::new();
    let mut flags = Vec::new();
    let mut status = RunStatus::BudgetExhausted;
    let mut merge_step = None;
    let mut steps_run = 0;

    for step in 0..=cfg.max_steps {
        let mut tape = Tape::new();
        let loss = model.spred_objective(&mut tape)?;
        let f = tape.value(loss).scalar_value().expect("scalar loss");
        if !f.is_finite() {
            status = RunStatus::Diverged;
            flags.push(format!("non_finite_objective_at_step_{step}"));
            break;
        }

        let last = step == cfg.max_steps;
        if step % cfg.eval_every == 0 || last {
            let (loose, tight) = measured_sparsity(model, &cfg.policy);
            trace.push(step, f, loose, tight, model.balance_gap());
            eval_seconds.push(started.elapsed().as_secs_f64());
            note_increase(&trace, &mut flags);
            tracker.observe(step, loose, tight);
            if model.has_sparse() && tracker.converged(cfg.window) {
                status = RunStatus::Converged;
                merge_step = tracker.streak_start;
                break;
            }
        }
        if last {
            break;
        }

        let grads = tape.backward(loss)?;
        opt.step_model(model, &grads)?;
        steps_run = step + 1;
    }

    if status == RunStatus::BudgetExhausted && merge_step.is_none() && model.has_sparse() {
        flags.push("thresholds_never_merged_consider_smaller_lr_or_larger_batch".into());
    }
    Ok(TrainOutcome {
        status,
        merge_step,
        trace,
        eval_seconds,
        steps_run,
        seconds: started.elapsed().as_secs_f64(),
        flags,
    })
}

pub fn train_lbfgs(
    model: &mut SpredModel,
    cfg: &TrainConfig,
    opts: &LbfgsOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let mut x = model.flatten_params();
    let mut state = LbfgsState::default();
    let mut trace = Trace::default();
    let mut eval_seconds = Vec::new();
    let mut tracker = MergeTracker::new();
    let mut flags = Vec::new();
    let mut status = RunStatus::BudgetExhausted;
    let mut merge_step = None;
    let mut steps_run = 0;

    for step in 0..=cfg.max_steps {
        model.set_flat_params(&x);
        let f = model.spred_objective_value()?;
        if !f.is_finite() {
            status = RunStatus::Diverged;
            flags.push(format!("non_finite_objective_at_step_{step}"));
            break;
        }

        let last = step == cfg.max_steps;
        if step % cfg.eval_every == 0 || last {
            let (loose, tight) = measured_sparsity(model, &cfg.policy);
            trace.push(step, f, loose, tight, model.balance_gap());
            eval_seconds.push(started.elapsed().as_secs_f64());
            note_increase(&trace, &mut flags);
            tracker.observe(step, loose, tight);
            if model.has_sparse() && tracker.converged(cfg.window) {
                status = RunStatus::Converged;
                merge_step = tracker.streak_start;
                break;
            }
        }
        if last {
            break;
        }

        let mut eval_err = None;
        let report = {
            let mut eval = |flat: &[f64]| -> (f64, Vec<f64>) {
                model.set_flat_params(flat);
                let mut tape = Tape::new();
                match model
                    .spred_objective(&mut tape)
                    .and_then(|loss| tape.backward(loss).map(|g| (loss, g)))
                {
                    Ok((loss, grads)) => {
                        let f = tape.value(loss).scalar_value().expect("scalar loss");
                        (f, model.flatten_grads(&grads))
                    }
                    Err(e) => {
                        eval_err = Some(e);
                        (f64::INFINITY, vec![0.0; flat.len()])
                    }
                }
            };
            lbfgs_step(&mut x, &mut eval, &mut state, opts)
        };
        if let Some(e) = eval_err {
            return Err(e);
        }
        steps_run = step + 1;
        if report.fell_back && !flags.iter().any(|f| f.starts_with("lbfgs_fallback")) {
            flags.push(format!("lbfgs_fallback_at_step_{step}"));
        }
        if report.grad_norm == 0.0 {
            model.set_flat_params(&x);
            flags.push(format!("gradient_vanished_at_step_{step}"));
            break;
        }
    }
    model.set_flat_params(&x);

    if status == RunStatus::BudgetExhausted && merge_step.is_none() && model.has_sparse() {
        flags.push("thresholds_never_merged_consider_smaller_lr_or_larger_batch".into());
    }
    Ok(TrainOutcome {
        status,
        merge_step,
        trace,
        eval_seconds,
        steps_run,
        seconds: started.elapsed().as_secs_f64(),
        flags,
    })
}

/// Fills the generic fields of a report from a finished run. Task drivers
/// add their own metrics and timings on top.
pub fn base_report(
    task: &str,
    model: &SpredModel,
    cfg: &TrainConfig,
    outcome: TrainOutcome,
) -> Result<SolveReport> {
    let mut recovered = BTreeMap::new();
    for (name, p) in model.sparse_params() {
        let s = threshold_sparsify(&p.effective_value(), &cfg.policy);
        recovered.insert(name.clone(), s.v_tight);
    }
    let (sparsity_loose, sparsity_tight) = model.aggregate_sparsity(&cfg.policy);
    let diverged = outcome.status == RunStatus::Diverged;
    let spred_objective = if diverged { f64::NAN } else { model.spred_objective_value()? };
    let l1_objective =
        if diverged { f64::NAN } else { model.l1_objective(Some(&recovered))? };

    let mut timings = BTreeMap::new();
    timings.insert("train".into(), outcome.seconds);
    let report = SolveReport {
        task: task.into(),
        status: outcome.status,
        seed: cfg.seed,
        config: cfg.clone(),
        steps_run: outcome.steps_run,
        merge_step: outcome.merge_step,
        trace: outcome.trace,
        recovered,
        factors: model.sparse_params().map(|(n, p)| (n.clone(), p.clone())).collect(),
        sparsity_loose,
        sparsity_tight,
        balance_gap: model.balance_gap(),
        spred_objective,
        l1_objective,
        metrics: BTreeMap::new(),
        flags: outcome.flags,
        timings,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spred::make_spred_param;
    use crate::tensor::Tensor;
    use crate::test_util::assert_close;

    /// min over v of (v - 1)^2 + small factored penalty, one scalar-ish param.
    fn toy_model(seed: u64, kappa: f64) -> SpredModel {
        let mut model = SpredModel::new(|tape, b| {
            let v = b.value("w");
            let target = tape.constant(Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0]));
            let d = tape.sub(v, target)?;
            Ok(tape.sum_sq(d))
        });
        model.add_sparse(
            "w",
            make_spred_param(
                &[4],
                kappa,
                crate::spred::SpredMode::Elementwise,
                crate::spred::FactorInit::SqrtStandard,
                seed,
            )
            .unwrap(),
        );
        model
    }

    #[test]
    fn sgd_run_converges_and_reports_merge_step() {
        let mut model = toy_model(7, 0.05);
        let cfg = TrainConfig {
            lr: 0.05,
            kappa: 0.05,
            max_steps: 6000,
            eval_every: 20,
            window: 6,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &cfg).unwrap();
        assert_eq!(out.status, RunStatus::Converged);
        let merge = out.merge_step.expect("merge step");
        assert!(merge <= out.trace.steps[out.trace.len() - 1]);
        // Coordinates 2..4 should be dead, coordinate 0 alive.
        let v = model.sparse("w").effective_value();
        assert!(v.data()[0] > 0.5);
        let s = threshold_sparsify(&v, &cfg.policy);
        assert_close(s.sparsity_tight, 0.75, 1e-12, "tight sparsity");
        assert_eq!(out.eval_seconds.len(), out.trace.len());
    }

    #[test]
    fn diverging_run_is_reported_not_propagated() {
        let mut model = toy_model(3, 0.1);
        let cfg = TrainConfig { lr: 1e4, max_steps: 200, eval_every: 10, ..TrainConfig::default() };
        let out = train(&mut model, &cfg).unwrap();
        assert_eq!(out.status, RunStatus::Diverged);
        assert!(out.flags.iter().any(|f| f.starts_with("non_finite_objective")));
        let report = base_report("toy", &model, &cfg, out).unwrap();
        assert_eq!(report.status, RunStatus::Diverged);
    }

    #[test]
    fn lbfgs_run_matches_first_order_solution() {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Lbfgs,
            kappa: 0.05,
            max_steps: 400,
            eval_every: 5,
            window: 10,
            ..TrainConfig::default()
        };
        let mut model = toy_model(7, 0.05);
        let out = train(&mut model, &cfg).unwrap();
        assert!(matches!(out.status, RunStatus::Converged | RunStatus::BudgetExhausted));
        let f_lbfgs = model.spred_objective_value().unwrap();

        let mut model_fo = toy_model(7, 0.05);
        let cfg_fo = TrainConfig {
            lr: 0.05,
            kappa: 0.05,
            max_steps: 8000,
            eval_every: 20,
            window: 8,
            ..TrainConfig::default()
        };
        train(&mut model_fo, &cfg_fo).unwrap();
        let f_fo = model_fo.spred_objective_value().unwrap();
        assert_close(f_lbfgs, f_fo, 1e-3, "objective parity");
    }

    #[test]
    fn trace_objective_is_monotone_for_tuned_sgd() {
        let mut model = toy_model(11, 0.02);
        let cfg = TrainConfig {
            lr: 0.02,
            kappa: 0.02,
            max_steps: 3000,
            eval_every: 25,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &cfg).unwrap();
        for w in out.trace.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
        assert!(!out.flags.iter().any(|f| f.starts_with("objective_increased")));
    }
}
