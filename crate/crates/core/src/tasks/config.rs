//! Run configuration and the report schema shared by every task driver.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::optim::OptimizerKind;
use crate::spred::{FactorInit, SparsifyPolicy, SpredParam};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub kappa: f64,
    pub max_steps: usize,
    /// Trace / convergence-check cadence, in steps.
    pub eval_every: usize,
    /// Two-threshold stability window, in evaluations.
    pub window: usize,
    pub policy: SparsifyPolicy,
    pub init: FactorInit,
    /// Ridge coefficient applied to dense (non-factored) parameters.
    pub dense_decay: f64,
    pub seed: u64,
    /// 0 means full batch. Only the sparse-coding driver batches.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.0,
            kappa: 0.1,
            max_steps: 20_000,
            eval_every: 25,
            window: 8,
            policy: SparsifyPolicy::default(),
            init: FactorInit::SqrtStandard,
            dense_decay: 1e-5,
            seed: 0,
            batch_size: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kappa must be nonnegative, got {}",
                self.kappa
            )));
        }
        if self.max_steps == 0 || self.eval_every == 0 || self.window == 0 {
            return Err(Error::InvalidArgument(
                "max_steps, eval_every and window must be positive".into(),
            ));
        }
        self.policy.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// The two-threshold criterion fired before the budget ran out.
    Converged,
    BudgetExhausted,
    Diverged,
}

/// Per-evaluation history of a training run. All columns share one length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<usize>,
    pub objective: Vec<f64>,
    pub sparsity_loose: Vec<f64>,
    pub sparsity_tight: Vec<f64>,
    pub balance_gap: Vec<f64>,
}

impl Trace {
    pub fn push(&mut self, step: usize, objective: f64, loose: f64, tight: f64, gap: f64) {
        self.steps.push(step);
        self.objective.push(objective);
        self.sparsity_loose.push(loose);
        self.sparsity_tight.push(tight);
        self.balance_gap.push(gap);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn lengths_consistent(&self) -> bool {
        let n = self.steps.len();
        self.objective.len() == n
            && self.sparsity_loose.len() == n
            && self.sparsity_tight.len() == n
            && self.balance_gap.len() == n
    }

    /// Plot-ready CSV. Numbers use shortest round-trip formatting, so every
    /// value parses back to the identical 64-bit float.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,objective,sparsity_loose,sparsity_tight,balance_gap\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.steps[i],
                self.objective[i],
                self.sparsity_loose[i],
                self.sparsity_tight[i],
                self.balance_gap[i]
            ));
        }
        out
    }
}

/// Everything a task run reports: the recovered parameters, the training
/// history, sparsity and balance diagnostics, task metrics, and timings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub task: String,
    pub status: RunStatus,
    pub seed: u64,
    pub config: TrainConfig,
    pub steps_run: usize,
    /// Evaluation step at which the loose and tight sparsities merged, when
    /// they did.
    pub merge_step: Option<usize>,
    pub trace: Trace,
    /// Effective sparse parameters after tight-threshold zeroing.
    pub recovered: BTreeMap<String, Tensor>,
    /// Final factor state, serialized for audit or resumption.
    pub factors: BTreeMap<String, SpredParam>,
    pub sparsity_loose: f64,
    pub sparsity_tight: f64,
    pub balance_gap: f64,
    pub spred_objective: f64,
    /// Reference L1 objective at the recovered (tight-sparsified) values.
    pub l1_objective: f64,
    pub metrics: BTreeMap<String, f64>,
    pub flags: Vec<String>,
    /// Seconds per phase. Excluded from reproducibility comparisons.
    pub timings: BTreeMap<String, f64>,
}

impl SolveReport {
    pub fn validate(&self) -> Result<()> {
        if !self.trace.lengths_consistent() {
            return Err(Error::InvalidArgument("trace columns disagree in length".into()));
        }
        let finite = self.metrics.values().all(|v| v.is_finite())
            && self.sparsity_loose.is_finite()
            && self.sparsity_tight.is_finite()
            && self.balance_gap.is_finite();
        if self.status != RunStatus::Diverged && !finite {
            return Err(Error::InvalidArgument("non-finite metric in report".into()));
        }
        Ok(())
    }

    /// Human-readable one-pager.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("task: {}\n", self.task));
        s.push_str(&format!("status: {:?}\n", self.status));
        s.push_str(&format!("seed: {}\n", self.seed));
        s.push_str(&format!(
            "optimizer: {} lr={} kappa={}\n",
            self.config.optimizer, self.config.lr, self.config.kappa
        ));
        s.push_str(&format!("steps run: {}\n", self.steps_run));
        match self.merge_step {
            Some(m) => s.push_str(&format!("thresholds merged at step {m}\n")),
            None => s.push_str("thresholds never merged\n"),
        }
        s.push_str(&format!(
            "final sparsity: loose {:.6} tight {:.6}\n",
            self.sparsity_loose, self.sparsity_tight
        ));
        s.push_str(&format!("balance gap: {:.3e}\n", self.balance_gap));
        s.push_str(&format!(
            "objectives: factored {:.9e}, reference L1 {:.9e}\n",
            self.spred_objective, self.l1_objective
        ));
        for (k, v) in &self.metrics {
            s.push_str(&format!("metric {k}: {v}\n"));
        }
        for f in &self.flags {
            s.push_str(&format!("flag: {f}\n"));
        }
        for (k, v) in &self.timings {
            s.push_str(&format!("seconds {k}: {v:.3}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_round_trips_every_float() {
        let mut t = Trace::default();
        t.push(0, 1.0 / 3.0, 0.1 + 0.2, 1e-300, f64::MIN_POSITIVE);
        t.push(25, 2.0f64.sqrt(), 0.9999999999999999, 0.3, 17.0);
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,objective,sparsity_loose,sparsity_tight,balance_gap"
        );
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 5);
            assert_eq!(cells[0].parse::<usize>().unwrap(), t.steps[i]);
            assert_eq!(cells[1].parse::<f64>().unwrap(), t.objective[i]);
            assert_eq!(cells[2].parse::<f64>().unwrap(), t.sparsity_loose[i]);
            assert_eq!(cells[3].parse::<f64>().unwrap(), t.sparsity_tight[i]);
            assert_eq!(cells[4].parse::<f64>().unwrap(), t.balance_gap[i]);
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr = 0.1;
        cfg.kappa = -1.0;
        assert!(cfg.validate().is_err());
        cfg.kappa = 0.5;
        cfg.eval_every = 0;
        assert!(cfg.validate().is_err());
    }
}
