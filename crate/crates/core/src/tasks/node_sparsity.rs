//! Node collapse of two-layer nets under plain weight decay.
//!
//! No factorization here: a biasless two-layer net f(x) = W2 act(W1 x) is
//! trained with ordinary L2 decay, and the sweep measures how many hidden
//! units end up numerically dead as the decay strength grows. The homogeneous
//! unit itself is the redundant parametrization: scaling a unit's incoming
//! row down and outgoing column up leaves the function fixed, so decay acts
//! like a lasso on the units.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Tape;
use crate::optim::Adam;
use crate::spred::threshold_sparsify;
use crate::tasks::config::{RunStatus, SolveReport, Trace, TrainConfig};
use crate::tasks::data::{gather_rows, LabeledDataset};
use crate::tasks::mlp::{self, MlpSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct NodeSparsityOptions {
    /// Fixed training budget per grid point.
    pub steps: usize,
    pub lr: f64,
    /// A unit is dead when the mean magnitude of its outgoing weights is
    /// below this.
    pub cutoff: f64,
    /// The rate anneals after the main phase so dead units settle instead of
    /// oscillating at the step size; these set the final rung, which must
    /// sit below `cutoff`.
    pub polish_steps: usize,
    pub polish_lr: f64,
    /// Multiplier on the 1/sqrt(fan-in) init. Below 1 the net starts small
    /// enough that training grows only the units it needs, which sharpens
    /// the dead/alive split the sweep is after.
    pub init_scale: f64,
}

impl Default for NodeSparsityOptions {
    fn default() -> Self {
        NodeSparsityOptions {
            steps: 3000,
            lr: 1e-2,
            cutoff: 1e-4,
            polish_steps: 2000,
            polish_lr: 5e-5,
            init_scale: 1.0,
        }
    }
}

fn biasless_logits(w1: &Tensor, w2: &Tensor, x: &Tensor, spec: &MlpSpec) -> Result<Tensor> {
    let mut hidden = x.matmul(w1)?;
    for v in hidden.data_mut() {
        *v = spec.activation.apply(*v);
    }
    hidden.matmul(w2)
}

fn weight_fraction_below(ws: &[&Tensor], cutoff: f64) -> f64 {
    let mut dead = 0usize;
    let mut total = 0usize;
    for w in ws {
        dead += w.data().iter().filter(|v| v.abs() < cutoff).count();
        total += w.data().len();
    }
    dead as f64 / total as f64
}

fn concat_weights(w1: &Tensor, w2: &Tensor) -> Tensor {
    let mut data = w1.data().to_vec();
    data.extend_from_slice(w2.data());
    let len = data.len();
    Tensor::new(vec![len], data).expect("shape")
}

/// Train one two-layer model per decay strength and report the fraction of
/// dead hidden units and dead weights at each.
pub fn run_node_sparsity_sweep(
    spec: &MlpSpec,
    data: &LabeledDataset,
    kappa_grid: &[f64],
    cfg: &TrainConfig,
    opts: &NodeSparsityOptions,
) -> Result<Vec<(f64, SolveReport)>> {
    cfg.validate()?;
    if spec.widths.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "node sparsity analyzes the two-layer form, got {} layers",
            spec.widths.len() - 1
        )));
    }
    if kappa_grid.is_empty() {
        return Err(Error::InvalidArgument("empty decay grid".into()));
    }
    let (xt, yt) = data.train();
    let (xe, ye) = data.test();
    let (_, d) = xt.dims2()?;
    if d != spec.widths[0] || data.classes != spec.widths[2] {
        return Err(Error::InvalidArgument(format!(
            "spec {:?} does not match data with {} features and {} classes",
            spec.widths, d, data.classes
        )));
    }
    let h = spec.widths[1];
    let classes = spec.widths[2];

    let mut out = Vec::with_capacity(kappa_grid.len());
    for &kappa in kappa_grid {
        if kappa < 0.0 {
            return Err(Error::InvalidArgument(format!("negative decay {kappa}")));
        }
        let started = Instant::now();
        // Same init across grid points, so the sweep varies only the decay.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut w1 = Tensor::randn(vec![d, h], opts.init_scale * (d as f64).powf(-0.5), &mut rng);
        let mut w2 = Tensor::randn(vec![h, classes], opts.init_scale * (h as f64).powf(-0.5), &mut rng);
        let mut trace = Trace::default();
        let mut final_objective = f64::INFINITY;
        let mut final_ce = f64::INFINITY;
        let mut diverged = false;

        // Minibatch noise is what breaks the symmetry between interchangeable
        // units; trained full-batch they shrink in lockstep and nothing dies.
        let n_train = yt.len();
        let batch = if cfg.batch_size == 0 { n_train } else { cfg.batch_size.min(n_train) };
        let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

        // Adam keeps every coordinate moving at roughly the step size, so a
        // constant rate leaves drained units stranded at that height. The
        // rate anneals instead: each rung lowers the floor, and units whose
        // utility fell under the decay threshold get captured by zero on the
        // way down. The last rung sits below the deadness cutoff.
        let phases = [
            (opts.steps, opts.lr),
            (opts.steps / 3, opts.lr / 10.0),
            (opts.steps / 3, opts.lr / 100.0),
            (opts.polish_steps, opts.polish_lr),
        ];
        let total_steps: usize = phases.iter().map(|(s, _)| s).sum();
        let mut step_base = 0usize;
        'phases: for (phase_steps, phase_lr) in phases {
            let mut adam = Adam::new(phase_lr);
            for step in 0..phase_steps {
                let (xb, yb) = if batch == n_train {
                    (xt.clone(), yt.clone())
                } else {
                    let idx: Vec<usize> =
                        (0..batch).map(|_| batch_rng.gen_range(0..n_train)).collect();
                    gather_rows(&xt, &yt, &idx)
                };
                let mut tape = Tape::new();
                let v1 = tape.leaf("w1".to_string(), w1.clone());
                let v2 = tape.leaf("w2".to_string(), w2.clone());
                let x_in = tape.constant(xb);
                let pre = tape.matmul(x_in, v1)?;
                let act = tape.activation(pre, spec.activation);
                let logits = tape.matmul(act, v2)?;
                let ce = tape.softmax_cross_entropy(logits, &yb)?;
                let loss = if kappa > 0.0 {
                    let p1 = tape.sum_sq(v1);
                    let p2 = tape.sum_sq(v2);
                    let pen = tape.add(p1, p2)?;
                    let pen = tape.scale(pen, kappa);
                    tape.add(ce, pen)?
                } else {
                    ce
                };
                let objective = tape.value(loss).data()[0];
                if !objective.is_finite() {
                    diverged = true;
                    break 'phases;
                }
                final_objective = objective;
                final_ce = tape.value(ce).data()[0];
                if (step_base + step) % cfg.eval_every == 0 {
                    let sp = threshold_sparsify(&concat_weights(&w1, &w2), &cfg.policy);
                    trace.push(step_base + step, objective, sp.sparsity_loose, sp.sparsity_tight, 0.0);
                }
                let grads = tape.backward(loss)?;
                adam.begin_step();
                adam.update("w1", &mut w1, grads.get("w1").expect("gradient"))?;
                adam.update("w2", &mut w2, grads.get("w2").expect("gradient"))?;
            }
            step_base += phase_steps;
        }

        let mut out_norms = vec![0.0; h];
        let mut in_norms = vec![0.0; h];
        let mut dead_nodes = 0usize;
        for j in 0..h {
            let mut sq = 0.0;
            let mut abs_sum = 0.0;
            for c in 0..classes {
                let v = w2.at(j, c);
                sq += v * v;
                abs_sum += v.abs();
            }
            out_norms[j] = sq.sqrt();
            if abs_sum / (classes as f64) < opts.cutoff {
                dead_nodes += 1;
            }
            let mut sq_in = 0.0;
            for i in 0..d {
                sq_in += w1.at(i, j) * w1.at(i, j);
            }
            in_norms[j] = sq_in.sqrt();
        }
        let node_sparsity = dead_nodes as f64 / h as f64;
        let weight_sparsity = weight_fraction_below(&[&w1, &w2], opts.cutoff);

        let train_acc = mlp::accuracy(&biasless_logits(&w1, &w2, &xt, spec)?, &yt);
        let test_acc = mlp::accuracy(&biasless_logits(&w1, &w2, &xe, spec)?, &ye);

        let sp = threshold_sparsify(&concat_weights(&w1, &w2), &cfg.policy);
        let mut metrics = BTreeMap::new();
        metrics.insert("node_sparsity".into(), node_sparsity);
        metrics.insert("weight_sparsity".into(), weight_sparsity);
        metrics.insert("train_accuracy".into(), train_acc);
        metrics.insert("test_accuracy".into(), test_acc);
        metrics.insert("dead_nodes".into(), dead_nodes as f64);

        let mut recovered = BTreeMap::new();
        recovered.insert("w1".to_string(), w1.clone());
        recovered.insert("w2".to_string(), w2.clone());
        recovered.insert("node_out_norms".to_string(), Tensor::new(vec![h], out_norms)?);
        recovered.insert("node_in_norms".to_string(), Tensor::new(vec![h], in_norms)?);

        let mut config = cfg.clone();
        config.kappa = kappa;
        config.lr = opts.lr;
        config.max_steps = total_steps;
        let mut timings = BTreeMap::new();
        timings.insert("train".into(), started.elapsed().as_secs_f64());

        let report = SolveReport {
            task: "node_sparsity".into(),
            status: if diverged { RunStatus::Diverged } else { RunStatus::BudgetExhausted },
            seed: cfg.seed,
            config,
            steps_run: total_steps,
            merge_step: None,
            trace,
            recovered,
            factors: BTreeMap::new(),
            sparsity_loose: sp.sparsity_loose,
            sparsity_tight: sp.sparsity_tight,
            balance_gap: 0.0,
            spred_objective: final_objective,
            l1_objective: final_ce,
            metrics,
            flags: Vec::new(),
            timings,
        };
        report.validate()?;
        out.push((kappa, report));
    }
    Ok(out)
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples");
    let n = xs.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Count how often the sequence decreases from one grid point to the next.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}
