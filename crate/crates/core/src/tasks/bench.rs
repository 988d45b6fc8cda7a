//! Wall-clock scaling comparison between the factored solver and the
//! classical lasso solvers, reported as sparsity-milestone times.
//!
//! Every solver is measured by the same convention: after each unit of
//! progress (an evaluation, a sweep, an iteration) the harness records pure
//! solver seconds, the tight-threshold zero fraction of the current iterate,
//! and the reference L1 objective. A milestone row gives the first record
//! reaching 75%, 90% or 100% of the run's final zero fraction; the 100% row
//! additionally requires the objective to be within 0.1% of the run's final
//! value, so timings compare matched solution quality. Metric computation is
//! excluded from the clock.

use std::time::Instant;

use crate::oracles::{
    coordinate_descent_lasso_observed, ista_fista_lasso_observed, LassoProblem, ProxOptions,
    ProxVariant,
};
use crate::spred::SparsifyPolicy;
use crate::tasks::config::TrainConfig;
use crate::tasks::data::gen_random_lasso;
use crate::tasks::lasso::lasso_model;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchSolver {
    Spred,
    Cd,
    Ista,
}

impl std::str::FromStr for BenchSolver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spred" => Ok(BenchSolver::Spred),
            "cd" => Ok(BenchSolver::Cd),
            "ista" => Ok(BenchSolver::Ista),
            other => Err(Error::InvalidArgument(format!("unknown bench solver '{other}'"))),
        }
    }
}

impl std::fmt::Display for BenchSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchSolver::Spred => "spred",
            BenchSolver::Cd => "cd",
            BenchSolver::Ista => "ista",
        })
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub solver: String,
    pub d: usize,
    /// 75, 90 or 100 (percent of the final zero fraction).
    pub milestone: u32,
    pub seconds: f64,
    pub objective: f64,
    /// Progress units consumed when the milestone was reached.
    pub steps: usize,
    /// Budget ran out before this milestone.
    pub censored: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("solver,d,milestone,seconds,objective,steps,censored\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.solver, r.d, r.milestone, r.seconds, r.objective, r.steps, r.censored
            ));
        }
        out
    }

    pub fn find(&self, solver: &str, d: usize, milestone: u32) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.solver == solver && r.d == d && r.milestone == milestone)
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub n: usize,
    pub support: usize,
    pub noise: f64,
    /// kappa as a fraction of max |X'y| for each instance.
    pub kappa_frac: f64,
    /// Per-solver, per-dimension wall budget in pure solver seconds.
    pub budget_secs: f64,
    pub seed: u64,
    /// Learning rates tried at the smallest dimension; the winner is reused
    /// everywhere so the protocol is fixed across d.
    pub lr_grid: Vec<f64>,
    pub max_steps: usize,
    pub eval_every: usize,
    pub window: usize,
    pub policy: SparsifyPolicy,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n: 200,
            support: 10,
            noise: 0.02,
            kappa_frac: 0.2,
            budget_secs: 120.0,
            seed: 0,
            lr_grid: vec![0.3, 0.15, 0.075],
            max_steps: 4000,
            eval_every: 10,
            window: 8,
            policy: SparsifyPolicy::default(),
        }
    }
}

pub struct BenchOutcome {
    pub table: BenchTable,
    pub flags: Vec<String>,
    pub chosen_lr: f64,
}

/// One progress record: pure solver seconds, tight zero fraction, reference
/// objective.
#[derive(Clone, Copy, Debug)]
struct Record {
    seconds: f64,
    zero_frac: f64,
    objective: f64,
    steps: usize,
}

/// Stopwatch that can be paused while metrics are computed.
struct Stopwatch {
    total: f64,
    resumed: Instant,
    running: bool,
}

impl Stopwatch {
    fn started() -> Self {
        Stopwatch { total: 0.0, resumed: Instant::now(), running: true }
    }

    fn pause(&mut self) -> f64 {
        if self.running {
            self.total += self.resumed.elapsed().as_secs_f64();
            self.running = false;
        }
        self.total
    }

    fn resume(&mut self) {
        if !self.running {
            self.resumed = Instant::now();
            self.running = true;
        }
    }
}

fn tight_zero_frac(w: &[f64], policy: &SparsifyPolicy) -> f64 {
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (_, cut) = policy.cutoffs(max);
    let zeros = w.iter().filter(|&&x| x == 0.0 || x.abs() < cut).count();
    zeros as f64 / w.len().max(1) as f64
}

fn milestone_rows(
    solver: BenchSolver,
    d: usize,
    records: &[Record],
    budget: f64,
    finished: bool,
) -> Vec<BenchRow> {
    let last = records.last().copied().unwrap_or(Record {
        seconds: budget,
        zero_frac: 0.0,
        objective: f64::INFINITY,
        steps: 0,
    });
    let quality = last.objective.abs().max(1e-300) * 1e-3;
    [75u32, 90, 100]
        .iter()
        .map(|&m| {
            let target = last.zero_frac * m as f64 / 100.0;
            let hit = records.iter().find(|r| {
                r.zero_frac >= target - 1e-12
                    && (m < 100 || r.objective <= last.objective + quality)
            });
            match hit {
                Some(r) if finished || r.steps < last.steps => BenchRow {
                    solver: solver.to_string(),
                    d,
                    milestone: m,
                    seconds: r.seconds,
                    objective: r.objective,
                    steps: r.steps,
                    censored: false,
                },
                _ => BenchRow {
                    solver: solver.to_string(),
                    d,
                    milestone: m,
                    seconds: budget,
                    objective: last.objective,
                    steps: last.steps,
                    censored: true,
                },
            }
        })
        .collect()
}

/// Factored-solver run instrumented for milestones. Carries its own loop
/// instead of the shared trainer because the reference objective must be
/// sampled per evaluation with the stopwatch paused.
fn run_spred_instrumented(
    p: &LassoProblem,
    cfg: &TrainConfig,
    budget: f64,
) -> Result<(Vec<Record>, bool)> {
    use crate::graph::Tape;
    use crate::optim::FirstOrder;
    use crate::spred::converged_by_two_thresholds;

    let mut model = lasso_model(p, cfg)?;
    let mut opt = FirstOrder::new(cfg.optimizer, cfg.lr, cfg.momentum);
    let mut records = Vec::new();
    let mut history = Vec::new();
    let mut watch = Stopwatch::started();
    let mut finished = false;

    for step in 0..=cfg.max_steps {
        let mut tape = Tape::new();
        let loss = model.spred_objective(&mut tape)?;
        let f = tape.value(loss).scalar_value().expect("scalar loss");
        if !f.is_finite() {
            break;
        }

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let elapsed = watch.pause();
            let v = model.sparse("w").effective_value();
            let zero_frac = tight_zero_frac(v.data(), &cfg.policy);
            let (loose, tight) = model.aggregate_sparsity(&cfg.policy);
            records.push(Record {
                seconds: elapsed,
                zero_frac,
                objective: p.objective(&v),
                steps: step,
            });
            history.push((loose, tight));
            if converged_by_two_thresholds(&history, cfg.window) {
                finished = true;
                break;
            }
            if elapsed > budget {
                break;
            }
            watch.resume();
        }
        if step == cfg.max_steps {
            break;
        }

        let grads = tape.backward(loss)?;
        opt.step_model(&mut model, &grads)?;
    }
    if records.last().map(|r| r.steps == cfg.max_steps).unwrap_or(false) {
        finished = true;
    }
    Ok((records, finished))
}

fn run_cd_instrumented(
    p: &LassoProblem,
    policy: &SparsifyPolicy,
    budget: f64,
    tol: f64,
) -> (Vec<Record>, bool) {
    let mut records = Vec::new();
    let mut watch = Stopwatch::started();
    let sol = coordinate_descent_lasso_observed(p, tol, 100_000, &mut |sweep, w| {
        let elapsed = watch.pause();
        let wt = Tensor::from_vec(w.to_vec());
        records.push(Record {
            seconds: elapsed,
            zero_frac: tight_zero_frac(w, policy),
            objective: p.objective(&wt),
            steps: sweep,
        });
        let keep_going = elapsed <= budget;
        watch.resume();
        keep_going
    });
    (records, sol.converged)
}

fn run_ista_instrumented(
    p: &LassoProblem,
    policy: &SparsifyPolicy,
    budget: f64,
    tol: f64,
) -> (Vec<Record>, bool) {
    let mut records = Vec::new();
    let mut watch = Stopwatch::started();
    let opts = ProxOptions { variant: ProxVariant::Fista, tol, max_iters: 100_000, step: None };
    let sol = ista_fista_lasso_observed(p, &opts, &mut |iter, w| {
        let elapsed = watch.pause();
        records.push(Record {
            seconds: elapsed,
            zero_frac: tight_zero_frac(w.data(), policy),
            objective: p.objective(w),
            steps: iter,
        });
        let keep_going = elapsed <= budget;
        watch.resume();
        keep_going
    });
    (records, sol.converged)
}

/// Runs every requested solver at every dimension on a shared instance
/// family and returns the milestone table. The factored solver's learning
/// rate is tuned once at the smallest dimension.
pub fn bench_scaling(
    dims: &[usize],
    solvers: &[BenchSolver],
    bc: &BenchConfig,
) -> Result<BenchOutcome> {
    if dims.is_empty() || solvers.is_empty() {
        return Err(Error::InvalidArgument("bench needs at least one dimension and solver".into()));
    }
    let mut flags = Vec::new();

    let spred_cfg = |lr: f64, kappa: f64, seed: u64| TrainConfig {
        lr,
        kappa,
        max_steps: bc.max_steps,
        eval_every: bc.eval_every,
        window: bc.window,
        policy: bc.policy,
        seed,
        ..TrainConfig::default()
    };

    // Tune lr on the smallest instance: lowest final objective among runs
    // that finished, falling back to lowest objective overall.
    let mut chosen_lr = bc.lr_grid[0];
    if solvers.contains(&BenchSolver::Spred) && bc.lr_grid.len() > 1 {
        let d0 = *dims.iter().min().unwrap();
        let inst = gen_random_lasso(bc.n, d0, bc.support, bc.noise, bc.kappa_frac, bc.seed)?;
        let mut best: Option<(bool, f64, f64)> = None;
        for &lr in &bc.lr_grid {
            let (records, finished) =
                run_spred_instrumented(&inst.problem, &spred_cfg(lr, inst.problem.kappa, bc.seed), bc.budget_secs)?;
            let obj = records.last().map(|r| r.objective).unwrap_or(f64::INFINITY);
            let better = match &best {
                None => true,
                Some((bf, bo, _)) => (!finished, obj) < (!bf, *bo),
            };
            if better {
                best = Some((finished, obj, lr));
            }
        }
        chosen_lr = best.map(|(_, _, lr)| lr).unwrap_or(chosen_lr);
        flags.push(format!("bench_lr_selected_{chosen_lr}"));
    }

    let mut table = BenchTable::default();
    for &d in dims {
        let seed = bc.seed.wrapping_add(d as u64);
        let inst = gen_random_lasso(bc.n, d, bc.support, bc.noise, bc.kappa_frac, seed)?;
        let p = &inst.problem;
        for &solver in solvers {
            let (records, finished) = match solver {
                BenchSolver::Spred => {
                    run_spred_instrumented(p, &spred_cfg(chosen_lr, p.kappa, seed), bc.budget_secs)?
                }
                BenchSolver::Cd => run_cd_instrumented(p, &bc.policy, bc.budget_secs, 1e-9),
                BenchSolver::Ista => run_ista_instrumented(p, &bc.policy, bc.budget_secs, 1e-12),
            };
            if records.last().map(|r| r.zero_frac == 0.0).unwrap_or(true) {
                flags.push(format!("no_sparsity_{solver}_{d}"));
            }
            let rows = milestone_rows(solver, d, &records, bc.budget_secs, finished);
            if rows.iter().any(|r| r.censored) {
                flags.push(format!("censored_{solver}_{d}"));
            }
            table.rows.extend(rows);
        }
    }
    Ok(BenchOutcome { table, flags, chosen_lr })
}

/// Objective agreement across solvers at their 100% milestones, per
/// dimension: max relative spread.
pub fn quality_spread(table: &BenchTable, dims: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for &d in dims {
        let objs: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| r.d == d && r.milestone == 100 && !r.censored)
            .map(|r| r.objective)
            .collect();
        if objs.len() < 2 {
            continue;
        }
        let lo = objs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = objs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((hi - lo) / lo.abs().max(1e-300));
    }
    worst
}
