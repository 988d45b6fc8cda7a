use std::time::Instant;

use spred_core::tasks::config::TrainConfig;
use spred_core::tasks::data::{gen_feature_selection, Nonlinearity};
use spred_core::tasks::feature_selection::{run_ensemble_feature_selection, FeatureSelectionOptions};

fn main() {
    for seed in [11u64, 13, 17, 23, 29] {
        let t = gen_feature_selection(200, 1000, 10, Nonlinearity::Linear, seed).unwrap();
        let cfg = TrainConfig { max_steps: 4000, eval_every: 25, seed, ..TrainConfig::default() };
        let opts = FeatureSelectionOptions { patience: 40, ..FeatureSelectionOptions::default() };
        let start = Instant::now();
        let report = run_ensemble_feature_selection(&t, &cfg, &opts).unwrap();
        let f1 = report.metrics["support_f1"];
        let test = report.metrics["test_accuracy"];
        let wd = report.metrics["baseline_wd_test_accuracy"];
        let l1 = report.metrics["baseline_l1_test_accuracy"];
        let strict = test > wd && test > l1;
        println!(
            "seed {seed:2}: f1 {f1:.3} test {test:.3} wd {wd:.3} l1 {l1:.3} strict {strict} \
             sel {:2} kappa {} lr {} wd_lr {} l1_lr {} in {:.0}s",
            report.metrics["selected_count"] as usize,
            report.metrics["selected_kappa"],
            report.metrics["selected_lr"],
            report.metrics["baseline_wd_lr"],
            report.metrics["baseline_l1_lr"],
            start.elapsed().as_secs_f64(),
        );
    }
}
