use spred_core::graph::Activation;
use spred_core::tasks::config::TrainConfig;
use spred_core::tasks::data::gen_blobs;
use spred_core::tasks::mlp::MlpSpec;
use spred_core::tasks::node_sparsity::{run_node_sparsity_sweep, NodeSparsityOptions};

fn main() {
    let hard = gen_blobs(600, 12, 10, 1.0, 0.8, 3).unwrap();
    let grid = [0.0, 1e-2, 3e-2, 1e-1, 2e-1, 3e-1];
    for act in [Activation::Relu, Activation::Swish] {
        let spec = MlpSpec {
            widths: vec![12, 64, 10],
            activation: act,
            biases: false,
        };
        let cfg = TrainConfig {
            seed: 5,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let opts = NodeSparsityOptions {
            steps: 9000,
            polish_steps: 3000,
            ..NodeSparsityOptions::default()
        };
        let t0 = std::time::Instant::now();
        let rows = run_node_sparsity_sweep(&spec, &hard, &grid, &cfg, &opts).unwrap();
        println!("== {act:?} b=64 ({:.1?}) ==", t0.elapsed());
        for (kappa, rep) in &rows {
            let node = rep.metrics["node_sparsity"];
            let weight = rep.metrics["weight_sparsity"];
            let tr = rep.metrics["train_accuracy"];
            let te = rep.metrics["test_accuracy"];
            let norms = rep.recovered["node_out_norms"].data().to_vec();
            let mut mags: Vec<f64> = norms.iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!(
                "k={:<6} node={:.3} weight={:.3} train={:.3} test={:.3} rows: min={:.2e} p25={:.2e} med={:.2e} max={:.2e}",
                kappa, node, weight, tr, te,
                mags[0], mags[mags.len() / 4], mags[mags.len() / 2], mags[mags.len() - 1]
            );
        }
    }
}
