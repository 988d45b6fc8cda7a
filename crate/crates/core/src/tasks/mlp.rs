//! Small fully-connected network shared by the classifier tasks, in both a
//! tape-building form and a plain-tensor form for evaluation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Activation, Tape, Var};
use crate::spred::{make_spred_param, FactorInit, SpredMode, SpredModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct MlpSpec {
    /// Layer widths, input first, classes last.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub biases: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "network needs at least two positive widths, got {widths:?}"
            )));
        }
        Ok(MlpSpec { widths, activation, biases: true })
    }

    pub fn without_biases(mut self) -> Self {
        self.biases = false;
        self
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(l: usize) -> String {
        format!("w{l}")
    }

    pub fn bias_name(l: usize) -> String {
        format!("b{l}")
    }

    pub fn weight_shape(&self, l: usize) -> Vec<usize> {
        vec![self.widths[l], self.widths[l + 1]]
    }

    /// Trainable parameter count, biases included.
    pub fn param_count(&self) -> usize {
        (0..self.layers())
            .map(|l| self.widths[l] * self.widths[l + 1] + if self.biases { self.widths[l + 1] } else { 0 })
            .sum()
    }
}

/// Registers dense weights (1/sqrt(fan_in) Gaussian) and zero biases.
pub fn add_dense_mlp(model: &mut SpredModel, spec: &MlpSpec, decay: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..spec.layers() {
        let shape = spec.weight_shape(l);
        let std = (shape[0] as f64).powf(-0.5);
        model.add_dense(MlpSpec::weight_name(l), Tensor::randn(shape, std, &mut rng), decay);
        if spec.biases {
            model.add_dense(MlpSpec::bias_name(l), Tensor::zeros(vec![spec.widths[l + 1]]), 0.0);
        }
    }
}

/// Registers each weight matrix as an elementwise factored parameter; biases
/// stay dense and unpenalized.
pub fn add_spred_mlp(
    model: &mut SpredModel,
    spec: &MlpSpec,
    kappa: f64,
    init: FactorInit,
    seed: u64,
) -> Result<()> {
    for l in 0..spec.layers() {
        model.add_sparse(
            MlpSpec::weight_name(l),
            make_spred_param(
                &spec.weight_shape(l),
                kappa,
                SpredMode::Elementwise,
                init,
                seed.wrapping_add(l as u64),
            )?,
        );
        if spec.biases {
            model.add_dense(MlpSpec::bias_name(l), Tensor::zeros(vec![spec.widths[l + 1]]), 0.0);
        }
    }
    Ok(())
}

/// Builds logits on the tape. `get` resolves a parameter name to its bound
/// variable, so the same forward serves dense, factored and masked weights.
pub fn forward(
    tape: &mut Tape,
    x: Var,
    spec: &MlpSpec,
    mut get: impl FnMut(&str) -> Var,
) -> Result<Var> {
    let mut h = x;
    for l in 0..spec.layers() {
        let w = get(&MlpSpec::weight_name(l));
        h = tape.matmul(h, w)?;
        if spec.biases {
            let b = get(&MlpSpec::bias_name(l));
            h = tape.add_bias(h, b)?;
        }
        if l + 1 < spec.layers() {
            h = tape.activation(h, spec.activation);
        }
    }
    Ok(h)
}

/// Plain-tensor forward for evaluation, no tape.
pub fn logits(spec: &MlpSpec, params: &BTreeMap<String, Tensor>, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for l in 0..spec.layers() {
        let w = params
            .get(&MlpSpec::weight_name(l))
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter w{l}")))?;
        h = h.matmul(w)?;
        if spec.biases {
            let b = params
                .get(&MlpSpec::bias_name(l))
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter b{l}")))?;
            let (n, c) = h.dims2()?;
            if b.numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "bias",
                    detail: format!("{} biases for {c} columns", b.numel()),
                });
            }
            for i in 0..n {
                for j in 0..c {
                    h.data_mut()[i * c + j] += b.data()[j];
                }
            }
        }
        if l + 1 < spec.layers() {
            h = h.map(|v| spec.activation.apply(v));
        }
    }
    Ok(h)
}

/// Snapshot of every parameter as plain tensors: effective values for
/// factored weights, raw values for dense ones.
pub fn snapshot(model: &SpredModel) -> BTreeMap<String, Tensor> {
    let mut out = model.effective_values();
    for (name, v) in model.dense_params() {
        out.insert(name.clone(), v.clone());
    }
    out
}

/// Fraction of rows whose argmax (lowest index wins ties) matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, c) = logits.dims2().expect("logits matrix");
    assert_eq!(n, labels.len(), "label count");
    let mut correct = 0usize;
    for i in 0..n {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        correct += usize::from(best == labels[i]);
    }
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::assert_close;

    #[test]
    fn tape_and_tensor_forwards_agree() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Relu).unwrap();
        let mut model = SpredModel::new(|_, _| unreachable!());
        add_dense_mlp(&mut model, &spec, 0.0, 9);
        let params = snapshot(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![4, 3], 1.0, &mut rng);

        let plain = logits(&spec, &params, &x).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars: BTreeMap<String, Var> =
            params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        let lv = forward(&mut tape, xv, &spec, |name| vars[name]).unwrap();
        assert_eq!(tape.value(lv).data(), plain.data());
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let logits =
            Tensor::new(vec![3, 2], vec![2.0, 1.0, 0.0, 3.0, 1.0, 1.0]).unwrap();
        // Row 2 ties; the lower index wins, predicting class 0.
        assert_close(accuracy(&logits, &[0, 1, 0]), 1.0, 1e-12, "all correct");
        assert_close(accuracy(&logits, &[1, 1, 1]), 1.0 / 3.0, 1e-12, "tie goes low");
    }

    #[test]
    fn spred_mlp_trains_to_separate_blobs() {
        use crate::tasks::config::TrainConfig;
        use crate::tasks::data::gen_blobs;
        use crate::tasks::train::train;

        let ds = gen_blobs(120, 6, 3, 2.5, 0.4, 2).unwrap();
        let (xtr, ytr) = ds.train();
        let spec = MlpSpec::new(vec![6, 16, 3], Activation::Relu).unwrap();
        let loss_spec = spec.clone();
        let mut model = SpredModel::new(move |tape, b| {
            let x = tape.constant(xtr.clone());
            let logits = forward(tape, x, &loss_spec, |n| {
                if n.starts_with('w') {
                    b.value(n)
                } else {
                    b.dense(n)
                }
            })?;
            tape.softmax_cross_entropy(logits, &ytr)
        });
        add_spred_mlp(&mut model, &spec, 1e-4, FactorInit::SqrtStandard, 2).unwrap();

        let cfg = TrainConfig {
            optimizer: crate::optim::OptimizerKind::Adam,
            lr: 0.01,
            kappa: 1e-4,
            max_steps: 800,
            eval_every: 100,
            ..TrainConfig::default()
        };
        train(&mut model, &cfg).unwrap();
        let (xte, yte) = ds.test();
        let acc = accuracy(&logits(&spec, &snapshot(&model), &xte).unwrap(), &yte);
        assert!(acc >= 0.9, "test accuracy {acc}");
    }
}
