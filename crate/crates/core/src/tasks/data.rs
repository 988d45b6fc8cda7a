//! Seeded synthetic problem generators and file loaders for the task drivers.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::{closed_form_lasso_orthonormal, LassoProblem};
use crate::tensor::{standard_normal, Tensor};
use crate::{Error, Result};

/// Orthonormal columns via two passes of modified Gram-Schmidt over a square
/// Gaussian draw. Deviation from X'X = I stays near machine precision for the
/// sizes used here.
fn orthonormal_design(d: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| standard_normal(rng)).collect())
        .collect();
    for _pass in 0..2 {
        for j in 0..d {
            for i in 0..j {
                let proj = crate::tensor::dot(&cols[j], &cols[i]);
                let qi = cols[i].clone();
                for (cj, qi) in cols[j].iter_mut().zip(&qi) {
                    *cj -= proj * qi;
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-10 {
                return Err(Error::InvalidArgument(
                    "degenerate draw while orthonormalizing".into(),
                ));
            }
            for cj in cols[j].iter_mut() {
                *cj /= norm;
            }
        }
    }
    let mut data = vec![0.0; d * d];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..d {
            data[i * d + j] = col[i];
        }
    }
    Tensor::new(vec![d, d], data)
}

fn sparse_signal(d: usize, support: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(support).collect();
    chosen.sort_unstable();
    let mut w = vec![0.0; d];
    for &j in &chosen {
        // Magnitudes bounded away from zero so recovery is unambiguous.
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        w[j] = sign * (1.0 + rng.gen::<f64>());
    }
    (Tensor::from_vec(w), chosen)
}

pub struct OrthonormalLasso {
    pub problem: LassoProblem,
    pub w_star: Tensor,
    pub support: Vec<usize>,
    /// Exact minimizer of the L1 objective, from the closed form.
    pub closed_form: Tensor,
}

/// Square orthonormal design, sparse ground truth, Gaussian noise. The exact
/// L1 solution ships with the instance.
pub fn gen_orthonormal_lasso(
    d: usize,
    support: usize,
    noise_std: f64,
    kappa: f64,
    seed: u64,
) -> Result<OrthonormalLasso> {
    if support > d {
        return Err(Error::InvalidArgument(format!("support {support} exceeds dimension {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = orthonormal_design(d, &mut rng)?;
    let (w_star, support) = sparse_signal(d, support, &mut rng);
    let noise = Tensor::randn(vec![d], noise_std, &mut rng);
    let y = x.matvec(&w_star)?.add(&noise)?;
    let problem = LassoProblem::new(x, y, kappa)?;
    let closed_form = closed_form_lasso_orthonormal(&problem)?;
    Ok(OrthonormalLasso { problem, w_star, support, closed_form })
}

pub struct RandomLasso {
    pub problem: LassoProblem,
    pub w_star: Tensor,
    pub support: Vec<usize>,
}

/// Gaussian design with rows scaled to roughly unit column norm, sparse
/// ground truth, and kappa set to `kappa_frac` of the max absolute
/// correlation |X'y| (so the instance has a nontrivial active set).
pub fn gen_random_lasso(
    n: usize,
    d: usize,
    support: usize,
    noise_std: f64,
    kappa_frac: f64,
    seed: u64,
) -> Result<RandomLasso> {
    if support > d {
        return Err(Error::InvalidArgument(format!("support {support} exceeds dimension {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(vec![n, d], (n as f64).powf(-0.5), &mut rng);
    let (w_star, support) = sparse_signal(d, support, &mut rng);
    let noise = Tensor::randn(vec![n], noise_std, &mut rng);
    let y = x.matvec(&w_star)?.add(&noise)?;
    let corr = x.matvec_t(&y)?.max_abs();
    let problem = LassoProblem::new(x, y, kappa_frac * corr)?;
    Ok(RandomLasso { problem, w_star, support })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Linear,
    XorLike,
    Mixed,
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Nonlinearity::Linear),
            "xor" => Ok(Nonlinearity::XorLike),
            "mixed" => Ok(Nonlinearity::Mixed),
            other => Err(Error::InvalidArgument(format!("unknown nonlinearity '{other}'"))),
        }
    }
}

/// Binary classification where the label depends on a small planted feature
/// subset only; everything else is distractor noise.
pub struct FeatureSelectionTask {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub true_support: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub dev_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl FeatureSelectionTask {
    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        gather_rows(&self.x, &self.labels, idx)
    }

    /// Restriction of the design to the planted support columns.
    pub fn support_columns(&self) -> Tensor {
        let (n, _) = self.x.dims2().expect("matrix design");
        let k = self.true_support.len();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            for (jj, &j) in self.true_support.iter().enumerate() {
                data[i * k + jj] = self.x.at(i, j);
            }
        }
        Tensor::new(vec![n, k], data).expect("shape")
    }
}

pub fn gather_rows(x: &Tensor, labels: &[usize], idx: &[usize]) -> (Tensor, Vec<usize>) {
    let (_, d) = x.dims2().expect("matrix design");
    let mut data = Vec::with_capacity(idx.len() * d);
    let mut lab = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(x.row(i));
        lab.push(labels[i]);
    }
    (Tensor::new(vec![idx.len(), d], data).expect("shape"), lab)
}

/// Class-conditional mean shift of the linear support features. Correlation
/// with the label is mu/sqrt(mu^2+1) per feature, well above the maximum
/// spurious correlation of ~sqrt(2 ln d / n) at the scales the harness uses.
const CLASS_SHIFT: f64 = 0.75;
/// Residual noise of the sign-coupled partner in an xor pair.
const PAIR_NOISE: f64 = 0.25;
/// Fraction of labels flipped after the features are written, the same count
/// in each class. Keeps every method away from the 100% ceiling, so accuracy
/// comparisons stay informative, and makes distractor memorization cost test
/// accuracy instead of being free.
const LABEL_FLIP: f64 = 0.05;

pub fn gen_feature_selection(
    n: usize,
    d: usize,
    k_true: usize,
    nl: Nonlinearity,
    seed: u64,
) -> Result<FeatureSelectionTask> {
    if k_true == 0 || k_true > d {
        return Err(Error::InvalidArgument(format!(
            "planted support {k_true} out of range for {d} features"
        )));
    }
    if nl == Nonlinearity::XorLike && k_true % 2 == 1 {
        return Err(Error::InvalidArgument(
            "xor-style labels pair features, so the support size must be even".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(vec![n, d], 1.0, &mut rng);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(&mut rng);
    let mut true_support: Vec<usize> = idx.into_iter().take(k_true).collect();
    true_support.sort_unstable();

    // Exactly balanced labels, assigned before the support columns are
    // written so the signal strength is controlled, not incidental.
    let mut labels = vec![0usize; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % 2;
    }

    // Linear support features get a per-class mean shift with alternating
    // sign. Xor pairs couple the second feature's sign to the first through
    // the label, so each is marginally silent but the product reads it out;
    // no linear model on raw features can express that.
    let k = true_support.len();
    let (linear, pairs): (&[usize], &[usize]) = match nl {
        Nonlinearity::Linear => (&true_support, &[]),
        Nonlinearity::XorLike => (&[], &true_support),
        // One xor pair on top of linear features, when there is room.
        Nonlinearity::Mixed => true_support.split_at(if k >= 4 { k - 2 } else { k }),
    };
    for (t, &j) in linear.iter().enumerate() {
        let s = if t % 2 == 0 { CLASS_SHIFT } else { -CLASS_SHIFT };
        for i in 0..n {
            let y = 2.0 * labels[i] as f64 - 1.0;
            x.data_mut()[i * d + j] += s * y;
        }
    }
    for pair in pairs.chunks(2) {
        let (a, b) = (pair[0], pair[1]);
        for i in 0..n {
            let y = 2.0 * labels[i] as f64 - 1.0;
            let base = x.at(i, a);
            x.data_mut()[i * d + b] = y * base + PAIR_NOISE * standard_normal(&mut rng);
        }
    }

    // Flip the same number of labels in each class, chosen independently of
    // everything the features encode.
    let flips_per_class = ((LABEL_FLIP * n as f64) as usize) / 2;
    for class in 0..2 {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for &i in members.iter().take(flips_per_class) {
            labels[i] = 1 - class;
        }
    }

    let mut split: Vec<usize> = (0..n).collect();
    split.shuffle(&mut rng);
    let n_train = (n * 6) / 10;
    let n_dev = (n * 15) / 100;
    let train_idx = split[..n_train].to_vec();
    let dev_idx = split[n_train..n_train + n_dev].to_vec();
    let test_idx = split[n_train + n_dev..].to_vec();

    Ok(FeatureSelectionTask { x, labels, true_support, train_idx, dev_idx, test_idx })
}

/// Multiclass Gaussian blobs with a train/test split, for the classifier
/// tasks.
pub struct LabeledDataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl LabeledDataset {
    pub fn train(&self) -> (Tensor, Vec<usize>) {
        gather_rows(&self.x, &self.labels, &self.train_idx)
    }

    pub fn test(&self) -> (Tensor, Vec<usize>) {
        gather_rows(&self.x, &self.labels, &self.test_idx)
    }
}

pub fn gen_blobs(
    n: usize,
    d: usize,
    classes: usize,
    center_scale: f64,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes and n >= classes, got n={n} classes={classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Tensor::randn(vec![classes, d], center_scale, &mut rng);
    let mut data = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for j in 0..d {
            data[i * d + j] = centers.at(c, j) + noise * standard_normal(&mut rng);
        }
    }
    let x = Tensor::new(vec![n, d], data)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (n * 8) / 10;
    Ok(LabeledDataset {
        x,
        labels,
        classes,
        train_idx: order[..n_train].to_vec(),
        test_idx: order[n_train..].to_vec(),
    })
}

/// Mean-centered patches from a synthetic texture (a sum of oriented
/// sinusoids plus pixel noise), flattened to columns. Shape
/// [patch*patch, num_patches], globally scaled to unit variance.
pub fn gen_texture_patches(num_patches: usize, patch: usize, seed: u64) -> Result<Tensor> {
    const IMG: usize = 64;
    if patch == 0 || patch > IMG {
        return Err(Error::InvalidArgument(format!("patch size {patch} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f64; IMG * IMG];
    for k in 1..=6usize {
        let theta = rng.gen::<f64>() * std::f64::consts::PI;
        let freq = 0.05 + 0.3 * rng.gen::<f64>();
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let amp = 1.0 / k as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        for r in 0..IMG {
            for c in 0..IMG {
                let t = std::f64::consts::TAU * freq * (c as f64 * ct + r as f64 * st);
                img[r * IMG + c] += amp * (t + phase).sin();
            }
        }
    }
    for v in img.iter_mut() {
        *v += 0.05 * standard_normal(&mut rng);
    }

    let dim = patch * patch;
    let mut data = vec![0.0; dim * num_patches];
    for p in 0..num_patches {
        let r0 = rng.gen_range(0..=IMG - patch);
        let c0 = rng.gen_range(0..=IMG - patch);
        let mut vals = Vec::with_capacity(dim);
        for r in 0..patch {
            for c in 0..patch {
                vals.push(img[(r0 + r) * IMG + (c0 + c)]);
            }
        }
        let mean = vals.iter().sum::<f64>() / dim as f64;
        for (i, v) in vals.iter().enumerate() {
            data[i * num_patches + p] = v - mean;
        }
    }
    let mut t = Tensor::new(vec![dim, num_patches], data)?;
    let std = (t.sum_sq() / t.numel() as f64).sqrt();
    if std > 0.0 {
        t = t.scale(1.0 / std);
    }
    Ok(t)
}

/// Numeric CSV into a matrix. A first line with any non-numeric cell is
/// treated as a header and skipped. All rows must have the same width.
pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    parse_matrix_csv(&text)
}

pub fn parse_matrix_csv(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match cells {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(Error::InvalidArgument(format!(
                            "csv line {} has {} cells, expected {}",
                            lineno + 1,
                            row.len(),
                            first.len()
                        )));
                    }
                }
                rows.push(row);
            }
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(e) => {
                return Err(Error::InvalidArgument(format!(
                    "csv line {}: unparsable cell ({e})",
                    lineno + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("csv contained no data rows".into()));
    }
    let (n, d) = (rows.len(), rows[0].len());
    Tensor::new(vec![n, d], rows.into_iter().flatten().collect())
}

/// CSV whose last column is an integer class label; the rest are features.
pub fn load_labeled_csv(path: impl AsRef<Path>) -> Result<(Tensor, Vec<usize>)> {
    let m = load_matrix_csv(path)?;
    let (n, d) = m.dims2()?;
    if d < 2 {
        return Err(Error::InvalidArgument("labeled csv needs at least two columns".into()));
    }
    let mut data = Vec::with_capacity(n * (d - 1));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = m.row(i);
        data.extend_from_slice(&row[..d - 1]);
        let raw = row[d - 1];
        if raw < 0.0 || raw.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "row {} label {} is not a nonnegative integer",
                i + 1,
                raw
            )));
        }
        labels.push(raw as usize);
    }
    Ok((Tensor::new(vec![n, d - 1], data)?, labels))
}

pub fn save_matrix_csv(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (n, d) = t.dims2()?;
    let mut out = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..d).map(|j| format!("{}", t.at(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

const PATCH_MAGIC: &[u8; 4] = b"SPRD";
const PATCH_VERSION: u32 = 1;

/// Binary patch matrix layout: magic "SPRD", u32 LE version (1), u64 LE rows,
/// u64 LE cols, then rows*cols f64 LE values in row-major order.
pub fn write_patches_bin(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (rows, cols) = t.dims2()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(PATCH_MAGIC)?;
    f.write_all(&PATCH_VERSION.to_le_bytes())?;
    f.write_all(&(rows as u64).to_le_bytes())?;
    f.write_all(&(cols as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_patches_bin(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 4 + 4 + 8 + 8];
    f.read_exact(&mut head)?;
    if &head[..4] != PATCH_MAGIC {
        return Err(Error::InvalidArgument("bad magic in patch file".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != PATCH_VERSION {
        return Err(Error::InvalidArgument(format!("unsupported patch file version {version}")));
    }
    let rows = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() != rows * cols * 8 {
        return Err(Error::InvalidArgument(format!(
            "patch file payload is {} bytes, expected {}",
            buf.len(),
            rows * cols * 8
        )));
    }
    let data: Vec<f64> =
        buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::assert_close;

    #[test]
    fn orthonormal_design_deviation_is_tiny() {
        let inst = gen_orthonormal_lasso(60, 6, 0.05, 0.1, 42).unwrap();
        let x = &inst.problem.x;
        let xtx = x.transpose().unwrap().matmul(x).unwrap();
        let mut dev = 0.0f64;
        for i in 0..60 {
            for j in 0..60 {
                let want = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((xtx.at(i, j) - want).abs());
            }
        }
        assert!(dev <= 1e-10, "orthonormality deviation {dev:.3e}");
        assert_eq!(inst.support.len(), 6);
        assert!(inst.closed_form.all_finite());
    }

    #[test]
    fn generators_are_seed_reproducible() {
        let a = gen_random_lasso(40, 30, 5, 0.02, 0.3, 9).unwrap();
        let b = gen_random_lasso(40, 30, 5, 0.02, 0.3, 9).unwrap();
        assert_eq!(a.problem.x.data(), b.problem.x.data());
        assert_eq!(a.problem.y.data(), b.problem.y.data());
        assert_eq!(a.problem.kappa, b.problem.kappa);
        assert_eq!(a.support, b.support);

        let p = gen_texture_patches(50, 8, 3).unwrap();
        let q = gen_texture_patches(50, 8, 3).unwrap();
        assert_eq!(p.data(), q.data());
    }

    #[test]
    fn random_lasso_kappa_tracks_correlation() {
        let inst = gen_random_lasso(50, 80, 8, 0.02, 0.25, 11).unwrap();
        let corr = inst.problem.x.matvec_t(&inst.problem.y).unwrap().max_abs();
        assert_close(inst.problem.kappa, 0.25 * corr, 1e-12, "kappa fraction");
    }

    #[test]
    fn feature_selection_signal_lives_on_the_support_only() {
        for nl in [Nonlinearity::Linear, Nonlinearity::XorLike, Nonlinearity::Mixed] {
            let task = gen_feature_selection(400, 40, 6, nl, 5).unwrap();
            let (n, d) = task.x.dims2().unwrap();
            let signed: Vec<f64> =
                task.labels.iter().map(|&y| 2.0 * y as f64 - 1.0).collect();
            // Mean of y-signed values per column: large on mean-shifted
            // support features, null noise elsewhere.
            let shift = |j: usize| -> f64 {
                (0..n).map(|i| signed[i] * task.x.at(i, j)).sum::<f64>() / n as f64
            };
            // Mean of y-signed pair products: large on coupled pairs.
            let coupling = |a: usize, b: usize| -> f64 {
                (0..n).map(|i| signed[i] * task.x.at(i, a) * task.x.at(i, b)).sum::<f64>()
                    / n as f64
            };
            let k = task.true_support.len();
            let (linear, pairs): (&[usize], &[usize]) = match nl {
                Nonlinearity::Linear => (&task.true_support, &[]),
                Nonlinearity::XorLike => (&[], &task.true_support),
                Nonlinearity::Mixed => task.true_support.split_at(k - 2),
            };
            for &j in linear {
                assert!(shift(j).abs() > 0.4, "weak planted shift on column {j}");
            }
            for pair in pairs.chunks(2) {
                assert!(coupling(pair[0], pair[1]) > 0.5, "weak pair {pair:?}");
            }
            for j in 0..d {
                if !task.true_support.contains(&j) {
                    assert!(shift(j).abs() < 0.3, "distractor column {j} carries signal");
                }
            }
        }
    }

    #[test]
    fn feature_selection_classes_are_balanced_and_splits_partition() {
        let task = gen_feature_selection(200, 100, 10, Nonlinearity::Mixed, 7).unwrap();
        let pos: usize = task.labels.iter().sum();
        let frac = pos as f64 / task.labels.len() as f64;
        assert!((frac - 0.5).abs() <= 0.05, "class balance off: {frac}");

        let mut all: Vec<usize> = task
            .train_idx
            .iter()
            .chain(&task.dev_idx)
            .chain(&task.test_idx)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn xor_support_must_be_even() {
        assert!(gen_feature_selection(50, 20, 5, Nonlinearity::XorLike, 0).is_err());
        assert!(gen_feature_selection(50, 20, 4, Nonlinearity::XorLike, 0).is_ok());
    }

    #[test]
    fn blobs_are_balanced_and_split_cleanly() {
        let ds = gen_blobs(100, 10, 4, 2.0, 0.5, 13).unwrap();
        for c in 0..4 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 25);
        }
        let mut all: Vec<usize> =
            ds.train_idx.iter().chain(&ds.test_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn patches_are_mean_centered() {
        let t = gen_texture_patches(30, 8, 21).unwrap();
        assert_eq!(t.shape(), &[64, 30]);
        for p in 0..30 {
            let mean: f64 = (0..64).map(|i| t.at(i, p)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-12, "patch {p} mean {mean:.3e}");
        }
    }

    #[test]
    fn patch_binary_round_trip_is_bitwise() {
        let t = gen_texture_patches(17, 8, 5).unwrap();
        let dir = std::env::temp_dir().join("spred_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("patches.bin");
        write_patches_bin(&path, &t).unwrap();
        let back = load_patches_bin(&path).unwrap();
        assert_eq!(t.shape(), back.shape());
        assert_eq!(t.data(), back.data());
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let t = Tensor::new(vec![3, 2], vec![1.0 / 3.0, -2.5e-7, 0.1 + 0.2, 4.0, 1e300, -0.0])
            .unwrap();
        let dir = std::env::temp_dir().join("spred_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        save_matrix_csv(&path, &t).unwrap();
        let back = load_matrix_csv(&path).unwrap();
        assert_eq!(t.shape(), back.shape());
        assert_eq!(t.data(), back.data());
    }

    #[test]
    fn labeled_csv_parses_features_and_labels() {
        let dir = std::env::temp_dir().join("spred_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("labeled.csv");
        std::fs::write(&path, "f0,f1,label\n0.5,-1.5,0\n2.0,3.0,2\n").unwrap();
        let (x, labels) = load_labeled_csv(&path).unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(labels, vec![0, 2]);

        std::fs::write(&path, "0.5,-1.5,0.7\n").unwrap();
        assert!(load_labeled_csv(&path).is_err());
    }
}
