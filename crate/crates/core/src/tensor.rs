//! Dense row-major f64 tensors and the few linear-algebra kernels the rest
//! of the crate needs. Reductions accumulate in a fixed order (per-chunk
//! partials merged in chunk order), so results do not depend on the worker
//! count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::threads::map_chunks;
use crate::{Error, Result};

/// Target amount of work per parallel chunk, in multiply-adds.
const CHUNK_FLOPS: usize = 16 * 1024;

fn row_chunk(rows: usize, row_cost: usize) -> usize {
    (CHUNK_FLOPS / row_cost.max(1)).clamp(1, rows.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly. Rank 0
    /// with one element is a scalar.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Gaussian entries with the given standard deviation, drawn in index
    /// order via Box-Muller so a seeded rng reproduces the tensor exactly.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * standard_normal(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Option<f64> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Rank-2 element access.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Rank-2 dimensions.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "dims2",
                detail: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Column `j` of a rank-2 tensor, copied out.
    pub fn col(&self, j: usize) -> Vec<f64> {
        let (rows, cols) = (self.shape[0], self.shape[1]);
        (0..rows).map(|i| self.data[i * cols + j]).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn sum(&self) -> f64 {
        ordered_sum(&self.data)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        ordered_sum_by(&self.data, |v| v * v)
    }

    pub fn l1_norm(&self) -> f64 {
        ordered_sum_by(&self.data, |v| v.abs())
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rank-2 transpose, materialized.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// `[m,k] x [k,n] -> [m,n]`. Each output element is accumulated over k
    /// in index order by exactly one worker.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape, rhs.shape),
            });
        }
        let chunk = row_chunk(m, k * n);
        let blocks = map_chunks(m, chunk, |_, r| {
            let mut block = vec![0.0; (r.end - r.start) * n];
            for i in r.clone() {
                let arow = &self.data[i * k..(i + 1) * k];
                let orow = &mut block[(i - r.start) * n..(i - r.start + 1) * n];
                for (kk, &aik) in arow.iter().enumerate() {
                    let brow = &rhs.data[kk * n..(kk + 1) * n];
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o += aik * b;
                    }
                }
            }
            block
        });
        let mut data = Vec::with_capacity(m * n);
        for b in blocks {
            data.extend_from_slice(&b);
        }
        Ok(Tensor { shape: vec![m, n], data })
    }

    /// `[m,k] x [k] -> [m]`.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        if x.shape != [k] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                detail: format!("{:?} x {:?}", self.shape, x.shape),
            });
        }
        let chunk = row_chunk(m, k);
        let blocks = map_chunks(m, chunk, |_, r| {
            r.map(|i| dot(&self.data[i * k..(i + 1) * k], &x.data))
                .collect::<Vec<f64>>()
        });
        let mut data = Vec::with_capacity(m);
        for b in blocks {
            data.extend_from_slice(&b);
        }
        Ok(Tensor { shape: vec![m], data })
    }

    /// Transpose-apply without materializing the transpose:
    /// `self [m,k], v [m] -> [k]`. Row blocks produce partial sums that are
    /// merged in block order, which fixes the reduction order.
    pub fn matvec_t(&self, v: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        if v.shape != [m] {
            return Err(Error::ShapeMismatch {
                op: "matvec_t",
                detail: format!("{:?}' x {:?}", self.shape, v.shape),
            });
        }
        let chunk = row_chunk(m, k);
        let partials = map_chunks(m, chunk, |_, r| {
            let mut p = vec![0.0; k];
            for i in r {
                let vi = v.data[i];
                let row = &self.data[i * k..(i + 1) * k];
                for (pj, &aij) in p.iter_mut().zip(row) {
                    *pj += vi * aij;
                }
            }
            p
        });
        let mut data = vec![0.0; k];
        for p in partials {
            for (d, pv) in data.iter_mut().zip(&p) {
                *d += pv;
            }
        }
        Ok(Tensor { shape: vec![k], data })
    }
}

/// Dot product accumulated left to right.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

/// Left-to-right sum over fixed chunks; independent of worker count.
fn ordered_sum(v: &[f64]) -> f64 {
    ordered_sum_by(v, |x| x)
}

fn ordered_sum_by(v: &[f64], f: impl Fn(f64) -> f64 + Sync) -> f64 {
    if v.len() <= CHUNK_FLOPS {
        return v.iter().fold(0.0, |acc, &x| acc + f(x));
    }
    let partials = map_chunks(v.len(), CHUNK_FLOPS, |_, r| {
        v[r].iter().fold(0.0, |acc, &x| acc + f(x))
    });
    partials.into_iter().fold(0.0, |acc, p| acc + p)
}

/// Standard normal via Box-Muller on the rng's uniform stream.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::threads::set_threads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_validates_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn scalar_round_trip() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value(), Some(2.5));
        assert_eq!(Tensor::from_vec(vec![1.0]).scalar_value(), None);
    }

    #[test]
    fn elementwise_ops_check_shapes() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 5.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 7.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-2.0, -3.0]);
        assert_eq!(a.hadamard(&b).unwrap().data(), &[3.0, 10.0]);
        let c = Tensor::from_vec(vec![1.0]);
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn matmul_against_hand_result() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn matvec_and_transpose_apply_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let x = Tensor::randn(vec![4], 1.0, &mut rng);
        let v = Tensor::randn(vec![5], 1.0, &mut rng);

        let ax = a.matvec(&x).unwrap();
        for i in 0..5 {
            assert!((ax.data()[i] - dot(a.row(i), x.data())).abs() < 1e-12);
        }
        let atv = a.matvec_t(&v).unwrap();
        let expect = a.transpose().unwrap().matvec(&v).unwrap();
        assert!(atv.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn reductions_match_naive() {
        let t = Tensor::from_vec(vec![1.0, -2.0, 3.0, -4.0]);
        assert_eq!(t.sum(), -2.0);
        assert_eq!(t.mean(), -0.5);
        assert_eq!(t.sum_sq(), 30.0);
        assert_eq!(t.l1_norm(), 10.0);
        assert_eq!(t.max_abs(), 4.0);
    }

    #[test]
    fn results_identical_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = Tensor::randn(vec![300, 257], 1.0, &mut rng);
        let x = Tensor::randn(vec![257], 1.0, &mut rng);
        let v = Tensor::randn(vec![300], 1.0, &mut rng);
        let b = Tensor::randn(vec![257, 31], 1.0, &mut rng);

        set_threads(1);
        let (p1, q1, r1, s1) = (
            a.matvec(&x).unwrap(),
            a.matvec_t(&v).unwrap(),
            a.matmul(&b).unwrap(),
            a.sum_sq(),
        );
        set_threads(4);
        let (p4, q4, r4, s4) = (
            a.matvec(&x).unwrap(),
            a.matvec_t(&v).unwrap(),
            a.matmul(&b).unwrap(),
            a.sum_sq(),
        );
        set_threads(1);
        assert_eq!(p1.data(), p4.data());
        assert_eq!(q1.data(), q4.data());
        assert_eq!(r1.data(), r4.data());
        assert_eq!(s1, s4);
    }

    #[test]
    fn randn_is_seed_deterministic_with_sane_moments() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(vec![4000], 2.0, &mut r1);
        let b = Tensor::randn(vec![4000], 2.0, &mut r2);
        assert_eq!(a.data(), b.data());
        let mean = a.mean();
        let var = a.sum_sq() / 4000.0 - mean * mean;
        assert!(mean.abs() < 0.15, "mean {mean}");
        assert!((var - 4.0).abs() < 0.4, "var {var}");
    }
}
