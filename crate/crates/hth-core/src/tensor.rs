//! Dense row-major f64 tensors and the small set of whole-tensor ops the rest
//! of the crate is built from.
//!
//! Values are validated finite after every public operation; NaN/Inf surfaces
//! as [`HthError::NonFinite`] instead of propagating. Verification paths stay
//! in 64-bit throughout; the f32 benchmark kernels live in `kernels`.

use crate::error::{HthError, Result};

/// Dense tensor: `shape` dimension sizes, `data` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(HthError::shape(
                "Tensor::new",
                format!("{shape:?} = {n} elements"),
                data.len(),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(HthError::shape("Tensor::from_rows", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a 2D matrix (rank must be 2).
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(HthError::NonFinite(context))
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(HthError::shape("reshape", n, self.data.len()));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, context: &'static str) -> Result<()> {
    if a.shape != b.shape {
        return Err(HthError::shape(
            context,
            format!("{:?}", a.shape),
            format!("{:?}", b.shape),
        ));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    let t = Tensor { shape: a.shape.clone(), data };
    t.check_finite("add")?;
    Ok(t)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    let t = Tensor { shape: a.shape.clone(), data };
    t.check_finite("sub")?;
    Ok(t)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let t = Tensor { shape: a.shape.clone(), data };
    t.check_finite("mul")?;
    Ok(t)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let t = a.map(|v| v * c);
    t.check_finite("scale")?;
    Ok(t)
}

/// Standard matrix product of 2D tensors; inner dimensions must match.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(HthError::invalid("matmul expects rank-2 tensors"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(HthError::shape("matmul inner dim", k, k2));
    }
    let mut out = vec![0.0; m * n];
    // i-k-j order keeps the inner loop unit-stride over both b and out.
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    let t = Tensor { shape: vec![m, n], data: out };
    t.check_finite("matmul")?;
    Ok(t)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(HthError::invalid("transpose expects rank-2 tensor"));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor { shape: vec![n, m], data })
}

/// Row-wise softmax; each output row sums to 1.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (m.shape[0], m.shape[1]);
    if cols == 0 {
        return Err(HthError::invalid("softmax_rows: empty last dimension"));
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &m.data[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[i * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[i * cols + j] /= sum;
        }
    }
    let t = Tensor { shape: m.shape.clone(), data: out };
    t.check_finite("softmax_rows")?;
    Ok(t)
}

pub const NORM_EPS: f64 = 1e-8;

/// Row-wise RMS normalization: each row scaled to root-mean-square 1
/// (before any learnable gain).
pub fn rmsnorm_rows(v: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (v.shape[0], v.shape[1]);
    if cols == 0 {
        return Err(HthError::invalid("rmsnorm: empty last dimension"));
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &v.data[i * cols..(i + 1) * cols];
        let ms = row.iter().map(|x| x * x).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for j in 0..cols {
            out[i * cols + j] = row[j] * inv;
        }
    }
    let t = Tensor { shape: v.shape.clone(), data: out };
    t.check_finite("rmsnorm")?;
    Ok(t)
}

/// Row-wise layer normalization to mean 0 / variance 1 (no affine).
pub fn layernorm_rows(v: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (v.shape[0], v.shape[1]);
    if cols == 0 {
        return Err(HthError::invalid("layernorm: empty last dimension"));
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &v.data[i * cols..(i + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for j in 0..cols {
            out[i * cols + j] = (row[j] - mean) * inv;
        }
    }
    let t = Tensor { shape: v.shape.clone(), data: out };
    t.check_finite("layernorm")?;
    Ok(t)
}

pub fn silu_scalar(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu(v: &Tensor) -> Result<Tensor> {
    let t = v.map(silu_scalar);
    t.check_finite("silu")?;
    Ok(t)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus(v: &Tensor) -> Result<Tensor> {
    let t = v.map(softplus_scalar);
    t.check_finite("softplus")?;
    Ok(t)
}

pub fn exp(v: &Tensor) -> Result<Tensor> {
    let t = v.map(f64::exp);
    t.check_finite("exp")?;
    Ok(t)
}

pub fn sum_all(v: &Tensor) -> f64 {
    v.data.iter().sum()
}

pub fn mean_all(v: &Tensor) -> f64 {
    if v.data.is_empty() {
        0.0
    } else {
        sum_all(v) / v.data.len() as f64
    }
}

/// Largest relative element-wise difference, with an absolute floor so that
/// near-zero references do not blow the ratio up.
pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape, "max_rel_diff shape mismatch");
    let scale = a
        .data
        .iter()
        .chain(&b.data)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

/// Fill with samples from N(0, 1).
pub fn randn(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| StandardNormal.sample(rng))
        .collect::<Vec<f64>>();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Fill with uniform samples on [lo, hi).
pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let x = Tensor::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]]).unwrap();
        let y = matmul(&Tensor::eye(3), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_prefix_sum() {
        // Lower-triangular all-ones times [1,2,3] gives prefix sums [1,3,6].
        let l = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0],
        ])
        .unwrap();
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let y = matmul(&l, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn matmul_zero() {
        let z = Tensor::zeros(&[3, 3]);
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let y = matmul(&z, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_associative_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = randn(&[4, 6], &mut rng);
            let b = randn(&[6, 3], &mut rng);
            let c = randn(&[3, 5], &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(max_rel_diff(&left, &right) < 1e-10);
        }
    }

    #[test]
    fn softmax_symmetric_row() {
        let y = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = randn(&[5, 7], &mut rng);
        let y = softmax_rows(&m).unwrap();
        for i in 0..5 {
            let s: f64 = y.data()[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_hand_value() {
        // rms(3,4) = sqrt(12.5)
        let y = rmsnorm_rows(&Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap()).unwrap();
        let r = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-9);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-9);
    }

    #[test]
    fn layernorm_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = randn(&[3, 8], &mut rng);
        let y = layernorm_rows(&v).unwrap();
        for i in 0..3 {
            let m: f64 = y.data()[i * 8..(i + 1) * 8].iter().sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn silu_at_zero() {
        assert_eq!(silu_scalar(0.0), 0.0);
    }

    #[test]
    fn non_finite_is_surfaced() {
        let a = Tensor::full(&[1, 1], 1e308);
        assert!(matches!(add(&a, &a), Err(HthError::NonFinite(_))));
        assert!(Tensor::new(vec![1, 1], vec![f64::NAN]).is_err());
    }
}
