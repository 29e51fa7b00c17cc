//! Small dense numeric kernel: shaped f32 arrays, deterministic matmul,
//! row softmax and a counter-based seeded generator.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Dimensions of a dense array. Rank is between 1 and 4, every dim positive.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::Dimension(format!("rank {} outside 1..=4", dims.len())));
        }
        if dims.contains(&0) {
            return Err(Error::Dimension(format!("zero-sized dim in {dims:?}")));
        }
        Ok(Self(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

/// Row-major f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Shape,
    data: Vec<f32>,
}

impl DenseArray {
    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {dims:?} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(Self { shape, data })
    }

    pub fn filled(dims: &[usize], value: f32) -> Result<Self> {
        let mut a = Self::zeros(dims)?;
        a.data.fill(value);
        Ok(a)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Same data under a different shape with equal element count.
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn rows(&self) -> usize {
        self.dims()[0]
    }

    /// Trailing extent for 2-D use; 1 for vectors.
    pub fn cols(&self) -> usize {
        match self.dims() {
            [_] => 1,
            [_, c] => *c,
            d => d[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::from_vec(&[n, m], out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f32) -> Self {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.dims() {
            [m, n] => Ok((*m, *n)),
            d => Err(Error::Dimension(format!("expected a matrix, got shape {d:?}"))),
        }
    }
}

/// `a [m×k] · b [k×n]`. Each output element accumulates over `k` in
/// ascending order starting from zero, so results match a naive triple loop
/// bit for bit.
pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (m, k) = a.as_matrix()?;
    let (k2, n) = b.as_matrix()?;
    if k != k2 {
        return Err(Error::Dimension(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    DenseArray::from_vec(&[m, n], out)
}

/// Raw-slice matmul accumulating into a zeroed `out`.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(logits: &DenseArray) -> Result<DenseArray> {
    let (m, n) = logits.as_matrix()?;
    let mut out = logits.data().to_vec();
    softmax_rows_in_place(&mut out, m, n);
    DenseArray::from_vec(&[m, n], out)
}

pub(crate) fn softmax_rows_in_place(data: &mut [f32], m: usize, n: usize) {
    for i in 0..m {
        let row = &mut data[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v = (*v as f64 * inv) as f32;
        }
    }
}

/// Counter-based generator: a ChaCha8 keystream addressed by
/// `(seed, stream)` and a word position. Independent streams are derived
/// without touching the parent's position.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// A fresh generator on a child stream keyed by `ids`.
    pub fn derive(&self, ids: &[u64]) -> Self {
        let mut h = self.stream ^ 0x9e37_79b9_7f4a_7c15;
        for &id in ids {
            h = splitmix(h ^ splitmix(id.wrapping_add(0x2545_f491_4f6c_dd1d)));
        }
        Self::with_stream(self.seed, h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// One standard normal via Box–Muller (cosine branch only, so every
    /// sample consumes exactly two uniforms).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// I.i.d. standard normal array drawn from `rng`.
pub fn gaussian(rng: &mut SeededRng, dims: &[usize]) -> Result<DenseArray> {
    let shape = Shape::new(dims)?;
    let data = (0..shape.numel()).map(|_| rng.standard_normal() as f32).collect();
    DenseArray::from_vec(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &DenseArray, b: &DenseArray) -> Vec<f32> {
        let (m, k) = (a.dims()[0], a.dims()[1]);
        let n = b.dims()[1];
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_small_cases() {
        let id = DenseArray::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let b = DenseArray::from_vec(&[2, 2], vec![5., 6., 7., 8.]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap().data(), &[5., 6., 7., 8.]);

        let r = DenseArray::from_vec(&[1, 2], vec![1., 2.]).unwrap();
        let c = DenseArray::from_vec(&[2, 1], vec![3., 4.]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.]);
    }

    #[test]
    fn matmul_random_8x8_matches_naive() {
        let mut rng = SeededRng::new(3);
        let a = gaussian(&mut rng, &[8, 8]).unwrap();
        let b = gaussian(&mut rng, &[8, 8]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), naive(&a, &b).as_slice());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = DenseArray::zeros(&[2, 3]).unwrap();
        let b = DenseArray::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn shape_rules() {
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 2, 3, 4, 5]).is_err());
        assert!(Shape::new(&[3, 0]).is_err());
        assert!(DenseArray::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&DenseArray::zeros(&[1, 3]).unwrap()).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let s = softmax_rows(&DenseArray::from_vec(&[1, 2], vec![1000., 0.]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);

        let s = softmax_rows(&DenseArray::from_vec(&[1, 3], vec![1., 2., 3.]).unwrap()).unwrap();
        let denom: f64 = [1f64, 2., 3.].iter().map(|x| x.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            let want = ((i + 1) as f64).exp() / denom;
            assert!((*v as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_is_reproducible_and_seed_separated() {
        let a = gaussian(&mut SeededRng::new(7), &[4]).unwrap();
        let b = gaussian(&mut SeededRng::new(7), &[4]).unwrap();
        let c = gaussian(&mut SeededRng::new(8), &[4]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let g = gaussian(&mut SeededRng::new(11), &[100_000]).unwrap();
        let n = g.len() as f64;
        let mean = g.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = g.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn derived_streams_are_independent_of_parent_position() {
        let mut parent = SeededRng::new(5);
        let before = parent.derive(&[1, 2]).next_u64();
        parent.next_u64();
        assert_eq!(parent.derive(&[1, 2]).next_u64(), before);
        assert_ne!(parent.derive(&[2, 1]).next_u64(), before);
        assert_eq!(parent.position(), 2);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..20, seed in any::<u64>(), scale in 0.1f32..50.0) {
            let z = gaussian(&mut SeededRng::new(seed), &[rows, cols]).unwrap().scale(scale);
            let s = softmax_rows(&z).unwrap();
            for i in 0..rows {
                let sum: f32 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn matmul_matches_naive_up_to_16(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let a = gaussian(&mut rng, &[m, k]).unwrap();
            let b = gaussian(&mut rng, &[k, n]).unwrap();
            let (got, want) = (matmul(&a, &b).unwrap(), naive(&a, &b));
            prop_assert_eq!(got.data(), want.as_slice());
        }
    }
}
