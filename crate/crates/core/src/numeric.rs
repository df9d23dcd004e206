//! Dense linear-algebra substrate.
//!
//! Everything in the crate is small (d in the hundreds), so storage is a flat
//! row-major `Vec<f64>`. The only heavy kernel is the matrix product, which is
//! delegated to `matrixmultiply` for cache blocking.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit reals.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec shape");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T * x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t shape");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(&mut out, xi, self.row(i));
            }
        }
        out
    }

    /// `u^T self v`
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        assert_eq!(u.len(), self.rows, "bilinear left shape");
        assert_eq!(v.len(), self.cols, "bilinear right shape");
        u.iter()
            .enumerate()
            .filter(|(_, &ui)| ui != 0.0)
            .map(|(i, &ui)| ui * dot(self.row(i), v))
            .sum()
    }

    /// `self += alpha * u v^T`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows, "outer left shape");
        assert_eq!(v.len(), self.cols, "outer right shape");
        for (i, &ui) in u.iter().enumerate() {
            if ui != 0.0 {
                let c = self.cols;
                axpy(&mut self.data[i * c..(i + 1) * c], alpha * ui, v);
            }
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape");
        axpy(&mut self.data, alpha, &other.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(alpha);
        m
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// `A B`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut c);
        c
    }

    /// `A B^T`
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut c);
        c
    }

    /// `A^T B`
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut c);
        c
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `c = alpha * op(a) op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k, rsa, csa) = if trans_a {
        (a.cols, a.rows, 1, a.cols as isize)
    } else {
        (a.rows, a.cols, a.cols as isize, 1)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b.cols, b.rows, 1, b.cols as isize)
    } else {
        (b.rows, b.cols, b.cols as isize, 1)
    };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    // SAFETY: the strides describe exactly the row-major buffers owned by
    // `a`, `b` and `c`, whose sizes were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// First-order expansion of the softmax around the origin:
/// `(1/T) (1 + u_t - mean(u))`. Entries may be negative.
pub fn linearized_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("linearized softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    linearized_softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn linearized_softmax_in_place(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    for x in v.iter_mut() {
        *x = (1.0 + *x - mean) / n;
    }
}

/// Log of the softmax normaliser, `log sum exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gaussian direction on the unit sphere in `R^d`.
pub fn gaussian_unit_vector(d: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::invalid("gaussian_unit_vector needs d >= 1"));
    }
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-300 {
            v.iter_mut().for_each(|x| *x /= n);
            return Ok(v);
        }
    }
}

/// Seeded ChaCha8 stream. Identical seeds give identical draws on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` derived from `seed`, for parallel sampling.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        "chacha8"
    }

    /// Splits off a child generator seeded from this stream.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.inner.next_u64())
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_constant_is_uniform() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in s {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_entries() {
        let e = std::f64::consts::E;
        let s = softmax(&[1.0, 0.0]).unwrap();
        assert!((s[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((s[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_empty_and_nan() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
        assert!(softmax(&[f64::NAN]).is_err());
        assert!(linearized_softmax(&[]).is_err());
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let s = softmax(&[1000.0, 999.0]).unwrap();
        assert!(s.iter().all(|x| x.is_finite()));
        assert!((s[0] + s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linearized_softmax_examples() {
        assert_eq!(linearized_softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let l = linearized_softmax(&[1.0, 0.0]).unwrap();
        assert!((l[0] - 0.75).abs() < 1e-15);
        assert!((l[1] - 0.25).abs() < 1e-15);
        let c = linearized_softmax(&[7.5; 5]).unwrap();
        assert!(c.iter().all(|x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn unit_vector_examples() {
        let mut rng = SeededRng::new(3);
        let v = gaussian_unit_vector(1, &mut rng).unwrap();
        assert!((v[0].abs() - 1.0).abs() < 1e-15);
        assert!(gaussian_unit_vector(0, &mut rng).is_err());

        let a = gaussian_unit_vector(256, &mut SeededRng::new(11)).unwrap();
        let b = gaussian_unit_vector(256, &mut SeededRng::new(11)).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_unit_vectors_are_nearly_orthogonal() {
        // 10^4 pairs at d = 256: dots have std 1/16, so 0.4 is > 6 sigma.
        let mut rng = SeededRng::new(2024);
        let mut worst = 0.0_f64;
        for _ in 0..10_000 {
            let a = gaussian_unit_vector(256, &mut rng).unwrap();
            let b = gaussian_unit_vector(256, &mut rng).unwrap();
            worst = worst.max(dot(&a, &b).abs());
        }
        assert!(worst < 0.4, "max |dot| = {worst}");
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn products_agree_with_naive_loops() {
        let mut rng = SeededRng::new(5);
        let a = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let b = Matrix::gaussian(3, 5, 1.0, &mut rng);
        let c = a.matmul(&b);
        for i in 0..4 {
            for j in 0..5 {
                let naive: f64 = (0..3).map(|k| a[(i, k)] * b[(k, j)]).sum();
                assert!((c[(i, j)] - naive).abs() < 1e-12);
            }
        }
        let bt = b.transpose();
        assert!(a.matmul_nt(&bt).max_abs_diff(&c) < 1e-12);
        let at = a.transpose();
        assert!(at.matmul_tn(&b).max_abs_diff(&c) < 1e-12);

        let x = vec![0.5, -1.0, 2.0];
        let y = a.matvec(&x);
        let y2 = at.matvec_t(&x);
        for (p, q) in y.iter().zip(&y2) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn from_vec_validates() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_preserves_argmax(v in prop::collection::vec(-20.0f64..20.0, 1..20)) {
            prop_assert_eq!(argmax(&softmax(&v).unwrap()), argmax(&v));
        }

        #[test]
        fn linearized_softmax_sums_to_one(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let s: f64 = linearized_softmax(&v).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn same_seed_same_stream(seed in any::<u64>()) {
            let a = Matrix::gaussian(3, 3, 1.0, &mut SeededRng::new(seed));
            let b = Matrix::gaussian(3, 3, 1.0, &mut SeededRng::new(seed));
            prop_assert_eq!(a, b);
        }
    }
}
