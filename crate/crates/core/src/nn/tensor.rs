//! Batched activation tensors and the scalar trait the network is generic
//! over.
//!
//! Activations are stored as a row-major matrix with `channels` rows and
//! `batch * height * width` columns; sample `s` occupies the column block
//! `[s*h*w, (s+1)*h*w)`. This keeps convolutions expressible as one GEMM per
//! layer across the whole batch.

use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar type the network runs in. `f32` is the working precision for
/// training and inference; `f64` is used by the finite-difference harness.
pub trait Real:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Exponential for activation hot loops. The `f32` working precision
    /// uses a branch-free polynomial (relative error ~3e-6, well below f32
    /// training noise); `f64` delegates to libm so the finite-difference
    /// harness sees the exact function it differentiates.
    fn exp_fast(self) -> Self;

    /// `c = alpha * a.dot(b) + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointer/stride contracts follow `matrixmultiply`: every index
    /// `i*rs + j*cs` must be in bounds for the respective allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($ty:ty, $gemm:path, $exp_fast:expr) => {
        impl Real for $ty {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn exp_fast(self) -> Self {
                ($exp_fast)(self)
            }

            fn from_f64(x: f64) -> Self {
                x as $ty
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.sample(StandardNormal)
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, exp_poly_f32);
impl_real!(f64, matrixmultiply::dgemm, f64::exp);

/// Branch-free expf: split `x = k*ln2 + r`, evaluate a degree-5 Taylor
/// polynomial on `r`, and scale by `2^k` through the exponent bits.
pub fn exp_poly_f32(x: f32) -> f32 {
    let x = x.clamp(-80.0, 80.0);
    let z = x * std::f32::consts::LOG2_E;
    let k = z.round();
    let r = x - k * std::f32::consts::LN_2;
    let p = 1.0
        + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0)))));
    f32::from_bits((((k as i32) + 127) << 23) as u32) * p
}

/// Batched CHW activation block.
#[derive(Debug, Clone)]
pub struct Tensor<T: Real> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Tensor { channels, batch, height, width, data: vec![T::ZERO; channels * batch * height * width] }
    }

    /// Number of columns in the matrix view (`batch * height * width`).
    pub fn cols(&self) -> usize {
        self.batch * self.height * self.width
    }

    /// Spatial extent of one sample.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    /// Row slice for one channel (all samples).
    pub fn row(&self, c: usize) -> &[T] {
        let n = self.cols();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.cols();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stack `self` and `other` along the channel axis.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(
            self.batch == other.batch && self.height == other.height && self.width == other.width,
            "concat shape mismatch"
        );
        let mut data = Vec::with_capacity((self.channels + other.channels) * self.cols());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Split along channels into `(first k, rest)`.
    pub fn split_channels(&self, k: usize) -> (Tensor<T>, Tensor<T>) {
        assert!(k <= self.channels);
        let n = self.cols();
        let first = Tensor {
            channels: k,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data[..k * n].to_vec(),
        };
        let rest = Tensor {
            channels: self.channels - k,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data[k * n..].to_vec(),
        };
        (first, rest)
    }

    pub fn add_inplace(&mut self, other: &Tensor<T>) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Dense matrix helper for embeddings: row-major `rows x cols`.
#[derive(Debug, Clone)]
pub struct Matrix<T: Real> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::ZERO; rows * cols] }
    }
}

/// `c = a.dot(b)` for row-major slices: `a` is `m x k`, `b` is `k x n`.
pub fn gemm_rowmajor<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            T::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a^T.dot(b)` where `a` is `k x m` row-major (so `a^T` is `m x k`).
pub fn gemm_at_b_accum<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            T::ONE,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a.dot(b^T)` where `b` is `n x k` row-major (so `b^T` is `k x n`).
pub fn gemm_a_bt_accum<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            T::ONE,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 7, 6);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.73).cos()).collect();
        let expect = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm_rowmajor(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_gemm_variants_match_naive() {
        let (m, k, n) = (4, 3, 5);
        let at: Vec<f64> = (0..k * m).map(|i| (i as f64).sin()).collect(); // k x m
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        // a = at^T
        let mut a = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                a[i * k + p] = at[p * m + i];
            }
        }
        let expect = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm_at_b_accum(m, k, n, &at, &b, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.11).sin()).collect(); // n x k
        let mut b2 = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                b2[p * n + j] = bt[j * k + p];
            }
        }
        let expect2 = naive(m, k, n, &a, &b2);
        let mut c2 = vec![0.0; m * n];
        // c2 = a * bt^T
        let a_row: Vec<f64> = a.clone();
        gemm_a_bt_accum(m, k, n, &a_row, &bt, &mut c2);
        for (x, y) in c2.iter().zip(&expect2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let mut a = Tensor::<f32>::zeros(2, 1, 2, 2);
        let mut b = Tensor::<f32>::zeros(3, 1, 2, 2);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        for (i, v) in b.data.iter_mut().enumerate() {
            *v = 100.0 + i as f32;
        }
        let cat = a.concat_channels(&b);
        assert_eq!(cat.channels, 5);
        let (a2, b2) = cat.split_channels(2);
        assert_eq!(a2.data, a.data);
        assert_eq!(b2.data, b.data);
    }
}
