use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Floating point element type of the engine. Gradient checks run in `f64`;
/// training may use `f32`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`) storage.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    /// Logistic function of every element.
    fn sigmoid_slice(x: &[Self]) -> Vec<Self> {
        x.iter().map(|&v| logistic(v)).collect()
    }

    fn tanh_slice(x: &[Self]) -> Vec<Self> {
        x.iter().map(|v| v.tanh()).collect()
    }

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("every Scalar converts to f64")
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn sigmoid_slice(x: &[f32]) -> Vec<f32> {
        fast::sigmoid(x)
    }

    fn tanh_slice(x: &[f32]) -> Vec<f32> {
        fast::tanh(x)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Overflow-safe `1 / (1 + e^{-v})`.
pub(crate) fn logistic<S: Float>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Branch-free single precision `exp` that the compiler can vectorize;
/// within a few ulp of the library function over the clamped range.
mod fast {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    /// Adding and subtracting 1.5·2²³ rounds to the nearest integer.
    const ROUND: f32 = 12_582_912.0;

    #[inline(always)]
    pub fn exp(x: f32) -> f32 {
        let x = x.clamp(-87.0, 88.0);
        let shifted = x * LOG2E + ROUND;
        let n = shifted - ROUND;
        let r = x - n * LN2_HI - n * LN2_LO;
        let mut p = 1.987_569_1e-4_f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 0.5;
        let e = p * r * r + r + 1.0;
        // the low mantissa bits of `shifted` hold n; build 2ⁿ from them
        let n_bits = shifted.to_bits().wrapping_sub(ROUND.to_bits());
        e * f32::from_bits(n_bits.wrapping_add(127) << 23)
    }

    #[inline(always)]
    fn sigmoid_body(x: &[f32]) -> Vec<f32> {
        x.iter().map(|&v| 1.0 / (1.0 + exp(-v))).collect()
    }

    #[inline(always)]
    fn tanh_body(x: &[f32]) -> Vec<f32> {
        x.iter()
            .map(|&v| 2.0 / (1.0 + exp(-2.0 * v)) - 1.0)
            .collect()
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn sigmoid_avx2(x: &[f32]) -> Vec<f32> {
        sigmoid_body(x)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn tanh_avx2(x: &[f32]) -> Vec<f32> {
        tanh_body(x)
    }

    #[cfg(target_arch = "x86_64")]
    fn has_avx2() -> bool {
        std::is_x86_feature_detected!("avx2")
    }

    pub fn sigmoid(x: &[f32]) -> Vec<f32> {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { sigmoid_avx2(x) };
        }
        sigmoid_body(x)
    }

    pub fn tanh(x: &[f32]) -> Vec<f32> {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { tanh_avx2(x) };
        }
        tanh_body(x)
    }
}

/// Row-major operand for [`gemm`]: `transposed` means the slice stores the
/// transpose of the logical operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, S> {
    pub data: &'a [S],
    pub transposed: bool,
}

impl<'a, S> MatRef<'a, S> {
    pub fn plain(data: &'a [S]) -> Self {
        MatRef {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [S]) -> Self {
        MatRef {
            data,
            transposed: true,
        }
    }
}

/// `out (+)= a[m×k] · b[k×n]`.
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    out: &mut [S],
    accumulate: bool,
) {
    assert_eq!(a.data.len(), m * k);
    assert_eq!(b.data.len(), k * n);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if m <= SMALL_ROWS {
        small_gemm(m, k, n, a, b, out, accumulate);
        return;
    }
    let (rsa, csa) = if a.transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b.transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: lengths checked above; strides address exactly those buffers.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Row counts up to this go through [`small_gemm`]; packing operands for
/// the blocked kernel costs more than it saves on such thin products.
const SMALL_ROWS: usize = 16;

#[inline(always)]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline(always)]
fn small_gemm_body<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    out: &mut [S],
    accumulate: bool,
) {
    if !accumulate {
        out.fill(S::zero());
    }
    let a_at = |i: usize, kk: usize| {
        if a.transposed {
            a.data[kk * m + i]
        } else {
            a.data[i * k + kk]
        }
    };
    if !b.transposed {
        // MR x NR output tile held in registers across the whole k loop
        const MR: usize = 4;
        const NR: usize = 16;
        let mut panel = vec![S::zero(); k * MR];
        let full = n - n % NR;
        for i0 in (0..m).step_by(MR) {
            let rows = MR.min(m - i0);
            for kk in 0..k {
                for r in 0..MR {
                    panel[kk * MR + r] = if r < rows {
                        a_at(i0 + r, kk)
                    } else {
                        S::zero()
                    };
                }
            }
            for j0 in (0..full).step_by(NR) {
                let mut acc = [[S::zero(); NR]; MR];
                for kk in 0..k {
                    let b_seg: &[S; NR] = b.data[kk * n + j0..kk * n + j0 + NR].try_into().unwrap();
                    let a_seg: &[S; MR] = panel[kk * MR..kk * MR + MR].try_into().unwrap();
                    for r in 0..MR {
                        for l in 0..NR {
                            acc[r][l] += a_seg[r] * b_seg[l];
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate().take(rows) {
                    let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                    for (ov, &av) in o.iter_mut().zip(acc_row) {
                        *ov += av;
                    }
                }
            }
            if full < n {
                for r in 0..rows {
                    let row = &mut out[(i0 + r) * n + full..(i0 + r + 1) * n];
                    for kk in 0..k {
                        axpy(
                            panel[kk * MR + r],
                            &b.data[kk * n + full..(kk + 1) * n],
                            row,
                        );
                    }
                }
            }
        }
    } else {
        // rows of `a` against rows of `b`, 2 x 4 dot products at a time
        const MR: usize = 2;
        const NR: usize = 4;
        const W: usize = 8;
        let kw = k - k % W;
        let mut a_rows = vec![S::zero(); MR * k];
        for i0 in (0..m).step_by(MR) {
            let rows = MR.min(m - i0);
            for r in 0..MR {
                for kk in 0..k {
                    a_rows[r * k + kk] = if r < rows {
                        a_at(i0 + r, kk)
                    } else {
                        S::zero()
                    };
                }
            }
            for j0 in (0..n).step_by(NR) {
                let cols = NR.min(n - j0);
                let b_row = |c: usize| {
                    let j = j0 + c.min(cols - 1);
                    &b.data[j * k..(j + 1) * k]
                };
                let bs = [b_row(0), b_row(1), b_row(2), b_row(3)];
                let mut acc = [[[S::zero(); W]; NR]; MR];
                for k0 in (0..kw).step_by(W) {
                    let av: [&[S; W]; MR] = [
                        a_rows[k0..k0 + W].try_into().unwrap(),
                        a_rows[k + k0..k + k0 + W].try_into().unwrap(),
                    ];
                    for c in 0..NR {
                        let bv: &[S; W] = bs[c][k0..k0 + W].try_into().unwrap();
                        for r in 0..MR {
                            for l in 0..W {
                                acc[r][c][l] += av[r][l] * bv[l];
                            }
                        }
                    }
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let mut sum = acc[r][c].iter().copied().sum::<S>();
                        for kk in kw..k {
                            sum += a_rows[r * k + kk] * bs[c][kk];
                        }
                        out[(i0 + r) * n + j0 + c] += sum;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn small_gemm_avx2<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    out: &mut [S],
    accumulate: bool,
) {
    small_gemm_body(m, k, n, a, b, out, accumulate)
}

/// Direct loops for products with few rows.
fn small_gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    out: &mut [S],
    accumulate: bool,
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        unsafe { small_gemm_avx2(m, k, n, a, b, out, accumulate) };
        return;
    }
    small_gemm_body(m, k, n, a, b, out, accumulate)
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            data.iter().map(|&v| S::from_f64_lossy(v)).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all dimensions after the first.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range in axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Dense matrix product of two rank-2 tensors, outside any graph.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(
            m,
            k,
            n,
            MatRef::plain(&self.data),
            MatRef::plain(&other.data),
            &mut out,
            false,
        );
        Tensor::new(vec![m, n], out)
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn fast_exp_tracks_library_exp() {
        for i in -8700..8800 {
            let x = i as f32 * 0.01;
            let (fast, exact) = (fast::exp(x), x.exp());
            assert!(
                ((fast - exact) / exact).abs() < 1e-6,
                "{x}: {fast} vs {exact}"
            );
        }
        let s = f32::sigmoid_slice(&[-100.0, 0.0, 100.0]);
        assert_eq!(s[1], 0.5);
        assert!(s[0] >= 0.0 && s[0] < 1e-30 && s[2] == 1.0);
        let t = f32::tanh_slice(&[-50.0, 0.3, 50.0]);
        assert!((t[1] - 0.3f32.tanh()).abs() < 1e-6);
        assert_eq!((t[0], t[2]), (-1.0, 1.0));
    }

    #[test]
    fn small_and_blocked_products_agree() {
        let (m, k, n) = (20, 13, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let mut blocked = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::plain(&a),
            MatRef::plain(&b),
            &mut blocked,
            false,
        );
        let mut small = vec![0.0; m * n];
        small_gemm(
            m,
            k,
            n,
            MatRef::plain(&a),
            MatRef::plain(&b),
            &mut small,
            false,
        );
        // transposed storage of b through the dot-product path
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut small_t = vec![0.0; m * n];
        small_gemm(
            m,
            k,
            n,
            MatRef::plain(&a),
            MatRef::t(&bt),
            &mut small_t,
            false,
        );
        for (((x, y), z), w) in naive.iter().zip(&blocked).zip(&small).zip(&small_t) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12 && (x - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_gemm_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        gemm(2, 2, 2, MatRef::t(&a), MatRef::plain(&b), &mut out, false);
        // aᵀ·b = [[1,3],[2,4]]·b
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, MatRef::plain(&a), MatRef::t(&b), &mut out, true);
        // + a·bᵀ = [[17,23],[39,53]]
        assert_eq!(out, [43.0, 53.0, 77.0, 97.0]);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 0, 2]), 8.0);
        assert_eq!(split_axis("t", t.shape(), 1).unwrap(), (2, 2, 3));
        assert!(split_axis("t", t.shape(), 3).is_err());
    }
}
