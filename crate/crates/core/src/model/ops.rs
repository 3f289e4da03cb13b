//! Dense kernels over row-major slices, generic over `f32` / `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

pub trait Scalar: Float + Default + Debug + AddAssign + Sum + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` on strided matrices.
    ///
    /// # Safety
    /// Every index touched through the strides must be in bounds.
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

    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite literal")
    }
}

impl Scalar for f32 {
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

impl Scalar for f64 {
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

/// A read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> View<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Column block `[col, col + cols)` of a row-major matrix with row stride `rs`.
    pub fn cols_of(data: &'a [F], rows: usize, rs: usize, col: usize, cols: usize) -> Self {
        Self { data: &data[col..], rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// `out = alpha * a·b + beta * out`, where `out` is row-major with row stride `ldo`.
pub fn gemm<F: Scalar>(a: View<'_, F>, b: View<'_, F>, out: &mut [F], ldo: usize, alpha: F, beta: F) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldo + n <= out.len(), "output out of bounds");
    // SAFETY: the bounds of all three operands were checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            ldo as isize,
            1,
        )
    }
}

/// `out[m×n] = a[m×k]·b[k×n] (+ out if accumulate)`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { F::one() } else { F::zero() };
    gemm(View::new(a, m, k), View::new(b, k, n), out, n, F::one(), beta);
}

pub fn add_bias<F: Scalar>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
}

pub fn sum_rows_into<F: Scalar>(x: &[F], acc: &mut [F]) {
    for row in x.chunks_exact(acc.len()) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over rows of width `gain.len()`; returns `(normalized, rstd)`
/// and writes `out = normalized * gain + bias`.
pub fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], out: &mut [F]) -> (Vec<F>, Vec<F>) {
    let d = gain.len();
    let n = F::lit(d as f64);
    let eps = F::lit(LN_EPS);
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d);
    for ((row, xh), o) in x.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let r = (var + eps).sqrt().recip();
        for i in 0..d {
            xh[i] = (row[i] - mean) * r;
            o[i] = xh[i] * gain[i] + bias[i];
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Accumulates gain/bias grads and adds the input grad into `dx`.
pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
) {
    let d = gain.len();
    let n = F::lit(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for (r, ((dyr, xh), dxr)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat = mean_dxhat / n;
        mean_dxhat_xhat = mean_dxhat_xhat / n;
        for i in 0..d {
            dxr[i] += rstd[r] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.044715;

fn gelu_k<F: Scalar>() -> F {
    F::lit((2.0 / std::f64::consts::PI).sqrt())
}

/// `(1 + tanh(u)) / 2` for the tanh approximation of GELU, written as a
/// logistic so it costs one `exp`.
fn gelu_gate<F: Scalar>(x: F) -> F {
    let u = gelu_k::<F>() * (x + F::lit(GELU_C) * x * x * x);
    F::one() / (F::one() + (-(u + u)).exp())
}

/// Tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    x * gelu_gate(x)
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let s = gelu_gate(x);
    let two = F::lit(2.0);
    s + two * x * s * (F::one() - s) * gelu_k::<F>() * (F::one() + F::lit(3.0) * c * x * x)
}

/// In-place log-softmax of one row.
pub fn log_softmax<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
    row.iter_mut().for_each(|v| *v = *v - lse);
}

/// In-place softmax of one row.
pub fn softmax<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}
