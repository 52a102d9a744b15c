//! Row kernels shared by every forward path.
//!
//! Each kernel fixes its summation order, so a row computed alone (decode
//! with a KV cache) and the same row computed inside a full sequence give
//! bit-identical results.

use super::Real;

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const ROPE_BASE: f64 = 10_000.0;

/// `out[j] += sum_k x[k] * w[k, j]`, accumulated in increasing `k`.
#[inline]
pub(crate) fn matvec_acc<T: Real>(x: &[T], w: &[T], out: &mut [T]) {
    let n_out = out.len();
    debug_assert_eq!(w.len(), x.len() * n_out);
    for (k, &xk) in x.iter().enumerate() {
        let row = &w[k * n_out..(k + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xk * wv;
        }
    }
}

/// `out[k] += sum_j w[k, j] * d[j]`.
#[inline]
pub(crate) fn matvec_t_acc<T: Real>(w: &[T], d: &[T], out: &mut [T]) {
    let n_out = d.len();
    debug_assert_eq!(w.len(), out.len() * n_out);
    for (k, o) in out.iter_mut().enumerate() {
        *o += dot(&w[k * n_out..(k + 1) * n_out], d);
    }
}

/// `dw[k, j] += x[k] * d[j]`.
#[inline]
pub(crate) fn outer_acc<T: Real>(x: &[T], d: &[T], dw: &mut [T]) {
    let n_out = d.len();
    debug_assert_eq!(dw.len(), x.len() * n_out);
    for (k, &xk) in x.iter().enumerate() {
        if xk == T::zero() {
            continue;
        }
        let row = &mut dw[k * n_out..(k + 1) * n_out];
        for (g, &dv) in row.iter_mut().zip(d) {
            *g += xk * dv;
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Layer norm of one row. Writes the normalised row into `xhat`, the affine
/// output into `out`, and returns the reciprocal standard deviation.
#[inline]
pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    xhat: &mut [T],
    out: &mut [T],
) -> T {
    let n = T::of(x.len() as f64);
    let mut mean = T::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = T::zero();
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= n;
    let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
    for i in 0..x.len() {
        let h = (x[i] - mean) * rstd;
        xhat[i] = h;
        out[i] = h * gain[i] + bias[i];
    }
    rstd
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dgain`, `dbias`.
#[inline]
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: T,
    gain: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let n = T::of(dy.len() as f64);
    let mut mean_dxhat = T::zero();
    let mut mean_dxhat_xhat = T::zero();
    for i in 0..dy.len() {
        let dxh = dy[i] * gain[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..dy.len() {
        let dxh = dy[i] * gain[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Numerically stable softmax in place.
#[inline]
pub(crate) fn softmax_in_place<T: Real>(v: &mut [T]) {
    let mut m = T::neg_infinity();
    for &x in v.iter() {
        if x > m {
            m = x;
        }
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log softmax(logits)[target]`.
#[inline]
pub(crate) fn log_softmax_at<T: Real>(logits: &[T], target: usize) -> T {
    let mut m = T::neg_infinity();
    for &x in logits {
        if x > m {
            m = x;
        }
    }
    let mut sum = T::zero();
    for &x in logits {
        sum += (x - m).exp();
    }
    logits[target] - m - sum.ln()
}

/// Index of the largest entry; the lowest index wins ties.
#[inline]
pub(crate) fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Cosine/sine tables for rotary embeddings, `[position][pair]`.
pub(crate) struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    pub fn new(d_head: usize, max_len: usize) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * i as f64 / d_head as f64);
                let angle = pos as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one head slice in place.
    #[inline]
    pub fn apply(&self, x: &mut [T], pos: usize) {
        let h = self.half;
        let (c, s) = (
            &self.cos[pos * h..(pos + 1) * h],
            &self.sin[pos * h..(pos + 1) * h],
        );
        for i in 0..h {
            let (a, b) = (x[i], x[i + h]);
            x[i] = a * c[i] - b * s[i];
            x[i + h] = a * s[i] + b * c[i];
        }
    }

    /// Transpose of [`Self::apply`], used to pull gradients back.
    #[inline]
    pub fn apply_inverse(&self, x: &mut [T], pos: usize) {
        let h = self.half;
        let (c, s) = (
            &self.cos[pos * h..(pos + 1) * h],
            &self.sin[pos * h..(pos + 1) * h],
        );
        for i in 0..h {
            let (a, b) = (x[i], x[i + h]);
            x[i] = a * c[i] + b * s[i];
            x[i + h] = -a * s[i] + b * c[i];
        }
    }
}
