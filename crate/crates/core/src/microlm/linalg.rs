//! Dense row-major kernels used by the micro model. Everything is `f64` and
//! evaluated in a fixed order, so results are bit-reproducible.

use serde::{Deserialize, Serialize};

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out[t, :] = x[t, :] · w + b` for `t in 0..rows`, with `w` stored `k × n`.
pub fn linear_fwd(x: &[f64], rows: usize, k: usize, w: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(w.len(), k * n);
    for t in 0..rows {
        let o = &mut out[t * n..(t + 1) * n];
        o.copy_from_slice(b);
        let xr = &x[t * k..(t + 1) * k];
        for (i, &a) in xr.iter().enumerate() {
            if a != 0.0 {
                axpy(o, a, &w[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Backward of [`linear_fwd`]. Accumulates into `dw`/`db`; overwrites `dx`
/// when given. Rows flagged `false` in `active` carry zero upstream gradient
/// and are skipped.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    k: usize,
    w: &[f64],
    n: usize,
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
    active: Option<&[bool]>,
) {
    let is_active = |t: usize| active.is_none_or(|a| a[t]);
    for t in 0..rows {
        if !is_active(t) {
            continue;
        }
        let dyr = &dy[t * n..(t + 1) * n];
        axpy(db, 1.0, dyr);
        let xr = &x[t * k..(t + 1) * k];
        for (i, &a) in xr.iter().enumerate() {
            if a != 0.0 {
                axpy(&mut dw[i * n..(i + 1) * n], a, dyr);
            }
        }
    }
    if let Some(dx) = dx {
        for t in 0..rows {
            let dxr = &mut dx[t * k..(t + 1) * k];
            if !is_active(t) {
                dxr.fill(0.0);
                continue;
            }
            let dyr = &dy[t * n..(t + 1) * n];
            for (i, d) in dxr.iter_mut().enumerate() {
                *d = dot(dyr, &w[i * n..(i + 1) * n]);
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over each row. Stores the normalised input and reciprocal
/// standard deviation for the backward pass.
pub fn layer_norm_fwd(
    x: &[f64],
    rows: usize,
    c: usize,
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    for t in 0..rows {
        let xr = &x[t * c..(t + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = rs;
        for i in 0..c {
            let h = (xr[i] - mean) * rs;
            xhat[t * c + i] = h;
            out[t * c + i] = h * gain[i] + bias[i];
        }
    }
}

/// Backward of [`layer_norm_fwd`]; adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_bwd(
    dy: &[f64],
    rows: usize,
    c: usize,
    gain: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let mut dxhat = vec![0.0; c];
    for t in 0..rows {
        let dyr = &dy[t * c..(t + 1) * c];
        let xh = &xhat[t * c..(t + 1) * c];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..c {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        let rs = rstd[t];
        let dxr = &mut dx[t * c..(t + 1) * c];
        for i in 0..c {
            dxr[i] += rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Numerically stable in-place softmax; returns `log(sum(exp(x - max))) + max`.
pub fn softmax_in_place(x: &mut [f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// `log(sum(exp(x)))`, stable.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
