//! Forward/backward kernels over row-major token matrices.

use crate::linalg::gemm;

pub const LN_EPS: f64 = 1e-5;

pub struct LnTrace {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], dim: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnTrace) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for j in 0..dim {
            let h = (row[j] - mean) * s;
            xhat[r * dim + j] = h;
            y[r * dim + j] = g[j] * h + b[j];
        }
    }
    (y, LnTrace { xhat, rstd })
}

/// Returns `dx`; accumulates `dg`, `db`.
pub fn layer_norm_backward(
    dy: &[f64],
    dim: usize,
    trace: &LnTrace,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let o = r * dim;
        let xh = &trace.xhat[o..o + dim];
        let dyr = &dy[o..o + dim];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..dim {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        let s = trace.rstd[r];
        for j in 0..dim {
            dx[o + j] = s * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// In-place row softmax of an `rows x cols` matrix.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

fn copy_columns(src: &[f64], src_cols: usize, offset: usize, width: usize) -> Vec<f64> {
    src.chunks_exact(src_cols)
        .flat_map(|row| row[offset..offset + width].iter().copied())
        .collect()
}

fn write_columns(dst: &mut [f64], dst_cols: usize, offset: usize, width: usize, src: &[f64]) {
    for (row, s) in dst.chunks_exact_mut(dst_cols).zip(src.chunks_exact(width)) {
        row[offset..offset + width].copy_from_slice(s);
    }
}

pub struct AttnTrace {
    /// Row-softmaxed attention, one `n x n` block per head.
    pub probs: Vec<f64>,
}

/// Multi-head self-attention core: `qkv` is `n x 3d`, returns `n x d`.
pub fn attention(qkv: &[f64], n: usize, dim: usize, heads: usize) -> (Vec<f64>, AttnTrace) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * dim];
    let mut probs = vec![0.0; heads * n * n];
    for h in 0..heads {
        let q = copy_columns(qkv, 3 * dim, h * dh, dh);
        let k = copy_columns(qkv, 3 * dim, dim + h * dh, dh);
        let v = copy_columns(qkv, 3 * dim, 2 * dim + h * dh, dh);
        let a = &mut probs[h * n * n..(h + 1) * n * n];
        gemm(n, dh, n, &q, false, &k, true, 0.0, a);
        a.iter_mut().for_each(|s| *s *= scale);
        softmax_rows(a, n);
        let mut o = vec![0.0; n * dh];
        gemm(n, n, dh, a, false, &v, false, 0.0, &mut o);
        write_columns(&mut out, dim, h * dh, dh, &o);
    }
    (out, AttnTrace { probs })
}

/// Returns `d qkv` given `d out`.
pub fn attention_backward(
    dout: &[f64],
    qkv: &[f64],
    trace: &AttnTrace,
    n: usize,
    dim: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; n * 3 * dim];
    let mut da = vec![0.0; n * n];
    for h in 0..heads {
        let q = copy_columns(qkv, 3 * dim, h * dh, dh);
        let k = copy_columns(qkv, 3 * dim, dim + h * dh, dh);
        let v = copy_columns(qkv, 3 * dim, 2 * dim + h * dh, dh);
        let dout_h = copy_columns(dout, dim, h * dh, dh);
        let a = &trace.probs[h * n * n..(h + 1) * n * n];
        gemm(n, dh, n, &dout_h, false, &v, true, 0.0, &mut da);
        let mut dv = vec![0.0; n * dh];
        gemm(n, n, dh, a, true, &dout_h, false, 0.0, &mut dv);
        // softmax backward, then the 1/sqrt(dh) scale
        for (da_row, a_row) in da.chunks_exact_mut(n).zip(a.chunks_exact(n)) {
            let dot: f64 = da_row.iter().zip(a_row).map(|(x, y)| x * y).sum();
            for (x, y) in da_row.iter_mut().zip(a_row) {
                *x = y * (*x - dot) * scale;
            }
        }
        let mut dq = vec![0.0; n * dh];
        gemm(n, n, dh, &da, false, &k, false, 0.0, &mut dq);
        let mut dk = vec![0.0; n * dh];
        gemm(n, n, dh, &da, true, &q, false, 0.0, &mut dk);
        write_columns(&mut dqkv, 3 * dim, h * dh, dh, &dq);
        write_columns(&mut dqkv, 3 * dim, dim + h * dh, dh, &dk);
        write_columns(&mut dqkv, 3 * dim, 2 * dim + h * dh, dh, &dv);
    }
    dqkv
}
