//! Layer primitives with explicit backward passes.
//!
//! Rows are samples (correspondences or stacked per-node rows), columns are
//! channels. Every `*_backward` accumulates parameter gradients into the
//! supplied views and returns the gradient with respect to the input.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

pub const NORM_EPS: f64 = 1e-5;

/// Rows per task when a matrix product is split across threads.
const MATMUL_ROW_CHUNK: usize = 64;

/// `a · b`, row-chunked across threads. Each output row is produced by the
/// same kernel regardless of the chunking, so the result does not depend on
/// the thread count.
pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (m, n) = (a.nrows(), b.ncols());
    if !crate::par::is_parallel() || m <= 2 * MATMUL_ROW_CHUNK || n == 0 {
        return a.dot(b);
    }
    let mut out = vec![0.0; m * n];
    crate::par::for_each_chunk_mut(&mut out, MATMUL_ROW_CHUNK * n, |ci, chunk| {
        let r0 = ci * MATMUL_ROW_CHUNK;
        let rows = chunk.len() / n;
        let part = a.slice(s![r0..r0 + rows, ..]).dot(b);
        ArrayViewMut2::from_shape((rows, n), chunk)
            .expect("chunk holds whole rows")
            .assign(&part);
    });
    Array2::from_shape_vec((m, n), out).expect("shape matches buffer")
}

pub fn linear_forward(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    b: Option<&ArrayView1<f64>>,
) -> Array2<f64> {
    let mut y = matmul(x, w);
    if let Some(b) = b {
        y += b;
    }
    y
}

pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
    grad_w: &mut ArrayViewMut2<f64>,
    grad_b: Option<&mut ArrayViewMut1<f64>>,
) -> Array2<f64> {
    *grad_w += &x.t().dot(dy);
    if let Some(gb) = grad_b {
        *gb += &dy.sum_axis(Axis(0));
    }
    matmul(dy, &w.t())
}

/// Cached statistics of a normalization layer.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Array2<f64>,
    /// One entry per group (group norm) or per row (layer norm).
    pub inv_std: Vec<f64>,
}

/// Group normalization with statistics pooled over all rows and the
/// channels of each group.
pub fn group_norm_forward(
    x: &ArrayView2<f64>,
    groups: usize,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
) -> (Array2<f64>, NormCache) {
    let (rows, cols) = x.dim();
    let cs = cols / groups;
    let count = (rows * cs) as f64;
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let block = x.slice(s![.., g * cs..(g + 1) * cs]);
        let mean = block.sum() / count;
        let var = block.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / count;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        Zip::from(xhat.slice_mut(s![.., g * cs..(g + 1) * cs]))
            .and(&block)
            .for_each(|o, &v| *o = (v - mean) * inv);
        inv_std.push(inv);
    }
    let y = &xhat * gamma + beta;
    (y, NormCache { xhat, inv_std })
}

pub fn group_norm_backward(
    cache: &NormCache,
    gamma: &ArrayView1<f64>,
    dy: &ArrayView2<f64>,
    grad_gamma: &mut ArrayViewMut1<f64>,
    grad_beta: &mut ArrayViewMut1<f64>,
) -> Array2<f64> {
    let (rows, cols) = dy.dim();
    let groups = cache.inv_std.len();
    let cs = cols / groups;
    let count = (rows * cs) as f64;
    *grad_gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *grad_beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros((rows, cols));
    for g in 0..groups {
        let sl = s![.., g * cs..(g + 1) * cs];
        let dxh = dxhat.slice(sl);
        let xh = cache.xhat.slice(sl);
        let s1 = dxh.sum();
        let s2 = (&dxh * &xh).sum();
        let inv = cache.inv_std[g];
        Zip::from(dx.slice_mut(sl))
            .and(&dxh)
            .and(&xh)
            .for_each(|o, &d, &h| *o = inv * (d - s1 / count - h * s2 / count));
    }
    dx
}

/// Layer normalization over the channels of each row.
pub fn layer_norm_forward(
    x: &ArrayView2<f64>,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
) -> (Array2<f64>, NormCache) {
    let (rows, cols) = x.dim();
    let n = cols as f64;
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Vec::with_capacity(rows);
    for (xr, mut hr) in x.outer_iter().zip(xhat.outer_iter_mut()) {
        let mean = xr.sum() / n;
        let var = xr.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        Zip::from(&mut hr).and(&xr).for_each(|o, &v| *o = (v - mean) * inv);
        inv_std.push(inv);
    }
    let y = &xhat * gamma + beta;
    (y, NormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &NormCache,
    gamma: &ArrayView1<f64>,
    dy: &ArrayView2<f64>,
    grad_gamma: &mut ArrayViewMut1<f64>,
    grad_beta: &mut ArrayViewMut1<f64>,
) -> Array2<f64> {
    let n = dy.ncols() as f64;
    *grad_gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *grad_beta += &dy.sum_axis(Axis(0));
    let mut dx = dy * gamma;
    for ((mut row, xh), &inv) in dx
        .outer_iter_mut()
        .zip(cache.xhat.outer_iter())
        .zip(&cache.inv_std)
    {
        let s1 = row.sum();
        let s2 = (&row * &xh).sum();
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|d, &h| *d = inv * (*d - s1 / n - h * s2 / n));
    }
    dx
}

pub fn leaky_relu(x: &ArrayView2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Gradient through a leaky ReLU whose *input* was `x`.
pub fn leaky_relu_backward(x: &ArrayView2<f64>, dy: &ArrayView2<f64>, slope: f64) -> Array2<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx)
        .and(x)
        .for_each(|d, &v| if v <= 0.0 { *d *= slope });
    dx
}

pub fn relu(x: &ArrayView2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &ArrayView2<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx)
        .and(x)
        .for_each(|d, &v| if v <= 0.0 { *d = 0.0 });
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Consistency-reweighted scaled dot-product attention for one node:
/// `softmax(Θ ⊙ (Q Kᵀ) · scale) V`. Returns the output and the attention
/// probabilities.
pub fn attention_forward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    theta: &ArrayView2<f64>,
    scale: f64,
) -> (Array2<f64>, Array2<f64>) {
    let logits = &q.dot(&k.t()) * theta * scale;
    let probs = softmax_rows(&logits.view());
    let out = probs.dot(v);
    (out, probs)
}

/// Backward of [`attention_forward`]; returns `(dQ, dK, dV)`.
pub fn attention_backward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    theta: &ArrayView2<f64>,
    scale: f64,
    probs: &ArrayView2<f64>,
    d_out: &ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d_probs = d_out.dot(&v.t());
    let dv = probs.t().dot(d_out);
    let mut d_logits = &d_probs * probs;
    for (mut row, p) in d_logits.outer_iter_mut().zip(probs.outer_iter()) {
        let dot = row.sum();
        Zip::from(&mut row).and(&p).for_each(|d, &pv| *d -= pv * dot);
    }
    let d_scores = &d_logits * theta * scale;
    let dq = d_scores.dot(k);
    let dk = d_scores.t().dot(q);
    (dq, dk, dv)
}

pub fn row_norms(x: &ArrayView2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}
