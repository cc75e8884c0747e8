//! Per-correspondence layers with explicit forward and backward passes.
//!
//! Feature maps are stored as `(B·N) × C` row blocks, one block of `N` rows
//! per image pair. Every reduction over rows is computed as per-pair partial
//! sums combined in pair order, so sequential and parallel execution produce
//! bit-identical results.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::FeatureMap;
use crate::exec::Execution;

/// Epsilon inside the context-normalization square root.
pub const CN_EPSILON: f64 = 1e-8;

/// Largest weight the truncated tanh emits; `tanh` itself rounds to exactly
/// 1.0 beyond ~19.
pub const MAX_WEIGHT: f64 = 1.0 - f64::EPSILON / 2.0;

/// Shared linear map applied to every correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptronParams {
    /// `C_in × C_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl PerceptronParams {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Array2::zeros((c_in, c_out)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn c_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptronGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Weight of the newest batch in the running averages.
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds one training batch's statistics into the running averages.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        Zip::from(&mut self.running_mean)
            .and(&cache.mean)
            .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
        Zip::from(&mut self.running_var)
            .and(&cache.var)
            .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

fn pair_rows(x: &Array2<f64>, n: usize, b: usize) -> ArrayView2<'_, f64> {
    x.slice(s![b * n..(b + 1) * n, ..])
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("feature maps are row-major")
}

fn flat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("feature maps are row-major")
}

/// Per-channel sum over a contiguous block of rows.
fn block_sum(block: &[f64], c: usize) -> Vec<f64> {
    let mut acc = vec![0.0; c];
    for row in block.chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

/// Per-channel `Σ a ⊙ b` over two congruent blocks.
fn block_dot(a: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut acc = vec![0.0; c];
    for (ra, rb) in a.chunks_exact(c).zip(b.chunks_exact(c)) {
        for ((s, &x), &y) in acc.iter_mut().zip(ra).zip(rb) {
            *s += x * y;
        }
    }
    acc
}

/// Per-channel `Σ (x − m)²` over a block.
fn block_sq_dev(block: &[f64], mean: &[f64]) -> Vec<f64> {
    let c = mean.len();
    let mut acc = vec![0.0; c];
    for row in block.chunks_exact(c) {
        for ((a, &v), &m) in acc.iter_mut().zip(row).zip(mean) {
            let d = v - m;
            *a += d * d;
        }
    }
    acc
}

/// Sums per-pair partials in pair order.
fn fold(partials: &[Vec<f64>], c: usize) -> Array1<f64> {
    let mut acc = vec![0.0; c];
    for p in partials {
        for (a, &v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    Array1::from(acc)
}

/// Row sum as per-pair partials accumulated in pair order.
fn column_sum(exec: Execution, x: &Array2<f64>, pairs: usize) -> Array1<f64> {
    let c = x.ncols();
    let block = x.nrows() / pairs.max(1) * c;
    let data = flat(x);
    let partials = exec.map(pairs, |b| block_sum(&data[b * block..(b + 1) * block], c));
    fold(&partials, c)
}

/// Mutable per-pair row blocks of a row-major buffer.
fn blocks_mut(a: &mut Array2<f64>, n: usize) -> Vec<&mut [f64]> {
    let len = n.max(1) * a.ncols();
    flat_mut(a).chunks_mut(len.max(1)).collect()
}

/// `out[r, :] = x[r, :] · W + bias`.
pub fn perceptron_forward(exec: Execution, x: &FeatureMap, p: &PerceptronParams) -> FeatureMap {
    assert_eq!(x.channels(), p.c_in(), "perceptron input width");
    let n = x.n();
    let bias = p.bias.as_slice().expect("contiguous bias");
    let mut out = Array2::zeros((x.rows(), p.c_out()));
    let mut chunks: Vec<_> = out.axis_chunks_iter_mut(Axis(0), n.max(1)).collect();
    exec.for_each_mut(&mut chunks, |b, chunk| {
        for row in chunk.as_slice_mut().expect("row block").chunks_exact_mut(bias.len()) {
            row.copy_from_slice(bias);
        }
        let rows = pair_rows(x.data(), n, b);
        ndarray::linalg::general_mat_mul(1.0, &rows, &p.weight, 1.0, chunk);
    });
    FeatureMap::from_rows(out, x.pairs())
}

pub fn perceptron_backward(
    exec: Execution,
    x: &FeatureMap,
    p: &PerceptronParams,
    dy: &FeatureMap,
) -> (FeatureMap, PerceptronGrad) {
    let n = x.n();
    let pairs = x.pairs();
    let mut dx = Array2::zeros((x.rows(), p.c_in()));
    let wt = p.weight.t();
    let mut chunks: Vec<_> = dx.axis_chunks_iter_mut(Axis(0), n.max(1)).collect();
    exec.for_each_mut(&mut chunks, |b, chunk| {
        let g = pair_rows(dy.data(), n, b);
        ndarray::linalg::general_mat_mul(1.0, &g, &wt, 0.0, chunk);
    });
    let partials = exec.map(pairs, |b| {
        pair_rows(x.data(), n, b)
            .t()
            .dot(&pair_rows(dy.data(), n, b))
    });
    let mut dw = Array2::zeros(p.weight.raw_dim());
    for part in &partials {
        dw += part;
    }
    let db = column_sum(exec, dy.data(), pairs);
    (
        FeatureMap::from_rows(dx, pairs),
        PerceptronGrad {
            weight: dw,
            bias: db,
        },
    )
}

/// Context normalization cache: the normalized output and per-(pair, channel)
/// inverse standard deviations.
#[derive(Debug, Clone)]
pub struct ContextNormCache {
    pub out: FeatureMap,
    /// `B × C`.
    pub inv_std: Array2<f64>,
}

/// Standardizes every channel across the correspondences of each pair.
pub fn context_norm_forward(exec: Execution, x: &FeatureMap) -> ContextNormCache {
    let (n, c, pairs) = (x.n(), x.channels(), x.pairs());
    let mut out = Array2::zeros((x.rows(), c));
    let src = flat(x.data());
    let mut stats: Vec<Vec<f64>> = vec![Vec::new(); pairs];
    {
        let blocks = blocks_mut(&mut out, n);
        let mut work: Vec<_> = blocks.into_iter().zip(stats.iter_mut()).collect();
        exec.for_each_mut(&mut work, |b, (dst, inv_out)| {
            let block = &src[b * n * c..(b + 1) * n * c];
            let mean: Vec<f64> = block_sum(block, c).iter().map(|s| s / n as f64).collect();
            let inv: Vec<f64> = block_sq_dev(block, &mean)
                .iter()
                .map(|v| 1.0 / (v / n as f64 + CN_EPSILON).sqrt())
                .collect();
            for (o, row) in dst.chunks_exact_mut(c).zip(block.chunks_exact(c)) {
                for (((o, &v), &m), &s) in o.iter_mut().zip(row).zip(&mean).zip(&inv) {
                    *o = (v - m) * s;
                }
            }
            **inv_out = inv;
        });
    }
    let mut inv_std = Array2::zeros((pairs, c));
    for (b, inv) in stats.iter().enumerate() {
        inv_std.row_mut(b).assign(&ndarray::ArrayView1::from(inv.as_slice()));
    }
    ContextNormCache {
        out: FeatureMap::from_rows(out, pairs),
        inv_std,
    }
}

/// `dx = s · (dy − mean(dy) − y · mean(dy ⊙ y))` per pair and channel.
pub fn context_norm_backward(exec: Execution, cache: &ContextNormCache, dy: &FeatureMap) -> FeatureMap {
    let (n, pairs, c) = (cache.out.n(), cache.out.pairs(), cache.out.channels());
    let y = flat(cache.out.data());
    let mut dx = dy.data().clone();
    let mut blocks = blocks_mut(&mut dx, n);
    exec.for_each_mut(&mut blocks, |b, g| {
        let yb = &y[b * n * c..(b + 1) * n * c];
        let m1: Vec<f64> = block_sum(g, c).iter().map(|s| s / n as f64).collect();
        let m2: Vec<f64> = block_dot(g, yb, c).iter().map(|s| s / n as f64).collect();
        let inv = cache.inv_std.row(b);
        let inv = inv.as_slice().expect("contiguous row");
        for (gr, yr) in g.chunks_exact_mut(c).zip(yb.chunks_exact(c)) {
            for k in 0..c {
                gr[k] = inv[k] * (gr[k] - m1[k] - yr[k] * m2[k]);
            }
        }
    });
    FeatureMap::from_rows(dx, pairs)
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    /// Normalized input before the affine map.
    pub xhat: FeatureMap,
    pub inv_std: Array1<f64>,
    /// Batch statistics (training) or the running statistics used (eval).
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub training: bool,
}

/// Batch normalization pooling statistics over every (pair, correspondence).
pub fn batch_norm_forward(
    exec: Execution,
    x: &FeatureMap,
    p: &BatchNormParams,
    training: bool,
) -> (FeatureMap, BatchNormCache) {
    let (rows, pairs, n, c) = (x.rows(), x.pairs(), x.n(), x.channels());
    let src = flat(x.data());
    let (mean, var) = if training {
        let mean = column_sum(exec, x.data(), pairs) / rows as f64;
        let m = mean.as_slice().expect("contiguous");
        let partials = exec.map(pairs, |b| block_sq_dev(&src[b * n * c..(b + 1) * n * c], m));
        (mean, fold(&partials, c) / rows as f64)
    } else {
        (p.running_mean.clone(), p.running_var.clone())
    };
    let inv_std = var.mapv(|v| 1.0 / (v + p.epsilon).sqrt());
    let (m, s) = (mean.as_slice().unwrap(), inv_std.as_slice().unwrap());
    let (g, bt) = (p.gamma.as_slice().unwrap(), p.beta.as_slice().unwrap());
    let mut xhat = Array2::zeros((rows, c));
    let mut out = Array2::zeros((rows, c));
    {
        let hb = blocks_mut(&mut xhat, n);
        let ob = blocks_mut(&mut out, n);
        let mut work: Vec<_> = hb.into_iter().zip(ob).collect();
        exec.for_each_mut(&mut work, |b, (h, o)| {
            let block = &src[b * n * c..(b + 1) * n * c];
            for ((hr, or), xr) in h.chunks_exact_mut(c).zip(o.chunks_exact_mut(c)).zip(block.chunks_exact(c)) {
                for k in 0..c {
                    let v = (xr[k] - m[k]) * s[k];
                    hr[k] = v;
                    or[k] = g[k] * v + bt[k];
                }
            }
        });
    }
    (
        FeatureMap::from_rows(out, pairs),
        BatchNormCache {
            xhat: FeatureMap::from_rows(xhat, pairs),
            inv_std,
            mean,
            var,
            training,
        },
    )
}

pub fn batch_norm_backward(
    exec: Execution,
    p: &BatchNormParams,
    cache: &BatchNormCache,
    dy: &FeatureMap,
) -> (FeatureMap, BatchNormGrad) {
    let (pairs, n, c) = (dy.pairs(), dy.n(), dy.channels());
    let rows = dy.rows() as f64;
    let xh = flat(cache.xhat.data());
    let g = flat(dy.data());
    let dbeta = column_sum(exec, dy.data(), pairs);
    let partials = exec.map(pairs, |b| {
        let r = b * n * c..(b + 1) * n * c;
        block_dot(&g[r.clone()], &xh[r], c)
    });
    let dgamma = fold(&partials, c);
    let mut dx = dy.data().clone();
    let gm = p.gamma.as_slice().unwrap();
    let s = cache.inv_std.as_slice().unwrap();
    if cache.training {
        // dx̂ = γ dy; dx = s (dx̂ − mean(dx̂) − x̂ mean(dx̂ x̂))
        let m1: Vec<f64> = (0..c).map(|k| dbeta[k] * gm[k] / rows).collect();
        let m2: Vec<f64> = (0..c).map(|k| dgamma[k] * gm[k] / rows).collect();
        let mut blocks = blocks_mut(&mut dx, n);
        exec.for_each_mut(&mut blocks, |b, d| {
            let hb = &xh[b * n * c..(b + 1) * n * c];
            for (dr, hr) in d.chunks_exact_mut(c).zip(hb.chunks_exact(c)) {
                for k in 0..c {
                    dr[k] = s[k] * (gm[k] * dr[k] - m1[k] - hr[k] * m2[k]);
                }
            }
        });
    } else {
        let scale: Vec<f64> = (0..c).map(|k| gm[k] * s[k]).collect();
        for row in flat_mut(&mut dx).chunks_exact_mut(c.max(1)) {
            for (v, &a) in row.iter_mut().zip(&scale) {
                *v *= a;
            }
        }
    }
    (
        FeatureMap::from_rows(dx, pairs),
        BatchNormGrad {
            gamma: dgamma,
            beta: dbeta,
        },
    )
}

/// In-place context normalization without a cache; same arithmetic as
/// [`context_norm_forward`].
pub fn context_norm_inplace(exec: Execution, x: &mut FeatureMap) {
    let (n, c) = (x.n(), x.channels());
    let mut blocks = blocks_mut(x.data_mut(), n);
    exec.for_each_mut(&mut blocks, |_, block| {
        let mean: Vec<f64> = block_sum(block, c).iter().map(|s| s / n as f64).collect();
        let inv: Vec<f64> = block_sq_dev(block, &mean)
            .iter()
            .map(|v| 1.0 / (v / n as f64 + CN_EPSILON).sqrt())
            .collect();
        for row in block.chunks_exact_mut(c) {
            for ((v, &m), &s) in row.iter_mut().zip(&mean).zip(&inv) {
                *v = (*v - m) * s;
            }
        }
    });
}

/// Eval-mode batch norm followed by ReLU, in place.
pub fn batch_norm_relu_eval_inplace(exec: Execution, x: &mut FeatureMap, p: &BatchNormParams) {
    let (n, c) = (x.n(), x.channels());
    let inv_std = p.running_var.mapv(|v| 1.0 / (v + p.epsilon).sqrt());
    let (m, s) = (p.running_mean.as_slice().unwrap(), inv_std.as_slice().unwrap());
    let (g, bt) = (p.gamma.as_slice().unwrap(), p.beta.as_slice().unwrap());
    let mut blocks = blocks_mut(x.data_mut(), n);
    exec.for_each_mut(&mut blocks, |_, block| {
        for row in block.chunks_exact_mut(c) {
            for k in 0..c {
                row[k] = (g[k] * ((row[k] - m[k]) * s[k]) + bt[k]).max(0.0);
            }
        }
    });
}

pub fn relu_forward(x: &FeatureMap) -> FeatureMap {
    let mut out = x.data().clone();
    for v in flat_mut(&mut out) {
        *v = v.max(0.0);
    }
    FeatureMap::from_rows(out, x.pairs())
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &FeatureMap, dy: &FeatureMap) -> FeatureMap {
    let mut dx = dy.data().clone();
    for (g, &o) in flat_mut(&mut dx).iter_mut().zip(flat(out.data())) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    FeatureMap::from_rows(dx, dy.pairs())
}

/// `tanh(ReLU(x))`, in `[0, 1)`.
pub fn trunc_tanh_forward(x: &FeatureMap) -> FeatureMap {
    x.map(|v| v.max(0.0).tanh().min(MAX_WEIGHT))
}

/// Gradient through the truncated tanh given its input and output.
pub fn trunc_tanh_backward(x: &FeatureMap, out: &FeatureMap, dy: &FeatureMap) -> FeatureMap {
    let mut dx = dy.data().clone();
    Zip::from(&mut dx)
        .and(x.data())
        .and(out.data())
        .for_each(|g, &x, &w| {
            *g = if x > 0.0 { *g * (1.0 - w * w) } else { 0.0 };
        });
    FeatureMap::from_rows(dx, dy.pairs())
}
