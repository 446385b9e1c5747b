//! Building blocks of the encoder-decoder, each with an explicit backward
//! pass over the flat parameter store.
//!
//! Conventions: feature maps are `(channels, height, width)`, token matrices
//! are `(tokens, dim)`. Every layer's `forward` returns the output plus a
//! cache of exactly the intermediates its `backward` needs; `backward` takes
//! the output gradient, accumulates parameter gradients into a [`GradStore`]
//! and returns the input gradient.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::store::{GradStore, ParamId, ParamStore};

/// 2D convolution (square kernel, zero padding) via im2col and one matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let weight =
            store.alloc(format!("{name}.weight"), &[c_out, fan_in], || dist.sample(rng));
        let bias = store.alloc(format!("{name}.bias"), &[c_out], || 0.0);
        Conv2d { weight, bias, c_in, c_out, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, (ho, wo));
        let mut y = store.view2(self.weight).dot(&cols);
        for (mut row, &b) in y.outer_iter_mut().zip(store.view1(self.bias).iter()) {
            row += b;
        }
        let out = y.into_shape_with_order((self.c_out, ho, wo)).expect("row-major reshape");
        (out, ConvCache { cols, in_dims: (c, h, w), out_hw: (ho, wo) })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        dy: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let (ho, wo) = cache.out_hw;
        let dy2 = dy
            .view()
            .into_shape_with_order((self.c_out, ho * wo))
            .expect("row-major reshape");
        let dw = dy2.dot(&cache.cols.t());
        for (g, v) in grads.slice_mut(store, self.weight).iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, row) in grads.slice_mut(store, self.bias).iter_mut().zip(dy2.outer_iter()) {
            *g += row.sum();
        }
        let dcols = store.view2(self.weight).t().dot(&dy2);
        col2im(&dcols, cache.in_dims, self.k, self.stride, self.pad, cache.out_hw)
    }
}

fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * wo + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Array3<f64> {
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci, iy as usize, ix as usize)] += dcols[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    dx
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of [`relu`] given the pre-activation input.
pub fn relu_backward(dy: &Array3<f64>, pre: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Dense layer on token matrices: y = x W + b.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let weight = store.alloc(format!("{name}.weight"), &[d_in, d_out], || dist.sample(rng));
        let bias = store.alloc(format!("{name}.bias"), &[d_out], || 0.0);
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        debug_assert_eq!(x.ncols(), self.d_in);
        let mut y = x.dot(&store.view2(self.weight));
        let bias = store.view1(self.bias);
        for mut row in y.outer_iter_mut() {
            row += &bias;
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LinearCache,
        dy: &Array2<f64>,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let dw = cache.x.t().dot(dy);
        for (g, v) in grads.slice_mut(store, self.weight).iter_mut().zip(dw.iter()) {
            *g += v;
        }
        let db = dy.sum_axis(Axis(0));
        for (g, v) in grads.slice_mut(store, self.bias).iter_mut().zip(db.iter()) {
            *g += v;
        }
        dy.dot(&store.view2(self.weight).t())
    }
}

/// Per-token layer normalization over the feature dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    pub dim: usize,
    eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.alloc(format!("{name}.gamma"), &[dim], || 1.0);
        let beta = store.alloc(format!("{name}.beta"), &[dim], || 0.0);
        LayerNorm { gamma, beta, dim, eps: 1e-5 }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.nrows();
        let d = self.dim as f64;
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(n);
        let gamma = store.view1(self.gamma);
        let beta = store.view1(self.beta);
        let mut y = Array2::zeros(x.raw_dim());
        for i in 0..n {
            let row = x.row(i);
            let mu = row.sum() / d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[i] = is;
            for j in 0..self.dim {
                let xh = (x[(i, j)] - mu) * is;
                xhat[(i, j)] = xh;
                y[(i, j)] = gamma[j] * xh + beta[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let (n, d) = dy.dim();
        let df = d as f64;
        let gamma = store.view1(self.gamma);
        {
            let dgamma = grads.slice_mut(store, self.gamma);
            for i in 0..n {
                for j in 0..d {
                    dgamma[j] += dy[(i, j)] * cache.xhat[(i, j)];
                }
            }
        }
        {
            let dbeta = grads.slice_mut(store, self.beta);
            for i in 0..n {
                for j in 0..d {
                    dbeta[j] += dy[(i, j)];
                }
            }
        }
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..n {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..d {
                let dxh = dy[(i, j)] * gamma[j];
                m1 += dxh;
                m2 += dxh * cache.xhat[(i, j)];
            }
            m1 /= df;
            m2 /= df;
            for j in 0..d {
                let dxh = dy[(i, j)] * gamma[j];
                dx[(i, j)] = cache.inv_std[i] * (dxh - m1 - cache.xhat[(i, j)] * m2);
            }
        }
        dx
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

/// Given dL/dsoftmax and the softmax output, dL/dlogits per row.
fn softmax_rows_backward(dy: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dot: f64 = dy.row(i).iter().zip(y.row(i).iter()).map(|(a, b)| a * b).sum();
        for j in 0..dy.ncols() {
            dx[(i, j)] = y[(i, j)] * (dy[(i, j)] - dot);
        }
    }
    dx
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Multi-head self-attention with learned projections on all four paths.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    lq: LinearCache,
    lk: LinearCache,
    lv: LinearCache,
    lo: LinearCache,
    /// Post-softmax attention, one (tokens x tokens) matrix per head. Rows
    /// are convex weights over keys: nonnegative, summing to 1.
    pub attn: Vec<Array2<f64>>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "embed dim must divide into heads");
        let std = 0.02;
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim, std),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim, std),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim, std),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim, std),
            heads,
            dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, lq) = self.wq.forward(store, x);
        let (k, lk) = self.wk.forward(store, x);
        let (v, lv) = self.wv.forward(store, x);
        let mut concat = Array2::zeros((n, self.dim));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * scale;
            let a = softmax_rows(&scores);
            let oh = a.dot(&vh);
            concat.slice_mut(cols).assign(&oh);
            attn.push(a);
        }
        let (y, lo) = self.wo.forward(store, &concat);
        (y, AttentionCache { q, k, v, lq, lk, lv, lo, attn })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.wo.backward(store, &cache.lo, dy, grads);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let doh = dconcat.slice(cols);
            let a = &cache.attn[h];
            let vh = cache.v.slice(cols);
            let da = doh.dot(&vh.t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let dscores = softmax_rows_backward(&da, a);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            dq.slice_mut(cols).assign(&(dscores.dot(&kh) * scale));
            dk.slice_mut(cols).assign(&(dscores.t().dot(&qh) * scale));
        }
        let mut dx = self.wq.backward(store, &cache.lq, &dq, grads);
        dx += &self.wk.backward(store, &cache.lk, &dk, grads);
        dx += &self.wv.backward(store, &cache.lv, &dv, grads);
        dx
    }
}

/// Pre-norm transformer layer: attention and feed-forward sublayers, each
/// wrapped in layer norm and a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct TransformerCache {
    ln1c: LayerNormCache,
    attnc: AttentionCache,
    ln2c: LayerNormCache,
    fc1c: LinearCache,
    hidden_pre: Array2<f64>,
    fc2c: LinearCache,
}

impl TransformerCache {
    pub fn attention(&self) -> &[Array2<f64>] {
        &self.attnc.attn
    }
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        TransformerLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, ffn_dim, 0.02),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), ffn_dim, dim, 0.02),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, TransformerCache) {
        let (a, ln1c) = self.ln1.forward(store, x);
        let (m, attnc) = self.attn.forward(store, &a);
        let x1 = x + &m;
        let (b, ln2c) = self.ln2.forward(store, &x1);
        let (hidden_pre, fc1c) = self.fc1.forward(store, &b);
        let hidden = hidden_pre.mapv(gelu_scalar);
        let (f, fc2c) = self.fc2.forward(store, &hidden);
        let y = &x1 + &f;
        (y, TransformerCache { ln1c, attnc, ln2c, fc1c, hidden_pre, fc2c })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &TransformerCache,
        dy: &Array2<f64>,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let dhidden = self.fc2.backward(store, &cache.fc2c, dy, grads);
        let mut dpre = dhidden;
        dpre.zip_mut_with(&cache.hidden_pre, |d, &p| *d *= gelu_grad_scalar(p));
        let db = self.fc1.backward(store, &cache.fc1c, &dpre, grads);
        let mut dx1 = self.ln2.backward(store, &cache.ln2c, &db, grads);
        dx1 += dy;
        let da = self.attn.backward(store, &cache.attnc, &dx1, grads);
        let mut dx = self.ln1.backward(store, &cache.ln1c, &da, grads);
        dx += &dx1;
        dx
    }
}

/// Non-overlapping patch flattening followed by a learned linear embedding
/// plus an additive learned position table: z0 = [x_p E] + E_pos.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    embed: ParamId,
    pos: ParamId,
    pub patch: usize,
    pub c_in: usize,
    /// Tokens per side of the square token grid.
    pub grid: usize,
    pub dim: usize,
}

pub struct PatchEmbedCache {
    patches: Array2<f64>,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        patch: usize,
        grid: usize,
        dim: usize,
    ) -> Self {
        let dist = Normal::new(0.0, 0.02).expect("finite std");
        let embed = store.alloc(
            format!("{name}.embed"),
            &[patch * patch * c_in, dim],
            || dist.sample(rng),
        );
        let pos = store.alloc(format!("{name}.pos"), &[grid * grid, dim], || dist.sample(rng));
        PatchEmbed { embed, pos, patch, c_in, grid, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array2<f64>, PatchEmbedCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        debug_assert_eq!(h, self.grid * self.patch);
        debug_assert_eq!(w, self.grid * self.patch);
        let p = self.patch;
        let n = self.grid * self.grid;
        let mut patches = Array2::zeros((n, p * p * c));
        for ty in 0..self.grid {
            for tx in 0..self.grid {
                let token = ty * self.grid + tx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            patches[(token, ci * p * p + py * p + px)] =
                                x[(ci, ty * p + py, tx * p + px)];
                        }
                    }
                }
            }
        }
        let mut y = patches.dot(&store.view2(self.embed));
        let pos = store.view2(self.pos);
        y += &pos;
        (y, PatchEmbedCache { patches })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &PatchEmbedCache,
        dy: &Array2<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let de = cache.patches.t().dot(dy);
        for (g, v) in grads.slice_mut(store, self.embed).iter_mut().zip(de.iter()) {
            *g += v;
        }
        for (g, v) in grads.slice_mut(store, self.pos).iter_mut().zip(dy.iter()) {
            *g += v;
        }
        let dpatches = dy.dot(&store.view2(self.embed).t());
        let p = self.patch;
        let c = self.c_in;
        let side = self.grid * p;
        let mut dx = Array3::zeros((c, side, side));
        for ty in 0..self.grid {
            for tx in 0..self.grid {
                let token = ty * self.grid + tx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            dx[(ci, ty * p + py, tx * p + px)] =
                                dpatches[(token, ci * p * p + py * p + px)];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| x[(ci, i / 2, j / 2)])
}

/// Backward of [`upsample2`]: each input cell collects its 2x2 block.
pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::zeros((c, h2 / 2, w2 / 2));
    for ci in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                dx[(ci, i / 2, j / 2)] += dy[(ci, i, j)];
            }
        }
    }
    dx
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    debug_assert_eq!((h, w), (hb, wb));
    let mut out = Array3::zeros((ca + cb, h, w));
    out.slice_mut(s![..ca, .., ..]).assign(a);
    out.slice_mut(s![ca.., .., ..]).assign(b);
    out
}

/// Backward of [`concat_channels`].
pub fn split_channels(d: &Array3<f64>, c_a: usize) -> (Array3<f64>, Array3<f64>) {
    (d.slice(s![..c_a, .., ..]).to_owned(), d.slice(s![c_a.., .., ..]).to_owned())
}
