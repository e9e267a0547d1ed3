//! Packed forward and backward passes.
//!
//! A batch is processed as one matrix of token rows per side (no padding);
//! `Segment`s mark where each sentence starts. Dense layers run over all rows
//! at once, attention runs per sentence and head.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{
    Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, Parameters,
};
use crate::TokenId;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

pub(crate) fn segments(lens: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lens.into_iter()
        .map(|len| {
            let seg = Segment { start, len };
            start += len;
            seg
        })
        .collect()
}

/// Token rows of a batch: sources and decoder inputs, concatenated.
pub(crate) struct Packed<'a> {
    pub src: &'a [TokenId],
    pub src_segs: &'a [Segment],
    pub tgt: &'a [TokenId],
    pub tgt_segs: &'a [Segment],
}

pub(crate) struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

pub(crate) fn linear(l: &Linear, x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

fn linear_backward(l: &Linear, g: &mut Linear, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.weight);
    g.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight.t())
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm_cached(n: &LayerNorm, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let mut y = &xhat * &n.gain;
    y += &n.bias;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm(n: &LayerNorm, x: &Array2<f64>) -> Array2<f64> {
    layer_norm_cached(n, x).0
}

fn layer_norm_backward(
    n: &LayerNorm,
    g: &mut LayerNorm,
    cache: &NormCache,
    dy: &Array2<f64>,
) -> Array2<f64> {
    g.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.bias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * &n.gain;
    for ((mut row, xhat), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(&cache.inv_std)
    {
        let mean = row.sum() / d;
        let mean_proj = row.dot(&xhat) / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|v, &xh| *v = inv * (*v - mean - xh * mean_proj));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct FfnCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

fn ffn_cached(f: &FeedForward, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
    let pre = linear(&f.up, x);
    let act = pre.mapv(gelu);
    let y = linear(&f.down, &act);
    (
        y,
        FfnCache {
            input: x.clone(),
            pre,
            act,
        },
    )
}

pub(crate) fn ffn(f: &FeedForward, x: &Array2<f64>) -> Array2<f64> {
    linear(&f.down, &linear(&f.up, x).mapv(gelu))
}

fn ffn_backward(f: &FeedForward, g: &mut FeedForward, c: &FfnCache, dy: &Array2<f64>) -> Array2<f64> {
    let mut dact = linear_backward(&f.down, &mut g.down, &c.act, dy);
    Zip::from(&mut dact)
        .and(&c.pre)
        .for_each(|d, &p| *d *= gelu_grad(p));
    linear_backward(&f.up, &mut g.up, &c.input, &dact)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Sinusoidal encoding of position `pos` added into `row`.
pub(crate) fn add_positional(pos: usize, row: &mut [f64]) {
    let d = row.len();
    for i in (0..d).step_by(2) {
        let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
        row[i] += angle.sin();
        if i + 1 < d {
            row[i + 1] += angle.cos();
        }
    }
}

fn embed(table: &Array2<f64>, ids: &[TokenId], segs: &[Segment]) -> Array2<f64> {
    let d = table.ncols();
    let scale = (d as f64).sqrt();
    let mut x = Array2::zeros((ids.len(), d));
    for seg in segs {
        for (pos, r) in seg.rows().enumerate() {
            let mut row = x.row_mut(r);
            row.scaled_add(scale, &table.row(ids[r] as usize));
            add_positional(pos, row.as_slice_mut().expect("contiguous"));
        }
    }
    x
}

fn embed_backward(grad_table: &mut Array2<f64>, ids: &[TokenId], dx: &Array2<f64>) {
    let scale = (dx.ncols() as f64).sqrt();
    for (r, &id) in ids.iter().enumerate() {
        grad_table.row_mut(id as usize).scaled_add(scale, &dx.row(r));
    }
}

fn dropout(x: Array2<f64>, ctx: &mut Option<DropoutCtx<'_>>) -> (Array2<f64>, Option<Array2<f64>>) {
    match ctx {
        Some(ctx) if ctx.rate > 0.0 => {
            let keep = 1.0 - ctx.rate;
            let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                if ctx.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            (x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

fn dropout_backward(dy: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

struct AttnCache {
    q_in: Array2<f64>,
    /// `None` for self-attention, where keys and values come from `q_in`.
    kv_in: Option<Array2<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

fn head_scores(
    qh: ArrayView2<'_, f64>,
    kh: ArrayView2<'_, f64>,
    scale: f64,
    causal: bool,
) -> Array2<f64> {
    let mut scores = qh.dot(&kh.t());
    scores *= scale;
    if causal {
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
        }
    }
    for mut row in scores.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous"));
    }
    scores
}

#[allow(clippy::too_many_arguments)]
fn attention_cached(
    a: &Attention,
    q_in: &Array2<f64>,
    kv_in: Option<&Array2<f64>>,
    q_segs: &[Segment],
    k_segs: &[Segment],
    causal: bool,
    n_heads: usize,
) -> (Array2<f64>, AttnCache) {
    let kv_src = kv_in.unwrap_or(q_in);
    let q = linear(&a.query, q_in);
    let k = linear(&a.key, kv_src);
    let v = linear(&a.value, kv_src);
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(q_segs.len() * n_heads);
    for (qs, ks) in q_segs.iter().zip(k_segs) {
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![qs.rows(), cols.clone()]);
            let kh = k.slice(s![ks.rows(), cols.clone()]);
            let vh = v.slice(s![ks.rows(), cols.clone()]);
            let p = head_scores(qh, kh, scale, causal);
            ctx.slice_mut(s![qs.rows(), cols]).assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    let out = linear(&a.output, &ctx);
    let cache = AttnCache {
        q_in: q_in.clone(),
        kv_in: kv_in.cloned(),
        q,
        k,
        v,
        probs,
        ctx,
    };
    (out, cache)
}

/// Returns gradients with respect to the query input and the key/value
/// input. For self-attention the caller adds them.
fn attention_backward(
    a: &Attention,
    g: &mut Attention,
    c: &AttnCache,
    dout: &Array2<f64>,
    q_segs: &[Segment],
    k_segs: &[Segment],
    n_heads: usize,
) -> (Array2<f64>, Array2<f64>) {
    let dctx = linear_backward(&a.output, &mut g.output, &c.ctx, dout);
    let d = c.q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    let mut probs = c.probs.iter();
    for (qs, ks) in q_segs.iter().zip(k_segs) {
        for h in 0..n_heads {
            let p = probs.next().expect("one probability block per segment and head");
            let cols = h * dh..(h + 1) * dh;
            let dctx_h = dctx.slice(s![qs.rows(), cols.clone()]);
            let qh = c.q.slice(s![qs.rows(), cols.clone()]);
            let kh = c.k.slice(s![ks.rows(), cols.clone()]);
            let vh = c.v.slice(s![ks.rows(), cols.clone()]);

            let mut dv_h = dv.slice_mut(s![ks.rows(), cols.clone()]);
            general_mat_mul(1.0, &p.t(), &dctx_h, 1.0, &mut dv_h);

            let mut ds = dctx_h.dot(&vh.t());
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = ds_row.dot(&p_row);
                Zip::from(&mut ds_row)
                    .and(&p_row)
                    .for_each(|v, &pv| *v = pv * (*v - dot) * scale);
            }
            let mut dq_h = dq.slice_mut(s![qs.rows(), cols.clone()]);
            general_mat_mul(1.0, &ds, &kh, 1.0, &mut dq_h);
            let mut dk_h = dk.slice_mut(s![ks.rows(), cols]);
            general_mat_mul(1.0, &ds.t(), &qh, 1.0, &mut dk_h);
        }
    }
    let kv_in = c.kv_in.as_ref().unwrap_or(&c.q_in);
    let dq_in = linear_backward(&a.query, &mut g.query, &c.q_in, &dq);
    let mut dkv = linear_backward(&a.key, &mut g.key, kv_in, &dk);
    dkv += &linear_backward(&a.value, &mut g.value, kv_in, &dv);
    (dq_in, dkv)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct EncLayerCache {
    attn_norm: NormCache,
    attn: AttnCache,
    attn_drop: Option<Array2<f64>>,
    ffn_norm: NormCache,
    ffn: FfnCache,
    ffn_drop: Option<Array2<f64>>,
}

fn encoder_layer(
    layer: &EncoderLayer,
    mut x: Array2<f64>,
    segs: &[Segment],
    n_heads: usize,
    drop: &mut Option<DropoutCtx<'_>>,
) -> (Array2<f64>, EncLayerCache) {
    let (a, attn_norm) = layer_norm_cached(&layer.attn_norm, &x);
    let (att, attn) = attention_cached(&layer.attn, &a, None, segs, segs, false, n_heads);
    let (att, attn_drop) = dropout(att, drop);
    x += &att;
    let (b, ffn_norm) = layer_norm_cached(&layer.ffn_norm, &x);
    let (f, ffn) = ffn_cached(&layer.ffn, &b);
    let (f, ffn_drop) = dropout(f, drop);
    x += &f;
    (
        x,
        EncLayerCache {
            attn_norm,
            attn,
            attn_drop,
            ffn_norm,
            ffn,
            ffn_drop,
        },
    )
}

fn encoder_layer_backward(
    layer: &EncoderLayer,
    g: &mut EncoderLayer,
    c: &EncLayerCache,
    mut dx: Array2<f64>,
    segs: &[Segment],
    n_heads: usize,
) -> Array2<f64> {
    let df = dropout_backward(&dx, &c.ffn_drop);
    let db = ffn_backward(&layer.ffn, &mut g.ffn, &c.ffn, &df);
    dx += &layer_norm_backward(&layer.ffn_norm, &mut g.ffn_norm, &c.ffn_norm, &db);

    let datt = dropout_backward(&dx, &c.attn_drop);
    let (dq, dkv) = attention_backward(&layer.attn, &mut g.attn, &c.attn, &datt, segs, segs, n_heads);
    let da = dq + dkv;
    dx += &layer_norm_backward(&layer.attn_norm, &mut g.attn_norm, &c.attn_norm, &da);
    dx
}

struct DecLayerCache {
    self_norm: NormCache,
    self_attn: AttnCache,
    self_drop: Option<Array2<f64>>,
    cross_norm: NormCache,
    cross_attn: AttnCache,
    cross_drop: Option<Array2<f64>>,
    ffn_norm: NormCache,
    ffn: FfnCache,
    ffn_drop: Option<Array2<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    layer: &DecoderLayer,
    mut x: Array2<f64>,
    memory: &Array2<f64>,
    tgt_segs: &[Segment],
    src_segs: &[Segment],
    n_heads: usize,
    drop: &mut Option<DropoutCtx<'_>>,
) -> (Array2<f64>, DecLayerCache) {
    let (a, self_norm) = layer_norm_cached(&layer.self_norm, &x);
    let (att, self_attn) =
        attention_cached(&layer.self_attn, &a, None, tgt_segs, tgt_segs, true, n_heads);
    let (att, self_drop) = dropout(att, drop);
    x += &att;

    let (b, cross_norm) = layer_norm_cached(&layer.cross_norm, &x);
    let (cross, cross_attn) = attention_cached(
        &layer.cross_attn,
        &b,
        Some(memory),
        tgt_segs,
        src_segs,
        false,
        n_heads,
    );
    let (cross, cross_drop) = dropout(cross, drop);
    x += &cross;

    let (c, ffn_norm) = layer_norm_cached(&layer.ffn_norm, &x);
    let (f, ffn) = ffn_cached(&layer.ffn, &c);
    let (f, ffn_drop) = dropout(f, drop);
    x += &f;
    (
        x,
        DecLayerCache {
            self_norm,
            self_attn,
            self_drop,
            cross_norm,
            cross_attn,
            cross_drop,
            ffn_norm,
            ffn,
            ffn_drop,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer_backward(
    layer: &DecoderLayer,
    g: &mut DecoderLayer,
    c: &DecLayerCache,
    mut dx: Array2<f64>,
    dmemory: &mut Array2<f64>,
    tgt_segs: &[Segment],
    src_segs: &[Segment],
    n_heads: usize,
) -> Array2<f64> {
    let df = dropout_backward(&dx, &c.ffn_drop);
    let dc = ffn_backward(&layer.ffn, &mut g.ffn, &c.ffn, &df);
    dx += &layer_norm_backward(&layer.ffn_norm, &mut g.ffn_norm, &c.ffn_norm, &dc);

    let dcross = dropout_backward(&dx, &c.cross_drop);
    let (db, dmem) = attention_backward(
        &layer.cross_attn,
        &mut g.cross_attn,
        &c.cross_attn,
        &dcross,
        tgt_segs,
        src_segs,
        n_heads,
    );
    *dmemory += &dmem;
    dx += &layer_norm_backward(&layer.cross_norm, &mut g.cross_norm, &c.cross_norm, &db);

    let datt = dropout_backward(&dx, &c.self_drop);
    let (dq, dkv) = attention_backward(
        &layer.self_attn,
        &mut g.self_attn,
        &c.self_attn,
        &datt,
        tgt_segs,
        tgt_segs,
        n_heads,
    );
    let da = dq + dkv;
    dx += &layer_norm_backward(&layer.self_norm, &mut g.self_norm, &c.self_norm, &da);
    dx
}

// ---------------------------------------------------------------------------
// Whole model
// ---------------------------------------------------------------------------

pub(crate) struct ForwardCache {
    enc: Vec<EncLayerCache>,
    enc_final: NormCache,
    memory: Array2<f64>,
    dec: Vec<DecLayerCache>,
    dec_final: NormCache,
    hidden: Array2<f64>,
}

/// Encoder stack output (after the final layer norm), one row per source token.
pub(crate) fn encode_packed(params: &Parameters, src: &[TokenId], segs: &[Segment]) -> Array2<f64> {
    let mut x = embed(&params.src_embed, src, segs);
    for layer in &params.encoder {
        x = encoder_layer(layer, x, segs, params.arch.n_heads, &mut None).0;
    }
    layer_norm(&params.enc_norm, &x)
}

/// Logits for every decoder input row, plus what the backward pass needs.
pub(crate) fn forward_packed(
    params: &Parameters,
    batch: &Packed<'_>,
    mut drop: Option<DropoutCtx<'_>>,
) -> (Array2<f64>, ForwardCache) {
    let n_heads = params.arch.n_heads;
    let mut x = embed(&params.src_embed, batch.src, batch.src_segs);
    let mut enc = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (y, c) = encoder_layer(layer, x, batch.src_segs, n_heads, &mut drop);
        x = y;
        enc.push(c);
    }
    let (memory, enc_final) = layer_norm_cached(&params.enc_norm, &x);

    let mut y = embed(&params.tgt_embed, batch.tgt, batch.tgt_segs);
    let mut dec = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (out, c) = decoder_layer(
            layer,
            y,
            &memory,
            batch.tgt_segs,
            batch.src_segs,
            n_heads,
            &mut drop,
        );
        y = out;
        dec.push(c);
    }
    let (hidden, dec_final) = layer_norm_cached(&params.dec_norm, &y);
    let logits = hidden.dot(&params.tgt_embed.t());
    (
        logits,
        ForwardCache {
            enc,
            enc_final,
            memory,
            dec,
            dec_final,
            hidden,
        },
    )
}

/// Gradients of a loss whose derivative with respect to the logits is
/// `dlogits`.
pub(crate) fn backward_packed(
    params: &Parameters,
    batch: &Packed<'_>,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
) -> Parameters {
    let n_heads = params.arch.n_heads;
    let mut g = params.zeros_like();

    // Output side of the tied embedding.
    general_mat_mul(1.0, &dlogits.t(), &cache.hidden, 1.0, &mut g.tgt_embed);
    let dhidden = dlogits.dot(&params.tgt_embed);
    let mut dy = layer_norm_backward(&params.dec_norm, &mut g.dec_norm, &cache.dec_final, &dhidden);

    let mut dmemory = Array2::zeros(cache.memory.raw_dim());
    for ((layer, gl), c) in params
        .decoder
        .iter()
        .zip(g.decoder.iter_mut())
        .zip(&cache.dec)
        .rev()
    {
        dy = decoder_layer_backward(
            layer,
            gl,
            c,
            dy,
            &mut dmemory,
            batch.tgt_segs,
            batch.src_segs,
            n_heads,
        );
    }
    // Input side of the tied embedding.
    embed_backward(&mut g.tgt_embed, batch.tgt, &dy);

    let mut dx = layer_norm_backward(&params.enc_norm, &mut g.enc_norm, &cache.enc_final, &dmemory);
    for ((layer, gl), c) in params
        .encoder
        .iter()
        .zip(g.encoder.iter_mut())
        .zip(&cache.enc)
        .rev()
    {
        dx = encoder_layer_backward(layer, gl, c, dx, batch.src_segs, n_heads);
    }
    embed_backward(&mut g.src_embed, batch.src, &dx);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((numeric - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let n = LayerNorm {
            gain: Array1::ones(4),
            bias: Array1::zeros(4),
        };
        let x = ndarray::arr2(&[[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]]);
        let y = layer_norm(&n, &x);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.dot(&row) / 4.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn positional_encoding_values() {
        let mut row = vec![0.0; 4];
        add_positional(0, &mut row);
        assert_eq!(row, vec![0.0, 1.0, 0.0, 1.0]);
        let mut row = vec![0.0; 4];
        add_positional(1, &mut row);
        assert!((row[0] - 1f64.sin()).abs() < 1e-15);
        assert!((row[2] - 0.01f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn segments_are_contiguous() {
        let segs = segments([3, 1, 2]);
        assert_eq!(
            segs,
            vec![
                Segment { start: 0, len: 3 },
                Segment { start: 3, len: 1 },
                Segment { start: 4, len: 2 }
            ]
        );
    }
}
