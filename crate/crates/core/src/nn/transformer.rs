//! Modality-specific temporal transformer encoder.
//!
//! A learnable classification token is prepended to the frame tokens, learnable
//! positional rows are added, and `depth` pre-norm blocks
//! (`x + Drop(Attn(LN(x)))`, then `x + Drop(FFN(LN(x)))`, GELU inside the FFN)
//! are applied. The pooled representation is the final layer-normed
//! classification-token row.
//!
//! Sequences of a batch are stacked row-wise so the dense projections run as
//! one matrix product; attention is computed per sequence. Only the
//! classification row of the last block feeds the output, so that block
//! evaluates its queries, output projection and FFN for that row alone.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::ops::{gelu, gelu_grad, normal_init, softmax_rows, Affine, LayerNorm, Linear, NormCache};
use super::params::{join, Parameters};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_multiplier: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
    pub use_positional: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            model_dim: 512,
            num_heads: 8,
            ffn_multiplier: 4,
            dropout_rate: 0.15,
            max_seq_len: 64,
            use_positional: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::Config("ffn_multiplier must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.model_dim * self.ffn_multiplier
    }
}

/// Pooled modality-level representation (`h_v` or `h_a`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityRepr {
    pub vector: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub query: Affine,
    /// No bias: attention weights are invariant to a per-query shift.
    pub key: Linear,
    pub value: Affine,
    pub attn_out: Affine,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Affine,
    pub ffn_out: Affine,
}

impl EncoderLayer {
    fn init(cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim();
        Self {
            attn_norm: LayerNorm::new(d),
            query: Affine::glorot(d, d, rng),
            key: Linear::glorot(d, d, rng),
            value: Affine::glorot(d, d, rng),
            attn_out: Affine::glorot(d, d, rng),
            ffn_norm: LayerNorm::new(d),
            ffn_in: Affine::glorot(d, f, rng),
            ffn_out: Affine::glorot(f, d, rng),
        }
    }
}

impl Parameters for EncoderLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        self.attn_norm.visit(&join(prefix, "attn_norm"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.attn_out.visit(&join(prefix, "attn_out"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.attn_out.visit_mut(&join(prefix, "attn_out"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub cls_token: Array1<f64>,
    /// `max_seq_len + 1` rows; row 0 belongs to the classification token.
    pub positional: Array2<f64>,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl Parameters for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        f(
            &join(prefix, "cls_token"),
            self.cls_token.shape(),
            self.cls_token.as_slice().expect("standard layout"),
        );
        f(
            &join(prefix, "positional"),
            self.positional.shape(),
            self.positional.as_slice().expect("standard layout"),
        );
        self.layers.visit(&join(prefix, "layers"), f);
        self.final_norm.visit(&join(prefix, "final_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &join(prefix, "cls_token"),
            self.cls_token.as_slice_mut().expect("standard layout"),
        );
        f(
            &join(prefix, "positional"),
            self.positional.as_slice_mut().expect("standard layout"),
        );
        self.layers.visit_mut(&join(prefix, "layers"), f);
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
    }
}

/// Row layout of a stacked batch: sequence `b` occupies rows
/// `offsets[b] .. offsets[b] + lens[b]`, its classification token first.
#[derive(Clone, Debug)]
struct Layout {
    offsets: Vec<usize>,
    lens: Vec<usize>,
    rows: usize,
}

impl Layout {
    fn new(token_counts: impl Iterator<Item = usize>) -> Self {
        let mut offsets = Vec::new();
        let mut lens = Vec::new();
        let mut rows = 0;
        for t in token_counts {
            offsets.push(rows);
            lens.push(t + 1);
            rows += t + 1;
        }
        Self {
            offsets,
            lens,
            rows,
        }
    }

    fn batch(&self) -> usize {
        self.offsets.len()
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    cls_only: bool,
    ln1: NormCache,
    a: Array2<f64>,
    a_q: Option<Array2<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    mask1: Option<Array2<f64>>,
    ln2: NormCache,
    b: Array2<f64>,
    h1: Array2<f64>,
    g: Array2<f64>,
    mask2: Option<Array2<f64>>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    layout: Layout,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
}

impl EncoderCache {
    /// Attention probabilities of layer `layer`, sequence `seq`, head `head`.
    pub fn attention(&self, layer: usize, seq: usize, head: usize) -> &Array2<f64> {
        let heads = self.layers[layer].probs.len() / self.layout.batch();
        &self.layers[layer].probs[seq * heads + head]
    }
}

pub(crate) fn reborrow<'b>(rng: &'b mut Option<&mut dyn RngCore>) -> Option<&'b mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn dropout_mask(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: Option<&mut dyn RngCore>,
) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Some(Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            0.0
        }
    }))
}

impl EncoderParams {
    pub fn init(cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let layers = (0..cfg.depth).map(|_| EncoderLayer::init(cfg, rng)).collect();
        let cls = normal_init((1, d), 0.02, rng);
        Self {
            cls_token: cls.row(0).to_owned(),
            positional: normal_init((cfg.max_seq_len + 1, d), 0.02, rng),
            layers,
            final_norm: LayerNorm::new(d),
        }
    }

    fn check_shapes(&self, cfg: &TransformerConfig) -> Result<()> {
        let d = cfg.model_dim;
        if self.cls_token.len() != d
            || self.positional.dim() != (cfg.max_seq_len + 1, d)
            || self.layers.len() != cfg.depth
            || self.layers.iter().any(|l| {
                l.query.weight.dim() != (d, d) || l.ffn_in.weight.dim() != (d, cfg.ffn_dim())
            })
        {
            return Err(Error::Shape("encoder parameters do not match config".into()));
        }
        Ok(())
    }

    /// Encodes a batch of token sequences (`T_b x model_dim` each) into one
    /// pooled row per sequence. Dropout is active iff `dropout` is `Some`.
    pub fn forward_batch(
        &self,
        cfg: &TransformerConfig,
        seqs: &[ArrayView2<'_, f64>],
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<f64>, EncoderCache)> {
        self.check_shapes(cfg)?;
        let d = cfg.model_dim;
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for x in seqs {
            let (t, w) = x.dim();
            if t == 0 || t > cfg.max_seq_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence length {t} outside [1, {}]",
                    cfg.max_seq_len
                )));
            }
            if w != d {
                return Err(Error::Shape(format!("token width {w} != model_dim {d}")));
            }
        }
        let layout = Layout::new(seqs.iter().map(|x| x.nrows()));
        let mut s0 = Array2::zeros((layout.rows, d));
        for (b, x) in seqs.iter().enumerate() {
            let off = layout.offsets[b];
            let n = layout.lens[b];
            s0.row_mut(off).assign(&self.cls_token);
            s0.slice_mut(s![off + 1..off + n, ..]).assign(x);
            if cfg.use_positional {
                let mut block = s0.slice_mut(s![off..off + n, ..]);
                block += &self.positional.slice(s![0..n, ..]);
            }
        }

        let mut s = s0;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let cls_only = l + 1 == self.layers.len();
            let (next, cache) =
                layer_forward(layer, cfg, &layout, s, cls_only, reborrow(&mut dropout));
            s = next;
            caches.push(cache);
        }
        let (out, final_cache) = self.final_norm.forward(s.view());
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite("encoder output", i));
        }
        Ok((
            out,
            EncoderCache {
                layout,
                layers: caches,
                final_norm: final_cache,
            },
        ))
    }

    /// Back-propagates `d_out` (`batch x model_dim`), accumulating parameter
    /// gradients into `grad`. Returns gradients of the input tokens, stacked in
    /// batch order (`sum_b T_b x model_dim`).
    pub fn backward_batch(
        &self,
        cfg: &TransformerConfig,
        cache: &EncoderCache,
        d_out: ArrayView2<'_, f64>,
        grad: &mut EncoderParams,
    ) -> Array2<f64> {
        let layout = &cache.layout;
        let mut ds = self
            .final_norm
            .backward(&cache.final_norm, d_out, &mut grad.final_norm);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            ds = layer_backward(layer, cfg, layout, &cache.layers[l], ds, &mut grad.layers[l]);
        }
        let tokens: usize = layout.lens.iter().map(|n| n - 1).sum();
        let mut d_tokens = Array2::zeros((tokens, cfg.model_dim));
        let mut row = 0;
        for b in 0..layout.batch() {
            let off = layout.offsets[b];
            let n = layout.lens[b];
            grad.cls_token += &ds.row(off);
            if cfg.use_positional {
                let mut block = grad.positional.slice_mut(s![0..n, ..]);
                block += &ds.slice(s![off..off + n, ..]);
            }
            d_tokens
                .slice_mut(s![row..row + n - 1, ..])
                .assign(&ds.slice(s![off + 1..off + n, ..]));
            row += n - 1;
        }
        d_tokens
    }

    /// Single-sequence convenience wrapper around [`Self::forward_batch`].
    pub fn encode_sequence(
        &self,
        tokens: ArrayView2<'_, f64>,
        cfg: &TransformerConfig,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<ModalityRepr> {
        let (out, _) = self.forward_batch(cfg, &[tokens], dropout)?;
        Ok(ModalityRepr {
            vector: out.row(0).to_owned(),
        })
    }
}

fn layer_forward(
    layer: &EncoderLayer,
    cfg: &TransformerConfig,
    layout: &Layout,
    s: Array2<f64>,
    cls_only: bool,
    mut dropout: Option<&mut dyn RngCore>,
) -> (Array2<f64>, LayerCache) {
    let d = cfg.model_dim;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layer.attn_norm.forward(s.view());
    let a_q = cls_only.then(|| a.select(Axis(0), &layout.offsets));
    let q = layer.query.forward(a_q.as_ref().unwrap_or(&a).view());
    let k = layer.key.forward(a.view());
    let v = layer.value.forward(a.view());

    let mut o = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(layout.batch() * heads);
    for b in 0..layout.batch() {
        let off = layout.offsets[b];
        let n = layout.lens[b];
        let (qoff, nq) = if cls_only { (b, 1) } else { (off, n) };
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![qoff..qoff + nq, cols.clone()]);
            let kh = k.slice(s![off..off + n, cols.clone()]);
            let vh = v.slice(s![off..off + n, cols.clone()]);
            let mut p = qh.dot(&kh.t());
            p *= scale;
            softmax_rows(&mut p);
            o.slice_mut(s![qoff..qoff + nq, cols]).assign(&p.dot(&vh));
            probs.push(p);
        }
    }

    let mut att = layer.attn_out.forward(o.view());
    let mask1 = dropout_mask(att.nrows(), d, cfg.dropout_rate, reborrow(&mut dropout));
    if let Some(m) = &mask1 {
        att *= m;
    }
    let mut s_mid = if cls_only {
        s.select(Axis(0), &layout.offsets)
    } else {
        s
    };
    s_mid += &att;

    let (bn, ln2) = layer.ffn_norm.forward(s_mid.view());
    let h1 = layer.ffn_in.forward(bn.view());
    let g = h1.mapv(gelu);
    let mut f2 = layer.ffn_out.forward(g.view());
    let mask2 = dropout_mask(f2.nrows(), d, cfg.dropout_rate, reborrow(&mut dropout));
    if let Some(m) = &mask2 {
        f2 *= m;
    }
    let mut s_out = s_mid;
    s_out += &f2;

    (
        s_out,
        LayerCache {
            cls_only,
            ln1,
            a,
            a_q,
            q,
            k,
            v,
            probs,
            o,
            mask1,
            ln2,
            b: bn,
            h1,
            g,
            mask2,
        },
    )
}

fn layer_backward(
    layer: &EncoderLayer,
    cfg: &TransformerConfig,
    layout: &Layout,
    c: &LayerCache,
    d_s_out: Array2<f64>,
    grad: &mut EncoderLayer,
) -> Array2<f64> {
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    let mut d_f2 = d_s_out.clone();
    if let Some(m) = &c.mask2 {
        d_f2 *= m;
    }
    let mut dh1 = layer
        .ffn_out
        .backward(c.g.view(), d_f2.view(), &mut grad.ffn_out, true)
        .expect("input grad requested");
    dh1.zip_mut_with(&c.h1, |g, &x| *g *= gelu_grad(x));
    let d_bn = layer
        .ffn_in
        .backward(c.b.view(), dh1.view(), &mut grad.ffn_in, true)
        .expect("input grad requested");
    let mut d_s_mid = d_s_out;
    d_s_mid += &layer.ffn_norm.backward(&c.ln2, d_bn.view(), &mut grad.ffn_norm);

    // attention branch
    let mut d_att = d_s_mid.clone();
    if let Some(m) = &c.mask1 {
        d_att *= m;
    }
    let d_o = layer
        .attn_out
        .backward(c.o.view(), d_att.view(), &mut grad.attn_out, true)
        .expect("input grad requested");

    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for b in 0..layout.batch() {
        let off = layout.offsets[b];
        let n = layout.lens[b];
        let (qoff, nq) = if c.cls_only { (b, 1) } else { (off, n) };
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &c.probs[b * heads + h];
            let d_oh = d_o.slice(s![qoff..qoff + nq, cols.clone()]);
            let qh = c.q.slice(s![qoff..qoff + nq, cols.clone()]);
            let kh = c.k.slice(s![off..off + n, cols.clone()]);
            let vh = c.v.slice(s![off..off + n, cols.clone()]);

            let dp = d_oh.dot(&vh.t());
            {
                let mut dvh = dv.slice_mut(s![off..off + n, cols.clone()]);
                dvh += &p.t().dot(&d_oh);
            }
            let mut dsc = dp;
            for (mut drow, prow) in dsc.outer_iter_mut().zip(p.outer_iter()) {
                let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                drow.zip_mut_with(&prow, |dv, &pv| *dv = pv * (*dv - dot) * scale);
            }
            dq.slice_mut(s![qoff..qoff + nq, cols.clone()])
                .assign(&dsc.dot(&kh));
            let mut dkh = dk.slice_mut(s![off..off + n, cols]);
            dkh += &dsc.t().dot(&qh);
        }
    }

    let mut da = layer
        .key
        .backward(c.a.view(), dk.view(), &mut grad.key, true)
        .expect("input grad requested");
    da += &layer
        .value
        .backward(c.a.view(), dv.view(), &mut grad.value, true)
        .expect("input grad requested");
    let da_q = layer
        .query
        .backward(c.a_q.as_ref().unwrap_or(&c.a).view(), dq.view(), &mut grad.query, true)
        .expect("input grad requested");
    if c.cls_only {
        for (i, &r) in layout.offsets.iter().enumerate() {
            let mut row = da.row_mut(r);
            row += &da_q.row(i);
        }
    } else {
        da += &da_q;
    }

    let mut d_s_in = layer.attn_norm.backward(&c.ln1, da.view(), &mut grad.attn_norm);
    if c.cls_only {
        for (i, &r) in layout.offsets.iter().enumerate() {
            let mut row = d_s_in.row_mut(r);
            row += &d_s_mid.row(i);
        }
    } else {
        d_s_in += &d_s_mid;
    }
    d_s_in
}
