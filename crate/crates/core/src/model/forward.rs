//! Forward and backward passes of the grounded transformer.

use serde::{Deserialize, Serialize};

use super::ops::{
    acc_bias_grad, add_bias, gelu, gelu_grad, highlighted_softmax, layer_norm, layer_norm_backward, matmul,
    matmul_acc_at, matmul_acc_bt,
};
use super::{BlockLayout, ModelParams};
use crate::error::{Error, Result};

/// Attention highlight over image patches: `log_beta` is added to the
/// attention logits of every highlighted patch key.
#[derive(Debug, Clone, PartialEq)]
pub struct Highlight {
    pub patches: Vec<bool>,
    pub log_beta: f64,
    /// Reweight attention inside the vision encoder.
    pub vision: bool,
    /// Also reweight image-position keys inside the language layers.
    pub llm: bool,
}

impl Highlight {
    pub fn is_empty(&self) -> bool {
        !self.patches.iter().any(|&b| b)
    }
}

/// What one forward pass exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub n_patches: usize,
    pub n_text: usize,
    /// Per vision layer, `heads × N × N` attention probabilities.
    pub vision_attention: Vec<Vec<f64>>,
    /// Per language layer, `heads × L × L` with `L = N + n_text`.
    pub llm_attention: Vec<Vec<f64>>,
    /// Patch embeddings entering the vision encoder, `N × d`. The
    /// segmentation head keys on these.
    pub patch_embeddings: Vec<f64>,
    /// Vision encoder output, `N × d`.
    pub patch_features: Vec<f64>,
    /// Final-layer hidden states after the last norm, `L × d`.
    pub hidden: Vec<f64>,
    /// Next-token logits for every text position, `n_text × V`.
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn text_hidden(&self, t: usize, d: usize) -> &[f64] {
        let row = self.n_patches + t;
        &self.hidden[row * d..(row + 1) * d]
    }

    pub fn logits_at(&self, t: usize) -> &[f64] {
        let v = self.logits.len() / self.n_text.max(1);
        &self.logits[t * v..(t + 1) * v]
    }
}

struct BlockCache {
    ln1: Vec<f64>,
    ln1_hat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    ctx: Vec<f64>,
    ln2: Vec<f64>,
    ln2_hat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) struct ForwardCache {
    patches: Vec<f64>,
    tokens: Vec<usize>,
    vision: Vec<BlockCache>,
    llm: Vec<BlockCache>,
    lnf_hat: Vec<f64>,
    lnf_rstd: Vec<f64>,
}

struct Dims {
    len: usize,
    d: usize,
    ff: usize,
    heads: usize,
}

/// Which keys get the highlight bias: key `j` is highlighted iff
/// `j < mask.len() && mask[j]`.
type KeyHighlight<'a> = Option<(&'a [bool], f64)>;

fn block_forward(
    data: &[f64],
    b: &BlockLayout,
    x: Vec<f64>,
    dims: &Dims,
    causal: bool,
    highlight: KeyHighlight<'_>,
) -> (Vec<f64>, BlockCache) {
    let Dims { len, d, ff, heads } = *dims;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let w = |r: &std::ops::Range<usize>| &data[r.clone()];

    let (ln1, ln1_hat, ln1_rstd) = layer_norm(&x, w(&b.ln1_g), w(&b.ln1_b));
    let q = matmul(&ln1, w(&b.wq), len, d, d);
    let k = matmul(&ln1, w(&b.wk), len, d, d);
    let v = matmul(&ln1, w(&b.wv), len, d, d);

    let mut att = vec![0.0; heads * len * len];
    let mut ctx = vec![0.0; len * d];
    let mut row = vec![0.0; len];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..len {
            let keys = if causal { i + 1 } else { len };
            let qi = &q[i * d + off..i * d + off + hd];
            for (j, s) in row[..keys].iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + hd];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            match highlight {
                Some((mask, log_beta)) => {
                    highlighted_softmax(&mut row[..keys], |j| j < mask.len() && mask[j], log_beta)
                }
                None => super::ops::softmax_in_place(&mut row[..keys]),
            }
            let arow = &mut att[(h * len + i) * len..(h * len + i + 1) * len];
            arow[..keys].copy_from_slice(&row[..keys]);
            let ci = &mut ctx[i * d + off..i * d + off + hd];
            for (j, &a) in row[..keys].iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + hd];
                for (c, &vv) in ci.iter_mut().zip(vj) {
                    *c += a * vv;
                }
            }
        }
    }
    let attn_out = matmul(&ctx, w(&b.wo), len, d, d);
    let x1: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

    let (ln2, ln2_hat, ln2_rstd) = layer_norm(&x1, w(&b.ln2_g), w(&b.ln2_b));
    let mut pre = matmul(&ln2, w(&b.w1), len, d, ff);
    add_bias(&mut pre, w(&b.b1));
    let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let mut f = matmul(&act, w(&b.w2), len, ff, d);
    add_bias(&mut f, w(&b.b2));
    let out: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();

    let cache = BlockCache {
        ln1,
        ln1_hat,
        ln1_rstd,
        q,
        k,
        v,
        att,
        ctx,
        ln2,
        ln2_hat,
        ln2_rstd,
        pre,
        act,
    };
    (out, cache)
}

fn block_backward(
    data: &[f64],
    grad: &mut [f64],
    b: &BlockLayout,
    cache: &BlockCache,
    dout: &[f64],
    dims: &Dims,
    causal: bool,
) -> Vec<f64> {
    let Dims { len, d, ff, heads } = *dims;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let w = |r: &std::ops::Range<usize>| &data[r.clone()];

    // feed-forward
    let mut dx1 = dout.to_vec();
    matmul_acc_at(&cache.act, dout, len, ff, d, &mut grad[b.w2.clone()]);
    acc_bias_grad(dout, &mut grad[b.b2.clone()]);
    let mut dact = vec![0.0; len * ff];
    matmul_acc_bt(dout, w(&b.w2), len, ff, d, &mut dact);
    let dpre: Vec<f64> = dact.iter().zip(&cache.pre).map(|(g, &p)| g * gelu_grad(p)).collect();
    matmul_acc_at(&cache.ln2, &dpre, len, d, ff, &mut grad[b.w1.clone()]);
    acc_bias_grad(&dpre, &mut grad[b.b1.clone()]);
    let mut dln2 = vec![0.0; len * d];
    matmul_acc_bt(&dpre, w(&b.w1), len, d, ff, &mut dln2);
    let (g2, rest) = split_two(grad, &b.ln2_g, &b.ln2_b);
    let dx1_ln = layer_norm_backward(&dln2, &cache.ln2_hat, &cache.ln2_rstd, w(&b.ln2_g), g2, rest);
    for (a, b) in dx1.iter_mut().zip(&dx1_ln) {
        *a += b;
    }

    // attention
    matmul_acc_at(&cache.ctx, &dx1, len, d, d, &mut grad[b.wo.clone()]);
    let mut dctx = vec![0.0; len * d];
    matmul_acc_bt(&dx1, w(&b.wo), len, d, d, &mut dctx);
    let mut dq = vec![0.0; len * d];
    let mut dk = vec![0.0; len * d];
    let mut dv = vec![0.0; len * d];
    let mut da = vec![0.0; len];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..len {
            let keys = if causal { i + 1 } else { len };
            let arow = &cache.att[(h * len + i) * len..(h * len + i) * len + keys];
            let dci = &dctx[i * d + off..i * d + off + hd];
            let mut dot = 0.0;
            for j in 0..keys {
                let vj = &cache.v[j * d + off..j * d + off + hd];
                da[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += arow[j] * da[j];
                let dvj = &mut dv[j * d + off..j * d + off + hd];
                for (g, &c) in dvj.iter_mut().zip(dci) {
                    *g += arow[j] * c;
                }
            }
            for j in 0..keys {
                let ds = arow[j] * (da[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..hd {
                    dq[i * d + off + t] += ds * cache.k[j * d + off + t];
                    dk[j * d + off + t] += ds * cache.q[i * d + off + t];
                }
            }
        }
    }
    matmul_acc_at(&cache.ln1, &dq, len, d, d, &mut grad[b.wq.clone()]);
    matmul_acc_at(&cache.ln1, &dk, len, d, d, &mut grad[b.wk.clone()]);
    matmul_acc_at(&cache.ln1, &dv, len, d, d, &mut grad[b.wv.clone()]);
    let mut dln1 = vec![0.0; len * d];
    matmul_acc_bt(&dq, w(&b.wq), len, d, d, &mut dln1);
    matmul_acc_bt(&dk, w(&b.wk), len, d, d, &mut dln1);
    matmul_acc_bt(&dv, w(&b.wv), len, d, d, &mut dln1);
    let (g1, b1) = split_two(grad, &b.ln1_g, &b.ln1_b);
    let dx_ln = layer_norm_backward(&dln1, &cache.ln1_hat, &cache.ln1_rstd, w(&b.ln1_g), g1, b1);
    dx1.iter().zip(&dx_ln).map(|(a, b)| a + b).collect()
}

/// Two disjoint mutable sub-slices of the gradient vector; `first` must
/// precede `second`.
fn split_two<'a>(
    grad: &'a mut [f64],
    first: &std::ops::Range<usize>,
    second: &std::ops::Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(first.end <= second.start);
    let (lo, hi) = grad.split_at_mut(second.start);
    (&mut lo[first.clone()], &mut hi[..second.len()])
}

/// Cuts the image into `patch_size²` vectors, centred on zero.
pub fn image_patches(params: &ModelParams, image: &[f64]) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let side = cfg.image_size();
    if image.len() != side * side {
        return Err(Error::ShapeMismatch(format!(
            "image has {} pixels, model expects {side}x{side}",
            image.len()
        )));
    }
    let (g, s) = (cfg.patch_grid, cfg.patch_size);
    let mut out = vec![0.0; g * g * s * s];
    for py in 0..g {
        for px in 0..g {
            let base = (py * g + px) * s * s;
            for dy in 0..s {
                for dx in 0..s {
                    out[base + dy * s + dx] = image[(py * s + dy) * side + px * s + dx] - 0.5;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn forward_cached(
    params: &ModelParams,
    tokens: &[usize],
    image: &[f64],
    highlight: Option<&Highlight>,
) -> Result<(ForwardTrace, ForwardCache)> {
    let cfg = &params.config;
    let l = &params.layout;
    let data = &params.data;
    if tokens.len() > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size()) {
        return Err(Error::ShapeMismatch(format!("token id {bad} outside vocabulary")));
    }
    let n = cfg.n_patches();
    if let Some(h) = highlight {
        if h.patches.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "highlight covers {} patches, model has {n}",
                h.patches.len()
            )));
        }
    }
    let d = cfg.d_model;
    let t_len = tokens.len();
    let len = n + t_len;
    let v_size = cfg.vocab_size();

    let patches = image_patches(params, image)?;
    let mut x = matmul(&patches, params.get(&l.patch_w), n, cfg.patch_dim(), d);
    add_bias(&mut x, params.get(&l.patch_b));
    for (a, b) in x.iter_mut().zip(params.get(&l.img_pos)) {
        *a += b;
    }

    let embeddings = x.clone();
    let vis_dims = Dims { len: n, d, ff: cfg.d_ff, heads: cfg.n_heads };
    let vis_hl: KeyHighlight<'_> = highlight
        .filter(|h| h.vision)
        .map(|h| (h.patches.as_slice(), h.log_beta));
    let mut vision = Vec::with_capacity(l.vision.len());
    for b in &l.vision {
        let (out, cache) = block_forward(data, b, x, &vis_dims, false, vis_hl);
        vision.push(cache);
        x = out;
    }
    let features = x;

    let mut seq = matmul(&features, params.get(&l.vis_proj_w), n, d, d);
    add_bias(&mut seq, params.get(&l.vis_proj_b));
    seq.reserve(t_len * d);
    let emb = params.get(&l.tok_emb);
    let pos = params.get(&l.txt_pos);
    for (t, &id) in tokens.iter().enumerate() {
        for j in 0..d {
            seq.push(emb[id * d + j] + pos[t * d + j]);
        }
    }

    let llm_dims = Dims { len, d, ff: cfg.d_ff, heads: cfg.n_heads };
    let llm_hl: KeyHighlight<'_> = highlight
        .filter(|h| h.llm)
        .map(|h| (h.patches.as_slice(), h.log_beta));
    let mut llm = Vec::with_capacity(l.llm.len());
    for b in &l.llm {
        let (out, cache) = block_forward(data, b, seq, &llm_dims, true, llm_hl);
        llm.push(cache);
        seq = out;
    }
    let (hidden, lnf_hat, lnf_rstd) = layer_norm(&seq, params.get(&l.lnf_g), params.get(&l.lnf_b));
    let mut logits = matmul(&hidden[n * d..], params.get(&l.out_w), t_len, d, v_size);
    add_bias(&mut logits, params.get(&l.out_b));

    let trace = ForwardTrace {
        n_patches: n,
        n_text: t_len,
        vision_attention: vision.iter().map(|c| c.att.clone()).collect(),
        llm_attention: llm.iter().map(|c| c.att.clone()).collect(),
        patch_embeddings: embeddings,
        patch_features: features,
        hidden,
        logits,
    };
    let cache = ForwardCache {
        patches,
        tokens: tokens.to_vec(),
        vision,
        llm,
        lnf_hat,
        lnf_rstd,
    };
    Ok((trace, cache))
}

/// Causal pass over `[image patch tokens ∥ text tokens]`.
pub fn forward(params: &ModelParams, tokens: &[usize], image: &[f64]) -> Result<ForwardTrace> {
    forward_cached(params, tokens, image, None).map(|(t, _)| t)
}

/// Same as [`forward`] with attention highlighting applied.
pub fn forward_highlighted(
    params: &ModelParams,
    tokens: &[usize],
    image: &[f64],
    highlight: &Highlight,
) -> Result<ForwardTrace> {
    forward_cached(params, tokens, image, Some(highlight)).map(|(t, _)| t)
}

/// Per-patch segmentation logits: scaled dot product between the projected
/// `<SEG>` hidden state and each projected patch feature.
pub fn seg_logits(params: &ModelParams, h_seg: &[f64], features: &[f64]) -> Vec<f64> {
    let d = params.config.d_model;
    let n = features.len() / d;
    let q = matmul(h_seg, params.get(&params.layout.seg_q), 1, d, d);
    let keys = matmul(features, params.get(&params.layout.seg_k), n, d, d);
    let scale = 1.0 / (d as f64).sqrt();
    keys.chunks(d)
        .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect()
}

/// Backward of [`seg_logits`]: accumulates head grads, returns
/// `(d h_seg, d features)`.
pub(crate) fn seg_backward(
    params: &ModelParams,
    grad: &mut [f64],
    h_seg: &[f64],
    features: &[f64],
    dz: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = params.config.d_model;
    let n = features.len() / d;
    let wq = params.get(&params.layout.seg_q);
    let wk = params.get(&params.layout.seg_k);
    let q = matmul(h_seg, wq, 1, d, d);
    let keys = matmul(features, wk, n, d, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; d];
    let mut dkeys = vec![0.0; n * d];
    for p in 0..n {
        let g = dz[p] * scale;
        for j in 0..d {
            dq[j] += g * keys[p * d + j];
            dkeys[p * d + j] = g * q[j];
        }
    }
    matmul_acc_at(h_seg, &dq, 1, d, d, &mut grad[params.layout.seg_q.clone()]);
    matmul_acc_at(features, &dkeys, n, d, d, &mut grad[params.layout.seg_k.clone()]);
    let mut dh = vec![0.0; d];
    matmul_acc_bt(&dq, wq, 1, d, d, &mut dh);
    let mut dfeat = vec![0.0; n * d];
    matmul_acc_bt(&dkeys, wk, n, d, d, &mut dfeat);
    (dh, dfeat)
}

/// Backpropagates gradients on the text logits, on the final hidden states
/// and on the patch embeddings into `grad` (same layout as the parameters).
pub(crate) fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    cache: &ForwardCache,
    dlogits: &[f64],
    mut dhidden: Vec<f64>,
    dembeddings: Vec<f64>,
    grad: &mut [f64],
) {
    let cfg = &params.config;
    let l = &params.layout;
    let data = &params.data;
    let d = cfg.d_model;
    let n = trace.n_patches;
    let t_len = trace.n_text;
    let len = n + t_len;
    let v_size = cfg.vocab_size();

    matmul_acc_at(&trace.hidden[n * d..], dlogits, t_len, d, v_size, &mut grad[l.out_w.clone()]);
    acc_bias_grad(dlogits, &mut grad[l.out_b.clone()]);
    matmul_acc_bt(dlogits, params.get(&l.out_w), t_len, d, v_size, &mut dhidden[n * d..]);
    let (gg, gb) = split_two(grad, &l.lnf_g, &l.lnf_b);
    let mut dseq = layer_norm_backward(&dhidden, &cache.lnf_hat, &cache.lnf_rstd, params.get(&l.lnf_g), gg, gb);

    let llm_dims = Dims { len, d, ff: cfg.d_ff, heads: cfg.n_heads };
    for (b, c) in l.llm.iter().zip(&cache.llm).rev() {
        dseq = block_backward(data, grad, b, c, &dseq, &llm_dims, true);
    }

    let emb = l.tok_emb.start;
    let pos = l.txt_pos.start;
    for (t, &id) in cache.tokens.iter().enumerate() {
        let row = &dseq[(n + t) * d..(n + t + 1) * d];
        for j in 0..d {
            grad[emb + id * d + j] += row[j];
            grad[pos + t * d + j] += row[j];
        }
    }
    let dimg = &dseq[..n * d];
    matmul_acc_at(&trace.patch_features, dimg, n, d, d, &mut grad[l.vis_proj_w.clone()]);
    acc_bias_grad(dimg, &mut grad[l.vis_proj_b.clone()]);
    let mut dx = vec![0.0; n * d];
    matmul_acc_bt(dimg, params.get(&l.vis_proj_w), n, d, d, &mut dx);

    let vis_dims = Dims { len: n, d, ff: cfg.d_ff, heads: cfg.n_heads };
    for (b, c) in l.vision.iter().zip(&cache.vision).rev() {
        dx = block_backward(data, grad, b, c, &dx, &vis_dims, false);
    }
    for (g, e) in dx.iter_mut().zip(&dembeddings) {
        *g += e;
    }
    for (g, v) in grad[l.img_pos.clone()].iter_mut().zip(&dx) {
        *g += v;
    }
    acc_bias_grad(&dx, &mut grad[l.patch_b.clone()]);
    matmul_acc_at(&cache.patches, &dx, n, cfg.patch_dim(), d, &mut grad[l.patch_w.clone()]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Tokenizer};

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(Tokenizer::standard_words(&["pneumonia".to_string()]));
        cfg.patch_grid = 2;
        cfg.patch_size = 2;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        cfg
    }

    fn image(cfg: &ModelConfig) -> Vec<f64> {
        let n = cfg.image_size() * cfg.image_size();
        (0..n).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()
    }

    #[test]
    fn zero_params_give_uniform_attention() {
        let cfg = tiny_config();
        let p = ModelParams::zeros(cfg.clone()).unwrap();
        let tr = forward(&p, &[0, 3, 4], &image(&cfg)).unwrap();
        let n = cfg.n_patches();
        for att in &tr.vision_attention {
            assert!(att.iter().all(|&a| (a - 1.0 / n as f64).abs() < 1e-15));
        }
        let len = n + 3;
        for att in &tr.llm_attention {
            for h in 0..cfg.n_heads {
                for i in 0..len {
                    for j in 0..=i {
                        assert!((att[(h * len + i) * len + j] - 1.0 / (i + 1) as f64).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_config();
        let p = ModelParams::init(cfg.clone(), 3).unwrap();
        let tr = forward(&p, &[0, 5, 6, 7], &image(&cfg)).unwrap();
        let check = |att: &[f64], len: usize| {
            for row in att.chunks(len) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        };
        for a in &tr.vision_attention {
            check(a, cfg.n_patches());
        }
        for a in &tr.llm_attention {
            check(a, cfg.n_patches() + 4);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = tiny_config();
        let p = ModelParams::init(cfg.clone(), 3).unwrap();
        assert!(matches!(forward(&p, &[0], &[0.0; 3]), Err(Error::ShapeMismatch(_))));
        let long = vec![0; cfg.max_seq + 1];
        assert!(matches!(forward(&p, &long, &image(&cfg)), Err(Error::SequenceTooLong { .. })));
        assert!(forward(&p, &[cfg.vocab_size()], &image(&cfg)).is_err());
    }

    #[test]
    fn empty_highlight_is_bitwise_plain() {
        let cfg = tiny_config();
        let p = ModelParams::init(cfg.clone(), 5).unwrap();
        let img = image(&cfg);
        let plain = forward(&p, &[0, 1, 2], &img).unwrap();
        let hl = Highlight {
            patches: vec![false; cfg.n_patches()],
            log_beta: 2f64.ln(),
            vision: true,
            llm: true,
        };
        assert_eq!(forward_highlighted(&p, &[0, 1, 2], &img, &hl).unwrap(), plain);
        let unit = Highlight { patches: vec![true; cfg.n_patches()], log_beta: 1f64.ln(), ..hl };
        assert_eq!(forward_highlighted(&p, &[0, 1, 2], &img, &unit).unwrap(), plain);
    }
}
