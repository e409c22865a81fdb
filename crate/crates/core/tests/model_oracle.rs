//! The model's forward pass against a straight-line reimplementation on a
//! 2×2-patch image with one vision layer and one language layer.

use loba_core::model::forward::{forward_highlighted, seg_logits};
use loba_core::model::{forward, Highlight, ModelConfig, ModelParams, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn tiny() -> ModelParams {
    let mut cfg = ModelConfig::new(Tokenizer::standard_words(&["pneumonia".to_string()]));
    cfg.patch_grid = 2;
    cfg.patch_size = 2;
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.n_vision_layers = 1;
    cfg.d_ff = 6;
    cfg.max_seq = 3;
    let mut p = ModelParams::zeros(cfg).unwrap();
    // Every weight random, gains and biases included.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in &mut p.data {
        *v = rng.random_range(-0.8..0.8);
    }
    p
}

fn weight(p: &ModelParams, r: &std::ops::Range<usize>, rows: usize, cols: usize) -> Mat {
    let w = &p.data[r.clone()];
    (0..rows).map(|i| w[i * cols..(i + 1) * cols].to_vec()).collect()
}

fn vector(p: &ModelParams, r: &std::ops::Range<usize>) -> Vec<f64> {
    p.data[r.clone()].to_vec()
}

fn mul(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| (0..row.len()).map(|k| row[k] * w[k][j]).sum())
                .collect()
        })
        .collect()
}

fn plus_bias(mut x: Mat, b: &[f64]) -> Mat {
    for row in &mut x {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    x
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / sd * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// One pre-norm block. `boost[j]` is added to every attention logit on key `j`.
fn block(p: &ModelParams, b: &loba_core::model::BlockLayout, x: &Mat, causal: bool, boost: &[f64]) -> Mat {
    let d = p.config.d_model;
    let ff = p.config.d_ff;
    let heads = p.config.n_heads;
    let hd = d / heads;
    let h = layer_norm(x, &vector(p, &b.ln1_g), &vector(p, &b.ln1_b));
    let q = mul(&h, &weight(p, &b.wq, d, d));
    let k = mul(&h, &weight(p, &b.wk, d, d));
    let v = mul(&h, &weight(p, &b.wv, d, d));
    let n = x.len();
    let mut ctx = vec![vec![0.0; d]; n];
    for head in 0..heads {
        for i in 0..n {
            let keys = if causal { i + 1 } else { n };
            let mut s: Vec<f64> = (0..keys)
                .map(|j| {
                    let dot: f64 = (0..hd).map(|t| q[i][head * hd + t] * k[j][head * hd + t]).sum();
                    dot / (hd as f64).sqrt() + boost[j]
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for v in &mut s {
                *v = (*v - m).exp() / z;
            }
            for j in 0..keys {
                for t in 0..hd {
                    ctx[i][head * hd + t] += s[j] * v[j][head * hd + t];
                }
            }
        }
    }
    let attn = mul(&ctx, &weight(p, &b.wo, d, d));
    let x1: Mat = x.iter().zip(&attn).map(|(a, c)| a.iter().zip(c).map(|(u, w)| u + w).collect()).collect();
    let h2 = layer_norm(&x1, &vector(p, &b.ln2_g), &vector(p, &b.ln2_b));
    let pre = plus_bias(mul(&h2, &weight(p, &b.w1, d, ff)), &vector(p, &b.b1));
    let act: Mat = pre.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let f = plus_bias(mul(&act, &weight(p, &b.w2, ff, d)), &vector(p, &b.b2));
    x1.iter().zip(&f).map(|(a, c)| a.iter().zip(c).map(|(u, w)| u + w).collect()).collect()
}

struct Oracle {
    embeddings: Mat,
    logits: Mat,
    hidden: Mat,
}

fn oracle(p: &ModelParams, tokens: &[usize], image: &[f64], boost_vision: &[f64], boost_llm: &[f64]) -> Oracle {
    let c = &p.config;
    let (d, g, s, side) = (c.d_model, c.patch_grid, c.patch_size, c.image_size());
    let l = &p.layout;
    let mut patches: Mat = Vec::new();
    for py in 0..g {
        for px in 0..g {
            let mut v = Vec::new();
            for dy in 0..s {
                for dx in 0..s {
                    v.push(image[(py * s + dy) * side + px * s + dx] - 0.5);
                }
            }
            patches.push(v);
        }
    }
    let n = patches.len();
    let mut x = plus_bias(mul(&patches, &weight(p, &l.patch_w, s * s, d)), &vector(p, &l.patch_b));
    let pos = weight(p, &l.img_pos, n, d);
    for (row, pr) in x.iter_mut().zip(&pos) {
        for (v, q) in row.iter_mut().zip(pr) {
            *v += q;
        }
    }
    let embeddings = x.clone();
    let features = block(p, &l.vision[0], &x, false, boost_vision);
    let mut seq = plus_bias(mul(&features, &weight(p, &l.vis_proj_w, d, d)), &vector(p, &l.vis_proj_b));
    let emb = weight(p, &l.tok_emb, c.vocab_size(), d);
    let tpos = weight(p, &l.txt_pos, c.max_seq, d);
    for (t, &id) in tokens.iter().enumerate() {
        seq.push((0..d).map(|j| emb[id][j] + tpos[t][j]).collect());
    }
    let mut boost = boost_llm.to_vec();
    boost.resize(seq.len(), 0.0);
    let out = block(p, &l.llm[0], &seq, true, &boost);
    let hidden = layer_norm(&out, &vector(p, &l.lnf_g), &vector(p, &l.lnf_b));
    let logits = plus_bias(mul(&hidden[n..].to_vec(), &weight(p, &l.out_w, d, c.vocab_size())), &vector(p, &l.out_b));
    Oracle { embeddings, logits, hidden }
}

fn image() -> Vec<f64> {
    (0..16).map(|i| ((i * 5) % 7) as f64 / 7.0).collect()
}

fn close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn plain_forward_matches_oracle() {
    let p = tiny();
    let tokens = [0, 5, 2];
    let trace = forward(&p, &tokens, &image()).unwrap();
    let o = oracle(&p, &tokens, &image(), &[0.0; 4], &[0.0; 4]);
    close(&trace.logits, &o.logits.concat());
    close(&trace.hidden, &o.hidden.concat());
    close(&trace.patch_embeddings, &o.embeddings.concat());
}

#[test]
fn highlighted_forward_matches_oracle() {
    let p = tiny();
    let tokens = [0, 5, 2];
    let beta: f64 = 3.0;
    let marked = [true, false, false, true];
    let boost: Vec<f64> = marked.iter().map(|&m| if m { beta.ln() } else { 0.0 }).collect();
    for (vision, llm) in [(true, false), (true, true), (false, true)] {
        let hl = Highlight { patches: marked.to_vec(), log_beta: beta.ln(), vision, llm };
        let trace = forward_highlighted(&p, &tokens, &image(), &hl).unwrap();
        let zero = [0.0; 4];
        let o = oracle(
            &p,
            &tokens,
            &image(),
            if vision { &boost } else { &zero },
            if llm { &boost } else { &zero },
        );
        close(&trace.logits, &o.logits.concat());
    }
}

#[test]
fn seg_logits_match_hand_computation() {
    let p = tiny();
    let tokens = [0, 5, 2];
    let trace = forward(&p, &tokens, &image()).unwrap();
    let o = oracle(&p, &tokens, &image(), &[0.0; 4], &[0.0; 4]);
    let d = p.config.d_model;
    let h = &o.hidden[4 + 2];
    let got = seg_logits(&p, h, &trace.patch_embeddings);
    let q = mul(&vec![h.clone()], &weight(&p, &p.layout.seg_q, d, d));
    let k = mul(&o.embeddings, &weight(&p, &p.layout.seg_k, d, d));
    let want: Vec<f64> = k
        .iter()
        .map(|kr| kr.iter().zip(&q[0]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
        .collect();
    close(&got, &want);
}
