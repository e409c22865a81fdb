//! A small grounded multimodal transformer.
//!
//! A vision encoder turns patch embeddings into patch features; a causal
//! language model reads `[projected patch features ∥ text tokens]` and
//! emits a grounded response whose `<SEG>` hidden state queries a
//! segmentation head over the patch embeddings. Everything runs in `f64`
//! with hand-written backward passes.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub mod checkpoint;
pub mod forward;
pub mod generate;
pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod tokenizer;
pub mod train;

pub use forward::{forward, ForwardTrace, Highlight};
pub use generate::{generate, seg_decode, Generation, SegPrediction};
pub use loss::{loss_seg, loss_text, loss_total, LossParts};
pub use tokenizer::Tokenizer;
pub use train::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Patches per image side.
    pub patch_grid: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Language-model layers.
    pub n_layers: usize,
    pub n_vision_layers: usize,
    pub d_ff: usize,
    pub vocab: Vec<String>,
    /// Maximum number of text tokens.
    pub max_seq: usize,
    pub temperature: f64,
    pub lambda_text: f64,
    pub lambda_seg: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl ModelConfig {
    pub fn new(vocab: Vec<String>) -> Self {
        Self {
            patch_grid: 6,
            patch_size: 4,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            n_vision_layers: 1,
            d_ff: 64,
            vocab,
            max_seq: 40,
            temperature: 0.1,
            lambda_text: 1.0,
            lambda_seg: 1.0,
            lambda_bce: 1.0,
            lambda_dice: 1.0,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn image_size(&self) -> usize {
        self.patch_grid * self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.patch_grid == 0 || self.patch_size == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return bad("zero-sized dimension".into());
        }
        for (name, v) in [
            ("lambda_text", self.lambda_text),
            ("lambda_seg", self.lambda_seg),
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative weight"));
            }
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        Tokenizer::new(self.vocab.clone()).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub img_pos: Range<usize>,
    pub vision: Vec<BlockLayout>,
    pub vis_proj_w: Range<usize>,
    pub vis_proj_b: Range<usize>,
    pub tok_emb: Range<usize>,
    pub txt_pos: Range<usize>,
    pub llm: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub seg_q: Range<usize>,
    pub seg_k: Range<usize>,
    pub total: usize,
}

struct Alloc(usize);

impl Alloc {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.0..self.0 + n;
        self.0 += n;
        r
    }

    fn block(&mut self, d: usize, ff: usize) -> BlockLayout {
        BlockLayout {
            ln1_g: self.take(d),
            ln1_b: self.take(d),
            wq: self.take(d * d),
            wk: self.take(d * d),
            wv: self.take(d * d),
            wo: self.take(d * d),
            ln2_g: self.take(d),
            ln2_b: self.take(d),
            w1: self.take(d * ff),
            b1: self.take(ff),
            w2: self.take(ff * d),
            b2: self.take(d),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut a = Alloc(0);
        let patch_w = a.take(cfg.patch_dim() * d);
        let patch_b = a.take(d);
        let img_pos = a.take(cfg.n_patches() * d);
        let vision = (0..cfg.n_vision_layers).map(|_| a.block(d, cfg.d_ff)).collect();
        let vis_proj_w = a.take(d * d);
        let vis_proj_b = a.take(d);
        let tok_emb = a.take(cfg.vocab_size() * d);
        let txt_pos = a.take(cfg.max_seq * d);
        let llm = (0..cfg.n_layers).map(|_| a.block(d, cfg.d_ff)).collect();
        let lnf_g = a.take(d);
        let lnf_b = a.take(d);
        let out_w = a.take(d * cfg.vocab_size());
        let out_b = a.take(cfg.vocab_size());
        let seg_q = a.take(d * d);
        let seg_k = a.take(d * d);
        Self {
            patch_w,
            patch_b,
            img_pos,
            vision,
            vis_proj_w,
            vis_proj_b,
            tok_emb,
            txt_pos,
            llm,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
            seg_q,
            seg_k,
            total: a.0,
        }
    }

    /// Ranges holding layer-norm gains, which start at one.
    fn gains(&self) -> Vec<Range<usize>> {
        let mut out = vec![self.lnf_g.clone()];
        for b in self.vision.iter().chain(&self.llm) {
            out.push(b.ln1_g.clone());
            out.push(b.ln2_g.clone());
        }
        out
    }

    /// Ranges holding biases, which start at zero.
    fn biases(&self) -> Vec<Range<usize>> {
        let mut out = vec![
            self.patch_b.clone(),
            self.vis_proj_b.clone(),
            self.lnf_b.clone(),
            self.out_b.clone(),
        ];
        for b in self.vision.iter().chain(&self.llm) {
            out.extend([b.ln1_b.clone(), b.ln2_b.clone(), b.b1.clone(), b.b2.clone()]);
        }
        out
    }
}

/// All weights of the model as one flat vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let data = vec![0.0; layout.total];
        Ok(Self { config, layout, data })
    }

    /// Uniform fan-in scaled initialisation, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seed::rng(seed);
        let d = p.config.d_model;
        let l = p.layout.clone();
        let mut fill = |data: &mut [f64], r: &Range<usize>, scale: f64| {
            for v in &mut data[r.clone()] {
                *v = rng.random_range(-scale..scale);
            }
        };
        let fan = |n: usize| (3.0 / n as f64).sqrt();
        fill(&mut p.data, &l.patch_w, fan(p.config.patch_dim()));
        fill(&mut p.data, &l.img_pos, 0.2);
        fill(&mut p.data, &l.vis_proj_w, fan(d));
        fill(&mut p.data, &l.tok_emb, 0.2);
        fill(&mut p.data, &l.txt_pos, 0.2);
        fill(&mut p.data, &l.out_w, fan(d));
        fill(&mut p.data, &l.seg_q, fan(d));
        fill(&mut p.data, &l.seg_k, fan(d));
        // Residual output projections shrink with depth so each stack starts
        // close to the identity.
        for stack in [&l.vision, &l.llm] {
            let shrink = 1.0 / (2.0 * stack.len() as f64).sqrt();
            for b in stack {
                for r in [&b.wq, &b.wk, &b.wv] {
                    fill(&mut p.data, r, fan(d));
                }
                fill(&mut p.data, &b.wo, fan(d) * shrink);
                fill(&mut p.data, &b.w1, fan(d));
                fill(&mut p.data, &b.w2, fan(p.config.d_ff) * shrink);
            }
        }
        for r in l.gains() {
            p.data[r].fill(1.0);
        }
        for r in l.biases() {
            p.data[r].fill(0.0);
        }
        Ok(p)
    }

    pub fn get(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.config.vocab.clone()).expect("validated vocabulary")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
