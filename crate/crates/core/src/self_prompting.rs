//! Localize-before-answer inference: the model's own segmentation picks the
//! patches to highlight, and the answer is re-decoded contrastively against
//! the un-highlighted model.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rle_decode, PixelMask};
use crate::model::forward::{forward_highlighted, Highlight};
use crate::model::generate::{
    answer_sentence, answer_start, generate, next_token_logprobs, DecodeOptions, Generation, SegPrediction,
};
use crate::model::ops::{argmax, softmax_in_place};
use crate::model::{ForwardTrace, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightPlan {
    pub highlighted_patches: BTreeSet<usize>,
    pub beta: f64,
    /// Minimum fraction of set pixels for a patch to be highlighted.
    pub coverage_threshold: f64,
    /// Also highlight image keys inside the language layers.
    pub extend_to_llm: bool,
}

impl Default for HighlightPlan {
    fn default() -> Self {
        Self {
            highlighted_patches: BTreeSet::new(),
            beta: 2.0,
            coverage_threshold: 0.5,
            extend_to_llm: false,
        }
    }
}

impl HighlightPlan {
    pub fn with_beta(beta: f64) -> Self {
        Self { beta, ..Self::default() }
    }

    pub fn validate(&self, n_patches: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "coverage threshold must lie in (0, 1], got {}",
                self.coverage_threshold
            )));
        }
        if let Some(&p) = self.highlighted_patches.iter().find(|&&p| p >= n_patches) {
            return Err(Error::InvalidConfig(format!("patch {p} outside a {n_patches}-patch grid")));
        }
        Ok(())
    }

    /// The forward-pass form of this plan.
    pub fn to_highlight(&self, n_patches: usize) -> Highlight {
        let mut patches = vec![false; n_patches];
        for &p in &self.highlighted_patches {
            patches[p] = true;
        }
        Highlight {
            patches,
            log_beta: self.beta.ln(),
            vision: true,
            llm: self.extend_to_llm,
        }
    }

    /// True when highlighting cannot change any attention row.
    pub fn is_identity(&self) -> bool {
        self.highlighted_patches.is_empty() || self.beta == 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { alpha: 0.3 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Patches whose fraction of set pixels is at least `coverage_threshold`.
pub fn mask_to_patches(
    mask: &PixelMask,
    patch_grid: usize,
    patch_size: usize,
    coverage_threshold: f64,
) -> Result<BTreeSet<usize>> {
    let side = patch_grid * patch_size;
    if mask.width != side || mask.height != side {
        return Err(Error::DimensionMismatch {
            expected_w: side,
            expected_h: side,
            got_w: mask.width,
            got_h: mask.height,
        });
    }
    let grid = rle_decode(mask)?;
    let total = (patch_size * patch_size) as f64;
    let mut out = BTreeSet::new();
    for py in 0..patch_grid {
        for px in 0..patch_grid {
            let mut on = 0usize;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    on += grid.get(px * patch_size + dx, py * patch_size + dy) as usize;
                }
            }
            if on as f64 / total >= coverage_threshold {
                out.insert(py * patch_grid + px);
            }
        }
    }
    Ok(out)
}

/// Softmax of `logits` after adding `ln β` to highlighted entries.
pub fn reweight_attention(logits: &[f64], highlighted: &BTreeSet<usize>, beta: f64) -> Vec<f64> {
    let log_beta = beta.ln();
    let mut row: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &h)| if highlighted.contains(&i) { h + log_beta } else { h })
        .collect();
    softmax_in_place(&mut row);
    row
}

/// Forward pass with every vision-encoder attention row reweighted by `plan`.
pub fn highlighted_forward(params: &ModelParams, tokens: &[usize], image: &[f64], plan: &HighlightPlan) -> Result<ForwardTrace> {
    let n = params.config.n_patches();
    plan.validate(n)?;
    forward_highlighted(params, tokens, image, &plan.to_highlight(n))
}

/// `(1+α)·log p_hl − α·log p_bh`, the unnormalized contrastive scores.
pub fn contrastive_scores(logp_hl: &[f64], logp_bh: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if logp_hl.len() != logp_bh.len() {
        return Err(Error::LengthMismatch {
            left: logp_hl.len(),
            right: logp_bh.len(),
        });
    }
    Ok(logp_hl
        .iter()
        .zip(logp_bh)
        .map(|(&h, &b)| (1.0 + alpha) * h - alpha * b)
        .collect())
}

/// `softmax((1+α)·log p_hl − α·log p_bh)`.
pub fn contrastive_decode(logp_hl: &[f64], logp_bh: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let mut row = contrastive_scores(logp_hl, logp_bh, alpha)?;
    softmax_in_place(&mut row);
    Ok(row)
}

/// Audit trail of one localize-before-answer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerPassRecord {
    pub question: String,
    pub pass1_text: String,
    /// Run-length encoding of the predicted pixel mask.
    pub mask_runs: Option<Vec<(usize, usize)>>,
    pub highlight: Vec<usize>,
    pub pass2_text: String,
    /// Answer steps where the contrastive choice differs from the plain one.
    pub argmax_switches: usize,
    /// Pass 1 never emitted `<SEG>`; the plain answer was kept.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LobaAnswer {
    /// Answer sentence after the localization sentence.
    pub answer: String,
    /// Full pass-2 response.
    pub text: String,
    pub seg: Option<SegPrediction>,
    pub record: PerPassRecord,
}

/// Pass 1: plain grounded generation.
pub fn first_pass(params: &ModelParams, question: &str, image: &[f64]) -> Result<Generation> {
    generate(
        params,
        question,
        image,
        DecodeOptions {
            temperature: params.config.temperature,
            sample_seed: None,
        },
    )
}

/// Full two-pass pipeline.
pub fn answer_with_loba(
    params: &ModelParams,
    question: &str,
    image: &[f64],
    plan_defaults: &HighlightPlan,
    decode: &DecodeConfig,
) -> Result<LobaAnswer> {
    let pass1 = first_pass(params, question, image)?;
    second_pass(params, question, image, &pass1, plan_defaults, decode)
}

/// Pass 2 given a completed pass 1. The highlight set comes from pass 1's
/// mask; the other plan fields come from `plan_defaults`.
pub fn second_pass(
    params: &ModelParams,
    question: &str,
    image: &[f64],
    pass1: &Generation,
    plan_defaults: &HighlightPlan,
    decode: &DecodeConfig,
) -> Result<LobaAnswer> {
    let cfg = &params.config;
    decode.validate()?;
    plan_defaults.validate(cfg.n_patches())?;
    let tok = params.tokenizer();
    let Some(seg) = pass1.seg.as_ref() else {
        return Ok(LobaAnswer {
            answer: pass1.answer.clone(),
            text: pass1.text.clone(),
            seg: None,
            record: PerPassRecord {
                question: question.to_string(),
                pass1_text: pass1.text.clone(),
                mask_runs: None,
                highlight: Vec::new(),
                pass2_text: pass1.text.clone(),
                argmax_switches: 0,
                fallback: true,
            },
        });
    };
    let plan = HighlightPlan {
        highlighted_patches: mask_to_patches(&seg.pixel_mask, cfg.patch_grid, cfg.patch_size, plan_defaults.coverage_threshold)?,
        ..plan_defaults.clone()
    };
    let highlight = plan.to_highlight(cfg.n_patches());
    let identity = plan.is_identity();

    // shared prefix: prompt plus the localization sentence of pass 1
    let start = answer_start(&tok, &pass1.response).expect("grounded response contains <SEG>");
    let mut tokens = pass1.prompt.clone();
    tokens.extend_from_slice(&pass1.response[..start]);
    let mut switches = 0;
    while tokens.len() < cfg.max_seq {
        let (lp_bh, _) = next_token_logprobs(params, &tokens, image, None, cfg.temperature)?;
        let next = if identity {
            // p_hl = p_bh, so the contrastive distribution is p_bh itself
            argmax(&lp_bh)
        } else {
            let (lp_hl, _) = next_token_logprobs(params, &tokens, image, Some(&highlight), cfg.temperature)?;
            argmax(&contrastive_scores(&lp_hl, &lp_bh, decode.alpha)?)
        };
        if next != argmax(&lp_bh) {
            switches += 1;
        }
        tokens.push(next);
        if next == tok.eos() {
            break;
        }
    }
    let response = &tokens[pass1.prompt.len()..];
    let body: Vec<usize> = response.iter().copied().filter(|&t| t != tok.eos()).collect();
    let text = tok.detokenize(&body);
    Ok(LobaAnswer {
        answer: answer_sentence(&tok, response),
        text: text.clone(),
        seg: Some(seg.clone()),
        record: PerPassRecord {
            question: question.to_string(),
            pass1_text: pass1.text.clone(),
            mask_runs: Some(seg.pixel_mask.runs.clone()),
            highlight: plan.highlighted_patches.iter().copied().collect(),
            pass2_text: text,
            argmax_switches: switches,
            fallback: false,
        },
    })
}
