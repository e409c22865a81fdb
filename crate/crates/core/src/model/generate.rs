//! Grounded greedy generation and segmentation decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_cached, seg_logits, Highlight};
use super::ops::{argmax, log_softmax};
use super::{ModelParams, Tokenizer};
use crate::error::{Error, Result};
use crate::geometry::{BitGrid, PixelMask, rle_encode};
use crate::seed;

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;

pub fn localization_sentence(anatomy: &str) -> String {
    format!("The location of the {anatomy} is at <SEG>.")
}

/// The full grounded training target for an item.
pub fn grounded_response(anatomy: &str, answer: &str) -> String {
    format!("{} {}", localization_sentence(anatomy), answer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegPrediction {
    pub patch_grid: usize,
    pub patch_size: usize,
    /// `patch_grid²` logits, row-major.
    pub patch_logits: Vec<f64>,
    /// Nearest-neighbour upsampled mask of patches with σ(logit) > 0.5.
    pub pixel_mask: PixelMask,
}

/// Segmentation from the `<SEG>` hidden state and the patch embeddings.
pub fn seg_decode(params: &ModelParams, h_seg: &[f64], patch_embeddings: &[f64]) -> SegPrediction {
    let cfg = &params.config;
    let logits = seg_logits(params, h_seg, patch_embeddings);
    let side = cfg.image_size();
    let mut grid = BitGrid::new(side, side);
    for (p, &z) in logits.iter().enumerate() {
        // σ(z) > 0.5 ⇔ z > 0
        if z > 0.0 {
            let (py, px) = (p / cfg.patch_grid, p % cfg.patch_grid);
            for dy in 0..cfg.patch_size {
                for dx in 0..cfg.patch_size {
                    grid.set(px * cfg.patch_size + dx, py * cfg.patch_size + dy, true);
                }
            }
        }
    }
    SegPrediction {
        patch_grid: cfg.patch_grid,
        patch_size: cfg.patch_size,
        patch_logits: logits,
        pixel_mask: rle_encode(&grid),
    }
}

/// Temperature-scaled next-token log-probabilities at the last position,
/// floored at [`PROB_FLOOR`].
pub fn next_token_logprobs(
    params: &ModelParams,
    tokens: &[usize],
    image: &[f64],
    highlight: Option<&Highlight>,
    temperature: f64,
) -> Result<(Vec<f64>, super::ForwardTrace)> {
    let (trace, _) = forward_cached(params, tokens, image, highlight)?;
    let last = trace.logits_at(trace.n_text - 1);
    let scaled: Vec<f64> = last.iter().map(|z| z / temperature).collect();
    let floor = PROB_FLOOR.ln();
    let lp = log_softmax(&scaled).into_iter().map(|v| v.max(floor)).collect();
    Ok((lp, trace))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub temperature: f64,
    /// `None` decodes greedily (beam size 1); `Some(seed)` samples.
    pub sample_seed: Option<u64>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            sample_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// `<BOS>` + question tokens.
    pub prompt: Vec<usize>,
    /// Emitted response tokens, including a final `<EOS>` when produced.
    pub response: Vec<usize>,
    pub text: String,
    /// Text after the localization sentence.
    pub answer: String,
    /// Index of the first `<SEG>` within `response`.
    pub seg_index: Option<usize>,
    /// Final-layer hidden state at the `<SEG>` position.
    pub h_seg: Option<Vec<f64>>,
    pub seg: Option<SegPrediction>,
}

impl Generation {
    pub fn is_grounded(&self) -> bool {
        self.h_seg.is_some()
    }

    pub fn seg_count(&self, tok: &Tokenizer) -> usize {
        self.response.iter().filter(|&&t| t == tok.seg()).count()
    }
}

/// Splits a response into the text after the localization sentence.
pub fn answer_sentence(tok: &Tokenizer, response: &[usize]) -> String {
    let body: Vec<usize> = response.iter().copied().filter(|&t| t != tok.eos()).collect();
    match answer_start(tok, &body) {
        Some(start) => tok.detokenize(&body[start..]),
        None => tok.detokenize(&body),
    }
}

/// Index just past the `.` that closes the localization sentence.
pub fn answer_start(tok: &Tokenizer, response: &[usize]) -> Option<usize> {
    let seg = response.iter().position(|&t| t == tok.seg())?;
    let dot = tok.id(".")?;
    match response.get(seg + 1) {
        Some(&t) if t == dot => Some(seg + 2),
        _ => Some(seg + 1),
    }
}

pub fn prompt_tokens(tok: &Tokenizer, question: &str) -> Result<Vec<usize>> {
    let mut prompt = vec![tok.bos()];
    prompt.extend(tok.tokenize(question)?);
    Ok(prompt)
}

/// Decodes a response to `question`. A response without `<SEG>` is
/// returned with `h_seg = None`; use [`Generation::require_grounded`] to turn
/// that into an error.
pub fn generate(params: &ModelParams, question: &str, image: &[f64], opts: DecodeOptions) -> Result<Generation> {
    let tok = params.tokenizer();
    let prompt = prompt_tokens(&tok, question)?;
    let d = params.config.d_model;
    let mut tokens = prompt.clone();
    let mut seg_pos: Option<usize> = None;
    let mut captured: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut rng = opts.sample_seed.map(seed::rng);

    while tokens.len() < params.config.max_seq {
        let (lp, trace) = next_token_logprobs(params, &tokens, image, None, opts.temperature)?;
        if let (Some(pos), None) = (seg_pos, &captured) {
            captured = Some((trace.text_hidden(pos, d).to_vec(), trace.patch_embeddings.clone()));
        }
        let next = match rng.as_mut() {
            None => argmax(&lp),
            Some(r) => sample(&lp, r.random::<f64>()),
        };
        tokens.push(next);
        if next == tok.seg() && seg_pos.is_none() {
            seg_pos = Some(tokens.len() - 1);
        }
        if next == tok.eos() {
            break;
        }
    }
    if let (Some(pos), None) = (seg_pos, &captured) {
        let (trace, _) = forward_cached(params, &tokens[..=pos], image, None)?;
        captured = Some((trace.text_hidden(pos, d).to_vec(), trace.patch_embeddings.clone()));
    }

    let response = tokens[prompt.len()..].to_vec();
    let body: Vec<usize> = response.iter().copied().filter(|&t| t != tok.eos()).collect();
    let seg = captured.as_ref().map(|(h, f)| seg_decode(params, h, f));
    Ok(Generation {
        text: tok.detokenize(&body),
        answer: answer_sentence(&tok, &response),
        seg_index: seg_pos.map(|p| p - prompt.len()),
        h_seg: captured.map(|(h, _)| h),
        seg,
        prompt,
        response,
    })
}

impl Generation {
    pub fn require_grounded(&self, max_seq: usize) -> Result<(&[f64], &SegPrediction)> {
        match (&self.h_seg, &self.seg) {
            (Some(h), Some(s)) => Ok((h, s)),
            _ => Err(Error::Ungrounded(max_seq)),
        }
    }
}

fn sample(logprobs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logprobs.len() - 1
}
