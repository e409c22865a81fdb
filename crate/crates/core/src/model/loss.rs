//! Text cross entropy, BCE + Dice segmentation loss and their weighted sum.

use serde::{Deserialize, Serialize};

use super::forward::{backward, forward_cached, seg_backward, seg_logits};
use super::generate::SegPrediction;
use super::ops::{log_softmax, sigmoid, softplus};
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::PixelMask;

pub const DICE_EPS: f64 = 1e-6;

/// Mean cross entropy over answer targets. Logit row `t` predicts token
/// `t + 1`; targets are `tokens[answer_start..]`. Returns the loss and
/// its gradient with respect to the logits.
pub fn loss_text(logits: &[f64], vocab_size: usize, tokens: &[usize], answer_start: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let start = answer_start.max(1);
    let count = tokens.len().saturating_sub(start);
    if count == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for t in start..tokens.len() {
        let row = t - 1;
        let lp = log_softmax(&logits[row * vocab_size..(row + 1) * vocab_size]);
        loss -= lp[tokens[t]];
        let g = &mut grad[row * vocab_size..(row + 1) * vocab_size];
        for (gv, l) in g.iter_mut().zip(&lp) {
            *gv = l.exp() / count as f64;
        }
        g[tokens[t]] -= 1.0 / count as f64;
    }
    (loss / count as f64, grad)
}

/// Patch-resolution gold: a patch is set when at least half of its pixels
/// are set.
pub fn patch_targets(mask: &PixelMask, patch_grid: usize, patch_size: usize) -> Result<Vec<f64>> {
    let side = patch_grid * patch_size;
    if mask.width != side || mask.height != side {
        return Err(Error::DimensionMismatch {
            expected_w: side,
            expected_h: side,
            got_w: mask.width,
            got_h: mask.height,
        });
    }
    let grid = crate::geometry::rle_decode(mask)?;
    let mut out = vec![0.0; patch_grid * patch_grid];
    for py in 0..patch_grid {
        for px in 0..patch_grid {
            let mut on = 0;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    if grid.get(px * patch_size + dx, py * patch_size + dy) {
                        on += 1;
                    }
                }
            }
            if 2 * on >= patch_size * patch_size {
                out[py * patch_grid + px] = 1.0;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegLoss {
    pub bce: f64,
    pub dice: f64,
    /// `λ_bce·bce + λ_dice·dice`
    pub total: f64,
}

/// BCE (mean over patches, computed from logits) plus soft Dice loss
/// `1 − (2Σpg + ε)/(Σp + Σg + ε)`. Returns the loss and `d loss / d logit`.
pub fn seg_loss_from_logits(logits: &[f64], gold: &[f64], lambda_bce: f64, lambda_dice: f64) -> (SegLoss, Vec<f64>) {
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let bce = logits
        .iter()
        .zip(gold)
        .map(|(&z, &g)| softplus(z) - g * z)
        .sum::<f64>()
        / n;
    let inter: f64 = probs.iter().zip(gold).map(|(p, g)| p * g).sum();
    let denom = probs.iter().sum::<f64>() + gold.iter().sum::<f64>() + DICE_EPS;
    let numer = 2.0 * inter + DICE_EPS;
    let dice = 1.0 - numer / denom;
    let grad = probs
        .iter()
        .zip(gold)
        .map(|(&p, &g)| {
            let d_bce = (p - g) / n;
            let d_dice_dp = -(2.0 * g * denom - numer) / (denom * denom);
            lambda_bce * d_bce + lambda_dice * d_dice_dp * p * (1.0 - p)
        })
        .collect();
    (
        SegLoss {
            bce,
            dice,
            total: lambda_bce * bce + lambda_dice * dice,
        },
        grad,
    )
}

pub fn loss_seg(pred: &SegPrediction, gold: &PixelMask, config: &ModelConfig) -> Result<SegLoss> {
    let targets = patch_targets(gold, config.patch_grid, config.patch_size)?;
    if targets.len() != pred.patch_logits.len() {
        return Err(Error::ShapeMismatch("prediction and gold patch grids differ".into()));
    }
    Ok(seg_loss_from_logits(&pred.patch_logits, &targets, config.lambda_bce, config.lambda_dice).0)
}

pub fn loss_total(text_loss: f64, seg_loss: f64, config: &ModelConfig) -> f64 {
    config.lambda_text * text_loss + config.lambda_seg * seg_loss
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub text: f64,
    pub bce: f64,
    pub dice: f64,
    pub seg: f64,
    pub total: f64,
}

/// A teacher-forced grounded training target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub qa_id: String,
    /// `<BOS> question response <EOS>`
    pub tokens: Vec<usize>,
    /// Index of the first response token.
    pub answer_start: usize,
    /// Index of the `<SEG>` token.
    pub seg_pos: usize,
    pub image: Vec<f64>,
    /// Patch-resolution gold mask.
    pub gold_patches: Vec<f64>,
}

/// Total loss of one example and, when requested, its full gradient.
pub fn example_loss(params: &ModelParams, ex: &TrainingExample, with_grad: bool) -> Result<(LossParts, Option<Vec<f64>>)> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let (trace, cache) = forward_cached(params, &ex.tokens, &ex.image, None)?;
    let (text, dlogits) = loss_text(&trace.logits, cfg.vocab_size(), &ex.tokens, ex.answer_start);
    let h_seg = trace.text_hidden(ex.seg_pos, d).to_vec();
    let z = seg_logits(params, &h_seg, &trace.patch_embeddings);
    let (seg, dz) = seg_loss_from_logits(&z, &ex.gold_patches, cfg.lambda_bce, cfg.lambda_dice);
    let parts = LossParts {
        text,
        bce: seg.bce,
        dice: seg.dice,
        seg: seg.total,
        total: loss_total(text, seg.total, cfg),
    };
    if !with_grad {
        return Ok((parts, None));
    }
    let mut grad = vec![0.0; params.data.len()];
    let dlogits: Vec<f64> = dlogits.iter().map(|g| g * cfg.lambda_text).collect();
    let dz: Vec<f64> = dz.iter().map(|g| g * cfg.lambda_seg).collect();
    let (dh, dfeat) = seg_backward(params, &mut grad, &h_seg, &trace.patch_embeddings, &dz);
    let mut dhidden = vec![0.0; trace.hidden.len()];
    let row = trace.n_patches + ex.seg_pos;
    dhidden[row * d..(row + 1) * d].copy_from_slice(&dh);
    backward(params, &trace, &cache, &dlogits, dhidden, dfeat, &mut grad);
    Ok((parts, Some(grad)))
}
