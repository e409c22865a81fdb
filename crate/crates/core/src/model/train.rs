use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::generate::grounded_response;
use super::loss::{example_loss, patch_targets, LossParts, TrainingExample};
use super::{ModelParams, Tokenizer};
use crate::corpus::DatasetShard;
use crate::error::{Error, Result};
use crate::seed;

/// Grounded training targets: every gold answer is prefixed with the
/// localization sentence, and the gold mask is the queried anatomy's mask.
pub fn build_examples(shard: &DatasetShard, tok: &Tokenizer, params: &ModelParams) -> Result<Vec<TrainingExample>> {
    let cfg = &params.config;
    let index = shard.scene_index();
    let mut out = Vec::with_capacity(shard.qa.len());
    for item in &shard.qa {
        let scene = &shard.scenes[*index.get(item.scene_id.as_str()).ok_or_else(|| Error::InconsistentItem {
            qa_id: item.qa_id.clone(),
            reason: format!("unknown scene `{}`", item.scene_id),
        })?];
        if scene.width != cfg.image_size() || scene.height != cfg.image_size() {
            return Err(Error::ShapeMismatch(format!(
                "scene `{}` is {}x{}, model expects {}",
                scene.scene_id,
                scene.width,
                scene.height,
                cfg.image_size()
            )));
        }
        let mut tokens = vec![tok.bos()];
        tokens.extend(tok.tokenize(&item.question)?);
        let answer_start = tokens.len();
        tokens.extend(tok.tokenize(&grounded_response(&item.anatomy, &item.gold_answer))?);
        tokens.push(tok.eos());
        if tokens.len() > cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq,
            });
        }
        let seg_pos = tokens.iter().position(|&t| t == tok.seg()).expect("response contains <SEG>");
        let mask = scene.anatomies.get(&item.anatomy).ok_or_else(|| Error::InconsistentItem {
            qa_id: item.qa_id.clone(),
            reason: format!("scene lacks anatomy `{}`", item.anatomy),
        })?;
        out.push(TrainingExample {
            qa_id: item.qa_id.clone(),
            tokens,
            answer_start,
            seg_pos,
            image: scene.image.clone(),
            gold_patches: patch_targets(mask, cfg.patch_grid, cfg.patch_size)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Stop after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            batch_size: 8,
            seed: 0,
            clip_norm: 1.0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub text_loss: f64,
    pub seg_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,text_loss,seg_loss,total")?;
        for p in &self.curve {
            writeln!(out, "{},{},{},{}", p.step, p.text_loss, p.seg_loss, p.total)?;
        }
        Ok(())
    }

    /// Mean total loss over the first and last `window` steps.
    pub fn head_tail(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.curve.len()).max(1);
        let mean = |pts: &[CurvePoint]| pts.iter().map(|p| p.total).sum::<f64>() / pts.len().max(1) as f64;
        (mean(&self.curve[..w.min(self.curve.len())]), mean(&self.curve[self.curve.len().saturating_sub(w)..]))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Cosine decay from `lr` down to a tenth of it.
fn lr_at(lr: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let frac = step as f64 / (total - 1) as f64;
    lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Minibatch Adam on the grounded objective. Single-threaded and
/// bit-deterministic for a fixed seed.
pub fn train(params: &mut ModelParams, examples: &[TrainingExample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(params, examples, cfg, |_, _| Ok(()))
}

/// [`train`] with a hook called after every completed epoch.
pub fn train_with<F>(params: &mut ModelParams, examples: &[TrainingExample], cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainReport>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    if examples.is_empty() {
        return Err(Error::EmptyInput("no training examples"));
    }
    let batch = cfg.batch_size.max(1);
    let per_epoch = examples.len().div_ceil(batch);
    let total_steps = cfg.max_steps.map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let mut rng = seed::rng(seed::stream_seed(cfg.seed, "train-order", 0));
    let mut adam = Adam::new(params.data.len());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grad = vec![0.0; params.data.len()];

    for epoch in 0..cfg.epochs {
        if report.steps >= total_steps {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if report.steps >= total_steps {
                break;
            }
            grad.fill(0.0);
            let mut parts = LossParts::default();
            for &i in chunk {
                let (p, g) = example_loss(params, &examples[i], true)?;
                for (a, b) in grad.iter_mut().zip(g.expect("gradient requested")) {
                    *a += b;
                }
                parts.text += p.text;
                parts.seg += p.seg;
                parts.total += p.total;
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let total = parts.total * scale;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step: report.steps,
                    loss: total,
                });
            }
            if cfg.clip_norm > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.clip_norm {
                    let s = cfg.clip_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam.step(&mut params.data, &grad, lr_at(cfg.lr, report.steps, total_steps));
            report.curve.push(CurvePoint {
                step: report.steps,
                text_loss: parts.text * scale,
                seg_loss: parts.seg * scale,
                total,
            });
            report.steps += 1;
        }
        on_epoch(epoch, params)?;
    }
    if !params.is_finite() {
        return Err(Error::Diverged {
            step: report.steps,
            loss: f64::NAN,
        });
    }
    Ok(report)
}
