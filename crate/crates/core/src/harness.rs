//! End-to-end workflows shared by the command-line tool, the Python
//! bindings and the acceptance suite: answer, perturb, evaluate, ablate.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_shard, CorpusConfig, DatasetShard, QaKind, SceneConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, flip_rate, normalize_yesno, EvalReport, LabelLexicon, YesNo};
use crate::model::generate::Generation;
use crate::model::train::{build_examples, train, TrainConfig, TrainReport};
use crate::model::{ModelConfig, ModelParams, Tokenizer};
use crate::perturbation::{perturb_all, select_true_positives, PerturbMode, PerturbationRecord};
use crate::self_prompting::{first_pass, second_pass, DecodeConfig, HighlightPlan, PerPassRecord};

pub const BETA_GRID: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 4.0];
pub const ALPHA_GRID: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 1.0, 1.5];

/// One answered item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub qa_id: String,
    pub question: String,
    /// Answer sentence used for scoring.
    pub answer: String,
    /// Full decoded response.
    pub response: String,
    pub grounded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loba: Option<PerPassRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnswerMode {
    Plain,
    Loba { plan: HighlightPlan, decode: DecodeConfig },
}

impl AnswerMode {
    pub fn loba(beta: f64, alpha: f64) -> Self {
        AnswerMode::Loba {
            plan: HighlightPlan::with_beta(beta),
            decode: DecodeConfig { alpha },
        }
    }
}

fn from_pass1(qa_id: &str, question: &str, g: &Generation) -> Prediction {
    Prediction {
        qa_id: qa_id.to_string(),
        question: question.to_string(),
        answer: g.answer.clone(),
        response: g.text.clone(),
        grounded: g.is_grounded(),
        loba: None,
    }
}

fn finish(
    params: &ModelParams,
    qa_id: &str,
    question: &str,
    image: &[f64],
    pass1: &Generation,
    mode: &AnswerMode,
) -> Result<Prediction> {
    match mode {
        AnswerMode::Plain => Ok(from_pass1(qa_id, question, pass1)),
        AnswerMode::Loba { plan, decode } => {
            let out = second_pass(params, question, image, pass1, plan, decode)?;
            Ok(Prediction {
                qa_id: qa_id.to_string(),
                question: question.to_string(),
                answer: out.answer,
                response: out.text,
                grounded: !out.record.fallback,
                loba: Some(out.record),
            })
        }
    }
}

pub fn answer_one(params: &ModelParams, qa_id: &str, question: &str, image: &[f64], mode: &AnswerMode) -> Result<Prediction> {
    let pass1 = first_pass(params, question, image)?;
    finish(params, qa_id, question, image, &pass1, mode)
}

fn scene_image<'a>(shard: &'a DatasetShard, scene_id: &str, qa_id: &str) -> Result<&'a [f64]> {
    shard
        .scene(scene_id)
        .map(|s| s.image.as_slice())
        .ok_or_else(|| Error::InconsistentItem {
            qa_id: qa_id.to_string(),
            reason: format!("unknown scene `{scene_id}`"),
        })
}

/// Answers every QA item of `shard`, in shard order.
pub fn answer_shard(params: &ModelParams, shard: &DatasetShard, mode: &AnswerMode) -> Result<Vec<Prediction>> {
    shard
        .qa
        .iter()
        .map(|item| {
            let image = scene_image(shard, &item.scene_id, &item.qa_id)?;
            answer_one(params, &item.qa_id, &item.question, image, mode)
        })
        .collect()
}

/// Question and image a perturbation record asks about.
pub fn perturbed_input<'a>(shard: &'a DatasetShard, rec: &'a PerturbationRecord) -> Result<(&'a str, &'a [f64])> {
    let base = shard
        .item(&rec.base_qa_id)
        .ok_or_else(|| Error::MissingPrediction(rec.base_qa_id.clone()))?;
    let question = rec.perturbed_question.as_deref().unwrap_or(&base.question);
    let image = match &rec.perturbed_image {
        Some(img) => img.as_slice(),
        None => scene_image(shard, &rec.scene_id, &rec.base_qa_id)?,
    };
    Ok((question, image))
}

/// Answers perturbed inputs; predictions keep the base item's id.
pub fn answer_perturbed(
    params: &ModelParams,
    shard: &DatasetShard,
    records: &[PerturbationRecord],
    mode: &AnswerMode,
) -> Result<Vec<Prediction>> {
    records
        .iter()
        .map(|rec| {
            let (question, image) = perturbed_input(shard, rec)?;
            answer_one(params, &rec.base_qa_id, question, image, mode)
        })
        .collect()
}

pub fn answers_by_id(preds: &[Prediction]) -> BTreeMap<String, String> {
    preds.iter().map(|p| (p.qa_id.clone(), p.answer.clone())).collect()
}

/// Flip rate of answers to perturbed true positives.
pub fn perturbed_flip_rate(after: &[Prediction]) -> Result<f64> {
    let before = vec![YesNo::Yes; after.len()];
    let after: Vec<YesNo> = after.iter().map(|p| normalize_yesno(&p.answer)).collect();
    flip_rate(&before, &after)
}

pub fn write_predictions_to<W: Write>(preds: &[Prediction], mut out: W) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    write_predictions_to(preds, BufWriter::new(File::create(path)?))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Model configuration sized for a scene grid: 4-pixel patches when the
/// grid allows it.
pub fn model_config_for(scene: &SceneConfig) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::new(Tokenizer::standard_words(&scene.disease_labels()));
    let size = [4, 3, 2, 1]
        .into_iter()
        .find(|s| scene.grid_size % s == 0)
        .expect("1 divides every grid");
    cfg.patch_size = size;
    cfg.patch_grid = scene.grid_size / size;
    cfg.validate()?;
    Ok(cfg)
}

/// Scores of one answering method on a held-out shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub report: EvalReport,
    pub true_positives: usize,
    pub tpt_items: usize,
    pub vpt_items: usize,
    pub grounded_rate: f64,
}

impl MethodScores {
    pub fn closed_f1(&self) -> f64 {
        self.report.f1("closed")
    }

    pub fn tpt(&self) -> f64 {
        self.report.tpt_score.unwrap_or(0.0)
    }

    pub fn vpt(&self) -> f64 {
        self.report.vpt_score.unwrap_or(0.0)
    }
}

/// Answers, evaluates, and runs both perturbation tests on the method's own
/// true positives.
pub fn score_method(params: &ModelParams, shard: &DatasetShard, mode: &AnswerMode, seed: u64) -> Result<MethodScores> {
    let preds = answer_shard(params, shard, mode)?;
    let by_id = answers_by_id(&preds);
    let mut report = evaluate(shard, &by_id, &LabelLexicon::default())?;
    let tps = select_true_positives(&by_id, shard)?;
    let mut counts = [0usize; 2];
    for (slot, test) in [PerturbMode::Textual, PerturbMode::Visual].into_iter().enumerate() {
        let set = perturb_all(&tps, shard, test, seed)?;
        counts[slot] = set.records.len();
        if set.records.is_empty() {
            continue;
        }
        let after = answer_perturbed(params, shard, &set.records, mode)?;
        let rate = perturbed_flip_rate(&after)?;
        match test {
            PerturbMode::Textual => report.tpt_score = Some(rate),
            PerturbMode::Visual => report.vpt_score = Some(rate),
        }
    }
    report.counts.insert("tpt".into(), counts[0]);
    report.counts.insert("vpt".into(), counts[1]);
    let grounded = preds.iter().filter(|p| p.grounded).count();
    Ok(MethodScores {
        report,
        true_positives: tps.len(),
        tpt_items: counts[0],
        vpt_items: counts[1],
        grounded_rate: grounded as f64 / preds.len().max(1) as f64,
    })
}

/// Desk-scale comparison of localize-before-answer against the same model
/// decoding without self-prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_vision_layers: usize,
    pub d_ff: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Highlight image keys in the language layers as well.
    pub extend_to_llm: bool,
    pub scene: SceneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_scenes: 2000,
            eval_scenes: 300,
            seed: 2024,
            train: TrainConfig::default(),
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            n_vision_layers: 1,
            d_ff: 64,
            alpha: 0.3,
            beta: 2.0,
            extend_to_llm: true,
            // Every scene carries at least one finding.
            scene: SceneConfig { diseases_per_scene: (1, 3), ..SceneConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub baseline: MethodScores,
    pub loba: MethodScores,
    pub train: TrainReport,
}

impl ExperimentReport {
    /// LobA is no worse on every metric and strictly better on one.
    pub fn loba_wins(&self) -> bool {
        let pairs = [
            (self.loba.closed_f1(), self.baseline.closed_f1()),
            (self.loba.tpt(), self.baseline.tpt()),
            (self.loba.vpt(), self.baseline.vpt()),
        ];
        pairs.iter().all(|(l, b)| l >= b) && pairs.iter().any(|(l, b)| l > b)
    }
}

pub fn experiment_shards(cfg: &ExperimentConfig) -> Result<(DatasetShard, DatasetShard)> {
    let train_shard = build_shard(&CorpusConfig {
        scenes: cfg.train_scenes,
        seed: cfg.seed,
        scene: cfg.scene.clone(),
        ..CorpusConfig::default()
    })?;
    let eval_shard = build_shard(&CorpusConfig {
        scenes: cfg.eval_scenes,
        seed: crate::seed::stream_seed(cfg.seed, "held-out", 0),
        scene: cfg.scene.clone(),
        ..CorpusConfig::default()
    })?;
    Ok((train_shard, eval_shard))
}

pub fn experiment_model(cfg: &ExperimentConfig, train_shard: &DatasetShard) -> Result<(ModelParams, TrainReport)> {
    let mut mc = model_config_for(&cfg.scene)?;
    mc.d_model = cfg.d_model;
    mc.n_heads = cfg.n_heads;
    mc.n_layers = cfg.n_layers;
    mc.n_vision_layers = cfg.n_vision_layers;
    mc.d_ff = cfg.d_ff;
    let mut params = ModelParams::init(mc, crate::seed::stream_seed(cfg.seed, "init", 0))?;
    let examples = build_examples(train_shard, &params.tokenizer(), &params)?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let report = train(&mut params, &examples, &tc)?;
    Ok((params, report))
}

impl ExperimentConfig {
    pub fn loba_mode(&self) -> AnswerMode {
        AnswerMode::Loba {
            plan: HighlightPlan {
                extend_to_llm: self.extend_to_llm,
                ..HighlightPlan::with_beta(self.beta)
            },
            decode: DecodeConfig { alpha: self.alpha },
        }
    }
}

/// Scores plain decoding and the configured LobA mode on `eval_shard`, with
/// the same perturbation seed for both.
pub fn compare_methods(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    eval_shard: &DatasetShard,
) -> Result<(MethodScores, MethodScores)> {
    let seed = crate::seed::stream_seed(cfg.seed, "perturb", 0);
    let baseline = score_method(params, eval_shard, &AnswerMode::Plain, seed)?;
    let loba = score_method(params, eval_shard, &cfg.loba_mode(), seed)?;
    Ok((baseline, loba))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let (train_shard, eval_shard) = experiment_shards(cfg)?;
    let (params, train_report) = experiment_model(cfg, &train_shard)?;
    let (baseline, loba) = compare_methods(cfg, &params, &eval_shard)?;
    Ok(ExperimentReport {
        baseline,
        loba,
        train: train_report,
    })
}

/// One cell of the ablation table. `beta`/`alpha` are `None` for plain
/// decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub closed_f1: f64,
    pub open_f1: f64,
    pub all_f1: f64,
    /// Answers per item, in shard order.
    #[serde(skip)]
    pub answers: Vec<String>,
}

/// Answers `shard` under plain decoding and every `(β, α)` pair. Pass 1
/// does not depend on β or α, so it runs once per item.
pub fn ablate(params: &ModelParams, shard: &DatasetShard, betas: &[f64], alphas: &[f64]) -> Result<Vec<AblationRow>> {
    let lexicon = LabelLexicon::default();
    let mut settings = vec![("plain".to_string(), None, None, AnswerMode::Plain)];
    for &b in betas {
        for &a in alphas {
            settings.push((format!("beta={b},alpha={a}"), Some(b), Some(a), AnswerMode::loba(b, a)));
        }
    }
    let mut answers: Vec<Vec<Prediction>> = vec![Vec::with_capacity(shard.qa.len()); settings.len()];
    for item in &shard.qa {
        let image = scene_image(shard, &item.scene_id, &item.qa_id)?;
        let pass1 = first_pass(params, &item.question, image)?;
        for (slot, (_, _, _, mode)) in settings.iter().enumerate() {
            answers[slot].push(finish(params, &item.qa_id, &item.question, image, &pass1, mode)?);
        }
    }
    let mut rows = Vec::with_capacity(settings.len());
    for ((setting, beta, alpha, _), preds) in settings.into_iter().zip(answers) {
        let report = evaluate(shard, &answers_by_id(&preds), &lexicon)?;
        rows.push(AblationRow {
            setting,
            beta,
            alpha,
            closed_f1: report.f1("closed"),
            open_f1: report.f1("open"),
            all_f1: report.f1("all"),
            answers: preds.into_iter().map(|p| p.answer).collect(),
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut out: W) -> Result<()> {
    writeln!(out, "setting,beta,alpha,closed_f1,open_f1,all_f1")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6}",
            if r.beta.is_some() { "loba" } else { "plain" },
            opt(r.beta),
            opt(r.alpha),
            r.closed_f1,
            r.open_f1,
            r.all_f1
        )?;
    }
    Ok(())
}

/// Numeric ranges shared by the commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Relation threshold on IoU over disease area.
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            delta: 0.5,
            alpha: 0.3,
            beta: 2.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        DecodeConfig { alpha: self.alpha }.validate()?;
        HighlightPlan::with_beta(self.beta).validate(0)
    }
}

/// Counts per question kind, for printing.
pub fn kind_counts(shard: &DatasetShard) -> BTreeMap<QaKind, usize> {
    shard.manifest.qa_counts.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_ranges() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in [
            RunConfig { delta: 1.0, ..RunConfig::default() },
            RunConfig { delta: 0.0, ..RunConfig::default() },
            RunConfig { alpha: -1.0, ..RunConfig::default() },
            RunConfig { beta: 0.0, ..RunConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn default_model_fits_default_scenes() {
        let cfg = model_config_for(&SceneConfig::default()).unwrap();
        assert_eq!(cfg.image_size(), SceneConfig::default().grid_size);
        assert_eq!(cfg.patch_size, 4);
    }

    #[test]
    fn flip_rate_of_predictions() {
        let p = |a: &str| Prediction {
            qa_id: "q".into(),
            question: String::new(),
            answer: a.into(),
            response: String::new(),
            grounded: true,
            loba: None,
        };
        assert_eq!(perturbed_flip_rate(&[p("No"), p("Yes"), p("maybe"), p("no")]).unwrap(), 0.5);
        assert!(perturbed_flip_rate(&[]).is_err());
    }
}
