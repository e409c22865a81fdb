//! `loba`: build spatial-relation VQA shards, run perturbation tests, train
//! the toy grounded model and compare plain decoding with
//! localize-before-answer.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use loba_core::corpus::{build_shard, read_shard, write_shard, CorpusConfig, DatasetShard, SceneConfig};
use loba_core::harness::{
    ablate, answer_perturbed, answer_shard, answers_by_id, perturbed_flip_rate, read_predictions, write_ablation_csv,
    write_predictions, AnswerMode, RunConfig, ALPHA_GRID, BETA_GRID,
};
use loba_core::metrics::{evaluate, LabelLexicon};
use loba_core::model::checkpoint;
use loba_core::model::gradcheck::grad_check;
use loba_core::model::train::build_examples;
use loba_core::model::{train, ModelConfig, ModelParams, TrainConfig, Tokenizer};
use loba_core::perturbation::{perturb_all, read_records, select_true_positives, write_records, PerturbMode};
use loba_core::self_prompting::{DecodeConfig, HighlightPlan};

#[derive(Parser)]
#[command(name = "loba", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset shard.
    Gen(GenArgs),
    /// Build TPT or VPT records from a prediction file's true positives.
    Perturb(PerturbArgs),
    /// Train the grounded model and write a checkpoint.
    Train(TrainArgs),
    /// Answer every item of a shard, or every perturbation record.
    Answer(AnswerArgs),
    /// Score predictions, and flip rates of perturbed predictions.
    Eval(EvalArgs),
    /// Plain decoding plus the β × α grid of localize-before-answer.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relation threshold on IoU over disease area.
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    /// Pixels per image side.
    #[arg(long, default_value_t = 24)]
    grid: usize,
    /// Fewest disease boxes per scene.
    #[arg(long, default_value_t = SceneConfig::default().diseases_per_scene.0)]
    min_diseases: usize,
    /// Most disease boxes per scene.
    #[arg(long, default_value_t = SceneConfig::default().diseases_per_scene.1)]
    max_diseases: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Tpt,
    Vpt,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    shard: PathBuf,
    /// Predictions on the shard; "yes" answers to positive items are perturbed.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    shard: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_text: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_seg: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_bce: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_dice: f64,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with a `.csv` suffix.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Finite-difference check of the gradient on the first item after training.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct AnswerArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    shard: PathBuf,
    #[arg(long, conflicts_with = "plain")]
    loba: bool,
    #[arg(long)]
    plain: bool,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Highlight image keys in the language layers too.
    #[arg(long)]
    highlight_llm: bool,
    /// Answer these perturbation records instead of the shard's items.
    #[arg(long)]
    perturbations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    shard: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Answers to TPT records.
    #[arg(long)]
    tpt: Option<PathBuf>,
    /// Answers to VPT records.
    #[arg(long)]
    vpt: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    shard: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_shard(path: &Path) -> Result<DatasetShard> {
    read_shard(path).with_context(|| format!("reading shard {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    RunConfig { seed: a.seed, delta: a.delta, ..RunConfig::default() }.validate()?;
    let scene = SceneConfig {
        grid_size: a.grid,
        diseases_per_scene: (a.min_diseases, a.max_diseases),
        ..SceneConfig::default()
    };
    let shard = build_shard(&CorpusConfig {
        scenes: a.scenes,
        seed: a.seed,
        delta: a.delta,
        scene,
    })?;
    write_shard(&shard, &a.out)?;
    println!("{}", serde_json::to_string(&shard.manifest)?);
    Ok(())
}

fn perturb(a: PerturbArgs) -> Result<()> {
    let shard = load_shard(&a.shard)?;
    let preds = read_predictions(&a.predictions)?;
    let tps = select_true_positives(&answers_by_id(&preds), &shard)?;
    let mode = match a.mode {
        Mode::Tpt => PerturbMode::Textual,
        Mode::Vpt => PerturbMode::Visual,
    };
    let set = perturb_all(&tps, &shard, mode, a.seed)?;
    write_records(&set.records, &a.out)?;
    println!(
        "true positives {}, records {}, skipped {}",
        tps.len(),
        set.records.len(),
        set.skipped.len()
    );
    Ok(())
}

fn model_config(shard: &DatasetShard, a: &TrainArgs) -> Result<ModelConfig> {
    let Some(first) = shard.scenes.first() else {
        bail!("shard has no scenes to train on");
    };
    let mut labels: BTreeSet<String> = SceneConfig::default().disease_labels().into_iter().collect();
    labels.extend(shard.disease_vocab());
    let labels: Vec<String> = labels.into_iter().collect();
    let mut cfg = ModelConfig::new(Tokenizer::standard_words(&labels));
    let patch = [4, 3, 2, 1].into_iter().find(|s| first.width % s == 0).unwrap_or(1);
    cfg.patch_size = patch;
    cfg.patch_grid = first.width / patch;
    cfg.d_model = a.d_model;
    cfg.n_heads = a.heads;
    cfg.n_layers = a.layers;
    cfg.d_ff = 2 * a.d_model;
    cfg.lambda_text = a.lambda_text;
    cfg.lambda_seg = a.lambda_seg;
    cfg.lambda_bce = a.lambda_bce;
    cfg.lambda_dice = a.lambda_dice;
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let shard = load_shard(&a.shard)?;
    let cfg = model_config(&shard, &a)?;
    let mut params = ModelParams::init(cfg, a.seed)?;
    let examples = build_examples(&shard, &params.tokenizer(), &params)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let report = train(&mut params, &examples, &tc)?;
    checkpoint::save(&params, &a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    report.write_csv(BufWriter::new(File::create(&csv)?))?;
    let (head, tail) = report.head_tail(20);
    println!("steps {} loss {head:.4} -> {tail:.4}", report.steps);
    if a.verify {
        let r = grad_check(&params, &examples[0], 1e-4, a.seed)?;
        println!(
            "grad check: {} parameters, max relative error {:.3e} ({})",
            r.checked,
            r.max_rel_error,
            if r.max_rel_error < 1e-4 { "ok" } else { "FAILED" }
        );
        if r.max_rel_error >= 1e-4 {
            bail!("gradient check failed at parameter {}", r.worst_index);
        }
    }
    Ok(())
}

fn answer(a: AnswerArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let shard = load_shard(&a.shard)?;
    let mode = if a.loba {
        RunConfig { alpha: a.alpha, beta: a.beta, ..RunConfig::default() }.validate()?;
        AnswerMode::Loba {
            plan: HighlightPlan {
                extend_to_llm: a.highlight_llm,
                ..HighlightPlan::with_beta(a.beta)
            },
            decode: DecodeConfig { alpha: a.alpha },
        }
    } else {
        AnswerMode::Plain
    };
    let preds = match &a.perturbations {
        Some(path) => answer_perturbed(&params, &shard, &read_records(path)?, &mode)?,
        None => answer_shard(&params, &shard, &mode)?,
    };
    write_predictions(&preds, &a.out)?;
    let grounded = preds.iter().filter(|p| p.grounded).count();
    println!("answered {} items, {grounded} grounded", preds.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let shard = load_shard(&a.shard)?;
    let preds = read_predictions(&a.predictions)?;
    let mut report = evaluate(&shard, &answers_by_id(&preds), &LabelLexicon::default())?;
    if let Some(path) = &a.tpt {
        let after = read_predictions(path)?;
        report.counts.insert("tpt".into(), after.len());
        report.tpt_score = Some(perturbed_flip_rate(&after)?);
    }
    if let Some(path) = &a.vpt {
        let after = read_predictions(path)?;
        report.counts.insert("vpt".into(), after.len());
        report.vpt_score = Some(perturbed_flip_rate(&after)?);
    }
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        let mut f = BufWriter::new(File::create(out)?);
        serde_json::to_writer_pretty(&mut f, &report)?;
        writeln!(f)?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let shard = load_shard(&a.shard)?;
    let rows = ablate(&params, &shard, &BETA_GRID, &ALPHA_GRID)?;
    write_ablation_csv(&rows, BufWriter::new(File::create(&a.out)?))?;
    println!("{} settings over {} items", rows.len(), shard.qa.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Perturb(a) => perturb(a),
        Command::Train(a) => train_cmd(a),
        Command::Answer(a) => answer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
