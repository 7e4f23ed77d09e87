//! The `pwvqa` command-line harness.
//!
//! Subcommands: `gen-data`, `train`, `eval`, `sweep`, `fuse`. Each has a
//! `cmd_*` function taking its parsed arguments so it can be driven from
//! tests without spawning a process.
//!
//! Results are written as `results.csv` and `results.json`. CSV columns, in
//! order:
//!
//! ```text
//! strategy,alpha,epsilon,cf_mode,seed,rule,c,acc_all,acc_<qtype>...,js_to_test
//! ```
//!
//! `eval` and `fuse` also write `histogram.csv` with columns
//! `rule,answer,predicted,reference`: the predicted-answer distribution next
//! to the label distribution of the scored data. `fuse` additionally writes
//! `scores.csv` with the per-record answer scores of every rule:
//! `id,rule,prediction,score_0,...,score_<|A|-1>`.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage or missing input,
//! 3 numerical failure, 4 shape or vocabulary mismatch.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{self, CounterfactualConstant, InferenceRule};
use crate::datagen::io::{import_logits, read_split, write_split};
use crate::datagen::{generate, DatasetSplit, GenConfig, ShiftMode};
use crate::error::Error;
use crate::fusion::{CfMode, FusionConfig, Strategy, DEFAULT_ALPHA, DEFAULT_EPSILON};
use crate::jsonl;
use crate::metrics::{evaluate, evaluate_predictions, EvalReport};
use crate::model::{train, Checkpoint, TrainConfig, TrainedModel, DEFAULT_HIDDEN};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Lib(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::MissingInput(_) => 2,
            CliError::Mismatch(_) => 4,
            CliError::Lib(e) => match e {
                Error::Config(_) | Error::Parse { .. } | Error::Contract(_) => 2,
                Error::NonFiniteLoss { .. } | Error::Domain(_) => 3,
                Error::Dimension { .. } | Error::Format { .. } | Error::Index { .. } => 4,
                Error::Io { .. } | Error::Json(_) => 1,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pwvqa", version, about = "Explain-away fusion and counterfactual debiasing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test splits of the synthetic benchmark.
    GenData(GenDataArgs),
    /// Train encoders and the counterfactual constant.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one or more inference rules.
    Eval(EvalArgs),
    /// Train and evaluate over an alpha/epsilon grid and several seeds.
    Sweep(SweepArgs),
    /// Score externally produced branch logits without training.
    Fuse(FuseArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SeedArg {
    #[arg(long, env = "PWVQA_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct FusionArgs {
    #[arg(long, default_value_t = Strategy::Ea)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = CfMode::Vk)]
    pub cf_mode: CfMode,
}

impl FusionArgs {
    fn config(&self) -> CliResult<FusionConfig> {
        Ok(FusionConfig::new(self.strategy, self.alpha, self.epsilon, self.cf_mode)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 22)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Hidden width of every encoder; 0 gives linear heads.
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    pub hidden: usize,
}

impl OptimArgs {
    fn config(&self, seed: u64, fusion: FusionConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            momentum: self.momentum,
            hidden: self.hidden,
            seed,
            fusion,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Output directory for train.jsonl and test.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = GenConfig::default().vocab_size)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = GenConfig::default().num_qtypes)]
    pub num_qtypes: usize,
    #[arg(long, default_value_t = GenConfig::default().q_dim)]
    pub q_dim: usize,
    #[arg(long, default_value_t = GenConfig::default().v_dim)]
    pub v_dim: usize,
    #[arg(long, default_value_t = GenConfig::default().num_confounder_states)]
    pub confounder_states: usize,
    #[arg(long, default_value_t = GenConfig::default().train_size)]
    pub train_size: usize,
    #[arg(long, default_value_t = GenConfig::default().test_size)]
    pub test_size: usize,
    #[arg(long, default_value_t = GenConfig::default().bias_strength)]
    pub bias_strength: f64,
    #[arg(long, default_value_t = ShiftMode::InvertPrior)]
    pub shift_mode: ShiftMode,
    #[arg(long, default_value_t = GenConfig::default().noise_sigma)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = GenConfig::default().v_signal)]
    pub v_signal: f64,
    #[arg(long, default_value_t = GenConfig::default().q_answer_signal)]
    pub q_answer_signal: f64,
}

impl GenDataArgs {
    pub fn config(&self) -> GenConfig {
        GenConfig {
            vocab_size: self.vocab_size,
            num_qtypes: self.num_qtypes,
            q_dim: self.q_dim,
            v_dim: self.v_dim,
            num_confounder_states: self.confounder_states,
            train_size: self.train_size,
            test_size: self.test_size,
            bias_strength: self.bias_strength,
            shift_mode: self.shift_mode,
            noise_sigma: self.noise_sigma,
            v_signal: self.v_signal,
            q_answer_signal: self.q_answer_signal,
            seed: self.seed.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory (reads train.jsonl) or a dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.json and trace.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Dataset directory (reads test.jsonl) or a dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for results and histogram files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = InferenceRule::ALL)]
    pub rule: Vec<InferenceRule>,
    /// Overrides the counterfactual mode stored in the checkpoint.
    #[arg(long)]
    pub cf_mode: Option<CfMode>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Dataset directory containing train.jsonl and test.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for results.csv and results.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Training seeds; defaults to --seed.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Inclusive alpha range `start:stop:step`; defaults to --alpha.
    #[arg(long)]
    pub grid_alpha: Option<String>,
    /// Comma-separated epsilon values; defaults to --epsilon.
    #[arg(long)]
    pub grid_epsilon: Option<String>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [InferenceRule::Tie])]
    pub rule: Vec<InferenceRule>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: u32,
}

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    /// Logits interchange file.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for results and histogram files.
    #[arg(long)]
    pub out: PathBuf,
    /// Counterfactual constant.
    #[arg(long = "c", default_value_t = 0.0, allow_negative_numbers = true)]
    pub c: f64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[arg(
        long,
        value_delimiter = ',',
        num_args = 1..,
        default_values_t = [InferenceRule::Tie, InferenceRule::Te, InferenceRule::FusedOnly]
    )]
    pub rule: Vec<InferenceRule>,
}

/// One evaluated (configuration, seed, rule) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub alpha: f64,
    pub epsilon: f64,
    pub cf_mode: CfMode,
    pub seed: u64,
    pub rule: InferenceRule,
    pub c: f64,
    #[serde(flatten)]
    pub report: EvalReport,
}

impl RunRecord {
    fn new(fusion: &FusionConfig, seed: u64, rule: InferenceRule, c: f64, report: EvalReport) -> Self {
        RunRecord {
            strategy: fusion.strategy(),
            alpha: fusion.alpha(),
            epsilon: fusion.epsilon(),
            cf_mode: fusion.cf_mode(),
            seed,
            rule,
            c,
            report,
        }
    }
}

/// Contents of `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub vocab: usize,
    pub qtypes: Vec<String>,
    pub records: Vec<RunRecord>,
}

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,alpha,epsilon,cf_mode,seed,rule,c,acc_all");
        for q in &self.qtypes {
            write!(out, ",acc_{q}").unwrap();
        }
        out.push_str(",js_to_test\n");
        for r in &self.records {
            write!(
                out,
                "{},{},{:e},{},{},{},{},{}",
                r.strategy, r.alpha, r.epsilon, r.cf_mode, r.seed, r.rule, r.c, r.report.acc_all
            )
            .unwrap();
            for a in &r.report.acc_per_qtype {
                write!(out, ",{a}").unwrap();
            }
            writeln!(out, ",{}", r.report.js_divergence_to_test).unwrap();
        }
        out
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        require_file(path)?;
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text).map_err(Error::from)?)
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        write_text(&dir.join("results.csv"), &self.to_csv())?;
        let mut json = jsonl::to_pretty(self)?;
        json.push('\n');
        write_text(&dir.join("results.json"), &json)
    }
}

fn histogram_csv(records: &[RunRecord], reference: &[f64]) -> String {
    let mut out = String::from("rule,answer,predicted,reference\n");
    for r in records {
        for (a, (p, t)) in r.report.answer_distribution.iter().zip(reference).enumerate() {
            writeln!(out, "{},{a},{p},{t}", r.rule).unwrap();
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(fs::write(path, text).map_err(|e| Error::io(path, e))?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    Ok(fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?)
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

/// `path` itself if it is a file, otherwise `path/name`.
fn split_file(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn load_split(path: &Path, name: &str) -> CliResult<DatasetSplit> {
    let file = split_file(path, name);
    require_file(&file)?;
    Ok(read_split(&file)?)
}

fn format_row(row: &[f64]) -> String {
    row.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(" ")
}

/// Evaluates `model` on `test` under each rule.
pub fn evaluate_rules(
    model: &TrainedModel,
    test: &DatasetSplit,
    rules: &[InferenceRule],
    seed: u64,
) -> CliResult<Vec<RunRecord>> {
    rules
        .iter()
        .map(|&rule| {
            let report = evaluate(|s| model.predict(s, rule), test)?;
            Ok(RunRecord::new(&model.fusion, seed, rule, model.c.value(), report))
        })
        .collect()
}

fn check_compatible(model: &TrainedModel, data: &DatasetSplit) -> CliResult<()> {
    let s = model.params.shape;
    if s.vocab != data.vocab_size {
        return Err(CliError::Mismatch(format!(
            "vocabulary mismatch: checkpoint has {} answers, data has {}",
            s.vocab, data.vocab_size
        )));
    }
    if (s.q_dim, s.v_dim) != (data.q_dim, data.v_dim) {
        return Err(CliError::Mismatch(format!(
            "feature shape mismatch: checkpoint expects ({}, {}), data has ({}, {})",
            s.q_dim, s.v_dim, data.q_dim, data.v_dim
        )));
    }
    Ok(())
}

pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let (train, test) = generate(&args.config())?;
    create_dir(&args.out)?;
    write_split(&args.out.join("train.jsonl"), &train)?;
    write_split(&args.out.join("test.jsonl"), &test)?;
    for (name, split) in [("train", &train), ("test", &test)] {
        println!("{name}: {} samples, P(answer | qtype):", split.len());
        for (q, row) in split.qtype_names.iter().zip(&split.prior_table) {
            println!("  {q}: {}", format_row(row));
        }
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let data = load_split(&args.data, "train.jsonl")?;
    let cfg = args.optim.config(args.seed.seed, args.fusion.config()?);
    let outcome = train(&data, &cfg)?;
    create_dir(&args.out)?;
    Checkpoint::from_model(&outcome.model, cfg.seed).save(&args.out.join("checkpoint.json"))?;
    let mut trace = String::from("epoch,loss,cls,kl,c\n");
    for e in &outcome.trace {
        writeln!(trace, "{},{},{},{},{}", e.epoch, e.loss, e.cls, e.kl, e.c).unwrap();
    }
    write_text(&args.out.join("trace.csv"), &trace)?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "trained {} epochs: loss {:.4} (cls {:.4}, kl {:.4}), c = {:.4}",
            outcome.trace.len(),
            last.loss,
            last.cls,
            last.kl,
            last.c
        );
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    require_file(&args.checkpoint)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut model = ckpt.to_model()?;
    if let Some(mode) = args.cf_mode {
        model.fusion = model.fusion.with_cf_mode(mode);
    }
    let test = load_split(&args.data, "test.jsonl")?;
    check_compatible(&model, &test)?;
    let records = evaluate_rules(&model, &test, &args.rule, ckpt.seed)?;
    emit_scored(&args.out, &test.qtype_names, records, &test.label_distribution())
}

fn emit_scored(out: &Path, qtypes: &[String], records: Vec<RunRecord>, reference: &[f64]) -> CliResult<()> {
    for r in &records {
        println!(
            "{:<7} acc {:.4}  js {:.4}",
            r.rule.name(),
            r.report.acc_all,
            r.report.js_divergence_to_test
        );
    }
    create_dir(out)?;
    write_text(&out.join("histogram.csv"), &histogram_csv(&records, reference))?;
    ResultsTable {
        vocab: reference.len(),
        qtypes: qtypes.to_vec(),
        records,
    }
    .write(out)
}

/// Parses `start:stop:step` into an inclusive grid.
pub fn parse_alpha_grid(grid: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = grid.split(':').collect();
    let bad = || CliError::Usage(format!("invalid alpha grid {grid:?}; expected start:stop:step"));
    let [start, stop, step] = parts.as_slice() else {
        return Err(bad());
    };
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let (start, stop, step) = (parse(start)?, parse(stop)?, parse(step)?);
    if !(start.is_finite() && stop.is_finite() && step.is_finite() && step > 0.0) {
        return Err(bad());
    }
    if stop < start {
        return Err(CliError::Usage(format!("alpha grid {grid:?} is empty")));
    }
    // Tolerate round-off in (stop - start) / step.
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    // Snap to 12 decimals so 1.0 + 3 * 0.1 prints as 1.3.
    Ok((0..n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

pub fn parse_epsilon_grid(grid: &str) -> CliResult<Vec<f64>> {
    let values = grid
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("invalid epsilon {s:?}")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if values.is_empty() {
        return Err(CliError::Usage("epsilon grid is empty".into()));
    }
    Ok(values)
}

/// Trains and evaluates every (alpha, epsilon, seed) cell, sorted by that key
/// and then by rule.
pub fn run_sweep(args: &SweepArgs, train_split: &DatasetSplit, test: &DatasetSplit) -> CliResult<Vec<RunRecord>> {
    let alphas = match &args.grid_alpha {
        Some(s) => parse_alpha_grid(s)?,
        None => vec![args.fusion.alpha],
    };
    let epsilons = match &args.grid_epsilon {
        Some(s) => parse_epsilon_grid(s)?,
        None => vec![args.fusion.epsilon],
    };
    let seeds = if args.seeds.is_empty() {
        vec![args.seed.seed]
    } else {
        args.seeds.clone()
    };
    let base = args.fusion.config()?;
    let mut cells = Vec::new();
    for &alpha in &alphas {
        for &epsilon in &epsilons {
            let fusion = base.with_alpha(alpha)?.with_epsilon(epsilon)?;
            for &seed in &seeds {
                cells.push(args.optim.config(seed, fusion));
            }
        }
    }
    check_feature_dims(train_split, test)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers as usize)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", args.workers)))?;
    let per_cell: Vec<CliResult<Vec<RunRecord>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cfg| {
                let outcome = train(train_split, cfg)?;
                evaluate_rules(&outcome.model, test, &args.rule, cfg.seed)
            })
            .collect()
    });
    let mut records = Vec::new();
    for cell in per_cell {
        records.extend(cell?);
    }
    records.sort_by(|a, b| {
        a.alpha
            .total_cmp(&b.alpha)
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.seed.cmp(&b.seed))
            .then(a.rule.cmp(&b.rule))
    });
    Ok(records)
}

fn check_feature_dims(train: &DatasetSplit, test: &DatasetSplit) -> CliResult<()> {
    if (train.vocab_size, train.q_dim, train.v_dim) != (test.vocab_size, test.q_dim, test.v_dim) {
        return Err(CliError::Mismatch(
            "train and test splits differ in vocabulary or feature dimensions".into(),
        ));
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let train_split = load_split(&args.data, "train.jsonl")?;
    let test = load_split(&args.data, "test.jsonl")?;
    let records = run_sweep(args, &train_split, &test)?;
    println!("{} rows", records.len());
    create_dir(&args.out)?;
    ResultsTable {
        vocab: test.vocab_size,
        qtypes: test.qtype_names.clone(),
        records,
    }
    .write(&args.out)
}

pub fn cmd_fuse(args: &FuseArgs) -> CliResult<()> {
    require_file(&args.data)?;
    let file = import_logits(&args.data)?;
    if file.records.is_empty() {
        return Err(CliError::Usage(format!("{} has no records", args.data.display())));
    }
    let fusion = args.fusion.config()?;
    let c = CounterfactualConstant::new(args.c)?;
    let vocab = file.header.vocab;
    let nq = file.header.qtypes.len();
    let truth: Vec<(usize, usize)> = file.records.iter().map(|r| (r.label, r.qtype)).collect();
    let mut records = Vec::with_capacity(args.rule.len());
    let mut scores_csv = String::from("id,rule,prediction");
    for a in 0..vocab {
        write!(scores_csv, ",score_{a}").unwrap();
    }
    scores_csv.push('\n');
    for &rule in &args.rule {
        let mut predictions = Vec::with_capacity(file.records.len());
        for r in &file.records {
            let scores = causal::scores(&r.branch, c, &fusion, rule)?;
            let p = causal::argmax(&scores);
            write!(scores_csv, "{},{rule},{p}", r.id).unwrap();
            for x in &scores {
                write!(scores_csv, ",{x}").unwrap();
            }
            scores_csv.push('\n');
            predictions.push(p);
        }
        let report = evaluate_predictions(&predictions, &truth, vocab, nq)?;
        records.push(RunRecord::new(&fusion, args.seed.seed, rule, c.value(), report));
    }
    let mut reference = vec![0.0; vocab];
    for &(label, _) in &truth {
        reference[label] += 1.0 / truth.len() as f64;
    }
    emit_scored(&args.out, &file.header.qtypes, records, &reference)?;
    write_text(&args.out.join("scores.csv"), &scores_csv)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Fuse(a) => cmd_fuse(a),
    }
}
