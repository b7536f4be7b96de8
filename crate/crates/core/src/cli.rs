//! The `a3sn` command line.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_params, save_params, Checkpoint};
use crate::diagnostics::gradcheck_suite;
use crate::encoding::{encode, load_jsonl, synth_dataset, write_jsonl, Example, Polarity};
use crate::error::Error;
use crate::layer::{cross_mass, AblationMode};
use crate::model::forward;
use crate::tensor::DEFAULT_FD_EPS;
use crate::training::{
    ablation_report, evaluate, run_ablations, train, write_metrics_csv, Metrics, Split, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "a3sn", version, about = "Aspect-aware attention sentiment classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset as JSONL.
    SynthData(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a JSONL dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train every ablation mode and write a Markdown report.
    Ablate(AblateArgs),
    /// Dump the attention maps of one head for a single input.
    InspectAttention(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub vocab_size: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training knobs settable from the command line; they override `--config`.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

impl Overrides {
    fn resolve(&self, mode: Option<AblationMode>) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        over!(seed, epochs, lr, batch_size, d_model, heads, layers, d_ff, dropout, max_len);
        if let Some(m) = mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set; without it a seeded share of `--data` is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<AblationMode>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    #[arg(long)]
    pub metrics_csv: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the mode the checkpoint was trained with.
    #[arg(long)]
    pub mode: Option<AblationMode>,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_FD_EPS)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Scored set; without it each mode reports its validation metrics.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out_report: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub aspect: String,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
}

/// A failed command: exit status plus a one-line message.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            EXIT_USAGE => "usage",
            EXIT_DATA => "data",
            _ => "numeric",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.replace('\n', " ");
        write!(f, "error[{}]: {}", self.kind(), one_line.trim_end())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::Data(_) | Error::Io { .. } | Error::Encoding(_) | Error::Checkpoint(_) | Error::EmptyInput(_) => {
                EXIT_DATA
            }
            Error::Numeric(_) | Error::Autograd(_) | Error::Dimension { .. } | Error::Contract(_) => EXIT_NUMERIC,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), CliError>;

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")));
            eprintln!("{}", e.render().to_string().trim_end());
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code
        }
    }
}

pub fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::SynthData(a) => cmd_synth_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::InspectAttention(a) => cmd_inspect_attention(&a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn print_metrics(label: &str, m: &Metrics) {
    println!(
        "{label}: accuracy={:.4} macro_f1={:.4} loss={:.4} n={}",
        m.accuracy,
        m.macro_f1,
        m.loss,
        m.total()
    );
}

fn cmd_synth_data(a: &SynthArgs) -> CmdResult {
    let data = synth_dataset(a.n as usize, a.seed, a.vocab_size as usize)?;
    write_jsonl(&a.out, &data)?;
    println!("wrote {} examples to {}", data.len(), a.out.display());
    for p in Polarity::ALL {
        let k = data.iter().filter(|e| e.label == p).count();
        println!(
            "{:<8} {:>6} ({:.1}%)",
            p.as_str(),
            k,
            100.0 * k as f64 / data.len() as f64
        );
    }
    Ok(())
}

fn load_optional(path: &Option<PathBuf>) -> Result<Option<Vec<Example>>, Error> {
    path.as_ref().map(load_jsonl).transpose()
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let cfg = a.overrides.resolve(a.mode)?;
    let data = load_jsonl(&a.data)?;
    let val = load_optional(&a.val)?;
    let out = train(&data, val.as_deref(), &cfg)?;
    save_params(&out.checkpoint, &a.out_checkpoint)?;
    if let Some(csv) = &a.metrics_csv {
        write_metrics_csv(csv, &out.history, cfg.mode, cfg.seed)?;
    }
    println!(
        "mode={} seed={} epochs={} best_epoch={}",
        cfg.mode, cfg.seed, cfg.epochs, out.best_epoch
    );
    if let Some(last) = out.history.iter().rev().find(|r| r.split == Split::Train) {
        println!(
            "train (epoch {}): accuracy={:.4} macro_f1={:.4} loss={:.4}",
            last.epoch, last.accuracy, last.macro_f1, last.loss
        );
    }
    if let Some(m) = &out.val_metrics {
        print_metrics("val (best epoch)", m);
    }
    println!("checkpoint: {}", a.out_checkpoint.display());
    Ok(())
}

fn checkpoint_mode(ckpt: &Checkpoint) -> Result<AblationMode, Error> {
    match ckpt.meta.lines().find_map(|l| l.strip_prefix("mode=")) {
        Some(m) => m.trim().parse(),
        None => Ok(AblationMode::Full),
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    mode: AblationMode,
    metrics: &'a Metrics,
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let ckpt = load_params(&a.checkpoint)?;
    let mode = match a.mode {
        Some(m) => m,
        None => checkpoint_mode(&ckpt)?,
    };
    let data = load_jsonl(&a.data)?;
    let m = evaluate(&data, &ckpt, mode)?;
    println!("mode={mode}");
    print_metrics("eval", &m);
    for p in Polarity::ALL {
        let c = &m.per_class[p.id()];
        println!(
            "{:<8} precision={:.4} recall={:.4} f1={:.4}",
            p.as_str(),
            c.precision,
            c.recall,
            c.f1
        );
    }
    println!("confusion (rows gold, cols predicted; positive, negative, neutral):");
    for row in &m.confusion {
        println!("  {:?}", row);
    }
    if let Some(path) = &a.out_json {
        let json = serde_json::to_string_pretty(&EvalReport { mode, metrics: &m })
            .map_err(|e| CliError::from(Error::Data(e.to_string())))?;
        write_file(path, json + "\n")?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(CliError::usage("--tol must be positive"));
    }
    if a.d_model == 0 || a.heads == 0 || !a.d_model.is_multiple_of(a.heads) {
        return Err(CliError::usage("--heads must divide a positive --d-model"));
    }
    let checks = gradcheck_suite(a.seed, a.d_model, a.heads, a.eps, a.tol)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{:<width$}  max_rel_err={:.3e}  coords={:<5} {}",
            c.name,
            c.max_rel_error,
            c.coordinates,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed (tol {:e})", checks.len(), a.tol);
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NUMERIC,
            message: format!("gradient check failed (tol {:e}) for: {}", a.tol, failed.join(", ")),
        })
    }
}

fn cmd_ablate(a: &AblateArgs) -> CmdResult {
    let cfg = a.overrides.resolve(None)?;
    let data = load_jsonl(&a.data)?;
    let val = load_optional(&a.val)?;
    let test = load_optional(&a.test)?;
    let rows = run_ablations(&data, val.as_deref(), test.as_deref(), &cfg, |r| {
        println!(
            "{:<16} accuracy={:.4} macro_f1={:.4} best_epoch={}",
            r.mode.as_str(),
            r.metrics.accuracy,
            r.metrics.macro_f1,
            r.best_epoch
        );
    })?;
    let report = ablation_report(&rows);
    write_file(&a.out_report, &report)?;
    print!("{report}");
    Ok(())
}

#[derive(Serialize)]
struct InspectReport {
    tokens: Vec<String>,
    segments: Vec<&'static str>,
    layer: usize,
    head: usize,
    amplify: Vec<Vec<f64>>,
    score_ori: Vec<Vec<f64>>,
    score_amp: Vec<Vec<f64>>,
    gate_o: Vec<Vec<f64>>,
    gate_a: Vec<Vec<f64>>,
    prediction: PredictionJson,
    cross_mass: CrossMass,
}

#[derive(Serialize)]
struct PredictionJson {
    label: Polarity,
    probs: Vec<f64>,
}

#[derive(Serialize)]
struct CrossMass {
    original: f64,
    amplified: f64,
}

fn cmd_inspect_attention(a: &InspectArgs) -> CmdResult {
    let ckpt = load_params(&a.checkpoint)?;
    if a.layer >= ckpt.config.layers {
        return Err(CliError::usage(format!(
            "--layer {} out of range (model has {} layers)",
            a.layer, ckpt.config.layers
        )));
    }
    if a.head >= ckpt.config.layer.heads {
        return Err(CliError::usage(format!(
            "--head {} out of range (model has {} heads)",
            a.head, ckpt.config.layer.heads
        )));
    }
    let mode = checkpoint_mode(&ckpt)?;
    let ex = Example::from_text(&a.text, &a.aspect, Polarity::Neutral)?;
    let enc = encode(&ex, &ckpt.vocab, ckpt.config.max_len)?.trimmed();
    let pred = forward(&enc, &ckpt.params, &ckpt.config, mode)?;
    let trace = &pred.traces[a.layer].heads[a.head];
    let original = cross_mass(&trace.score_ori, &enc.amplify);
    let amplified = cross_mass(&trace.score_amp, &enc.amplify);

    let tokens = enc
        .ids
        .iter()
        .map(|&id| ckpt.vocab.token(id).unwrap_or("[UNK]").to_string())
        .collect();
    let report = InspectReport {
        tokens,
        segments: enc.segments.iter().map(|s| s.as_str()).collect(),
        layer: a.layer,
        head: a.head,
        amplify: enc.amplify.to_rows(),
        score_ori: trace.score_ori.to_rows(),
        score_amp: trace.score_amp.to_rows(),
        gate_o: trace.gate_o.to_rows(),
        gate_a: trace.gate_a.to_rows(),
        prediction: PredictionJson {
            label: pred.predicted,
            probs: pred.probs.clone(),
        },
        cross_mass: CrossMass { original, amplified },
    };
    if let Some(path) = &a.out_json {
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::from(Error::Data(e.to_string())))?;
        write_file(path, json + "\n")?;
    }

    println!(
        "predicted={} probs=[{}]",
        pred.predicted,
        pred.probs
            .iter()
            .map(|p| format!("{p:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!("layer={} head={} positions={}", a.layer, a.head, enc.len());
    println!(
        "cross-segment mass: original={original:.6} amplified={amplified:.6} ratio={:.6}",
        amplified / original
    );
    Ok(())
}
