//! `citekit`: extract peripheral contexts, train, evaluate, preview
//! augmentation and verify gradients.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use citekit::augment::{generate_samples, Generator, GeneratorRequest, HttpGenerator, PerturbationGenerator};
use citekit::corpus::{import_3c_csv, load_dataset, save_dataset, CitationInstance, Intent, DEFAULT_MATCH_THRESHOLD};
use citekit::eval::{confusion_matrix, ConfusionMatrix, EvaluationReport};
use citekit::model::{train, verify_gradients, ModelConfig, PeriCite};
use citekit::Error;

const DEFAULT_SEED: u64 = 42;
const SEED_ENV: &str = "CITEKIT_SEED";

#[derive(Parser)]
#[command(name = "citekit", version, about = "Citation intent classification with peripheral context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a JSONL dataset from a citations CSV and full-text documents.
    Extract(ExtractArgs),
    /// Train a model and write a checkpoint plus a JSON history.
    Train(TrainArgs),
    /// Report precision, recall and F1.
    Eval(EvalArgs),
    /// Finite-difference check of every layer and of the full model.
    Gradcheck(GradcheckArgs),
    /// Generate a few synthetic instances for one label.
    Augment(AugmentArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// CSV with core_id, citation_context and label columns.
    #[arg(long)]
    input: PathBuf,
    /// Directory holding one <core_id>.txt per document.
    #[arg(long)]
    fulltext: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Where to write the JSON extraction report (stdout when absent).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Largest accepted normalized edit distance.
    #[arg(long, default_value_t = DEFAULT_MATCH_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training set (JSONL).
    #[arg(long)]
    input: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    output: PathBuf,
    /// History path (defaults to the checkpoint path with .history.json).
    #[arg(long)]
    history: Option<PathBuf>,
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (key=value); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable augmentation.
    #[arg(long)]
    no_tea: bool,
    /// External generation service for augmentation.
    #[arg(long)]
    generator_url: Option<String>,
    #[arg(long, default_value_t = 10)]
    generator_timeout_secs: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Labeled test set (JSONL).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Plain-text 6x6 confusion grid, rows actual.
    #[arg(long)]
    from_confusion: Option<PathBuf>,
    /// Predicted class ids, one per line, aligned with --input.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, hide = true)]
    inject_gradient_fault: bool,
}

#[derive(Args)]
struct AugmentArgs {
    /// Dataset to draw seeds from (JSONL).
    #[arg(long)]
    input: PathBuf,
    /// Target label id (0-5).
    #[arg(long)]
    label: u8,
    #[arg(long, default_value_t = 2)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    generator_url: Option<String>,
    #[arg(long, default_value_t = 10)]
    generator_timeout_secs: u64,
    /// Write samples here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Exit status: 1 for invalid data or configuration, 2 for I/O trouble.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn read_file(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn resolve_seed(flag: Option<u64>) -> std::result::Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn echo(lines: &[(&str, String)]) {
    eprintln!("# effective configuration");
    for (k, v) in lines {
        eprintln!("{k} = {v}");
    }
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "-".into(), |p| p.display().to_string())
}

fn cmd_extract(a: ExtractArgs) -> CmdResult {
    echo(&[
        ("input", a.input.display().to_string()),
        ("fulltext", show(&a.fulltext)),
        ("output", a.output.display().to_string()),
        ("threshold", a.threshold.to_string()),
    ]);
    if let Some(dir) = &a.fulltext {
        if !dir.is_dir() {
            return Err(Failure::Io(format!("{}: not a directory", dir.display())));
        }
    }
    let outcome = import_3c_csv(&a.input, a.fulltext.as_deref(), a.threshold)?;
    save_dataset(&outcome.instances, &a.output)?;
    let report = json!({
        "extracted": outcome.instances.len(),
        "unmatched": outcome.unmatched,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.report {
        Some(path) => write_file(path, &text)?,
        None => println!("{text}"),
    }
    eprintln!(
        "extracted {} instances, {} unmatched",
        outcome.instances.len(),
        outcome.unmatched.len()
    );
    Ok(())
}

fn build_generator(url: &Option<String>, timeout: u64, seed: u64) -> Box<dyn Generator> {
    match url {
        Some(url) => Box::new(HttpGenerator::new(url.clone(), Duration::from_secs(timeout))),
        None => Box::new(PerturbationGenerator::new(seed)),
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut config = ModelConfig::default();
    if let Some(path) = &a.config {
        config.apply_text(&read_file(path)?)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Invalid(format!("--set expects key=value, got {kv:?}")))?;
        config.set(k, v)?;
    }
    config.seed = resolve_seed(a.seed)?;
    if a.no_tea {
        config.tea = false;
    }
    config.validate()?;
    eprint!("# effective configuration\n{}", config.to_text());
    eprintln!("generator = {}", a.generator_url.as_deref().unwrap_or("perturbation"));

    let data = load_dataset(&a.input)?;
    eprintln!("training on {} instances, class counts {}", data.instances.len(), data.counts);
    let mut generator = build_generator(&a.generator_url, a.generator_timeout_secs, config.seed);
    let trained = train(&data.instances, &config, Some(generator.as_mut()))?;

    trained.model.save(&a.output)?;
    let history_path = a.history.unwrap_or_else(|| {
        let mut p = a.output.clone().into_os_string();
        p.push(".history.json");
        PathBuf::from(p)
    });
    let history = json!({
        "config": config,
        "tea_enabled": config.tea,
        "history": trained.history,
        "tea_events": trained.tea_events,
    });
    write_file(&history_path, &serde_json::to_string_pretty(&history).expect("history serializes"))?;
    if let Some(last) = trained.history.epochs.last() {
        eprintln!("final epoch mean loss {:.6}", last.mean_loss);
    }
    Ok(())
}

fn parse_predictions(text: &str) -> std::result::Result<Vec<usize>, Failure> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse::<usize>()
                .ok()
                .filter(|&p| p < 6)
                .ok_or_else(|| Failure::Invalid(format!("predictions line {}: {:?} is not a class id", n + 1, l.trim())))
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    echo(&[
        ("checkpoint", show(&a.checkpoint)),
        ("input", show(&a.input)),
        ("from_confusion", show(&a.from_confusion)),
        ("predictions", show(&a.predictions)),
    ]);
    let truth = |input: &Option<PathBuf>| -> std::result::Result<Vec<CitationInstance>, Failure> {
        let path = input
            .as_ref()
            .ok_or_else(|| Failure::Invalid("--input is required with --checkpoint or --predictions".into()))?;
        Ok(load_dataset(path)?.instances)
    };
    let cm = if let Some(grid) = &a.from_confusion {
        ConfusionMatrix::parse_grid(&read_file(grid)?)?
    } else if let Some(pred_path) = &a.predictions {
        let data = truth(&a.input)?;
        let pred = parse_predictions(&read_file(pred_path)?)?;
        if pred.len() != data.len() {
            return Err(Failure::Io(format!(
                "{} predictions for {} test instances",
                pred.len(),
                data.len()
            )));
        }
        let labels: Vec<usize> = data.iter().map(|i| i.label.index()).collect();
        confusion_matrix(&labels, &pred)?
    } else if let Some(ckpt) = &a.checkpoint {
        let data = truth(&a.input)?;
        let model = PeriCite::load(ckpt)?;
        let pred = model.predict(&data)?;
        let labels: Vec<usize> = data.iter().map(|i| i.label.index()).collect();
        let pred: Vec<usize> = pred.iter().map(|p| p.index()).collect();
        confusion_matrix(&labels, &pred)?
    } else {
        return Err(Failure::Invalid(
            "give --from-confusion, --predictions with --input, or --checkpoint with --input".into(),
        ));
    };
    let report = EvaluationReport::from_confusion(cm)?;
    if let Some(path) = &a.output {
        write_file(path, &report.to_json())?;
    }
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let seed = resolve_seed(a.seed)?;
    echo(&[("eps", format!("{:e}", a.eps)), ("seed", seed.to_string())]);
    let results = verify_gradients(a.eps, seed, a.inject_gradient_fault)?;
    println!("eps {:e}", a.eps);
    for r in &results {
        println!(
            "{:<22} max relative error {:.3e} (tolerance {:.0e}, {} coordinates) {}",
            r.layer,
            r.max_rel_error,
            r.tolerance,
            r.coordinates,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(Failure::Invalid(format!("{n} gradient check(s) failed"))),
    }
}

fn cmd_augment(a: AugmentArgs) -> CmdResult {
    let seed = resolve_seed(a.seed)?;
    echo(&[
        ("input", a.input.display().to_string()),
        ("label", a.label.to_string()),
        ("count", a.count.to_string()),
        ("seed", seed.to_string()),
        ("generator", a.generator_url.clone().unwrap_or_else(|| "perturbation".into())),
    ]);
    let label = Intent::try_from(a.label).map_err(Failure::Invalid)?;
    let data = load_dataset(&a.input)?;
    let seeds: Vec<CitationInstance> = data.instances.into_iter().filter(|i| i.label == label).collect();
    let req = GeneratorRequest::new(label, seeds, a.count)?;
    let mut generator = build_generator(&a.generator_url, a.generator_timeout_secs, seed);
    let samples = generate_samples(&req, generator.as_mut())?;
    match &a.output {
        Some(path) => save_dataset(&samples, path)?,
        None => {
            for s in &samples {
                println!("{}", serde_json::to_string(s).expect("instance serializes"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Augment(a) => cmd_augment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Invalid(msg) | Failure::Io(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
