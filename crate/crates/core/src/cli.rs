//! Command-line surface: noise injection, pipeline and baseline runs,
//! report auditing, and the loss symmetry check.
//!
//! Exit codes are a stable contract: 0 on success, 1 for usage or
//! configuration problems (bad flags, invalid config, unreadable or
//! inconsistent inputs), 2 for failures during execution. Run outputs land
//! under `--out-dir`; `manifest.json` lists the artifacts plus the wall
//! time, which stays out of `report.json` so reports hash identically
//! across repeated runs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{self, DataFormat, DatasetMeta, LabeledDataset};
use crate::learner::Learner;
use crate::losses::{verify_symmetry, LossFamily};
use crate::noise::{self, NoiseError, NoiseKind, NoiseSpec};
use crate::pipeline::{
    self, AuditReport, ExperimentConfig, OracleConfig, PipelineError, RunReport, SubsetAudit,
    SubsetSizes,
};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn classify_pipeline(e: PipelineError) -> CliError {
    match e {
        PipelineError::Config(_) | PipelineError::Datasets(_) => usage(e),
        other => runtime(other),
    }
}

fn classify_noise(e: NoiseError) -> CliError {
    match e {
        NoiseError::BadRate(_) | NoiseError::BadTransition(_) => usage(e),
        other => runtime(other),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "lnl",
    version,
    about = "Noisy-label training with collaborative sample selection and oracle relabeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inject label noise into a dataset and write the noisy copy.
    Inject(InjectArgs),
    /// Run the full pipeline and write report.json under --out-dir.
    Run(RunArgs),
    /// Train the plain cross-entropy baseline on the same budget.
    Baseline(RunArgs),
    /// Extract the per-epoch subset audit from a run report.
    Audit(AuditArgs),
    /// Check the label-sum symmetry of a loss family on random predictions.
    VerifyLoss(VerifyLossArgs),
    /// Print a run report as a table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct InjectArgs {
    /// Input dataset path.
    #[arg(long)]
    input: PathBuf,
    /// Input format: jsonl or csv.
    #[arg(long, default_value = "jsonl")]
    format: String,
    /// Noise kind: symmetric, asymmetric or instance.
    #[arg(long)]
    kind: String,
    /// Target noise rate in [0, 1).
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; always written as JSON Lines.
    #[arg(long)]
    output: PathBuf,
    /// Row-stochastic transition matrix as a JSON array of rows
    /// (asymmetric noise only; defaults to the cyclic matrix).
    #[arg(long)]
    transition: Option<String>,
    /// Class count when the file should not be trusted to cover all classes.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Comma-separated class names.
    #[arg(long)]
    class_names: Option<String>,
    /// Learner checkpoint used to score instance-dependent flips
    /// (defaults to a freshly trained weak scorer).
    #[arg(long)]
    scorer_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Dataset format: jsonl or csv.
    #[arg(long, default_value = "jsonl")]
    format: String,
    /// Root seed; wins over the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Oracle override: identity, remote, simulated or simulated:acc=<p>.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Comma-separated class names.
    #[arg(long)]
    class_names: Option<String>,
    /// Output directory for report.json and manifest.json.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Also write per_sample.csv with per-epoch diagnostics.
    #[arg(long)]
    per_sample_csv: bool,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// A report.json produced by `run`.
    #[arg(long)]
    report: PathBuf,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyLossArgs {
    /// Number of classes.
    #[arg(long)]
    k: usize,
    /// Log-zero constant (negative).
    #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
    a: f64,
    /// Loss family: reversed-ce or ce.
    #[arg(long, default_value = "reversed-ce")]
    family: String,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A report.json produced by `run` or `baseline`.
    #[arg(long)]
    report: PathBuf,
}

/// Parses argv and runs one command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Inject(args) => cmd_inject(&args),
        Command::Run(args) => cmd_run(&args, false),
        Command::Baseline(args) => cmd_run(&args, true),
        Command::Audit(args) => cmd_audit(&args),
        Command::VerifyLoss(args) => cmd_verify_loss(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn parse_format(s: &str) -> Result<DataFormat, CliError> {
    s.parse().map_err(CliError::Usage)
}

fn parse_meta(num_classes: Option<usize>, class_names: Option<&str>) -> DatasetMeta {
    DatasetMeta {
        num_classes,
        class_names: class_names.map(|s| s.split(',').map(|n| n.trim().to_string()).collect()),
    }
}

fn load(path: &Path, format: DataFormat, meta: &DatasetMeta) -> Result<LabeledDataset, CliError> {
    data::load_dataset(path, format, meta).map_err(usage)
}

fn cmd_inject(args: &InjectArgs) -> Result<(), CliError> {
    let format = parse_format(&args.format)?;
    let meta = parse_meta(args.num_classes, args.class_names.as_deref());
    let ds = load(&args.input, format, &meta)?;
    let kind: NoiseKind = args
        .kind
        .parse()
        .map_err(|e: String| CliError::Usage(e))?;
    let transition = match &args.transition {
        Some(text) => Some(
            serde_json::from_str::<Vec<Vec<f64>>>(text)
                .map_err(|e| CliError::Usage(format!("bad --transition: {e}")))?,
        ),
        None => None,
    };
    if kind == NoiseKind::Asymmetric && transition.is_none() {
        println!("no --transition given; applying the cyclic default");
    }
    let noisy = match (&kind, &args.scorer_checkpoint) {
        (NoiseKind::Instance, Some(ckpt)) => {
            let scorer = Learner::load_checkpoint(ckpt).map_err(usage)?;
            noise::inject_instance_dependent(&ds, args.rate, &scorer, args.seed)
                .map_err(classify_noise)?
        }
        _ => NoiseSpec {
            kind,
            rate: args.rate,
            transition,
        }
        .apply(&ds, args.seed)
        .map_err(classify_noise)?,
    };
    data::write_jsonl(&noisy, &args.output).map_err(runtime)?;
    let flips = noisy
        .samples()
        .iter()
        .filter(|s| s.true_label != Some(s.label))
        .count();
    println!(
        "wrote {} samples to {} ({flips} flipped, realized rate {:.4})",
        noisy.len(),
        args.output.display(),
        flips as f64 / noisy.len().max(1) as f64
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    wall_time_secs: f64,
    artifacts: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn cmd_run(args: &RunArgs, baseline: bool) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(oracle) = &args.oracle {
        cfg.oracle = oracle.parse::<OracleConfig>().map_err(CliError::Usage)?;
    }
    cfg.validate().map_err(classify_pipeline)?;

    let format = parse_format(&args.format)?;
    let meta = parse_meta(args.num_classes, args.class_names.as_deref());
    let train = load(&args.train, format, &meta)?;
    let shared = DatasetMeta {
        num_classes: Some(train.num_classes()),
        class_names: Some(train.class_names().to_vec()),
    };
    let dev = load(&args.dev, format, &shared)?;
    let test = load(&args.test, format, &shared)?;

    let started = Instant::now();
    let arts = if baseline {
        pipeline::run_baseline(&cfg, &train, &dev, &test)
    } else {
        pipeline::run_noiseal(&cfg, &train, &dev, &test)
    }
    .map_err(classify_pipeline)?;
    let wall_time_secs = started.elapsed().as_secs_f64();

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| runtime(format!("{}: {e}", args.out_dir.display())))?;
    let mut artifacts = vec!["report.json".to_string()];
    write_json(&args.out_dir.join("report.json"), &arts.report)?;
    if args.per_sample_csv {
        let path = args.out_dir.join("per_sample.csv");
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        for row in &arts.per_sample {
            w.serialize(row).map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
        artifacts.push("per_sample.csv".to_string());
    }
    artifacts.push("manifest.json".to_string());
    let command = if baseline { "baseline" } else { "run" };
    write_json(
        &args.out_dir.join("manifest.json"),
        &Manifest {
            command,
            seed: cfg.seed,
            wall_time_secs,
            artifacts,
        },
    )?;

    let r = &arts.report;
    println!(
        "{command}: final test accuracy {:.4}, best-dev epoch {} with test accuracy {:.4}",
        r.final_test_accuracy, r.best_dev_epoch, r.best_dev_test_accuracy
    );
    if let Some(acc) = r.train_label_accuracy_final {
        println!("final train label accuracy: {acc:.4}");
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<RunReport, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("report {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("report {}: {e}", path.display())))
}

#[derive(Serialize)]
struct AuditRow {
    epoch: usize,
    phase: String,
    sizes: SubsetSizes,
    #[serde(skip_serializing_if = "Option::is_none")]
    purified_before: Option<SubsetAudit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    audit: Option<AuditReport>,
}

fn cmd_audit(args: &AuditArgs) -> Result<(), CliError> {
    let report = read_report(&args.report)?;
    let rows: Vec<AuditRow> = report
        .epochs
        .iter()
        .map(|e| AuditRow {
            epoch: e.epoch,
            phase: e.phase.clone(),
            sizes: e.sizes,
            purified_before: e.purified_before,
            audit: e.audit,
        })
        .collect();
    match &args.out {
        Some(path) => write_json(path, &rows)?,
        None => {
            let mut text = serde_json::to_string_pretty(&rows).map_err(runtime)?;
            text.push('\n');
            print!("{text}");
        }
    }
    Ok(())
}

fn cmd_verify_loss(args: &VerifyLossArgs) -> Result<(), CliError> {
    let family: LossFamily = args.family.parse().map_err(usage)?;
    let report = verify_symmetry(family, args.k, args.a, args.trials, args.seed).map_err(usage)?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => {
            let mut text = serde_json::to_string_pretty(&report).map_err(runtime)?;
            text.push('\n');
            print!("{text}");
        }
    }
    Ok(())
}

fn ratio(r: Option<f64>) -> String {
    r.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let r = read_report(&args.report)?;
    println!("mode: {}   seed: {}", r.mode, r.config.seed);
    println!(
        "{:>5}  {:>9}  {:>5} {:>5} {:>5} {:>5} {:>5}  {:>7} {:>7} {:>7}  {:>5} {:>5}",
        "epoch", "phase", "|C|", "|I|", "|R|", "|P|", "|H|", "dev_s", "dev_w", "test_s", "calls", "fixed"
    );
    for e in &r.epochs {
        println!(
            "{:>5}  {:>9}  {:>5} {:>5} {:>5} {:>5} {:>5}  {:>7.4} {:>7} {:>7.4}  {:>5} {:>5}",
            e.epoch,
            e.phase,
            e.sizes.consistency,
            e.sizes.discrepancy,
            e.sizes.clean,
            e.sizes.purified,
            e.sizes.hard,
            e.dev_accuracy_strong,
            e.dev_accuracy_weak
                .map_or_else(|| "-".to_string(), |v| format!("{v:.4}")),
            e.test_accuracy_strong,
            e.oracle_calls,
            e.corrected,
        );
        if let Some(a) = &e.audit {
            println!(
                "{:>18}clean {}/{} ({})  hard {}/{} ({})  purified {}/{} ({})",
                "",
                a.clean.correct,
                a.clean.size,
                ratio(a.clean.ratio),
                a.hard.correct,
                a.hard.size,
                ratio(a.hard.ratio),
                a.purified.correct,
                a.purified.size,
                ratio(a.purified.ratio),
            );
        }
    }
    println!(
        "final test accuracy {:.4}; best-dev epoch {} with test accuracy {:.4}; oracle calls {}",
        r.final_test_accuracy, r.best_dev_epoch, r.best_dev_test_accuracy, r.oracle_calls_total
    );
    if let Some(acc) = r.train_label_accuracy_final {
        println!("final train label accuracy: {acc:.4}");
    }
    Ok(())
}
