//! `paramnet`: complexity analysis, gradient checks, toy training and
//! report tables for dynamic-convolution CNNs and MoE language models.
//!
//! Exit status: 0 when every requested check holds, 1 when a check fails,
//! 2 on errors (unreadable input, divergence, invalid arguments).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use paramnet_core::complexity::{count_descriptor, FlopConvention, TransformerFlops};
use paramnet_core::layers::{MoeConfig, MoePlacement};
use paramnet_core::models::{
    gradcheck_model, save_checkpoint, Checkpoint, GradCheckOptions, Model, ModelDescriptor,
};
use paramnet_core::tensor::OpKind;
use paramnet_core::train::{train, DatasetSpec, RunRecord, RunSummary, TrainConfig, SUMMARY_FILE};
use paramnet_core::Prng;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const SWEEP_FILE: &str = "sweep.csv";
/// Column contract of `report` output (version 1).
const REPORT_COLUMNS: [&str; 4] = ["model", "params", "flops", "metric"];
const SWEEP_COLUMNS: [&str; 6] = ["model", "experts", "params", "flops", "final_loss", "metric"];

#[derive(Parser)]
#[command(name = "paramnet", version, about = "Parameter/FLOPs analysis and toy training for dynamic-conv and MoE models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer and total parameter/FLOP counts with exact ratios.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every layer's gradients.
    Gradcheck(GradcheckArgs),
    /// Train a model on a synthetic dataset.
    Train(TrainArgs),
    /// Train one model per expert count and tabulate the results.
    Sweep(SweepArgs),
    /// Collect run summaries into a (model, params, flops, metric) CSV.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// Model descriptor (JSON).
    descriptor: PathBuf,
    /// `mac=1` counts a multiply-accumulate as one FLOP; `mac=2` as two.
    #[arg(long, default_value = "mac=1")]
    flop_convention: FlopConvention,
    /// Prompt length for transformer per-token FLOPs (default: max_seq_len).
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Generated tokens for transformer per-token FLOPs.
    #[arg(long, default_value_t = 1)]
    response_len: usize,
    /// Fail unless total parameters are within `--tol` (relative) of this.
    #[arg(long)]
    expect_params: Option<f64>,
    /// Fail unless total FLOPs are within `--tol` (relative) of this.
    #[arg(long)]
    expect_flops: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    tol: f64,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write the document here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    descriptor: PathBuf,
    /// Number of probe seeds (0..N).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Seed for the model's initial parameters.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    /// Maximum relative error per layer.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Central-difference step for parameters.
    #[arg(long)]
    step: Option<f64>,
    /// Coordinates sampled per tensor and seed.
    #[arg(long, default_value_t = 6)]
    coords: usize,
    /// Corrupt the backward rule of one op (e.g. `conv2d`) as a negative control.
    #[arg(long)]
    inject_fault: Option<OpKind>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    descriptor: PathBuf,
    /// Training configuration (JSON).
    config: PathBuf,
    /// Dataset specification (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Overrides the config seed (also seeds the initial parameters).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for run.jsonl, summary.json and the checkpoint.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(clap::Args)]
struct SweepArgs {
    descriptor: PathBuf,
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Expert counts; `0` or `dense` is the baseline without dynamic layers.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    experts: Vec<ExpertCount>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Only count parameters and FLOPs; skip training.
    #[arg(long)]
    count_only: bool,
}

#[derive(Clone, Copy, Debug)]
struct ExpertCount(usize);

impl std::str::FromStr for ExpertCount {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "dense" => Ok(ExpertCount(0)),
            n => n.parse().map(ExpertCount).map_err(|e| format!("bad expert count {n:?}: {e}")),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    /// Train accuracy for classifiers, final cross-entropy for LMs.
    Auto,
    Accuracy,
    Loss,
    Ce,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Run directories, summary files, or sweep directories holding runs.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    metric: Metric,
    /// Fail unless FLOPs vary by at most this fraction across rows.
    #[arg(long)]
    max_flops_spread: Option<f64>,
    /// Fail unless params strictly increase down the rows.
    #[arg(long)]
    monotone_params: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// Outcome of a requested assertion.
#[derive(Debug, Serialize)]
struct Check {
    name: String,
    expected: f64,
    actual: f64,
    rel_error: f64,
    tol: f64,
    passed: bool,
}

impl Check {
    fn relative(name: &str, expected: f64, actual: f64, tol: f64) -> Self {
        let rel_error = (actual - expected).abs() / expected.abs().max(f64::MIN_POSITIVE);
        Self {
            name: name.into(),
            expected,
            actual,
            rel_error,
            tol,
            passed: rel_error <= tol,
        }
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn load_descriptor(path: &Path) -> Result<ModelDescriptor> {
    ModelDescriptor::from_path(path).with_context(|| format!("reading descriptor {}", path.display()))
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    TrainConfig::from_json(&text).with_context(|| format!("in config {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<DatasetSpec> {
    DatasetSpec::from_path(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn analyze(args: AnalyzeArgs) -> Result<bool> {
    let desc = load_descriptor(&args.descriptor)?;
    let flops = match &desc {
        ModelDescriptor::Llama(d) => Some(TransformerFlops {
            prompt_len: args.prompt_len.unwrap_or(d.max_seq_len),
            response_len: args.response_len,
        }),
        _ => None,
    };
    let report = count_descriptor(&desc, args.flop_convention, flops)?;
    let mut checks = Vec::new();
    if let Some(expected) = args.expect_params {
        checks.push(Check::relative("total_params", expected, report.totals.params as f64, args.tol));
    }
    if let Some(expected) = args.expect_flops {
        checks.push(Check::relative("total_flops", expected, report.totals.flops as f64, args.tol));
    }
    let passed = checks.iter().all(|c| c.passed);
    let text = match args.format {
        Format::Json => {
            let mut doc = serde_json::to_value(&report)?;
            let obj = doc.as_object_mut().expect("report serializes to an object");
            obj.insert("checks".into(), serde_json::to_value(&checks)?);
            obj.insert("passed".into(), passed.into());
            serde_json::to_string_pretty(&doc)? + "\n"
        }
        Format::Csv => report.to_csv()?,
        Format::Text => {
            let mut t = report.to_text();
            for c in &checks {
                t.push_str(&format!(
                    "check {}: expected {:.6e}, got {} (rel error {:.3e}, tol {}) {}\n",
                    c.name,
                    c.expected,
                    c.actual,
                    c.rel_error,
                    c.tol,
                    if c.passed { "PASS" } else { "FAIL" }
                ));
            }
            t
        }
    };
    emit(args.output.as_deref(), &text)?;
    for c in checks.iter().filter(|c| !c.passed) {
        eprintln!(
            "check failed: {} = {} is {:.3e} from expected {:e} (tol {})",
            c.name, c.actual, c.rel_error, c.expected, c.tol
        );
    }
    Ok(passed)
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let desc = load_descriptor(&args.descriptor)?;
    let model = Model::build(&desc, &Prng::new(args.init_seed))?;
    let opts = GradCheckOptions {
        seeds: (0..args.seeds).collect(),
        tolerance: args.tol,
        step: args.step,
        coords_per_tensor: args.coords,
        fault: args.inject_fault,
        ..GradCheckOptions::default()
    };
    let report = gradcheck_model(&model, &opts)?;
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Csv => {
            let mut t = String::from("layer,checked,max_rel_error,worst_tensor,passed\n");
            for l in &report.layers {
                t.push_str(&format!("{},{},{:e},{},{}\n", l.layer, l.checked, l.max_rel_error, l.worst_tensor, l.passed));
            }
            t
        }
        Format::Text => {
            let mut t = format!("{} (tol {:e}, step {:e}, seeds {:?})\n", report.model, report.tolerance, report.step, report.seeds);
            for l in &report.layers {
                t.push_str(&format!(
                    "{:<48} {:>6} coords  max rel err {:.3e}  {}\n",
                    l.layer,
                    l.checked,
                    l.max_rel_error,
                    if l.passed { "ok" } else { "FAIL" }
                ));
            }
            t
        }
    };
    emit(args.output.as_deref(), &text)?;
    for l in report.failing() {
        eprintln!(
            "gradient check failed in layer {}: max relative error {:.3e} (worst tensor {})",
            l.layer, l.max_rel_error, l.worst_tensor
        );
    }
    Ok(report.passed)
}

/// Trains `desc` and writes the run record and checkpoint into `dir`.
fn run_training(desc: &ModelDescriptor, cfg: &TrainConfig, data: &DatasetSpec, dir: &Path) -> Result<RunRecord> {
    let mut model = Model::build(desc, &Prng::new(cfg.seed))?;
    let started = Instant::now();
    let record = train(&mut model, data, cfg).with_context(|| format!("training {}", desc.name()))?;
    eprintln!("{}: {} steps in {:.2}s", desc.name(), record.summary.steps, started.elapsed().as_secs_f64());
    record.write_to_dir(dir)?;
    save_checkpoint(
        &Checkpoint {
            model,
            seed: cfg.seed,
            step: record.summary.steps as u64,
        },
        dir.join(CHECKPOINT_FILE),
    )?;
    Ok(record)
}

fn train_cmd(args: TrainArgs) -> Result<bool> {
    let desc = load_descriptor(&args.descriptor)?;
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data = load_dataset(&args.data)?;
    let record = run_training(&desc, &cfg, &data, &args.out_dir)?;
    emit(None, &(serde_json::to_string_pretty(&record.summary)? + "\n"))?;
    Ok(true)
}

/// `desc` with `m` experts in its dynamic layers (0: none).
fn with_experts(desc: &ModelDescriptor, m: usize) -> Result<ModelDescriptor> {
    Ok(match desc {
        ModelDescriptor::Cnn(d) => {
            let mut d = d.clone();
            d.dynamic = match m {
                0 => None,
                _ => Some(paramnet_core::models::DynamicSpec {
                    m,
                    replace_set: d.dynamic.map(|s| s.replace_set).unwrap_or_default(),
                }),
            };
            d.name = variant_name(&d.name, m);
            ModelDescriptor::Cnn(d)
        }
        ModelDescriptor::Llama(d) => {
            let mut d = d.clone();
            d.moe = match m {
                0 => None,
                _ => Some(MoeConfig {
                    n_experts: m,
                    ..d.moe.unwrap_or_else(|| MoeConfig::new(m, MoePlacement::UpProj))
                }),
            };
            d.name = variant_name(&d.name, m);
            ModelDescriptor::Llama(d)
        }
        ModelDescriptor::DynamicConv(_) => {
            bail!("sweep needs a cnn or llama descriptor; analyze a single dynamic convolution instead")
        }
    })
}

fn variant_name(base: &str, m: usize) -> String {
    match m {
        0 => format!("{base}-dense"),
        _ => format!("{base}-m{m}"),
    }
}

fn csv_line(fields: &[String]) -> String {
    let quoted: Vec<String> = fields
        .iter()
        .map(|f| {
            if f.contains([',', '"', '\n']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.clone()
            }
        })
        .collect();
    quoted.join(",") + "\n"
}

fn metric_of(summary: &RunSummary, metric: Metric) -> Option<f64> {
    match metric {
        Metric::Auto => summary.train_accuracy.or(summary.final_ce),
        Metric::Accuracy => summary.train_accuracy,
        Metric::Loss => Some(summary.final_loss),
        Metric::Ce => summary.final_ce,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn sweep(args: SweepArgs) -> Result<bool> {
    let desc = load_descriptor(&args.descriptor)?;
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data = if args.count_only { None } else { Some(load_dataset(&args.data)?) };
    fs::create_dir_all(&args.out_dir)?;
    let mut table = csv_line(&SWEEP_COLUMNS.map(String::from));
    for &ExpertCount(m) in &args.experts {
        let variant = with_experts(&desc, m)?;
        let counts = count_descriptor(&variant, FlopConvention::Mac1, None)?;
        let (loss, metric) = match &data {
            Some(data) => {
                let record = run_training(&variant, &cfg, data, &args.out_dir.join(variant.name()))?;
                (Some(record.summary.final_loss), metric_of(&record.summary, Metric::Auto))
            }
            None => (None, None),
        };
        table.push_str(&csv_line(&[
            variant.name().to_string(),
            m.to_string(),
            counts.totals.params.to_string(),
            counts.totals.flops.to_string(),
            fmt_opt(loss),
            fmt_opt(metric),
        ]));
    }
    fs::write(args.out_dir.join(SWEEP_FILE), &table)?;
    emit(None, &table)?;
    Ok(true)
}

/// Summary files named by `inputs`: files as given, run directories via
/// their summary, and directories of runs one level down.
fn collect_summaries(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for input in inputs {
        if input.is_file() {
            found.push(input.clone());
        } else if input.join(SUMMARY_FILE).is_file() {
            found.push(input.join(SUMMARY_FILE));
        } else if input.is_dir() {
            let mut runs: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path().join(SUMMARY_FILE)))
                .filter(|p| p.is_file())
                .collect();
            runs.sort();
            found.extend(runs);
        } else {
            bail!("{}: no such file or directory", input.display());
        }
    }
    if found.is_empty() {
        bail!("no run records found in {:?}", inputs);
    }
    Ok(found)
}

fn report(args: ReportArgs) -> Result<bool> {
    let files = collect_summaries(&args.inputs)?;
    let mut rows = Vec::new();
    for file in &files {
        let record = RunRecord::read_summary(file).with_context(|| format!("malformed run record {}", file.display()))?;
        rows.push(record.summary);
    }
    let mut text = csv_line(&REPORT_COLUMNS.map(String::from));
    for s in &rows {
        text.push_str(&csv_line(&[
            s.model.clone(),
            s.params.to_string(),
            s.flops.to_string(),
            fmt_opt(metric_of(s, args.metric)),
        ]));
    }
    emit(args.output.as_deref(), &text)?;
    let mut passed = true;
    if let Some(limit) = args.max_flops_spread {
        let max = rows.iter().map(|s| s.flops).max().unwrap_or(0) as f64;
        let min = rows.iter().map(|s| s.flops).min().unwrap_or(0) as f64;
        let spread = (max - min) / min.max(1.0);
        if spread > limit {
            eprintln!("check failed: FLOPs spread {spread:.4} exceeds {limit}");
            passed = false;
        }
    }
    if args.monotone_params && !rows.windows(2).all(|w| w[1].params > w[0].params) {
        eprintln!("check failed: params do not strictly increase down the rows");
        passed = false;
    }
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
