//! `bbl`: reproducible experiments on the limits of attribute-bias removal.
//!
//! Exit codes: 0 success, 2 usage or format error, 3 sweep finished with
//! failed cells, 4 bound-violation alarm.

mod config;

use bbl_core::datagen::{colorize, parse_idx, read_container, write_container, BiasSpec, ColorSplit, ColorizeConfig, GaussianTask, IdxData, LabeledDataset};
use bbl_core::debias::{Method, TrainedModel};
use bbl_core::exact_info::{bound_corpus, extreme_bias_corpus};
use bbl_core::harness::{
    emit_plot, emit_pvalue_plot, emit_report, load_result, sweep_breaking_points, training_set, verify_bound,
    EstimatorChoice, ReportFormat, SweepConfig, SweepResult, TaskKind, MARGIN_TOLERANCE,
};
use bbl_core::mi_estim::DvConfig;
use bbl_core::stats::{BreakingPointReport, ALPHA};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::ConfigFile;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} sweep cells failed")]
    PartialSweep { failed: usize, total: usize },
    #[error("{0}")]
    BoundViolation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::PartialSweep { .. } => 3,
            CliError::BoundViolation(_) => 4,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "bbl", version, about = "Verify and stress-test the information-theoretic limit on attribute-bias removal")]
struct Cli {
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true, env = "BBL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a bias-controlled dataset and its provenance sidecar.
    GenData(GenDataArgs),
    /// Run a sweep described by a config file.
    Sweep(SweepArgs),
    /// Estimate the bound terms for a trained model on a dataset.
    VerifyBound(VerifyArgs),
    /// Breaking points from a sweep result or a p-value grid.
    BreakingPoint(BreakingArgs),
    /// Check the exact bound on a corpus of random joint distributions.
    Oracle(OracleArgs),
    /// Render a sweep result (or a p-value grid) as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Gaussian,
    #[value(alias = "colorized_digits")]
    Colorized,
    #[value(name = "tabular_mix", alias = "tabular-mix")]
    TabularMix,
}

impl TaskArg {
    fn kind(self) -> TaskKind {
        match self {
            TaskArg::Gaussian => TaskKind::Gaussian,
            TaskArg::Colorized => TaskKind::ColorizedDigits,
            TaskArg::TabularMix => TaskKind::TabularMix,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Agreement probability (gaussian), colour variance (colorized) or
    /// conflicting fraction (tabular_mix).
    #[arg(long)]
    bias_value: f64,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, env = "BBL_SEED", default_value_t = 0)]
    seed: u64,
    /// Dataset container to write; the sidecar goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = GaussianTask::default().signal_dims)]
    signal_dims: usize,
    #[arg(long, default_value_t = GaussianTask::default().spurious_dims)]
    spurious_dims: usize,
    #[arg(long, default_value_t = GaussianTask::default().noise_sigma)]
    noise_sigma: f64,
    /// IDX image file (colorized task).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (colorized task).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Colour the digits as the test split (uniformly random colours).
    #[arg(long)]
    test_split: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// TOML config with [task] [grid] [methods] [training] [estimators] [output].
    config: PathBuf,
    /// Overrides [methods] seed.
    #[arg(long, env = "BBL_SEED")]
    seed: Option<u64>,
    /// Overrides [methods] trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Overrides [output] models_dir.
    #[arg(long)]
    models_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    #[value(name = "neural_dv", alias = "dv")]
    NeuralDv,
    Knn,
    Binned,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Model checkpoint (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Dataset container.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "neural_dv")]
    estimator: EstimatorArg,
    /// Neighbours for the knn estimator.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Bins per dimension for the binned estimator.
    #[arg(long, default_value_t = 8)]
    bins: usize,
    #[arg(long, env = "BBL_SEED", default_value_t = 0)]
    seed: u64,
    /// Write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BreakingArgs {
    /// Sweep result JSON, or a p-value grid JSON.
    input: PathBuf,
    #[arg(long, default_value = "baseline")]
    baseline: String,
    #[arg(long, default_value_t = ALPHA)]
    alpha: f64,
    /// Write the reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write an annotated SVG.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    corpus: u64,
    #[arg(long, env = "BBL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..=64))]
    max_alphabet: u64,
    /// Check the extreme-bias family (Y a function of A, Z independent of A)
    /// instead of general joints.
    #[arg(long)]
    extreme_bias: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Sweep result JSON, or a p-value grid JSON.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "baseline")]
    baseline: String,
}

/// p-values per method on a shared grid, e.g. a published table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PValueGrid {
    grid: Vec<f64>,
    methods: Vec<PValueRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PValueRow {
    method: String,
    p_values: Vec<f64>,
}

enum Input {
    Sweep(Box<SweepResult>),
    PValues(PValueGrid),
}

fn read_input(path: &Path) -> Result<Input, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: not JSON: {e}", path.display())))?;
    if value.get("rows").is_some() {
        load_result(path).map(|r| Input::Sweep(Box::new(r))).map_err(usage)
    } else {
        serde_json::from_value(value)
            .map(Input::PValues)
            .map_err(|e| usage(format!("{}: neither a sweep result nor a p-value grid: {e}", path.display())))
    }
}

fn reports_for(input: &Input, baseline: &str, alpha: f64) -> Result<Vec<BreakingPointReport>, CliError> {
    match input {
        Input::Sweep(result) => {
            let base: Method = baseline.parse().map_err(usage)?;
            if !result.config.methods.contains(&base) {
                return Err(usage(format!("sweep has no `{baseline}` results to compare against")));
            }
            let reports = sweep_breaking_points(result, base).map_err(usage)?;
            if alpha == ALPHA {
                return Ok(reports);
            }
            reports
                .into_iter()
                .map(|r| BreakingPointReport::new(r.method, r.grid, r.p_values, alpha).map_err(usage))
                .collect()
        }
        Input::PValues(g) => g
            .methods
            .iter()
            .map(|row| BreakingPointReport::new(row.method.clone(), g.grid.clone(), row.p_values.clone(), alpha).map_err(usage))
            .collect(),
    }
}

/// One line per level, one column per method; `*` marks breaking points.
fn pvalue_table(reports: &[BreakingPointReport]) -> String {
    let Some(first) = reports.first() else {
        return "no methods to compare\n".into();
    };
    let mut out = format!("{:>10}", "level");
    for r in reports {
        out.push_str(&format!(" {:>10}", r.method));
    }
    out.push('\n');
    for (i, level) in first.grid.iter().enumerate() {
        out.push_str(&format!("{level:>10.4}"));
        for r in reports {
            let mark = if r.breaking_point == Some(*level) { "*" } else { " " };
            out.push_str(&format!(" {:>9.3}{mark}", r.p_values[i]));
        }
        out.push('\n');
    }
    for r in reports {
        match r.breaking_point {
            Some(bp) => out.push_str(&format!("{}: breaking point {bp}\n", r.method)),
            None => out.push_str(&format!("{}: breaking point none\n", r.method)),
        }
    }
    out
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_idx(path: &Path) -> Result<IdxData, CliError> {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    parse_idx(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn colorized(args: &GenDataArgs, spec: BiasSpec) -> Result<LabeledDataset, CliError> {
    let (Some(img), Some(lab)) = (&args.images, &args.labels) else {
        return Err(usage("the colorized task needs --images and --labels (IDX files)"));
    };
    let (IdxData::Images(images), IdxData::Labels(labels)) = (read_idx(img)?, read_idx(lab)?) else {
        return Err(usage("--images must be an IDX image file and --labels an IDX label file"));
    };
    let n = args.n.min(labels.len());
    let images = images.head(n);
    let split = if args.test_split { ColorSplit::Test } else { ColorSplit::Train };
    let cfg = ColorizeConfig { variance: spec.value, split, ..ColorizeConfig::default() };
    colorize(&images, &labels[..n], &cfg, args.seed).map_err(usage)
}

fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let kind = args.task.kind();
    let spec = BiasSpec::new(kind.bias_kind(), args.bias_value).map_err(usage)?;
    if args.n < 2 {
        return Err(usage("--n must be at least 2"));
    }
    let gaussian = GaussianTask { signal_dims: args.signal_dims, spurious_dims: args.spurious_dims, noise_sigma: args.noise_sigma };
    let data = match kind {
        TaskKind::ColorizedDigits => colorized(args, spec)?,
        _ => {
            let cfg = SweepConfig { task: kind, gaussian, n_train: args.n, ..SweepConfig::default() };
            training_set(&cfg, spec, args.seed).map_err(usage)?
        }
    };
    write_container(&data, &args.out).map_err(usage)?;
    let hya = data.hya();
    let mut parameters = serde_json::json!({
        "bias_kind": spec.kind.name(),
        "bias_value": spec.value,
        "n": args.n,
        "seed": args.seed,
    });
    match kind {
        TaskKind::ColorizedDigits => {
            parameters["images"] = serde_json::json!(args.images);
            parameters["labels"] = serde_json::json!(args.labels);
            parameters["split"] = serde_json::json!(if args.test_split { "test" } else { "train" });
        }
        _ => parameters["gaussian"] = serde_json::json!(gaussian),
    }
    let sidecar = serde_json::json!({
        "generator": kind,
        "parameters": parameters,
        "samples": data.len(),
        "n_targets": data.n_targets,
        "n_attributes": data.n_attributes,
        "hya_nats": hya,
        "provenance": data.provenance,
    });
    write_json(&sidecar, &sidecar_path(&args.out))?;
    println!("wrote {} samples to {} (H(Y|A) = {hya:.6} nats)", data.len(), args.out.display());
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(&args.config)?;
    let mut config = file.to_sweep()?;
    if let Some(seed) = args.seed {
        config.base_seed = seed;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    config.validate().map_err(usage)?;
    let models_dir = args.models_dir.clone().or_else(|| file.output.models_dir.clone());
    let out = &file.output;
    if out.csv.is_none() && out.json.is_none() && out.svg.is_none() {
        return Err(usage("[output] names no csv, json or svg file"));
    }
    let mut resolved = file.clone();
    resolved.methods.seed = config.base_seed;
    resolved.methods.trials = config.trials;
    resolved.output.models_dir = models_dir.clone();
    println!("# resolved configuration\n{}", resolved.render());
    if let Some(dir) = &models_dir {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    }

    let started = std::time::Instant::now();
    let result = bbl_core::harness::run_sweep_saving(&config, models_dir.as_deref()).map_err(usage)?;
    println!("{} models in {:.1} s", result.rows.len(), started.elapsed().as_secs_f64());
    for c in &result.summary {
        println!(
            "{:>10} {}={:<6} acc {:.3} ± {:.3}  I(Z;A) {}  I(Z;Y) {}",
            c.method.name(),
            result.config.bias_kind().name(),
            c.bias_value,
            c.acc_unbiased_mean,
            c.acc_unbiased_std,
            c.iza_mean.map_or("-".into(), |v| format!("{v:.3}")),
            c.izy_mean.map_or("-".into(), |v| format!("{v:.3}")),
        );
    }
    if let Some(m) = result.min_margin() {
        println!("min bound margin {m:.4} nats");
    }
    let reports = if config.methods.contains(&Method::Baseline) {
        match sweep_breaking_points(&result, Method::Baseline) {
            Ok(r) => {
                print!("{}", pvalue_table(&r));
                r
            }
            Err(e) => {
                eprintln!("breaking points unavailable: {e}");
                Vec::new()
            }
        }
    } else {
        Vec::new()
    };
    if let Some(p) = &out.csv {
        emit_report(&result, ReportFormat::Csv, p).map_err(usage)?;
    }
    if let Some(p) = &out.json {
        emit_report(&result, ReportFormat::Json, p).map_err(usage)?;
    }
    if let Some(p) = &out.svg {
        emit_plot(&result, &reports, p).map_err(usage)?;
    }
    for f in &result.failures {
        eprintln!("failed: {} level {} trial {}: {}", f.method, f.level, f.trial, f.error);
    }
    if result.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::PartialSweep { failed: result.failures.len(), total: result.rows.len() })
    }
}

fn verify(args: &VerifyArgs) -> Result<(), CliError> {
    let model = TrainedModel::load(&args.model).map_err(usage)?;
    let data = read_container(&args.data).map_err(usage)?;
    if model.input_width() != data.dim() {
        return Err(usage(format!(
            "model expects {} input features but the dataset has {}",
            model.input_width(),
            data.dim()
        )));
    }
    let estimator = match args.estimator {
        EstimatorArg::NeuralDv => EstimatorChoice::NeuralDv { config: DvConfig { seed: args.seed, ..DvConfig::default() } },
        EstimatorArg::Knn => EstimatorChoice::Knn { k: args.k },
        EstimatorArg::Binned => EstimatorChoice::Binned { bins: args.bins },
    };
    let report = verify_bound(&model, &data, &estimator).map_err(usage)?;
    let show = |v: Option<f64>| v.map_or("unavailable".to_string(), |v| format!("{v:.4}"));
    println!("I(Z;Y)  = {} nats", show(report.izy_nats));
    println!("I(Z;A)  = {} nats", show(report.iza_nats));
    println!("H(Y|A)  = {:.4} nats", report.hya_nats);
    println!("margin  = {} nats (I(Z;A) + H(Y|A) - I(Z;Y), tolerance {MARGIN_TOLERANCE})", show(report.margin_nats));
    for e in &report.errors {
        println!("unreliable: {e}");
    }
    if let Some(p) = &args.out {
        write_json(&report, p)?;
    }
    if report.holds(MARGIN_TOLERANCE) {
        Ok(())
    } else {
        Err(CliError::BoundViolation(format!(
            "estimated margin {} is below -{MARGIN_TOLERANCE} nats",
            show(report.margin_nats)
        )))
    }
}

fn breaking_point(args: &BreakingArgs) -> Result<(), CliError> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(usage("--alpha must lie in (0, 1)"));
    }
    let input = read_input(&args.input)?;
    let reports = reports_for(&input, &args.baseline, args.alpha)?;
    print!("{}", pvalue_table(&reports));
    if let Some(p) = &args.out {
        write_json(&reports, p)?;
    }
    if let Some(p) = &args.svg {
        match &input {
            Input::Sweep(r) => emit_plot(r, &reports, p),
            Input::PValues(_) => emit_pvalue_plot(&reports, p),
        }
        .map_err(usage)?;
    }
    Ok(())
}

fn oracle(args: &OracleArgs) -> Result<(), CliError> {
    let count = args.corpus as usize;
    let max = args.max_alphabet as usize;
    if args.extreme_bias {
        let s = extreme_bias_corpus(count, max, args.seed).map_err(usage)?;
        println!("extreme-bias joints: {}  max I(Z;Y) = {:.3e} nats  violations: {}", s.joints, s.max_izy, s.violations);
        if s.violations > 0 {
            return Err(CliError::BoundViolation(format!("{} joints with I(Z;Y) > 1e-9", s.violations)));
        }
    } else {
        let s = bound_corpus(count, max, args.seed).map_err(usage)?;
        println!(
            "random joints: {}  min bound margin = {:.3e}  min strong margin = {:.3e}  violations: {}",
            s.joints, s.min_margin, s.min_strong_margin, s.violations
        );
        if s.violations > 0 {
            return Err(CliError::BoundViolation(format!("{} joints violate the bound", s.violations)));
        }
    }
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<(), CliError> {
    let input = read_input(&args.input)?;
    let reports = match &input {
        Input::Sweep(r) if !r.config.methods.iter().any(|m| m.name() == args.baseline) => Vec::new(),
        _ => reports_for(&input, &args.baseline, ALPHA)?,
    };
    match &input {
        Input::Sweep(r) => emit_plot(r, &reports, &args.out),
        Input::PValues(_) => emit_pvalue_plot(&reports, &args.out),
    }
    .map_err(usage)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(usage)?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Sweep(a) => sweep(a),
        Command::VerifyBound(a) => verify(a),
        Command::BreakingPoint(a) => breaking_point(a),
        Command::Oracle(a) => oracle(a),
        Command::Plot(a) => plot(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
