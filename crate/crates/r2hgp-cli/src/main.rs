//! Command-line front end for the r2hgp library: benchmark sweeps, ablation
//! runs, simulation-data export, and train/predict round trips on saved
//! models.
//!
//! Exit codes: 0 success; 2 configuration error (unreadable or invalid
//! config, bad flag values, missing data files); 3 benchmark ran but every
//! repetition of every method failed; 4 model file unreadable, corrupt, or
//! of a different format version.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use r2hgp::alignnet::ReferenceMapSpec;
use r2hgp::bench::{
    gen_case, run_benchmark, run_benchmark_data, BenchReport, BenchSettings, CaseId, Method,
    SimCaseSpec, DEFAULT_GAMMA, DEFAULT_LAMBDA,
};
use r2hgp::dataio::{load_csv, write_csv, write_results_json, Dataset, DomainId, TransferData};
use r2hgp::objective::ObjectiveConfig;
use r2hgp::optim::{load_model, save_model, select_hyperparams, train, TrainConfig, TrainedModel};
use r2hgp::rng::stream;

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "r2hgp", version, about = "Multi-source transfer GP benchmarks and models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the repeated benchmark described by a config file.
    Benchmark(RunArgs),
    /// Benchmark the regularizer ablation variants (full model, each
    /// regularizer alone, neither).
    Ablate(RunArgs),
    /// Generate one repetition of a simulation case and write it as CSV.
    Simulate(RunArgs),
    /// Train one transfer model and save it.
    Train(RunArgs),
    /// Load a saved model and predict at new inputs.
    Predict(PredictArgs),
}

/// Flags shared by the config-driven commands. Flags override config values.
#[derive(Args)]
struct RunArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config output.dir, else ".").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base settings preset; config model values override it.
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Comma-separated method list (benchmark only).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
}

#[derive(Args)]
struct PredictArgs {
    /// Config describing the training data the model conditions on.
    #[arg(long)]
    config: PathBuf,
    /// Saved model file.
    #[arg(long)]
    model: PathBuf,
    /// CSV of prediction inputs in the canonical x1..xd,y layout (the y
    /// column is ignored).
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

/// One run configuration. Unknown keys are rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    /// Simulation case name ("case1", "case2", "case3"); exclusive with
    /// `data`.
    #[serde(default)]
    case: Option<String>,
    /// CSV-backed dataset; exclusive with `case`.
    #[serde(default)]
    data: Option<DataSection>,
    /// Base preset the model section overrides ("desk" default, or "paper").
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    model: ModelSection,
    /// Benchmark method names; default R2HGP, TGP, IMC.
    #[serde(default)]
    methods: Option<Vec<String>>,
    /// Cross-validation grids for `train`.
    #[serde(default)]
    grids: Option<GridSection>,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    sources: Vec<PathBuf>,
    target: PathBuf,
    /// Test set for benchmarks (inputs and ground-truth outputs).
    #[serde(default)]
    test: Option<PathBuf>,
    /// One reference mapping per source.
    references: Vec<ReferenceMapSpec>,
    /// Source the IMC baseline uses.
    #[serde(default)]
    single_source: usize,
}

/// Optional overrides of the preset's settings.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    #[serde(default)]
    repetitions: Option<usize>,
    #[serde(default)]
    epochs: Option<usize>,
    #[serde(default)]
    learning_rate: Option<f64>,
    #[serde(default)]
    smoothing_window: Option<usize>,
    #[serde(default)]
    hidden_width: Option<usize>,
    #[serde(default)]
    mu: Option<f64>,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default)]
    lambda: Option<f64>,
    #[serde(default)]
    gamma: Option<f64>,
    #[serde(default)]
    l_draws: Option<usize>,
    #[serde(default)]
    m_draws: Option<usize>,
    #[serde(default)]
    k_draws: Option<usize>,
    #[serde(default)]
    w_draws: Option<usize>,
    /// Recognition-input weighting per source (default all ones).
    #[serde(default)]
    alphas: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    lambda: Vec<f64>,
    gamma: Vec<f64>,
    #[serde(default = "default_folds")]
    folds: usize,
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    #[serde(default)]
    dir: Option<PathBuf>,
    /// Results file name for benchmark/ablate (default results.json).
    #[serde(default)]
    results: Option<String>,
    /// Model file name for train (default model.json).
    #[serde(default)]
    model: Option<String>,
    /// Predictions file name for predict (default predictions.csv).
    #[serde(default)]
    predictions: Option<String>,
    /// Write per-method training-loss traces under <dir>/traces.
    #[serde(default)]
    traces: bool,
}

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

enum CliError {
    /// Bad configuration or unusable input files → exit 2.
    Config(String),
    /// Every repetition of every method failed → exit 3.
    AllRepsFailed(String),
    /// Unreadable, corrupt, or version-mismatched model file → exit 4.
    Model(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::AllRepsFailed(_) => 3,
            CliError::Model(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::AllRepsFailed(m) | CliError::Model(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Benchmark(a) => cmd_benchmark(&a, false),
        Cmd::Ablate(a) => cmd_benchmark(&a, true),
        Cmd::Simulate(a) => cmd_simulate(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Predict(a) => cmd_predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))?;
    if cfg.case.is_some() == cfg.data.is_some() {
        return Err(config_err(format!(
            "config {} must set exactly one of \"case\" and \"data\"",
            path.display()
        )));
    }
    Ok(cfg)
}

fn parse_case(name: &str) -> CliResult<CaseId> {
    match name.to_ascii_lowercase().as_str() {
        "case1" | "1" => Ok(CaseId::Case1),
        "case2" | "2" => Ok(CaseId::Case2),
        "case3" | "3" => Ok(CaseId::Case3),
        other => Err(config_err(format!("unknown case name: {other}"))),
    }
}

/// Preset base (flag overrides config, default desk) with the model section's
/// overrides applied.
fn resolve_settings(cfg: &RunConfig, preset_flag: &Option<String>) -> CliResult<BenchSettings> {
    let preset = preset_flag.as_deref().or(cfg.preset.as_deref()).unwrap_or("desk");
    let mut s = match preset {
        "desk" => BenchSettings::desk(),
        "paper" => BenchSettings::paper(),
        other => return Err(config_err(format!("unknown preset: {other}"))),
    };
    let m = &cfg.model;
    if let Some(v) = m.repetitions {
        s.repetitions = v;
    }
    if let Some(v) = m.epochs {
        s.epochs = v;
    }
    if let Some(v) = m.learning_rate {
        s.learning_rate = v;
    }
    if let Some(v) = m.smoothing_window {
        s.smoothing_window = v;
    }
    if let Some(v) = m.hidden_width {
        s.hidden_width = v;
    }
    if let Some(v) = m.mu {
        s.mu = v;
    }
    if let Some(v) = m.beta {
        s.beta = v;
    }
    if m.lambda.is_some() {
        s.lambda = m.lambda;
    }
    if m.gamma.is_some() {
        s.gamma = m.gamma;
    }
    if let Some(v) = m.l_draws {
        s.l_draws = v;
    }
    if let Some(v) = m.m_draws {
        s.m_draws = v;
    }
    if let Some(v) = m.k_draws {
        s.k_draws = v;
    }
    if let Some(v) = m.w_draws {
        s.w_draws = v;
    }
    s.validate().map_err(config_err)?;
    Ok(s)
}

fn resolve_methods(cfg: &RunConfig, flag: &Option<Vec<String>>) -> CliResult<Vec<Method>> {
    let names: Vec<String> = flag
        .clone()
        .or_else(|| cfg.methods.clone())
        .unwrap_or_else(|| vec!["R2HGP".into(), "TGP".into(), "IMC".into()]);
    let mut methods = Vec::with_capacity(names.len());
    for n in &names {
        methods.push(n.parse::<Method>().map_err(config_err)?);
    }
    if methods.is_empty() {
        return Err(config_err("methods list is empty"));
    }
    Ok(methods)
}

fn resolve_out_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| config_err(format!("cannot create output dir {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Load the CSV-backed dataset named by the config.
fn load_data_section(d: &DataSection) -> CliResult<(TransferData, Option<Dataset>)> {
    let read = |p: &PathBuf| -> CliResult<Dataset> {
        load_csv(p).map_err(|e| config_err(format!("{}: {e}", p.display())))
    };
    let mut sources = Vec::with_capacity(d.sources.len());
    for (j, p) in d.sources.iter().enumerate() {
        sources.push(read(p)?.with_domain(DomainId::Source(j)));
    }
    let target = read(&d.target)?;
    if d.references.len() != sources.len() {
        return Err(config_err(format!(
            "{} references for {} sources",
            d.references.len(),
            sources.len()
        )));
    }
    if d.single_source >= sources.len() {
        return Err(config_err(format!(
            "single_source index {} out of range for {} sources",
            d.single_source,
            sources.len()
        )));
    }
    let test = d.test.as_ref().map(read).transpose()?;
    Ok((TransferData { sources, target }, test))
}

// ---------------------------------------------------------------------------
// benchmark / ablate
// ---------------------------------------------------------------------------

fn cmd_benchmark(args: &RunArgs, ablation: bool) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let mut settings = resolve_settings(&cfg, &args.preset)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let out_dir = resolve_out_dir(&cfg, &args.out)?;
    let methods = if ablation {
        vec![Method::R2Hgp, Method::PhyrHgp, Method::SsrHgp, Method::Hgp]
    } else {
        resolve_methods(&cfg, &args.methods)?
    };
    if cfg.output.traces {
        settings.trace_dir = Some(out_dir.join("traces"));
    }

    let report = match (&cfg.case, &cfg.data) {
        (Some(case), None) => {
            let spec = SimCaseSpec::canonical(parse_case(case)?);
            run_benchmark(&spec, &methods, &settings, seed).map_err(config_err)?
        }
        (None, Some(d)) => {
            let (data, test) = load_data_section(d)?;
            let test = test.ok_or_else(|| {
                config_err("benchmark on CSV data requires a \"test\" file in the data section")
            })?;
            run_benchmark_data(
                "data",
                &data,
                &test,
                &d.references,
                d.single_source,
                &methods,
                &settings,
                seed,
            )
            .map_err(config_err)?
        }
        _ => unreachable!("load_config enforces exactly one"),
    };

    let results_name = cfg.output.results.as_deref().unwrap_or("results.json");
    let results_path = out_dir.join(results_name);
    write_results_json(&results_path, &report)
        .map_err(|e| config_err(format!("cannot write {}: {e}", results_path.display())))?;
    println!("wrote {}", results_path.display());
    print_report(&report);

    if all_repetitions_failed(&report) {
        return Err(CliError::AllRepsFailed(format!(
            "all {} repetitions failed for every method; see {}",
            report.repetitions,
            results_path.display()
        )));
    }
    Ok(())
}

fn all_repetitions_failed(report: &BenchReport) -> bool {
    report.methods.values().all(|m| m.rmse.mean.is_none())
}

fn print_report(report: &BenchReport) {
    for (name, m) in &report.methods {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".into(),
        };
        println!(
            "{name:8}  rmse {} ± {}   r2 {}   mnll {}   failures {}",
            fmt(m.rmse.mean),
            fmt(m.rmse.std),
            fmt(m.r2.mean),
            fmt(m.mnll.mean),
            m.failures.len()
        );
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: &RunArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let case = match &cfg.case {
        Some(c) => parse_case(c)?,
        None => return Err(config_err("simulate requires a \"case\" in the config")),
    };
    let seed = args.seed.unwrap_or(cfg.seed);
    let out_dir = resolve_out_dir(&cfg, &args.out)?;

    let spec = SimCaseSpec::canonical(case);
    let gen = gen_case(&spec, seed).map_err(config_err)?;
    let write = |name: String, ds: &Dataset| -> CliResult<PathBuf> {
        let path = out_dir.join(name);
        write_csv(&path, ds).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Ok(path)
    };
    for (j, s) in gen.sources.iter().enumerate() {
        write(format!("source{}.csv", j + 1), s)?;
    }
    write("target.csv".into(), &gen.target)?;
    let test = Dataset::new(gen.test_inputs.clone(), gen.test_outputs.clone(), DomainId::Target)
        .map_err(config_err)?;
    let test_path = write("test.csv".into(), &test)?;
    println!(
        "wrote {} source files, target.csv, and {} ({} test points) to {}",
        gen.sources.len(),
        test_path.file_name().unwrap().to_string_lossy(),
        test.n(),
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Training data plus reference specs and regularization defaults from
/// either config source: canonical cases carry their own calibrated
/// weights, external datasets fall back to the library-wide defaults.
fn resolve_training_data(
    cfg: &RunConfig,
    seed: u64,
) -> CliResult<(TransferData, Vec<ReferenceMapSpec>, (f64, f64))> {
    match (&cfg.case, &cfg.data) {
        (Some(case), None) => {
            let case = parse_case(case)?;
            let spec = SimCaseSpec::canonical(case);
            let gen = gen_case(&spec, seed).map_err(config_err)?;
            Ok((gen.training_data(), gen.references, (spec.lambda, spec.gamma)))
        }
        (None, Some(d)) => {
            let (data, _) = load_data_section(d)?;
            Ok((data, d.references.clone(), (DEFAULT_LAMBDA, DEFAULT_GAMMA)))
        }
        _ => unreachable!("load_config enforces exactly one"),
    }
}

fn train_config(
    settings: &BenchSettings,
    default_reg: (f64, f64),
    alphas: Option<Vec<f64>>,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveConfig {
            mu: settings.mu,
            beta: settings.beta,
            lambda: settings.lambda.unwrap_or(default_reg.0),
            gamma: settings.gamma.unwrap_or(default_reg.1),
            l_draws: settings.l_draws,
            m_draws: settings.m_draws,
        },
        epochs: settings.epochs,
        learning_rate: settings.learning_rate,
        smoothing_window: settings.smoothing_window,
        hidden_width: settings.hidden_width,
        alphas,
        seed,
        trace_path: None,
    }
}

fn cmd_train(args: &RunArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let settings = resolve_settings(&cfg, &args.preset)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let out_dir = resolve_out_dir(&cfg, &args.out)?;
    let (data, references, default_reg) = resolve_training_data(&cfg, seed)?;

    let mut tc = train_config(&settings, default_reg, cfg.model.alphas.clone(), seed);
    if let Some(g) = &cfg.grids {
        let search = select_hyperparams(&data, &references, &tc, &g.lambda, &g.gamma, g.folds)
            .map_err(config_err)?;
        println!(
            "cross-validation chose lambda={} gamma={} (validation rmse {:.4})",
            search.lambda, search.gamma, search.cv_rmse
        );
        tc.objective.lambda = search.lambda;
        tc.objective.gamma = search.gamma;
    }
    if cfg.output.traces {
        let dir = out_dir.join("traces");
        std::fs::create_dir_all(&dir)
            .map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
        tc.trace_path = Some(dir.join("train.csv"));
    }

    let model = train(&data, &references, &tc).map_err(config_err)?;
    let model_name = cfg.output.model.as_deref().unwrap_or("model.json");
    let model_path = out_dir.join(model_name);
    save_model(&model_path, &model)
        .map_err(|e| config_err(format!("cannot write {}: {e}", model_path.display())))?;
    println!(
        "wrote {} (best epoch {}, smoothed loss {:.4}, rho {:?})",
        model_path.display(),
        model.best_epoch,
        model.best_smoothed_loss,
        model.rho()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

/// Read prediction inputs from a CSV in the canonical `x1..xd,y` layout; the
/// y column is ignored, so simulate's test.csv works directly.
fn load_inputs_csv(path: &Path, dim: usize) -> CliResult<DMatrix<f64>> {
    let ds = load_csv(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if ds.dim() != dim {
        return Err(config_err(format!(
            "{}: expected {dim} input columns, found {}",
            path.display(),
            ds.dim()
        )));
    }
    Ok(ds.inputs)
}

fn cmd_predict(args: &PredictArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let settings = resolve_settings(&cfg, &args.preset)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let out_dir = resolve_out_dir(&cfg, &args.out)?;

    let model: TrainedModel =
        load_model(&args.model).map_err(|e| CliError::Model(format!("{}: {e}", args.model.display())))?;
    let (data, _, _) = resolve_training_data(&cfg, seed)?;
    let dim = data.target.dim();
    let inputs = load_inputs_csv(&args.inputs, dim)?;

    let mut rng = stream(seed, "cli-predict", 0);
    let pred = model
        .predict(&data, &inputs, settings.k_draws, settings.w_draws, &mut rng)
        .map_err(config_err)?;

    let pred_name = cfg.output.predictions.as_deref().unwrap_or("predictions.csv");
    let pred_path = out_dir.join(pred_name);
    write_predictions_csv(&pred_path, &inputs, &pred.mean, &pred.cov)
        .map_err(|e| config_err(format!("cannot write {}: {e}", pred_path.display())))?;
    println!("wrote {} ({} points)", pred_path.display(), inputs.nrows());
    Ok(())
}

fn write_predictions_csv(
    path: &Path,
    inputs: &DMatrix<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = String::new();
    for j in 0..inputs.ncols() {
        out.push_str(&format!("x{},", j + 1));
    }
    out.push_str("mean,std\n");
    for i in 0..inputs.nrows() {
        for j in 0..inputs.ncols() {
            out.push_str(&format!("{},", inputs[(i, j)]));
        }
        let std = cov[(i, i)].max(0.0).sqrt();
        out.push_str(&format!("{},{}\n", mean[i], std));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())
}
