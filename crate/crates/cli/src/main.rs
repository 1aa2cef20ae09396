//! `mitp`: data generation, training, evaluation, ablation sweeps, gradient
//! checks, parameter census and report conversion.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mitp::classifier::Metrics;
use mitp::datasets::{export_jsonl, generate_synthetic};
use mitp::harness::{
    ablation_matrix, aggregate, evaluate, export_aggregates, export_layer_sweep, export_results,
    format_aggregate_table, gradient_suites, load_checkpoint, load_data, param_census, read_results_json,
    save_checkpoint, summarize, train_on, DataSource, ExportFormat, Model, ParamCensus, RunConfig, RunResult,
    SweepConfig,
};
use mitp::MitpError;

#[derive(Parser, Debug)]
#[command(name = "mitp", version, about = "Memory-hub prompt tuning over a frozen dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train/val/test splits as JSONL.
    GenData(ConfigOut),
    /// Train one config; writes run_result.json and checkpoint.mitpw.
    Train(TrainArgs),
    /// Evaluate a config (optionally from a checkpoint) on the test split.
    Eval(EvalArgs),
    /// Run an ablation matrix from a sweep file.
    Ablate(AblateArgs),
    /// Finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Print the trainable/frozen parameter table of a config.
    Census(CensusArgs),
    /// Convert RunResult JSON into plot-ready CSVs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ConfigOut {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: ConfigOut,
    /// Also write the single-run CSV row (`run_result.csv`).
    #[arg(long, value_parser = parse_format, default_value = "json")]
    format: ExportFormat,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: ConfigOut,
    /// Prompt/hub weights written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    format: ExportFormat,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Directory for gradcheck.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CensusArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// RunResult JSON (a list or a single result).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_format(s: &str) -> Result<ExportFormat, String> {
    s.parse().map_err(|e: MitpError| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| c.downcast_ref::<MitpError>().is_some_and(MitpError::is_config_error));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Census(a) => census(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn out_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn metric_line(m: &Metrics) -> String {
    let mut parts = Vec::new();
    if let Some(a) = m.accuracy {
        parts.push(format!("accuracy {a:.4}"));
    }
    if let Some(f) = m.f1_micro {
        parts.push(format!("f1_micro {f:.4}"));
    }
    if let Some(f) = m.f1_macro {
        parts.push(format!("f1_macro {f:.4}"));
    }
    parts.join("  ")
}

fn gen_data(a: &ConfigOut) -> anyhow::Result<()> {
    let config = load_config(&a.config, a.seed)?;
    let DataSource::Synthetic(spec) = &config.data else {
        bail!(MitpError::Config("gen-data needs a synthetic data source".into()));
    };
    let splits = generate_synthetic(spec, config.data_seed())?;
    out_dir(&a.out)?;
    for (name, d) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let path = a.out.join(format!("{name}.jsonl"));
        export_jsonl(d, &path)?;
        println!("{name}: {} examples -> {}", d.len(), path.display());
    }
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let config = load_config(&a.run.config, a.run.seed)?;
    let splits = load_data(&config)?;
    let (result, model) = train_on(&config, &splits)?;
    out_dir(&a.run.out)?;
    write_json(&result, &a.run.out.join("run_result.json"))?;
    if a.format == ExportFormat::Csv {
        export_results(std::slice::from_ref(&result), &a.run.out.join("run_result.csv"), ExportFormat::Csv)?;
    }
    if result.trainable_param_count > 0 {
        save_checkpoint(&model, &a.run.out.join("checkpoint.mitpw"))?;
    }
    print_run(&result);
    Ok(())
}

fn print_run(r: &RunResult) {
    println!(
        "{} seed {}: test {}  loss {:.4}",
        r.variant,
        r.seed,
        metric_line(&r.test_metrics),
        r.test_loss
    );
    println!(
        "train loss {:.4} -> {:.4} over {} epochs (best {}), {} trainable / {} params, peak {} bytes, {:.1}s",
        r.initial_train_loss,
        r.final_train_loss,
        r.epochs_run,
        r.best_epoch,
        r.trainable_param_count,
        r.total_param_count,
        r.peak_memory_bytes,
        r.wall_time_secs
    );
}

#[derive(Serialize)]
struct EvalResult {
    config: RunConfig,
    checkpoint: Option<PathBuf>,
    test_metrics: Metrics,
    test_loss: f64,
    census: ParamCensus,
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let config = load_config(&a.run.config, a.run.seed)?;
    let splits = load_data(&config)?;
    let model = match &a.checkpoint {
        Some(path) => load_checkpoint(&config, path).with_context(|| format!("loading {}", path.display()))?,
        None => Model::build(&config)?,
    };
    let test = evaluate(&model, &splits.test)?;
    out_dir(&a.run.out)?;
    let result = EvalResult {
        config,
        checkpoint: a.checkpoint.clone(),
        test_metrics: test.metrics.clone(),
        test_loss: test.loss,
        census: param_census(&model)?,
    };
    write_json(&result, &a.run.out.join("eval_result.json"))?;
    println!("test {}  loss {:.4}", metric_line(&test.metrics), test.loss);
    Ok(())
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var("MITP_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!(MitpError::Config(format!("MITP_THREADS must be a positive integer, got `{s}`"))),
        },
    }
}

fn ablate(a: &AblateArgs) -> anyhow::Result<()> {
    let mut sweep = SweepConfig::from_file(&a.sweep).with_context(|| format!("reading sweep {}", a.sweep.display()))?;
    if let Some(s) = a.seed {
        sweep.base.seed = s;
    }
    let report = ablation_matrix(&sweep.base, &sweep.axes, threads()?)?;
    out_dir(&a.out)?;
    let ext = match a.format {
        ExportFormat::Csv => "csv",
        ExportFormat::Json => "json",
    };
    export_results(&report.results, &a.out.join(format!("results.{ext}")), a.format)?;
    if a.format == ExportFormat::Csv {
        // The CSV drops curves and the census; keep the full results too.
        export_results(&report.results, &a.out.join("results.json"), ExportFormat::Json)?;
    }
    export_aggregates(&report.aggregates, &a.out.join("aggregates.csv"))?;
    export_layer_sweep(&report.results, &a.out.join("layer_sweep.csv"))?;
    print!("{}", format_aggregate_table(&report.aggregates));
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    if !(a.tolerance > 0.0) {
        bail!(MitpError::Config(format!("tolerance must be positive, got {}", a.tolerance)));
    }
    let results = gradient_suites(a.tolerance)?;
    let summary = summarize(&results);
    for r in results.iter().filter(|r| !r.report.passed) {
        println!("FAIL {}/{}: max rel error {:.3e}", r.suite, r.name, r.report.max_rel_error);
    }
    for s in &summary {
        println!(
            "{:<12} {:>3} checks  max rel error {:.3e}  {}",
            s.suite,
            s.checks,
            s.max_rel_error,
            if s.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(dir) = &a.out {
        out_dir(dir)?;
        write_json(&results, &dir.join("gradcheck.json"))?;
    }
    if summary.iter().any(|s| !s.passed) {
        bail!("gradient check failed at tolerance {:e}", a.tolerance);
    }
    Ok(())
}

fn census(a: &CensusArgs) -> anyhow::Result<()> {
    let config = load_config(&a.config, a.seed)?;
    let census = param_census(&Model::build(&config)?)?;
    println!("{:<12} {:>10} {:>10}", "group", "trainable", "frozen");
    for (group, c) in &census.groups {
        println!("{group:<12} {:>10} {:>10}", c.trainable, c.frozen);
    }
    println!("{:<12} {:>10} {:>10}", "total", census.trainable_total, census.frozen_total);
    println!("trainable fraction {:.4}%", 100.0 * census.trainable_fraction);
    Ok(())
}

fn report(a: &ReportArgs) -> anyhow::Result<()> {
    let results = read_results_json(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if results.is_empty() {
        bail!("{} holds no results", a.input.display());
    }
    out_dir(&a.out)?;
    export_results(&results, &a.out.join("runs.csv"), ExportFormat::Csv)?;
    export_layer_sweep(&results, &a.out.join("layer_sweep.csv"))?;
    let aggs = aggregate(&results);
    export_aggregates(&aggs, &a.out.join("aggregates.csv"))?;
    print!("{}", format_aggregate_table(&aggs));
    Ok(())
}
