//! Result files.
//!
//! Runs CSV columns, in order:
//! `variant, similarity, interaction_layers, prompt_length, train_fraction,
//! seed, accuracy, f1_micro, f1_macro, test_loss, initial_train_loss,
//! final_train_loss, epochs_run, trainable_params, total_params,
//! peak_memory_bytes, wall_time_s`.
//! Layer lists are `;`-joined (`-` when empty); missing metrics are empty.
//!
//! The long-format sweep CSV has one row per (run, metric) with columns
//! `variant, similarity, interaction_layers, first_layer, interval,
//! num_interaction_layers, seed, metric, value`.
//!
//! Numbers are written with 6 significant digits, `%g` style, always with a
//! `.` decimal point.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::{layers_label, Aggregate};
use super::train::RunResult;
use crate::error::{MitpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = MitpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            _ => Err(MitpError::Config(format!("unknown format `{s}` (csv | json)"))),
        }
    }
}

/// `%g` with 6 significant digits.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_g).unwrap_or_default()
}

pub const RUN_COLUMNS: [&str; 17] = [
    "variant",
    "similarity",
    "interaction_layers",
    "prompt_length",
    "train_fraction",
    "seed",
    "accuracy",
    "f1_micro",
    "f1_macro",
    "test_loss",
    "initial_train_loss",
    "final_train_loss",
    "epochs_run",
    "trainable_params",
    "total_params",
    "peak_memory_bytes",
    "wall_time_s",
];

fn run_row(r: &RunResult) -> Vec<String> {
    let c = &r.config;
    vec![
        r.variant.to_string(),
        c.similarity.to_string(),
        layers_label(&c.interaction_layers),
        c.prompt_length.to_string(),
        fmt_g(c.train_fraction),
        r.seed.to_string(),
        opt(r.test_metrics.accuracy),
        opt(r.test_metrics.f1_micro),
        opt(r.test_metrics.f1_macro),
        fmt_g(r.test_loss),
        fmt_g(r.initial_train_loss),
        fmt_g(r.final_train_loss),
        r.epochs_run.to_string(),
        r.trainable_param_count.to_string(),
        r.total_param_count.to_string(),
        r.peak_memory_bytes.to_string(),
        fmt_g(r.wall_time_secs),
    ]
}

fn ensure_nonempty(results: &[RunResult]) -> Result<()> {
    if results.is_empty() {
        return Err(MitpError::invalid("export_results", "no results to export"));
    }
    Ok(())
}

/// One row per run (CSV) or the full nested results (JSON).
pub fn export_results(results: &[RunResult], path: &Path, format: ExportFormat) -> Result<()> {
    ensure_nonempty(results)?;
    match format {
        ExportFormat::Json => fs::write(path, serde_json::to_string_pretty(results)?)?,
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(RUN_COLUMNS)?;
            for r in results {
                w.write_record(run_row(r))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn read_results_json(path: &Path) -> Result<Vec<RunResult>> {
    let text = fs::read_to_string(path)?;
    // Accept a single result as well as a list.
    match serde_json::from_str::<Vec<RunResult>>(&text) {
        Ok(v) => Ok(v),
        Err(_) => Ok(vec![serde_json::from_str::<RunResult>(&text)?]),
    }
}

/// Long-format CSV for plotting a metric against the interaction layers,
/// one series per similarity type.
pub fn export_layer_sweep(results: &[RunResult], path: &Path) -> Result<()> {
    ensure_nonempty(results)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant",
        "similarity",
        "interaction_layers",
        "first_layer",
        "interval",
        "num_interaction_layers",
        "seed",
        "metric",
        "value",
    ])?;
    for r in results {
        let layers = &r.config.interaction_layers;
        let first = layers.first().map(|l| l.to_string()).unwrap_or_default();
        let interval = if layers.len() > 1 {
            (layers[1] - layers[0]).to_string()
        } else {
            String::new()
        };
        let m = &r.test_metrics;
        let metrics = [
            ("accuracy", m.accuracy),
            ("f1_micro", m.f1_micro),
            ("f1_macro", m.f1_macro),
            ("test_loss", Some(r.test_loss)),
        ];
        for (name, value) in metrics {
            let Some(value) = value else { continue };
            w.write_record([
                r.variant.to_string(),
                r.config.similarity.to_string(),
                layers_label(layers),
                first.clone(),
                interval.clone(),
                layers.len().to_string(),
                r.seed.to_string(),
                name.to_string(),
                fmt_g(value),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean ± std per cell.
pub fn export_aggregates(aggs: &[Aggregate], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant",
        "similarity",
        "interaction_layers",
        "prompt_length",
        "train_fraction",
        "runs",
        "mean",
        "std",
        "trainable_params",
    ])?;
    for a in aggs {
        let k = &a.key;
        w.write_record([
            k.variant.to_string(),
            k.similarity.to_string(),
            layers_label(&k.interaction_layers),
            k.prompt_length.to_string(),
            fmt_g(k.train_fraction),
            a.runs.to_string(),
            fmt_g(a.mean),
            fmt_g(a.std),
            a.trainable_param_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width summary table of aggregates.
pub fn format_aggregate_table(aggs: &[Aggregate]) -> String {
    let mut out = format!(
        "{:<24} {:<13} {:<10} {:>3} {:>6} {:>5} {:>10} {:>10} {:>10}\n",
        "variant", "similarity", "layers", "L", "frac", "runs", "mean", "std", "trainable"
    );
    for a in aggs {
        let k = &a.key;
        out.push_str(&format!(
            "{:<24} {:<13} {:<10} {:>3} {:>6} {:>5} {:>10} {:>10} {:>10}\n",
            k.variant.as_str(),
            k.similarity.as_str(),
            layers_label(&k.interaction_layers),
            k.prompt_length,
            fmt_g(k.train_fraction),
            a.runs,
            fmt_g(a.mean),
            fmt_g(a.std),
            a.trainable_param_count
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_format() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.000123456789, "0.000123457"),
            (0.0000123456, "1.23456e-05"),
            (-2.5, "-2.5"),
            (999999.5, "1e+06"),
            (0.3333333333, "0.333333"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g(x), want, "{x}");
        }
    }
}
