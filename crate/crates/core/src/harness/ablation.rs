use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::train::{train_run, RunResult};
use crate::error::{MitpError, Result};
use crate::memory_hub::SimilarityType;

/// Values to sweep; absent axes keep the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    pub variant: Option<Vec<Variant>>,
    pub interaction_layers: Option<Vec<Vec<usize>>>,
    pub similarity: Option<Vec<SimilarityType>>,
    pub prompt_length: Option<Vec<usize>>,
    pub train_fraction: Option<Vec<f64>>,
    pub seed: Option<Vec<u64>>,
}

/// A sweep file: `{"base": {..RunConfig..}, "axes": {..}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub axes: AblationAxes,
}

impl SweepConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let sweep: SweepConfig = serde_json::from_str(text).map_err(|e| MitpError::ConfigSyntax {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        sweep.base.validate()?;
        Ok(sweep)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let mut sweep = Self::from_json_str(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            sweep.base.data.resolve_paths(dir);
        }
        Ok(sweep)
    }
}

/// Identifies one cell of the matrix. Orders by every axis, seed last.
#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: Variant,
    pub similarity: SimilarityType,
    pub interaction_layers: Vec<usize>,
    pub prompt_length: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn of(config: &RunConfig) -> Self {
        Self {
            variant: config.ablation_variant,
            similarity: config.similarity,
            interaction_layers: config.interaction_layers.clone(),
            prompt_length: config.prompt_length,
            train_fraction: config.train_fraction,
            seed: config.seed,
        }
    }

    /// The key with the seed removed, for aggregation.
    pub fn group(&self) -> GroupKey {
        GroupKey {
            variant: self.variant,
            similarity: self.similarity,
            interaction_layers: self.interaction_layers.clone(),
            prompt_length: self.prompt_length,
            train_fraction: self.train_fraction,
        }
    }

    fn sort_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).unwrap_or(std::cmp::Ordering::Equal)
    }
}

#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GroupKey {
    pub variant: Variant,
    pub similarity: SimilarityType,
    pub interaction_layers: Vec<usize>,
    pub prompt_length: usize,
    pub train_fraction: f64,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} sim={} layers={} L={} frac={}",
            self.variant,
            self.similarity,
            layers_label(&self.interaction_layers),
            self.prompt_length,
            self.train_fraction
        )
    }
}

pub fn layers_label(layers: &[usize]) -> String {
    if layers.is_empty() {
        return "-".into();
    }
    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";")
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
    match values {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(MitpError::Config(format!("ablation axis `{name}` is empty"))),
        Some(v) => Ok(v.clone()),
    }
}

/// Every config of the Cartesian product, sorted by cell key. Baseline
/// cells drop their interaction layers, so duplicates collapse.
pub fn expand_cells(base: &RunConfig, axes: &AblationAxes) -> Result<Vec<RunConfig>> {
    let variants = axis("variant", &axes.variant, base.ablation_variant)?;
    let layer_sets = axis("interaction_layers", &axes.interaction_layers, base.interaction_layers.clone())?;
    let sims = axis("similarity", &axes.similarity, base.similarity)?;
    let lengths = axis("prompt_length", &axes.prompt_length, base.prompt_length)?;
    let fractions = axis("train_fraction", &axes.train_fraction, base.train_fraction)?;
    let seeds = axis("seed", &axes.seed, base.seed)?;

    let mut cells: Vec<RunConfig> = Vec::new();
    for &variant in &variants {
        for layers in &layer_sets {
            for &similarity in &sims {
                for &prompt_length in &lengths {
                    for &train_fraction in &fractions {
                        for &seed in &seeds {
                            let mut cfg = base.clone();
                            cfg.ablation_variant = variant;
                            cfg.interaction_layers = if variant == Variant::Baseline {
                                Vec::new()
                            } else {
                                layers.clone()
                            };
                            cfg.similarity = similarity;
                            cfg.prompt_length = prompt_length;
                            cfg.train_fraction = train_fraction;
                            cfg.seed = seed;
                            cfg.validate()?;
                            if !cells.iter().any(|c| CellKey::of(c) == CellKey::of(&cfg)) {
                                cells.push(cfg);
                            }
                        }
                    }
                }
            }
        }
    }
    cells.sort_by(|a, b| CellKey::of(a).sort_cmp(&CellKey::of(b)));
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub key: GroupKey,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
    pub trainable_param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub results: Vec<RunResult>,
    pub aggregates: Vec<Aggregate>,
}

impl AblationReport {
    pub fn aggregate_for(&self, pred: impl Fn(&GroupKey) -> bool) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| pred(&a.key))
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Mean ± std of the headline test metric per cell, over seeds.
pub fn aggregate(results: &[RunResult]) -> Vec<Aggregate> {
    let mut groups: Vec<(GroupKey, Vec<&RunResult>)> = Vec::new();
    for r in results {
        let key = CellKey::of(&r.config).group();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(key, runs)| {
            let values: Vec<f64> = runs.iter().map(|r| r.headline()).collect();
            let (mean, std) = mean_std(&values);
            Aggregate {
                key,
                runs: runs.len(),
                mean,
                std,
                trainable_param_count: runs[0].trainable_param_count,
            }
        })
        .collect()
}

/// Runs every cell. With `threads > 1` cells run on a worker pool; results
/// come back sorted by cell key either way.
pub fn ablation_matrix(base: &RunConfig, axes: &AblationAxes, threads: usize) -> Result<AblationReport> {
    let cells = expand_cells(base, axes)?;
    let mut results: Vec<RunResult> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| MitpError::Config(format!("worker pool: {e}")))?;
        pool.install(|| cells.par_iter().map(train_run).collect::<Result<Vec<_>>>())?
    } else {
        cells.iter().map(train_run).collect::<Result<Vec<_>>>()?
    };
    results.sort_by(|a, b| CellKey::of(&a.config).sort_cmp(&CellKey::of(&b.config)));
    let aggregates = aggregate(&results);
    Ok(AblationReport { results, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_axis_expands() {
        let axes = AblationAxes {
            seed: Some(vec![1, 2, 3, 4, 5]),
            ..Default::default()
        };
        let cells = expand_cells(&RunConfig::default(), &axes).unwrap();
        assert_eq!(cells.len(), 5);
        for (i, c) in cells.iter().enumerate() {
            let mut expect = RunConfig::default();
            expect.seed = i as u64 + 1;
            assert_eq!(c, &expect);
        }
    }

    #[test]
    fn empty_axis_rejected() {
        let axes = AblationAxes {
            prompt_length: Some(vec![]),
            ..Default::default()
        };
        assert!(expand_cells(&RunConfig::default(), &axes).is_err());
    }

    #[test]
    fn baseline_cells_collapse() {
        let axes = AblationAxes {
            variant: Some(vec![Variant::MitpFull, Variant::Baseline]),
            interaction_layers: Some(vec![vec![4], vec![4, 5, 6]]),
            ..Default::default()
        };
        let cells = expand_cells(&RunConfig::default(), &axes).unwrap();
        assert_eq!(cells.len(), 3);
        assert!(cells.iter().any(|c| c.ablation_variant == Variant::Baseline && c.interaction_layers.is_empty()));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]).1, 0.0);
    }
}
