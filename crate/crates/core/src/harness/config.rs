use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{default_class_prompts, Task, Temperature};
use crate::datasets::{DataShape, SyntheticSpec};
use crate::encoder::{EncoderConfig, LayerRoles};
use crate::error::{MitpError, Result};
use crate::memory_hub::{MemoryHub, SimilarityType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Prompt bank plus the similarity-gated memory hub.
    MitpFull,
    /// Prompt bank plus a plain MLP over concatenated prompts.
    NaiveMlpInteraction,
    /// Prompt bank; each layer's prompt output feeds the next interaction layer.
    PromptsOnly,
    /// No prompts, nothing trained.
    Baseline,
    /// Independent trainable prompts per interaction layer and branch.
    DeepPromptTuning,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::MitpFull,
        Variant::NaiveMlpInteraction,
        Variant::PromptsOnly,
        Variant::Baseline,
        Variant::DeepPromptTuning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MitpFull => "mitp_full",
            Variant::NaiveMlpInteraction => "naive_mlp_interaction",
            Variant::PromptsOnly => "prompts_only",
            Variant::Baseline => "baseline",
            Variant::DeepPromptTuning => "deep_prompt_tuning",
        }
    }

    /// Whether prompts cross between the branches.
    pub fn exchanges(self) -> bool {
        matches!(self, Variant::MitpFull | Variant::NaiveMlpInteraction)
    }

    pub fn uses_bank(self) -> bool {
        matches!(self, Variant::MitpFull | Variant::NaiveMlpInteraction | Variant::PromptsOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = MitpError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| MitpError::Config(format!("unknown ablation variant `{s}`")))
    }
}

/// Which prompts the hub consumes between interaction layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HubInput {
    /// Prompt rows of the layer output.
    #[default]
    PostLayer,
    /// The prompts that were fed into the layer.
    PreLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Jsonl {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        num_classes: usize,
        #[serde(default)]
        task: Task,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.num_classes,
            DataSource::Jsonl { num_classes, .. } => *num_classes,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            DataSource::Synthetic(s) => s.task(),
            DataSource::Jsonl { task, .. } => *task,
        }
    }

    /// Resolves relative JSONL paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::Jsonl { train, val, test, .. } = self {
            for p in [train, val, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

fn default_layers() -> Vec<usize> {
    vec![4, 5, 6]
}

/// Complete description of one training run. Every field has a default, so
/// `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub interaction_layers: Vec<usize>,
    pub prompt_length: usize,
    pub similarity: SimilarityType,
    pub ablation_variant: Variant,
    pub tau: Temperature,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation-loss improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    /// Seed for data generation and subsampling; defaults to `seed`.
    pub data_seed: Option<u64>,
    /// Seed of the frozen backbone weights, shared by every run seed.
    pub backbone_seed: u64,
    /// Optional weight file replacing the seeded backbone.
    pub backbone_weights: Option<PathBuf>,
    pub data: DataSource,
    pub train_fraction: f64,
    /// Hub MLP hidden width; defaults to min(d_v, d_t) / 2.
    pub hub_hidden: Option<usize>,
    pub hub_input: HubInput,
    /// Fixed MMD bandwidth; the median heuristic is used when absent.
    pub mmd_bandwidth: Option<f64>,
    /// Token ids per class; defaults to a fixed template plus a class word.
    pub class_prompts: Option<Vec<Vec<usize>>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            interaction_layers: default_layers(),
            prompt_length: 3,
            similarity: SimilarityType::Cosine,
            ablation_variant: Variant::MitpFull,
            tau: Temperature::default(),
            lr: 2e-4,
            batch_size: 32,
            epochs: 20,
            patience: 5,
            seed: 0,
            data_seed: None,
            backbone_seed: 0,
            backbone_weights: None,
            data: DataSource::default(),
            train_fraction: 1.0,
            hub_hidden: None,
            hub_input: HubInput::PostLayer,
            mmd_bandwidth: None,
            class_prompts: None,
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON config. Syntax and type errors carry
    /// their line and column.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| MitpError::ConfigSyntax {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths are taken relative to it.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.data.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn hub_hidden(&self) -> usize {
        self.hub_hidden
            .unwrap_or_else(|| MemoryHub::default_hidden(self.encoder.d_v, self.encoder.d_t))
    }

    pub fn task(&self) -> Task {
        self.data.task()
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes()
    }

    pub fn data_shape(&self) -> DataShape {
        DataShape {
            n_patches: self.encoder.n_patches,
            raw_dim: self.encoder.raw_dim,
            n_text_tokens: self.encoder.n_text_tokens,
            vocab_size: self.encoder.vocab_size,
            num_classes: self.num_classes(),
        }
    }

    pub fn class_prompts(&self) -> Result<Vec<Vec<usize>>> {
        match &self.class_prompts {
            Some(p) => Ok(p.clone()),
            None => default_class_prompts(self.num_classes(), self.encoder.vocab_size, self.encoder.n_text_tokens),
        }
    }

    pub fn layer_roles(&self) -> Result<LayerRoles> {
        LayerRoles::new(self.encoder.num_layers, &self.interaction_layers)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MitpError::Config(msg));
        self.encoder.validate()?;
        self.layer_roles()?;
        match (self.ablation_variant, self.interaction_layers.is_empty()) {
            (Variant::Baseline, false) => {
                return bad("ablation_variant baseline requires empty interaction_layers".into())
            }
            (v, true) if v != Variant::Baseline => {
                return bad(format!("ablation_variant {v} needs at least one interaction layer"))
            }
            _ => {}
        }
        if self.prompt_length == 0 {
            return bad("prompt_length must be ≥ 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction must be in (0, 1], got {}", self.train_fraction));
        }
        if self.hub_hidden == Some(0) {
            return bad("hub_hidden must be ≥ 1".into());
        }
        if let Some(bw) = self.mmd_bandwidth {
            if !(bw > 0.0 && bw.is_finite()) {
                return bad(format!("mmd_bandwidth must be positive, got {bw}"));
            }
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            let e = &self.encoder;
            if (spec.n_patches, spec.raw_dim, spec.n_text_tokens, spec.vocab_size)
                != (e.n_patches, e.raw_dim, e.n_text_tokens, e.vocab_size)
            {
                return bad(format!(
                    "synthetic data shape (patches {}, raw_dim {}, tokens {}, vocab {}) does not match the encoder \
                     ({}, {}, {}, {})",
                    spec.n_patches,
                    spec.raw_dim,
                    spec.n_text_tokens,
                    spec.vocab_size,
                    e.n_patches,
                    e.raw_dim,
                    e.n_text_tokens,
                    e.vocab_size
                ));
            }
        }
        let k = self.num_classes();
        if k < 2 {
            return bad(format!("need at least 2 classes, got {k}"));
        }
        let prompts = self.class_prompts()?;
        if prompts.len() != k {
            return bad(format!("{} class prompts for {k} classes", prompts.len()));
        }
        for (i, p) in prompts.iter().enumerate() {
            if p.is_empty() || p.len() > self.encoder.n_text_tokens {
                return bad(format!("class prompt {i} must have 1..={} tokens", self.encoder.n_text_tokens));
            }
            if let Some(&t) = p.iter().find(|&&t| t >= self.encoder.vocab_size) {
                return bad(format!("class prompt {i}: token {t} outside vocabulary"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back = RunConfig::from_json_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn syntax_error_has_position() {
        let err = RunConfig::from_json_str("{\n  \"lr\": 0.1,\n  \"epochs\": x\n}").unwrap_err();
        match err {
            MitpError::ConfigSyntax { line, column, .. } => assert_eq!((line, column), (3, 13)),
            other => panic!("unexpected {other}"),
        }
        assert!(RunConfig::from_json_str("{\"bogus\": 1}").unwrap_err().is_config_error());
    }

    #[test]
    fn baseline_needs_no_layers() {
        let mut cfg = RunConfig {
            ablation_variant: Variant::Baseline,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.interaction_layers.clear();
        cfg.validate().unwrap();
    }
}
