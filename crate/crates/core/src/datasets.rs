//! Synthetic paired image/text classification data, JSONL ingestion and
//! training-set subsampling.
//!
//! Class `k` is the pair (image code, text code) with
//! `image code = k mod K_img` and `text code = k div K_img`, where
//! `K_img = round(K^split)` and `K_txt = ceil(K / K_img)`. Images carry only
//! the image code, texts only the text code, so with `0 < split < 1` neither
//! modality alone can separate every class. `split = 1` puts all signal in
//! the image (`K_txt = 1`), `split = 0` all in the text.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::Task;
use crate::error::{MitpError, Result};
use crate::numerics::{Rng, Tensor};

/// Ids below this are left for class-prompt templates.
pub const RESERVED_TOKENS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_patches: usize,
    pub raw_dim: usize,
    pub n_text_tokens: usize,
    pub vocab_size: usize,
    /// Std of the Gaussian noise added to image prototypes.
    pub noise_level: f64,
    pub modality_split: f64,
    /// Probability that a non-leading text position holds a signal token.
    pub text_signal_fraction: f64,
    /// Signal tokens per text code.
    pub signal_tokens_per_code: usize,
    pub multi_label: bool,
    /// Label-set sizes are uniform on `1..=max_labels` in multi-label mode.
    pub max_labels: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            n_train: 256,
            n_val: 64,
            n_test: 128,
            n_patches: 16,
            raw_dim: 16,
            n_text_tokens: 12,
            vocab_size: 64,
            noise_level: 0.5,
            modality_split: 0.5,
            text_signal_fraction: 0.5,
            signal_tokens_per_code: 2,
            multi_label: false,
            max_labels: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn image_codes(&self) -> usize {
        ((self.num_classes as f64).powf(self.modality_split).round() as usize).clamp(1, self.num_classes)
    }

    pub fn text_codes(&self) -> usize {
        self.num_classes.div_ceil(self.image_codes())
    }

    pub fn codes(&self, class: usize) -> (usize, usize) {
        let k_img = self.image_codes();
        (class % k_img, class / k_img)
    }

    fn signal_token(&self, text_code: usize, j: usize) -> usize {
        RESERVED_TOKENS + text_code * self.signal_tokens_per_code + j
    }

    fn distractor_range(&self) -> (usize, usize) {
        let start = RESERVED_TOKENS + self.text_codes() * self.signal_tokens_per_code;
        (start, self.vocab_size - self.num_classes)
    }

    pub fn task(&self) -> Task {
        if self.multi_label {
            Task::MultiLabel
        } else {
            Task::SingleLabel
        }
    }

    pub fn shape(&self) -> DataShape {
        DataShape {
            n_patches: self.n_patches,
            raw_dim: self.raw_dim,
            n_text_tokens: self.n_text_tokens,
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MitpError::Config(format!("synthetic data: {msg}")));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        for (name, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n < self.num_classes {
                return bad(format!("{name} = {n} cannot cover {} classes", self.num_classes));
            }
        }
        if !(0.0..=1.0).contains(&self.modality_split) || !(0.0..=1.0).contains(&self.text_signal_fraction) {
            return bad("modality_split and text_signal_fraction must lie in [0, 1]".into());
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level must be finite and ≥ 0, got {}", self.noise_level));
        }
        if self.n_patches == 0 || self.raw_dim == 0 || self.n_text_tokens == 0 || self.signal_tokens_per_code == 0 {
            return bad("sizes must be positive".into());
        }
        let (lo, hi) = self.distractor_range();
        if hi <= lo {
            return bad(format!(
                "vocab_size {} leaves no distractor tokens (need more than {})",
                self.vocab_size,
                lo + self.num_classes
            ));
        }
        if self.multi_label && !(1..=self.num_classes).contains(&self.max_labels) {
            return bad(format!("max_labels must be in 1..={}", self.num_classes));
        }
        Ok(())
    }
}

/// Shapes a dataset must have to feed a given model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataShape {
    pub n_patches: usize,
    pub raw_dim: usize,
    pub n_text_tokens: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// n_patches × raw_dim.
    pub patches: Tensor,
    pub tokens: Vec<usize>,
    /// One id for single-label data, a non-empty set otherwise.
    pub labels: Vec<usize>,
}

impl Example {
    pub fn bit_eq(&self, other: &Example) -> bool {
        self.patches.bit_eq(&other.patches) && self.tokens == other.tokens && self.labels == other.labels
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn bit_eq(&self, other: &Dataset) -> bool {
        self.len() == other.len() && self.examples.iter().zip(&other.examples).all(|(a, b)| a.bit_eq(b))
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for ex in &self.examples {
            for &l in &ex.labels {
                if l < num_classes {
                    h[l] += 1;
                }
            }
        }
        h
    }

    /// Checks every example against `shape`.
    pub fn validate(&self, shape: &DataShape) -> Result<()> {
        if self.is_empty() {
            return Err(MitpError::Data("dataset is empty".into()));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.patches.shape() != [shape.n_patches, shape.raw_dim] {
                return Err(MitpError::Data(format!(
                    "example {i}: patches {:?}, expected [{}, {}]",
                    ex.patches.shape(),
                    shape.n_patches,
                    shape.raw_dim
                )));
            }
            if ex.tokens.is_empty() || ex.tokens.len() > shape.n_text_tokens {
                return Err(MitpError::Data(format!(
                    "example {i}: {} tokens, expected 1..={}",
                    ex.tokens.len(),
                    shape.n_text_tokens
                )));
            }
            if let Some(&t) = ex.tokens.iter().find(|&&t| t >= shape.vocab_size) {
                return Err(MitpError::Data(format!(
                    "example {i}: token {t} outside vocabulary of {}",
                    shape.vocab_size
                )));
            }
            if ex.labels.is_empty() {
                return Err(MitpError::Data(format!("example {i}: empty label set")));
            }
            if let Some(&l) = ex.labels.iter().find(|&&l| l >= shape.num_classes) {
                return Err(MitpError::Data(format!(
                    "example {i}: label {l} outside {} classes",
                    shape.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

struct Prototypes {
    images: Vec<Tensor>,
}

fn draw_labels(spec: &SyntheticSpec, first: usize, rng: &mut Rng) -> Vec<usize> {
    if !spec.multi_label {
        return vec![first];
    }
    let n = 1 + rng.below(spec.max_labels);
    let mut labels = vec![first];
    while labels.len() < n {
        let c = rng.below(spec.num_classes);
        if !labels.contains(&c) {
            labels.push(c);
        }
    }
    labels.sort_unstable();
    labels
}

fn make_example(spec: &SyntheticSpec, protos: &Prototypes, labels: Vec<usize>, rng: &mut Rng) -> Example {
    let mut img_codes: Vec<usize> = labels.iter().map(|&c| spec.codes(c).0).collect();
    let mut txt_codes: Vec<usize> = labels.iter().map(|&c| spec.codes(c).1).collect();
    img_codes.sort_unstable();
    img_codes.dedup();
    txt_codes.sort_unstable();
    txt_codes.dedup();

    let mut patches = Tensor::zeros(&[spec.n_patches, spec.raw_dim]);
    for &c in &img_codes {
        for (p, &v) in patches.data_mut().iter_mut().zip(protos.images[c].data()) {
            *p += v;
        }
    }
    if spec.noise_level > 0.0 {
        for p in patches.data_mut() {
            *p += rng.normal(0.0, spec.noise_level);
        }
    }

    let (lo, hi) = spec.distractor_range();
    let signal = |rng: &mut Rng| {
        let code = txt_codes[rng.below(txt_codes.len())];
        spec.signal_token(code, rng.below(spec.signal_tokens_per_code))
    };
    let mut tokens = Vec::with_capacity(spec.n_text_tokens);
    tokens.push(signal(rng));
    for _ in 1..spec.n_text_tokens {
        let t = if rng.uniform() < spec.text_signal_fraction {
            signal(rng)
        } else {
            lo + rng.below(hi - lo)
        };
        tokens.push(t);
    }
    Example { patches, tokens, labels }
}

fn make_split(spec: &SyntheticSpec, protos: &Prototypes, n: usize, mut rng: Rng) -> Dataset {
    // Balanced first labels, shuffled.
    let mut firsts: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    rng.shuffle(&mut firsts);
    let examples = firsts
        .into_iter()
        .map(|c| {
            let labels = draw_labels(spec, c, &mut rng);
            make_example(spec, protos, labels, &mut rng)
        })
        .collect();
    Dataset { examples }
}

/// Deterministic train/val/test splits for `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DatasetSplits> {
    spec.validate()?;
    let root = Rng::new(seed);
    let mut proto_rng = root.fork("data.prototypes");
    let protos = Prototypes {
        images: (0..spec.image_codes())
            .map(|_| proto_rng.gaussian(&[spec.n_patches, spec.raw_dim], 1.0))
            .collect(),
    };
    Ok(DatasetSplits {
        train: make_split(spec, &protos, spec.n_train, root.fork("data.train")),
        val: make_split(spec, &protos, spec.n_val, root.fork("data.val")),
        test: make_split(spec, &protos, spec.n_test, root.fork("data.test")),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonExample {
    patches: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    labels: Vec<usize>,
}

/// One example per line: `{"patches": [[..], ..], "tokens": [..], "labels": [..]}`.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let perr = |line: usize, msg: String| MitpError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonExample = serde_json::from_str(&line).map_err(|e| perr(lineno, e.to_string()))?;
        let width = raw.patches.first().map_or(0, Vec::len);
        if width == 0 || raw.patches.iter().any(|r| r.len() != width) {
            return Err(perr(lineno, "\"patches\" must be a non-empty rectangular array".into()));
        }
        if raw.tokens.is_empty() {
            return Err(perr(lineno, "\"tokens\" is empty".into()));
        }
        if raw.labels.is_empty() {
            return Err(perr(lineno, "\"labels\" is empty".into()));
        }
        let patches = Tensor::from_rows(&raw.patches).map_err(|e| perr(lineno, e.to_string()))?;
        if let Some(first) = examples.first() {
            let first: &Example = first;
            if first.patches.shape() != patches.shape() {
                return Err(perr(
                    lineno,
                    format!("patches {:?} differ from first example {:?}", patches.shape(), first.patches.shape()),
                ));
            }
        }
        examples.push(Example {
            patches,
            tokens: raw.tokens,
            labels: raw.labels,
        });
    }
    if examples.is_empty() {
        return Err(perr(0, "no examples".into()));
    }
    Ok(Dataset { examples })
}

pub fn export_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in &dataset.examples {
        let raw = JsonExample {
            patches: ex.patches.to_rows(),
            tokens: ex.tokens.clone(),
            labels: ex.labels.clone(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Uniform subset of `round(fraction·n)` examples without replacement,
/// kept in original order.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MitpError::Config(format!("train_fraction must be in (0, 1], got {fraction}")));
    }
    let n = dataset.len();
    let m = (fraction * n as f64).round() as usize;
    if m == 0 {
        return Err(MitpError::Data(format!("fraction {fraction} of {n} examples leaves none")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork("data.subsample").shuffle(&mut idx);
    let mut keep = idx[..m].to_vec();
    keep.sort_unstable();
    Ok(Dataset {
        examples: keep.into_iter().map(|i| dataset.examples[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_cover_classes_uniquely() {
        for split in [0.0, 0.3, 0.5, 0.8, 1.0] {
            for k in 2..12 {
                let spec = SyntheticSpec {
                    num_classes: k,
                    modality_split: split,
                    ..Default::default()
                };
                let mut seen: Vec<_> = (0..k).map(|c| spec.codes(c)).collect();
                seen.sort();
                seen.dedup();
                assert_eq!(seen.len(), k);
            }
        }
        let spec = SyntheticSpec::default();
        assert_eq!((spec.image_codes(), spec.text_codes()), (2, 2));
    }

    #[test]
    fn undersized_split_rejected() {
        let spec = SyntheticSpec {
            n_val: 3,
            ..Default::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn multi_label_sets_valid() {
        let spec = SyntheticSpec {
            multi_label: true,
            max_labels: 3,
            ..Default::default()
        };
        let d = generate_synthetic(&spec, 4).unwrap();
        d.train.validate(&spec.shape()).unwrap();
        assert!(d.train.examples.iter().any(|e| e.labels.len() > 1));
    }
}
