//! Class-text head: cached class embeddings from the frozen text branch,
//! temperature-scaled cosine softmax, the two training losses and the
//! evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::encoder::DualEncoder;
use crate::error::{MitpError, Result};
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};

pub const DEFAULT_TAU: f64 = 0.07;
/// Lower clamp on probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(MitpError::Config(format!("temperature must be positive and finite, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TAU)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = MitpError;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    SingleLabel,
    MultiLabel,
}

/// Template `[1, 2, 3, class word]`; class `k` gets word `vocab_size − 1 − k`.
pub fn default_class_prompts(num_classes: usize, vocab_size: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
    const TEMPLATE: [usize; 3] = [1, 2, 3];
    if num_classes + TEMPLATE.len() + 1 > vocab_size {
        return Err(MitpError::Config(format!(
            "vocabulary of {vocab_size} too small for {num_classes} class words"
        )));
    }
    let keep = TEMPLATE.len().min(max_len.saturating_sub(1));
    Ok((0..num_classes)
        .map(|k| {
            let mut ids = TEMPLATE[TEMPLATE.len() - keep..].to_vec();
            ids.push(vocab_size - 1 - k);
            ids
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ClassPromptSet {
    pub prompts: Vec<Vec<usize>>,
    /// K×d_joint, unit rows.
    pub embeddings: Tensor,
}

impl ClassPromptSet {
    pub fn num_classes(&self) -> usize {
        self.prompts.len()
    }
}

/// Runs every class prompt through the frozen text branch without temporal
/// prompts. The backbone never changes, so the result is computed once.
pub fn build_class_embeddings(
    encoder: &DualEncoder,
    store: &ParamStore,
    class_prompts: &[Vec<usize>],
) -> Result<ClassPromptSet> {
    if class_prompts.len() < 2 {
        return Err(MitpError::Config(format!(
            "need at least 2 classes, got {}",
            class_prompts.len()
        )));
    }
    let d = encoder.config.d_joint;
    let mut data = Vec::with_capacity(class_prompts.len() * d);
    for ids in class_prompts {
        let mut g = Graph::new();
        let tokens = encoder.embed_text(&mut g, store, ids)?;
        let feats = encoder.text.run_layers(&mut g, store, tokens, 0..encoder.config.num_layers)?;
        let pooled = encoder.text.pool(&mut g, store, feats)?;
        data.extend_from_slice(g.value(pooled).data());
    }
    Ok(ClassPromptSet {
        prompts: class_prompts.to_vec(),
        embeddings: Tensor::new(&[class_prompts.len(), d], data)?,
    })
}

/// `cos(x, z_k) / τ` as a 1×K row; `x` is a unit 1×d_joint row.
pub fn logits_node(g: &mut Graph, x: NodeId, classes: &ClassPromptSet, tau: Temperature) -> Result<NodeId> {
    let z = g.constant(classes.embeddings.clone());
    let sims = g.matmul_nt(x, z)?;
    g.scale(sims, 1.0 / tau.get())
}

/// −ln p(label) under the temperature softmax.
pub fn loss_uni_node(g: &mut Graph, logits: NodeId, label: usize) -> Result<NodeId> {
    let k = g.shape(logits)[1];
    if label >= k {
        return Err(MitpError::invalid("loss_uni", format!("label {label} outside {k} classes")));
    }
    let p = g.softmax(logits, 1)?;
    let p = g.pick(p, label)?;
    let lp = g.ln(p, LOG_FLOOR)?;
    g.scale(lp, -1.0)
}

/// Mean over classes of the binary cross-entropy of `sigmoid(logit_k)`,
/// written as `softplus(s) − y·s`.
pub fn loss_multi_node(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let k = g.shape(logits)[1];
    let y = indicator(labels, k)?;
    let y = g.constant(Tensor::new(&[1, k], y)?);
    let sp = g.softplus(logits)?;
    let ys = g.mul(y, logits)?;
    let per = g.sub(sp, ys)?;
    g.mean(per)
}

fn indicator(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(MitpError::invalid("loss_multi", "empty label set"));
    }
    let mut y = vec![0.0; k];
    for &l in labels {
        if l >= k {
            return Err(MitpError::invalid("loss_multi", format!("label {l} outside {k} classes")));
        }
        y[l] = 1.0;
    }
    Ok(y)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Class probabilities for a unit vector `x`.
pub fn predict(x: &[f64], classes: &ClassPromptSet, tau: Temperature) -> Result<Vec<f64>> {
    Ok(softmax(&logits(x, classes, tau)?))
}

pub fn logits(x: &[f64], classes: &ClassPromptSet, tau: Temperature) -> Result<Vec<f64>> {
    let (k, d) = classes.embeddings.dims2();
    if x.len() != d {
        return Err(MitpError::shape("predict", &[x.len()], &[d]));
    }
    Ok((0..k)
        .map(|i| {
            let z = classes.embeddings.row(i);
            x.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / tau.get()
        })
        .collect())
}

/// Mean of `−ln probs[label]` over a batch.
pub fn loss_uni(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(MitpError::invalid(
            "loss_uni",
            format!("{} distributions for {} labels", probs.len(), labels.len()),
        ));
    }
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        let pl = *p
            .get(l)
            .ok_or_else(|| MitpError::invalid("loss_uni", format!("label {l} outside {} classes", p.len())))?;
        total -= pl.max(LOG_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

pub fn loss_multi(logits: &[f64], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(MitpError::invalid("loss_multi", "no classes"));
    }
    let y = indicator(labels, logits.len())?;
    let total: f64 = logits
        .iter()
        .zip(&y)
        .map(|(&s, &y)| crate::numerics::softplus(s) - y * s)
        .sum();
    Ok(total / logits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1_micro: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1_macro: Option<f64>,
}

impl Metrics {
    /// Accuracy for single-label runs, micro-F1 for multi-label ones.
    pub fn headline(&self) -> f64 {
        self.accuracy.or(self.f1_micro).unwrap_or(f64::NAN)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_eval_lengths(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Pooled and per-class-averaged F1. Classes with neither positives nor
/// predictions score 0 in the macro average.
pub fn f1_scores(pred: &[Vec<usize>], truth: &[Vec<usize>], num_classes: usize) -> Result<(f64, f64)> {
    check_eval_lengths(pred.len(), truth.len())?;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (p, t) in pred.iter().zip(truth) {
        for k in 0..num_classes {
            match (p.contains(&k), t.contains(&k)) {
                (true, true) => tp[k] += 1,
                (true, false) => fp[k] += 1,
                (false, true) => fneg[k] += 1,
                (false, false) => {}
            }
        }
    }
    let f1 = |tp: usize, fp: usize, fneg: usize| {
        let denom = 2 * tp + fp + fneg;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let sum = |v: &[usize]| v.iter().sum::<usize>();
    let micro = f1(sum(&tp), sum(&fp), sum(&fneg));
    let macro_ = (0..num_classes).map(|k| f1(tp[k], fp[k], fneg[k])).sum::<f64>() / num_classes.max(1) as f64;
    Ok((micro, macro_))
}

fn check_eval_lengths(pred: usize, truth: usize) -> Result<()> {
    if pred == 0 {
        return Err(MitpError::invalid("metrics", "empty evaluation set"));
    }
    if pred != truth {
        return Err(MitpError::invalid("metrics", format!("{pred} predictions for {truth} targets")));
    }
    Ok(())
}

/// Metrics from per-example logits. Single-label decisions take the argmax,
/// multi-label ones threshold the sigmoid at 0.5 (logit > 0).
pub fn metrics(logits: &[Vec<f64>], truth: &[Vec<usize>], task: Task) -> Result<Metrics> {
    check_eval_lengths(logits.len(), truth.len())?;
    match task {
        Task::SingleLabel => {
            let pred: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
            let truth: Vec<usize> = truth.iter().map(|t| t[0]).collect();
            Ok(Metrics {
                accuracy: Some(accuracy(&pred, &truth)?),
                f1_micro: None,
                f1_macro: None,
            })
        }
        Task::MultiLabel => {
            let k = logits[0].len();
            let pred: Vec<Vec<usize>> = logits
                .iter()
                .map(|l| (0..l.len()).filter(|&i| l[i] > 0.0).collect())
                .collect();
            let (micro, macro_) = f1_scores(&pred, truth, k)?;
            Ok(Metrics {
                accuracy: None,
                f1_micro: Some(micro),
                f1_macro: Some(macro_),
            })
        }
    }
}
