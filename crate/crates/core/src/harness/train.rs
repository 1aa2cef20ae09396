use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, RunConfig, Variant};
use super::model::{param_census, ForwardInput, Model, ParamCensus, Prefix};
use crate::classifier::{metrics, Metrics};
use crate::datasets::{generate_synthetic, load_jsonl, subsample, Dataset, DatasetSplits};
use crate::error::{MitpError, Result};
use crate::numerics::{memory, AdamConfig, AdamState, Graph, ParamGroup, Rng};
use crate::weights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    pub seed: u64,
    pub variant: Variant,
    pub test_metrics: Metrics,
    pub test_loss: f64,
    /// Validation metrics of the restored (best) parameters.
    pub val_metrics: Metrics,
    /// Training-set loss before the first update.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub curves: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub optimizer_steps: u64,
    pub census: ParamCensus,
    pub trainable_param_count: usize,
    pub total_param_count: usize,
    pub peak_memory_bytes: usize,
    pub wall_time_secs: f64,
}

impl RunResult {
    /// Accuracy, or micro-F1 for multi-label runs.
    pub fn headline(&self) -> f64 {
        self.test_metrics.headline()
    }

    /// The fields that must be bit-identical across repeated runs.
    pub fn metric_fields(&self) -> Vec<f64> {
        let mut v = vec![
            self.test_metrics.headline(),
            self.test_metrics.f1_macro.unwrap_or(0.0),
            self.test_loss,
            self.val_metrics.headline(),
            self.initial_train_loss,
            self.final_train_loss,
        ];
        for r in &self.curves {
            v.extend([r.train_loss, r.val_loss, r.val_metric]);
        }
        v
    }
}

pub fn load_data(config: &RunConfig) -> Result<DatasetSplits> {
    let splits = match &config.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec, config.data_seed())?,
        DataSource::Jsonl { train, val, test, .. } => DatasetSplits {
            train: load_jsonl(train)?,
            val: load_jsonl(val)?,
            test: load_jsonl(test)?,
        },
    };
    let shape = config.data_shape();
    for (name, d) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        d.validate(&shape).map_err(|e| MitpError::Data(format!("{name} split: {e}")))?;
    }
    Ok(splits)
}

/// Loss and metrics of `model` over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: Metrics,
}

fn evaluate_cached(model: &Model, data: &Dataset, prefixes: &[Prefix]) -> Result<Evaluation> {
    let mut total = 0.0;
    let mut all_logits = Vec::with_capacity(data.len());
    for (ex, prefix) in data.examples.iter().zip(prefixes) {
        let mut g = Graph::new();
        let (loss, logits) = model.example_loss(&mut g, ForwardInput::Cached(prefix), &ex.labels)?;
        total += g.value(loss).item();
        all_logits.push(g.value(logits).data().to_vec());
    }
    let truth: Vec<Vec<usize>> = data.examples.iter().map(|e| e.labels.clone()).collect();
    Ok(Evaluation {
        loss: total / data.len() as f64,
        metrics: metrics(&all_logits, &truth, model.task())?,
    })
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    let prefixes = prefixes(model, data)?;
    evaluate_cached(model, data, &prefixes)
}

fn prefixes(model: &Model, data: &Dataset) -> Result<Vec<Prefix>> {
    data.examples.iter().map(|ex| model.prefix(ex)).collect()
}

/// One optimizer step over `batch`. Per-example graphs are built and
/// differentiated one at a time, their gradients summed into the store.
fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[(usize, ForwardInput)],
    labels: &[&[usize]],
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ((_, input), labels) in batch.iter().zip(labels) {
        let mut g = Graph::new();
        let (loss, _) = model.example_loss(&mut g, *input, labels)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(MitpError::NonFinite { op: "loss" });
        }
        total += value;
        let scaled = g.scale(loss, scale)?;
        g.backward(scaled)?;
        model.store.accumulate_grads(&g);
    }
    adam.step(&mut model.store)?;
    Ok(total * scale)
}

/// Trains the variant's parameters with Adam, early-stopping on validation
/// loss, then evaluates the best parameters on the test split.
pub fn train_run(config: &RunConfig) -> Result<RunResult> {
    let splits = load_data(config)?;
    train_on(config, &splits).map(|(result, _)| result)
}

/// [`train_run`] on given splits; also returns the trained model.
pub fn train_on(config: &RunConfig, splits: &DatasetSplits) -> Result<(RunResult, Model)> {
    let started = Instant::now();
    memory::start_region();
    let train = if config.train_fraction < 1.0 {
        subsample(&splits.train, config.train_fraction, config.data_seed())?
    } else {
        splits.train.clone()
    };
    let mut model = Model::build(config)?;
    let census = param_census(&model)?;

    let train_prefix = prefixes(&model, &train)?;
    let val_prefix = prefixes(&model, &splits.val)?;
    let initial = evaluate_cached(&model, &train, &train_prefix)?;

    let mut curves = Vec::new();
    let mut adam = AdamState::new(
        &model.store,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut best = (f64::INFINITY, 0usize, model.store.snapshot_trainable());
    let mut shuffle_rng = Rng::new(config.seed).fork("harness.shuffle");
    let trains = config.ablation_variant != Variant::Baseline && census.trainable_total > 0;
    let epochs = if trains { config.epochs } else { 0 };

    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(usize, ForwardInput)> =
                chunk.iter().map(|&i| (i, ForwardInput::Cached(&train_prefix[i]))).collect();
            let labels: Vec<&[usize]> = chunk.iter().map(|&i| train.examples[i].labels.as_slice()).collect();
            let loss = train_step(&mut model, &mut adam, &batch, &labels).map_err(|e| match e {
                MitpError::NonFinite { .. } => {
                    log::error!("non-finite value at epoch {epoch}, batch {b}; example indices {chunk:?}");
                    MitpError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        source: Box::new(e),
                    }
                }
                other => other,
            })?;
            epoch_loss += loss;
            batches += 1;
        }
        let val = evaluate_cached(&model, &splits.val, &val_prefix)?;
        curves.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_loss: val.loss,
            val_metric: val.metrics.headline(),
        });
        log::debug!(
            "{} epoch {epoch}: train {:.4} val {:.4} ({:.3})",
            config.ablation_variant,
            epoch_loss / batches as f64,
            val.loss,
            val.metrics.headline()
        );
        if val.loss < best.0 {
            best = (val.loss, epoch, model.store.snapshot_trainable());
        } else if config.patience > 0 && epoch - best.1 >= config.patience {
            break;
        }
    }
    model.store.restore(&best.2);

    let final_train = evaluate_cached(&model, &train, &train_prefix)?;
    let val = evaluate_cached(&model, &splits.val, &val_prefix)?;
    drop(val_prefix);
    drop(train_prefix);
    let test = evaluate(&model, &splits.test)?;
    let peak = memory::peak_memory_report();

    let result = RunResult {
        config: config.clone(),
        seed: config.seed,
        variant: config.ablation_variant,
        test_metrics: test.metrics,
        test_loss: test.loss,
        val_metrics: val.metrics,
        initial_train_loss: initial.loss,
        final_train_loss: final_train.loss,
        epochs_run: curves.len(),
        best_epoch: best.1,
        curves,
        optimizer_steps: adam.step_count,
        trainable_param_count: census.trainable_total,
        total_param_count: census.total,
        census,
        peak_memory_bytes: peak,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((result, model))
}

/// Writes the prompt-bank and hub parameters.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    weights::save_groups(&model.store, &[ParamGroup::PromptBank, ParamGroup::MemoryHub], path)
}

/// Builds the model for `config` and loads a checkpoint into it.
pub fn load_checkpoint(config: &RunConfig, path: &Path) -> Result<Model> {
    let mut model = Model::build(config)?;
    weights::load_into(&mut model.store, path)?;
    Ok(model)
}

/// Peak tensor bytes of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepMemory {
    /// Prompt/hub training from cached frozen features.
    pub prompt_step_bytes: usize,
    /// Every parameter trainable, forward from raw inputs.
    pub full_finetune_step_bytes: usize,
}

/// Measures one batch step of `config`'s variant against a step that
/// fine-tunes the whole model on the same batch.
pub fn step_memory_comparison(config: &RunConfig) -> Result<StepMemory> {
    let splits = load_data(config)?;
    let n = config.batch_size.min(splits.train.len());
    let batch_examples = &splits.train.examples[..n];
    let labels: Vec<&[usize]> = batch_examples.iter().map(|e| e.labels.as_slice()).collect();

    let mut model = Model::build(config)?;
    let cached: Vec<Prefix> = batch_examples.iter().map(|e| model.prefix(e)).collect::<Result<_>>()?;
    memory::start_region();
    {
        let mut adam = AdamState::new(&model.store, AdamConfig { lr: config.lr, ..AdamConfig::default() });
        let batch: Vec<(usize, ForwardInput)> = cached.iter().enumerate().map(|(i, p)| (i, ForwardInput::Cached(p))).collect();
        train_step(&mut model, &mut adam, &batch, &labels)?;
    }
    let prompt_step_bytes = memory::peak_memory_report();
    drop(cached);

    let mut full = Model::build(config)?;
    full.unfreeze_all();
    memory::start_region();
    {
        let mut adam = AdamState::new(&full.store, AdamConfig { lr: config.lr, ..AdamConfig::default() });
        let batch: Vec<(usize, ForwardInput)> =
            batch_examples.iter().enumerate().map(|(i, e)| (i, ForwardInput::Raw(e))).collect();
        train_step(&mut full, &mut adam, &batch, &labels)?;
    }
    let full_finetune_step_bytes = memory::peak_memory_report();
    Ok(StepMemory {
        prompt_step_bytes,
        full_finetune_step_bytes,
    })
}
