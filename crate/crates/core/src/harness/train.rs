//! Full-batch gradient descent on the synthetic task, and the resolution
//! transfer check that reuses the trained weights unchanged.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::block::{build_variant, IwinModel, ModelConfig, PositionMode};
use crate::error::{Error, Result};
use crate::params::{ParamStore, ShapeLedger};
use crate::tensor::{Tape, Tensor};

use super::data::{upscale_nearest, SyntheticTask};
use super::RunReport;

/// Parameter budget for models trained on the CPU.
pub const MAX_TOY_PARAMS: usize = 500_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub steps: usize,
    pub lr: f64,
    /// Rescales the step when the global gradient norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Seeds the weight initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: build_variant("tiny-test", 64).expect("tiny-test at 64 is valid"),
            task: SyntheticTask::default(),
            steps: 300,
            lr: 0.1,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Uses `seed` for both the weights and the data.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.task.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: IwinModel,
    pub store: ParamStore,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accuracy: f64,
    pub losses: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Mean cross-entropy and accuracy of `store` on a labelled batch.
pub fn evaluate(
    model: &IwinModel,
    run: &ModelConfig,
    store: &ParamStore,
    images: &Tensor,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let logits = model.forward(&tape.leaf(images.clone()), run, &p)?;
    let loss = logits.cross_entropy(labels)?.value().item()?;
    Ok((loss, accuracy(logits.value(), labels)))
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            best == label
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub fn train_toy(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let start = Instant::now();
    if cfg.model.resolution != cfg.task.size {
        return Err(Error::Config(format!(
            "model resolution {} differs from task image size {}",
            cfg.model.resolution, cfg.task.size
        )));
    }
    if cfg.model.num_classes != cfg.task.classes {
        return Err(Error::Config("model and task disagree on the class count".into()));
    }
    let mut ledger = ShapeLedger::default();
    IwinModel::new(&mut ledger, &cfg.model)?;
    if ledger.num_params() > MAX_TOY_PARAMS {
        return Err(Error::Config(format!(
            "{} parameters exceed the toy budget of {MAX_TOY_PARAMS}",
            ledger.num_params()
        )));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if cfg.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
        return Err(Error::Config("clip norm must be positive".into()));
    }

    let mut store = ParamStore::new(cfg.seed);
    let model = IwinModel::new(&mut store, &cfg.model)?;
    let data = cfg.task.generate()?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let result = model
            .forward(&tape.leaf(data.images.clone()), &cfg.model, &p)
            .and_then(|logits| logits.cross_entropy(&data.labels));
        let loss = match result {
            Ok(l) if l.value().item()?.is_finite() => l,
            Ok(_) | Err(Error::Numeric { .. }) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        losses.push(loss.value().item()?);
        let grads = tape.backward(&loss)?;
        let norm = store.grad_norm(&p, &grads);
        let scale = match cfg.clip_norm {
            Some(clip) if norm > clip => clip / norm,
            _ => 1.0,
        };
        grad_norms.push(norm);
        store.sgd_step(&p, &grads, cfg.lr * scale)?;
    }

    let initial_loss = match losses.first() {
        Some(&first) => first,
        None => evaluate(&model, &cfg.model, &store, &data.images, &data.labels)?.0,
    };
    let (final_loss, final_accuracy) = match diverged_at {
        Some(_) => (f64::NAN, 0.0),
        None => evaluate(&model, &cfg.model, &store, &data.images, &data.labels)?,
    };

    let mut report = RunReport::new("train-toy", cfg);
    report.metric("parameters", store.num_params());
    report.metric("steps_run", losses.len());
    report.metric("initial_loss", initial_loss);
    report.metric("final_loss", final_loss);
    report.metric("train_accuracy", final_accuracy);
    report.metric("chance_accuracy", 1.0 / cfg.task.classes as f64);
    report.metric("loss_curve", losses.iter().step_by(10).copied().collect::<Vec<_>>());
    report.metric(
        "grad_norm_curve",
        grad_norms.iter().step_by(10).copied().collect::<Vec<_>>(),
    );
    report.check(
        "finite_loss",
        diverged_at.is_none(),
        diverged_at.map_or("every step finite".into(), |s| format!("non-finite loss at step {s}")),
    );
    report.check(
        "loss_below_tenth_of_initial",
        final_loss < initial_loss / 10.0,
        format!("{final_loss:.5} vs {initial_loss:.5}"),
    );
    report.check(
        "train_accuracy_at_least_0.9",
        final_accuracy >= 0.9,
        format!("{final_accuracy:.3}"),
    );
    Ok(TrainOutcome {
        report: report.finish(start),
        model,
        store,
        initial_loss,
        final_loss,
        accuracy: final_accuracy,
        losses,
        diverged_at,
    })
}

/// Runs the trained weights at `resolution` on upscaled task images, then
/// shows that an absolute-position model cannot make the same move.
pub fn resolution_transfer_check(trained: &TrainOutcome, task: &SyntheticTask, resolution: usize) -> Result<RunReport> {
    let start = Instant::now();
    let base = &trained.model.config;
    if !resolution.is_multiple_of(task.size) {
        return Err(Error::Config(format!(
            "target resolution {resolution} is not a multiple of {}",
            task.size
        )));
    }
    let run = base.at_resolution(resolution)?;
    let data = task.generate()?;
    let snapshot = trained.store.clone();

    let (_, source_acc) = evaluate(&trained.model, base, &trained.store, &data.images, &data.labels)?;
    let upscaled = upscale_nearest(&data.images, resolution / task.size)?;
    let outcome = evaluate(&trained.model, &run, &trained.store, &upscaled, &data.labels);
    let unchanged = trained.store.bit_eq(&snapshot);

    let mut ablation = base.clone();
    ablation.position = PositionMode::Absolute;
    let mut abs_store = ParamStore::new(0);
    let abs_model = IwinModel::new(&mut abs_store, &ablation)?;
    let abs_run = ModelConfig {
        position: PositionMode::Absolute,
        ..run.clone()
    };
    let abs_outcome = evaluate(&abs_model, &abs_run, &abs_store, &upscaled, &data.labels);

    let chance = 1.0 / task.classes as f64;
    let mut report = RunReport::new(
        "transfer-check",
        serde_json::json!({
            "source_resolution": base.resolution,
            "source_window": base.window,
            "target_resolution": run.resolution,
            "target_window": run.window,
            "task": task,
        }),
    );
    report.metric("source_accuracy", source_acc);
    report.metric("chance_accuracy", chance);
    match &outcome {
        Ok((loss, acc)) => {
            report.metric("target_loss", loss);
            report.metric("target_accuracy", acc);
            report.metric("accuracy_retention", acc / source_acc.max(f64::MIN_POSITIVE));
            report.check(
                "executes_at_target",
                true,
                format!("{resolution}x{resolution}, window {}", run.window),
            );
            report.check(
                "accuracy_at_least_twice_chance",
                *acc >= 2.0 * chance,
                format!("{acc:.3} vs {:.3}", 2.0 * chance),
            );
        }
        Err(e) => report.check("executes_at_target", false, e.to_string()),
    }
    report.check(
        "parameters_unchanged",
        unchanged,
        format!("{} tensors compared bitwise", snapshot.len()),
    );
    match abs_outcome {
        Err(e @ Error::Config(_)) => report.check("absolute_position_rejected", true, e.to_string()),
        Err(e) => report.check(
            "absolute_position_rejected",
            false,
            format!("unexpected error kind: {e}"),
        ),
        Ok(_) => report.check(
            "absolute_position_rejected",
            false,
            "absolute-position model ran at the new size",
        ),
    }
    Ok(report.finish(start))
}
