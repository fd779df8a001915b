//! Training engines.
//!
//! The Hebbian trainer runs an outer epoch loop, a batch loop, and an inner
//! loop over the rule-trainable layers in model order: each layer gets its
//! input by a forward pass through the layers before it, that input is
//! reshaped for the rule (flattened, or cut into patches for convolutions),
//! and the rule's step is applied by the local optimizer before the next
//! layer is visited. No gradients are computed in this phase.
//!
//! The supervised trainer is an ordinary backprop loop over the layers from
//! `supervised_from` onward, with Adam, reduce-on-plateau and early stopping.
//!
//! Both fire [`EventKind`]s to registered handlers, in registration order.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{HebbError, Result};
use crate::layers::{backward, backward_params, extract_patches, forward, forward_frozen, ForwardCache, LayerKind, Mode, Model};
use crate::optim::{AdamState, EarlyStopState, LocalOptimizer, MonitorMode, PlateauState, StopDecision};
use crate::rules::{rule_for_layer, Applicability, KrotovParams, KrotovRule, LearningRule};
use crate::tensor::{RngState, Tensor};

/// Rows scored per chunk in [`evaluate`].
const EVAL_BATCH: usize = 500;
/// RNG stream used for head re-initialization.
pub const HEAD_INIT_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Hebbian,
    Supervised,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Hebbian => "hebbian",
            Phase::Supervised => "supervised",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Started,
    EpochStarted,
    IterationCompleted,
    EpochCompleted,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub kind: EventKind,
    pub phase: Phase,
    /// 1-based; 0 before the first epoch starts.
    pub epoch: usize,
    /// Iterations completed so far in this run.
    pub iteration: usize,
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub seconds: f64,
}

/// What a handler sees. On `EpochCompleted`, `row` is the epoch's metrics row
/// and may be filled in (e.g. by an evaluator) before it is recorded.
pub struct EventCtx<'a> {
    pub event: Event,
    pub model: &'a Model,
    pub row: Option<&'a mut EpochRow>,
}

type HandlerFn<'h> = Box<dyn FnMut(&mut EventCtx<'_>) -> Result<()> + 'h>;

/// Event handlers, invoked synchronously in registration order.
#[derive(Default)]
pub struct Handlers<'h> {
    entries: Vec<(EventKind, HandlerFn<'h>)>,
}

impl<'h> Handlers<'h> {
    pub fn new() -> Self {
        Handlers { entries: Vec::new() }
    }

    pub fn register<F>(&mut self, kind: EventKind, handler: F)
    where
        F: FnMut(&mut EventCtx<'_>) -> Result<()> + 'h,
    {
        self.entries.push((kind, Box::new(handler)));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn fire(&mut self, event: Event, model: &Model, mut row: Option<&mut EpochRow>) -> Result<()> {
        for (kind, h) in &mut self.entries {
            if *kind == event.kind {
                let mut ctx = EventCtx {
                    event,
                    model,
                    row: row.as_deref_mut(),
                };
                h(&mut ctx)?;
            }
        }
        Ok(())
    }
}

/// Attaches `handler` to `kind`.
pub fn register_handler<'h, F>(handlers: &mut Handlers<'h>, kind: EventKind, handler: F)
where
    F: FnMut(&mut EventCtx<'_>) -> Result<()> + 'h,
{
    handlers.register(kind, handler)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub artifacts: Vec<std::path::PathBuf>,
    pub seed: u64,
    pub threads: usize,
}

impl RunRecord {
    pub fn extend(&mut self, other: RunRecord) {
        self.rows.extend(other.rows);
        self.artifacts.extend(other.artifacts);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HebbianPlan {
    /// Layers trained with the Krotov-Hopfield rule, by name.
    pub layers: Vec<String>,
    pub krotov: KrotovParams,
    pub lr: f64,
    pub epochs: usize,
    /// Rule batch size, in rows: images for dense layers, patches for conv layers.
    pub batch_size: usize,
    /// Images drawn per iteration; defaults to `batch_size`.
    #[serde(default)]
    pub image_batch_size: Option<usize>,
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Freeze the trained layers once the phase completes.
    #[serde(default = "yes")]
    pub freeze_after: bool,
}

fn yes() -> bool {
    true
}

impl Default for HebbianPlan {
    fn default() -> Self {
        HebbianPlan {
            layers: vec![],
            krotov: KrotovParams::default(),
            lr: 0.04,
            epochs: 100,
            batch_size: 1000,
            image_batch_size: None,
            shuffle: true,
            freeze_after: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    Loss,
    Accuracy,
}

impl Monitor {
    pub fn mode(self) -> MonitorMode {
        match self {
            Monitor::Loss => MonitorMode::Min,
            Monitor::Accuracy => MonitorMode::Max,
        }
    }

    pub fn pick(self, m: &EvalMetrics) -> f64 {
        match self {
            Monitor::Loss => m.loss,
            Monitor::Accuracy => m.accuracy,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlateauSettings {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauSettings {
    fn default() -> Self {
        PlateauSettings {
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopSettings {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopSettings {
    fn default() -> Self {
        EarlyStopSettings {
            patience: 10,
            min_delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SupervisedPlan {
    pub supervised_from: String,
    #[serde(default)]
    pub freeze_layers: Vec<String>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_monitor")]
    pub monitor: Monitor,
    /// `None` disables the schedule.
    #[serde(default = "default_plateau")]
    pub plateau: Option<PlateauSettings>,
    /// `None` disables early stopping.
    #[serde(default = "default_early_stop")]
    pub early_stop: Option<EarlyStopSettings>,
}

fn default_monitor() -> Monitor {
    Monitor::Loss
}

fn default_plateau() -> Option<PlateauSettings> {
    Some(PlateauSettings::default())
}

fn default_early_stop() -> Option<EarlyStopSettings> {
    Some(EarlyStopSettings::default())
}

impl Default for SupervisedPlan {
    fn default() -> Self {
        SupervisedPlan {
            supervised_from: String::new(),
            freeze_layers: vec![],
            lr: 0.001,
            epochs: 100,
            batch_size: 256,
            monitor: Monitor::Loss,
            plateau: default_plateau(),
            early_stop: default_early_stop(),
        }
    }
}

/// Both phases of an experiment plus its seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub hebbian: HebbianPlan,
    pub supervised: SupervisedPlan,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let h = &self.hebbian;
        for name in &h.layers {
            let layer = model.layer(name)?;
            if matches!(rule_for_layer(layer), Applicability::NotApplicable) {
                return Err(HebbError::Config(format!(
                    "hebbian.layers: {name} is a {} layer, which no local rule can train",
                    layer.kind.tag()
                )));
            }
        }
        h.krotov.validate()?;
        if h.batch_size == 0 || h.image_batch_size == Some(0) {
            return Err(HebbError::Config("hebbian batch sizes must be >= 1".into()));
        }
        if !(h.lr >= 0.0) {
            return Err(HebbError::Config("hebbian.lr must be >= 0".into()));
        }
        let s = &self.supervised;
        model.index_of(&s.supervised_from).map_err(|_| {
            HebbError::Config(format!("supervised.supervised_from: no layer named {}", s.supervised_from))
        })?;
        for name in &s.freeze_layers {
            model
                .index_of(name)
                .map_err(|_| HebbError::Config(format!("supervised.freeze_layers: no layer named {name}")))?;
        }
        if s.batch_size == 0 {
            return Err(HebbError::Config("supervised.batch_size must be >= 1".into()));
        }
        if !(s.lr > 0.0) {
            return Err(HebbError::Config("supervised.lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Propagates `images` through every layer before `layer` (eval mode) and
/// reshapes the result into the rule's `[samples × d]` input.
pub fn preprocess_for_layer(model: &Model, layer: &str, images: &Tensor) -> Result<Tensor> {
    let idx = model.index_of(layer)?;
    let node = &model.layers[idx];
    let applicability = rule_for_layer(node);
    if !applicability.is_trainable() {
        return Err(HebbError::Config(format!(
            "layer {layer} ({}) is not trainable by a local rule",
            node.kind.tag()
        )));
    }
    let x = model.forward_range(images, 0..idx)?;
    match (&node.kind, applicability) {
        (LayerKind::Conv2d { kernel, stride, .. }, Applicability::Patches) => {
            extract_patches(&x, kernel.0, kernel.1, *stride)
        }
        _ => Ok(x.flatten_rows()),
    }
}

pub struct HebbianTrainer<'h> {
    rules: Vec<(String, Box<dyn LearningRule>)>,
    optimizer: LocalOptimizer,
    plan: HebbianPlan,
    pub handlers: Handlers<'h>,
}

impl<'h> HebbianTrainer<'h> {
    /// Krotov-Hopfield rule on every layer listed in `plan.layers`.
    pub fn new(plan: HebbianPlan) -> Result<Self> {
        let mut trainer = HebbianTrainer {
            rules: vec![],
            optimizer: LocalOptimizer::new(plan.epochs),
            plan: plan.clone(),
            handlers: Handlers::new(),
        };
        for name in &plan.layers {
            trainer.add_rule(name, Box::new(KrotovRule::new(plan.krotov)?), plan.lr);
        }
        Ok(trainer)
    }

    /// Registers a rule (and learning rate) for one layer.
    pub fn add_rule(&mut self, layer: &str, rule: Box<dyn LearningRule>, lr: f64) {
        self.rules.retain(|(n, _)| n != layer);
        self.rules.push((layer.to_string(), rule));
        self.optimizer.register(layer, lr);
    }

    pub fn optimizer(&self) -> &LocalOptimizer {
        &self.optimizer
    }

    /// Trainable layer indices (in model order) paired with their rule slot.
    fn schedule(&self, model: &Model) -> Result<Vec<(usize, usize)>> {
        let mut out = vec![];
        for (slot, (name, _)) in self.rules.iter().enumerate() {
            let idx = model.index_of(name)?;
            if rule_for_layer(&model.layers[idx]).is_trainable() {
                out.push((idx, slot));
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn run(&mut self, model: &mut Model, data: &Dataset, rng: &RngState) -> Result<RunRecord> {
        let schedule = self.schedule(model)?;
        if schedule.is_empty() {
            return Err(HebbError::Config(
                "no rule-trainable, unfrozen layer has a learning rule registered".into(),
            ));
        }
        let row_batch = self.plan.batch_size;
        let image_batch = self.plan.image_batch_size.unwrap_or(row_batch);
        let mut plan = BatchPlan::new(image_batch, self.plan.shuffle, rng.fork(1));
        let mut record = RunRecord {
            seed: rng.seed(),
            threads: rayon::current_num_threads(),
            ..Default::default()
        };
        let phase = Phase::Hebbian;
        let mut iteration = 0;
        let ev = |kind, epoch, iteration| Event {
            kind,
            phase,
            epoch,
            iteration,
        };
        self.handlers.fire(ev(EventKind::Started, 0, 0), model, None)?;

        for epoch in 0..self.plan.epochs {
            let t0 = Instant::now();
            self.handlers.fire(ev(EventKind::EpochStarted, epoch + 1, iteration), model, None)?;
            for (images, _) in batches(data, &mut plan)? {
                for &(idx, slot) in &schedule {
                    let name = &self.rules[slot].0;
                    let inputs = preprocess_for_layer(model, name, &images)?;
                    let mut start = 0;
                    while start < inputs.rows() {
                        let end = (start + row_batch).min(inputs.rows());
                        let block = inputs.slice_rows(start, end)?;
                        let weights = model.layers[idx].weight_matrix()?;
                        let update = self.rules[slot].1.update(&weights, &block)?;
                        self.optimizer.local_step(model, name, &update.delta_w, epoch)?;
                        start = end;
                    }
                }
                iteration += 1;
                self.handlers.fire(ev(EventKind::IterationCompleted, epoch + 1, iteration), model, None)?;
            }
            let first = &self.rules[schedule[0].1].0;
            let mut row = EpochRow {
                phase,
                epoch: epoch + 1,
                lr: self.optimizer.lr(first, epoch)?,
                loss: None,
                accuracy: None,
                seconds: t0.elapsed().as_secs_f64(),
            };
            self.handlers
                .fire(ev(EventKind::EpochCompleted, epoch + 1, iteration), model, Some(&mut row))?;
            record.rows.push(row);
        }
        if self.plan.freeze_after {
            for &(idx, _) in &schedule {
                model.layers[idx].frozen = true;
            }
        }
        self.handlers
            .fire(ev(EventKind::Completed, self.plan.epochs, iteration), model, None)?;
        Ok(record)
    }
}

/// Trains `model` with the Hebbian phase of `plan`.
pub fn train_hebbian(model: &mut Model, data: &Dataset, plan: &TrainPlan, handlers: Handlers<'_>) -> Result<RunRecord> {
    let mut trainer = HebbianTrainer::new(plan.hebbian.clone())?;
    trainer.handlers = handlers;
    trainer.run(model, data, &RngState::new(plan.seed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean softmax cross-entropy of a `[b × classes]` logit block and its
/// gradient with respect to the logits (already divided by `b`).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, usize)> {
    let (b, k) = logits.dims2("softmax_cross_entropy")?;
    if b != labels.len() {
        return Err(HebbError::dim(
            "softmax_cross_entropy",
            format!("{b} logit rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(HebbError::Config(format!("label {bad} outside {k} classes")));
    }
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        let (l, c) = row_loss(row, y);
        loss += l;
        correct += c as usize;
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..k {
            let p = (row[j] - m).exp() / z;
            grad[i * k + j] = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, k], grad)?, correct))
}

/// Cross-entropy of one row and whether its argmax (lowest index on ties) is `label`.
fn row_loss(row: &[f64], label: usize) -> (f64, bool) {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    let m = row[best];
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    (lse - row[label], best == label)
}

/// Eval-mode loss and accuracy over a dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(HebbError::Config("cannot evaluate on an empty dataset".into()));
    }
    let chunks: Vec<(usize, usize)> = (0..data.len())
        .step_by(EVAL_BATCH)
        .map(|s| (s, (s + EVAL_BATCH).min(data.len())))
        .collect();
    let per_chunk = chunks
        .iter()
        .map(|&(s, e)| {
            let logits = model.forward_eval(&data.images.slice_rows(s, e)?)?;
            score_logits(&logits, &data.labels[s..e], model.classes)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut loss, mut correct) = (0.0, 0);
    for (l, c) in per_chunk {
        loss += l;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Summed loss and correct count for a block of logits.
pub fn score_logits(logits: &Tensor, labels: &[usize], classes: usize) -> Result<(f64, usize)> {
    let (b, k) = logits.dims2("score_logits")?;
    if b != labels.len() || k != classes {
        return Err(HebbError::dim("score_logits", format!("logits {:?}, {} labels", logits.shape(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(HebbError::Config(format!("label {bad} outside {k} classes")));
    }
    let per_row: Vec<(f64, bool)> = logits
        .data()
        .par_chunks(k)
        .zip(labels.par_iter())
        .map(|(row, &y)| row_loss(row, y))
        .collect();
    Ok(per_row
        .iter()
        .fold((0.0, 0), |(l, c), &(rl, ok)| (l + rl, c + ok as usize)))
}

/// Result of a supervised run.
#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    pub record: RunRecord,
    /// Metrics on the evaluation set for the weights the model ends with.
    pub final_eval: EvalMetrics,
    pub stopped_early: bool,
    /// 1-based epoch whose weights were kept (when early stopping is enabled).
    pub best_epoch: Option<usize>,
}

/// Checks that backprop from `start` never needs a gradient through conv2d.
fn check_head(model: &Model, start: usize) -> Result<()> {
    for (i, layer) in model.layers.iter().enumerate().skip(start) {
        if let LayerKind::Conv2d { .. } = layer.kind {
            if !layer.frozen || i > start {
                return Err(HebbError::Unsupported(format!(
                    "supervised training from {} would need a gradient through conv2d layer {}",
                    model.layers[start].name, layer.name
                )));
            }
        }
    }
    Ok(())
}

/// Marks the plan's `freeze_layers` as frozen.
pub fn apply_freeze(model: &mut Model, plan: &SupervisedPlan) -> Result<()> {
    for name in &plan.freeze_layers {
        model.layer_mut(name)?.frozen = true;
    }
    Ok(())
}

/// Re-initializes every unfrozen layer from `supervised_from` onward.
pub fn init_head(model: &mut Model, plan: &SupervisedPlan, rng: &mut RngState) -> Result<()> {
    let start = model.index_of(&plan.supervised_from)?;
    for layer in model.layers.iter_mut().skip(start) {
        if !layer.frozen {
            layer.init_scaled(rng);
        }
    }
    Ok(())
}

pub struct SupervisedTrainer<'h> {
    plan: SupervisedPlan,
    pub handlers: Handlers<'h>,
}

impl<'h> SupervisedTrainer<'h> {
    pub fn new(plan: SupervisedPlan) -> Self {
        SupervisedTrainer {
            plan,
            handlers: Handlers::new(),
        }
    }

    pub fn run(&mut self, model: &mut Model, train: &Dataset, eval: &Dataset, rng: &RngState) -> Result<SupervisedOutcome> {
        apply_freeze(model, &self.plan)?;
        let start = model.index_of(&self.plan.supervised_from)?;
        check_head(model, start)?;
        let plan = self.plan.clone();
        let mut adam = AdamState::new(plan.lr);
        let mode = plan.monitor.mode();
        let mut plateau = plan
            .plateau
            .as_ref()
            .map(|p| PlateauState::new(mode, p.factor, p.patience, p.min_lr));
        let mut stopper = plan
            .early_stop
            .as_ref()
            .map(|e| EarlyStopState::new(mode, e.patience, e.min_delta));
        let mut batch_plan = BatchPlan::new(plan.batch_size, true, rng.fork(2));
        let mut record = RunRecord {
            seed: rng.seed(),
            threads: rayon::current_num_threads(),
            ..Default::default()
        };
        let phase = Phase::Supervised;
        let ev = |kind, epoch, iteration| Event {
            kind,
            phase,
            epoch,
            iteration,
        };
        let mut iteration = 0;
        let mut stopped_early = false;
        let mut last_eval = None;
        self.handlers.fire(ev(EventKind::Started, 0, 0), model, None)?;

        for epoch in 1..=plan.epochs {
            let t0 = Instant::now();
            self.handlers.fire(ev(EventKind::EpochStarted, epoch, iteration), model, None)?;
            let lr_used = adam.lr;
            for (images, labels) in batches(train, &mut batch_plan)? {
                supervised_step(model, start, &images, &labels, &mut adam)?;
                iteration += 1;
                self.handlers.fire(ev(EventKind::IterationCompleted, epoch, iteration), model, None)?;
            }
            let metrics = evaluate(model, eval)?;
            let monitored = plan.monitor.pick(&metrics);
            if let Some(p) = plateau.as_mut() {
                adam.lr = p.step(monitored, adam.lr);
            }
            let mut row = EpochRow {
                phase,
                epoch,
                lr: lr_used,
                loss: Some(metrics.loss),
                accuracy: Some(metrics.accuracy),
                seconds: t0.elapsed().as_secs_f64(),
            };
            self.handlers
                .fire(ev(EventKind::EpochCompleted, epoch, iteration), model, Some(&mut row))?;
            record.rows.push(row);
            last_eval = Some(metrics);
            if let Some(s) = stopper.as_mut() {
                if s.step(monitored, model) == StopDecision::Stop {
                    stopped_early = true;
                    break;
                }
            }
        }
        let mut best_epoch = None;
        if let Some(s) = &stopper {
            // keep the best weights seen, whether or not the patience ran out
            if !stopped_early {
                s.restore_best(model);
            }
            best_epoch = Some(s.best_epoch());
        }
        let final_eval = match (best_epoch, last_eval) {
            (None, Some(m)) => m,
            _ => evaluate(model, eval)?,
        };
        self.handlers
            .fire(ev(EventKind::Completed, record.rows.len(), iteration), model, None)?;
        Ok(SupervisedOutcome {
            record,
            final_eval,
            stopped_early,
            best_epoch,
        })
    }
}

/// Loss, logits gradient and parameter gradients of the head for one batch.
/// Running statistics of unfrozen batchnorm layers are updated.
pub fn head_gradients(
    model: &mut Model,
    start: usize,
    images: &Tensor,
    labels: &[usize],
) -> Result<(f64, usize, Vec<(String, String, Tensor)>)> {
    let n = model.layers.len();
    let mut x = model.forward_range(images, 0..start)?;
    let mut caches: Vec<Option<ForwardCache>> = Vec::with_capacity(n - start);
    for layer in &mut model.layers[start..] {
        let (y, cache) = if layer.frozen {
            forward_frozen(layer, &x)?
        } else {
            forward(layer, &x, Mode::Train)?
        };
        caches.push(cache);
        x = y;
    }
    let (loss, mut grad, correct) = softmax_cross_entropy(&x.flatten_rows(), labels)?;
    let mut grads = vec![];
    for i in (start..n).rev() {
        let layer = &model.layers[i];
        let need_params = !layer.frozen && !layer.trainable_param_names().is_empty();
        if i == start && !need_params {
            break;
        }
        let cache = caches[i - start].as_ref().ok_or_else(|| {
            HebbError::Unsupported(format!("layer {} kept no state for backward", layer.name))
        })?;
        if i == start {
            for (p, g) in backward_params(layer, cache, &grad)? {
                grads.push((layer.name.clone(), p, g));
            }
            break;
        }
        let (gin, pgrads) = backward(layer, cache, &grad)?;
        if need_params {
            for (p, g) in pgrads {
                grads.push((layer.name.clone(), p, g));
            }
        }
        grad = gin;
    }
    Ok((loss, correct, grads))
}

fn supervised_step(
    model: &mut Model,
    start: usize,
    images: &Tensor,
    labels: &[usize],
    adam: &mut AdamState,
) -> Result<(f64, usize)> {
    let (loss, correct, grads) = head_gradients(model, start, images, labels)?;
    let mut grads: BTreeMap<String, Tensor> = grads
        .into_iter()
        .map(|(l, p, g)| (format!("{l}.{p}"), g))
        .collect();
    let mut items = vec![];
    for layer in model.layers.iter_mut().skip(start) {
        for (pname, tensor) in layer.params.iter_mut() {
            let key = format!("{}.{}", layer.name, pname);
            if let Some(g) = grads.remove(&key) {
                items.push((key, tensor, g));
            }
        }
    }
    adam.step(items.iter_mut().map(|(k, t, g)| (k.as_str(), &mut **t, &*g)))?;
    Ok((loss, correct))
}

/// Trains the head of `model` per `plan.supervised`.
pub fn train_supervised(
    model: &mut Model,
    train: &Dataset,
    eval: &Dataset,
    plan: &TrainPlan,
    handlers: Handlers<'_>,
) -> Result<SupervisedOutcome> {
    let mut trainer = SupervisedTrainer::new(plan.supervised.clone());
    trainer.handlers = handlers;
    trainer.run(model, train, eval, &RngState::new(plan.seed))
}

/// Trains a freshly initialized head on a copy of `model` and scores it.
/// `model` itself is never modified.
pub fn hebbian_evaluate(model: &Model, train: &Dataset, eval: &Dataset, plan: &TrainPlan) -> Result<EvalMetrics> {
    let mut work = model.clone();
    apply_freeze(&mut work, &plan.supervised)?;
    let mut rng = RngState::new(plan.seed).fork(HEAD_INIT_STREAM);
    init_head(&mut work, &plan.supervised, &mut rng)?;
    let outcome = train_supervised(&mut work, train, eval, plan, Handlers::new())?;
    Ok(outcome.final_eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_softmax() {
        let logits = Tensor::zeros(&[1, 2]);
        let (loss, grad, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn uniform_logits_score() {
        let logits = Tensor::zeros(&[4, 10]);
        let (loss, correct) = score_logits(&logits, &[0, 3, 0, 9], 10).unwrap();
        assert!((loss / 4.0 - 10f64.ln()).abs() < 1e-12);
        assert_eq!(correct, 2);
    }

    #[test]
    fn handlers_fire_in_registration_order() {
        let log = std::cell::RefCell::new(vec![]);
        let mut h = Handlers::new();
        register_handler(&mut h, EventKind::Completed, |_| {
            log.borrow_mut().push(1);
            Ok(())
        });
        register_handler(&mut h, EventKind::Completed, |_| {
            log.borrow_mut().push(2);
            Ok(())
        });
        register_handler(&mut h, EventKind::Started, |_| {
            log.borrow_mut().push(0);
            Ok(())
        });
        let model = Model::new(vec![], vec![1], 1).unwrap();
        let ev = Event {
            kind: EventKind::Completed,
            phase: Phase::Hebbian,
            epoch: 1,
            iteration: 1,
        };
        h.fire(ev, &model, None).unwrap();
        drop(h);
        assert_eq!(log.into_inner(), vec![1, 2]);
    }
}
