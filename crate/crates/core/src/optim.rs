//! Optimizers and schedules.
//!
//! [`LocalOptimizer`] steps one named layer at a time with a linearly decaying
//! learning rate (Hebbian phase). [`AdamState`], [`PlateauState`] and
//! [`EarlyStopState`] drive the supervised phase.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HebbError, Result};
use crate::layers::Model;
use crate::tensor::Tensor;

/// Per-layer learning rates with a shared linear decay to zero.
#[derive(Debug, Clone)]
pub struct LocalOptimizer {
    layer_lr: BTreeMap<String, f64>,
    total_epochs: usize,
}

impl LocalOptimizer {
    pub fn new(total_epochs: usize) -> Self {
        LocalOptimizer {
            layer_lr: BTreeMap::new(),
            total_epochs,
        }
    }

    pub fn register(&mut self, layer: impl Into<String>, lr0: f64) {
        self.layer_lr.insert(layer.into(), lr0);
    }

    pub fn is_registered(&self, layer: &str) -> bool {
        self.layer_lr.contains_key(layer)
    }

    /// `lr₀ · (1 − epoch / total_epochs)`, clamped at zero; `epoch` counts
    /// completed epochs.
    pub fn lr(&self, layer: &str, epoch: usize) -> Result<f64> {
        let lr0 = *self
            .layer_lr
            .get(layer)
            .ok_or_else(|| HebbError::Config(format!("layer {layer} is not registered with the local optimizer")))?;
        if self.total_epochs == 0 {
            return Ok(0.0);
        }
        let frac = 1.0 - epoch as f64 / self.total_epochs as f64;
        Ok(lr0 * frac.max(0.0))
    }

    /// `W ← W + lr(epoch) · delta_w` on one tensor.
    pub fn step(&self, layer: &str, weights: &mut Tensor, delta_w: &Tensor, epoch: usize) -> Result<()> {
        let lr = self.lr(layer, epoch)?;
        if weights.len() != delta_w.len() {
            return Err(HebbError::dim(
                format!("local step on {layer}"),
                format!("weights {:?} vs delta {:?}", weights.shape(), delta_w.shape()),
            ));
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (w, d) in weights.data_mut().iter_mut().zip(delta_w.data()) {
            *w += lr * d;
        }
        Ok(())
    }

    /// Steps the `weight` tensor of one layer of `model`; nothing else is touched.
    pub fn local_step(&self, model: &mut Model, layer: &str, delta_w: &Tensor, epoch: usize) -> Result<()> {
        self.lr(layer, epoch)?;
        let weights = model.layer_mut(layer)?.param_mut("weight")?;
        self.step(layer, weights, delta_w, epoch)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One Adam step over every `(name, param, grad)` triple.
    pub fn step<'a, I>(&mut self, items: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param, grad) in items {
            if param.shape() != grad.shape() {
                return Err(HebbError::dim(
                    format!("adam step on {name}"),
                    format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MonitorMode {
    Min,
    Max,
}

impl MonitorMode {
    fn improves(self, value: f64, best: Option<f64>, min_delta: f64) -> bool {
        match best {
            None => true,
            Some(b) => match self {
                MonitorMode::Min => value < b - min_delta,
                MonitorMode::Max => value > b + min_delta,
            },
        }
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone)]
pub struct PlateauState {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
    pub mode: MonitorMode,
    best: Option<f64>,
    stagnant: usize,
}

impl PlateauState {
    pub fn new(mode: MonitorMode, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauState {
            factor,
            patience,
            min_lr,
            min_delta: 0.0,
            mode,
            best: None,
            stagnant: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feeds one metric value; returns the learning rate to use next.
    pub fn step(&mut self, metric: f64, current_lr: f64) -> f64 {
        if self.mode.improves(metric, self.best, self.min_delta) {
            self.best = Some(metric);
            self.stagnant = 0;
            return current_lr;
        }
        self.stagnant += 1;
        if self.stagnant >= self.patience {
            self.stagnant = 0;
            return (current_lr * self.factor).max(self.min_lr).min(current_lr);
        }
        current_lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Early stopping with best-snapshot restore.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub patience: usize,
    pub min_delta: f64,
    pub mode: MonitorMode,
    best: Option<f64>,
    best_epoch: usize,
    snapshot: Option<Model>,
    stagnant: usize,
    calls: usize,
    stopped: bool,
}

impl EarlyStopState {
    pub fn new(mode: MonitorMode, patience: usize, min_delta: f64) -> Self {
        EarlyStopState {
            patience,
            min_delta,
            mode,
            best: None,
            best_epoch: 0,
            snapshot: None,
            stagnant: 0,
            calls: 0,
            stopped: false,
        }
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based index of the call that produced the best value.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Records one epoch's metric. Snapshots `model` on improvement; on the
    /// stop decision, restores the best snapshot into `model`.
    pub fn step(&mut self, metric: f64, model: &mut Model) -> StopDecision {
        if self.stopped {
            return StopDecision::Stop;
        }
        self.calls += 1;
        if self.mode.improves(metric, self.best, self.min_delta) {
            self.best = Some(metric);
            self.best_epoch = self.calls;
            self.snapshot = Some(model.clone());
            self.stagnant = 0;
            return StopDecision::Continue;
        }
        self.stagnant += 1;
        if self.stagnant >= self.patience {
            self.stopped = true;
            self.restore_best(model);
            return StopDecision::Stop;
        }
        StopDecision::Continue
    }

    /// Copies the best snapshot (if any) into `model`.
    pub fn restore_best(&self, model: &mut Model) {
        if let Some(s) = &self.snapshot {
            model.clone_from(s);
        }
    }
}
