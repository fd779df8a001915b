//! Local learning rules.
//!
//! The Krotov-Hopfield rule drives each hidden unit `μ` with the bracket
//! current `I_μ = Σ_i |W_μi|^(p−2) W_μi v_i`, ranks the units per sample, and
//! applies `g = +1` to the winner and `g = −Δ` to the k-th ranked unit. The
//! step for one sample is `g_μ (v_i − I_μ W_μi)`; a batch sums those steps and
//! divides by the largest magnitude (floored at `precision`), so every update
//! has unit max-norm before the learning rate is applied.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HebbError, Result};
use crate::layers::{LayerKind, LayerNode};
use crate::tensor::{matmul_nt, rank_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrotovParams {
    /// Lebesgue exponent of the bracket, `>= 2`.
    pub p: f64,
    /// Rank of the unit that receives the anti-Hebbian term.
    pub k: usize,
    /// Strength of the anti-Hebbian term.
    pub delta: f64,
    /// Floor on the max-abs normalizer.
    #[serde(default = "default_precision")]
    pub precision: f64,
}

fn default_precision() -> f64 {
    1e-30
}

impl Default for KrotovParams {
    fn default() -> Self {
        KrotovParams {
            p: 4.0,
            k: 4,
            delta: 0.4,
            precision: default_precision(),
        }
    }
}

impl KrotovParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 2.0) {
            return Err(HebbError::Config(format!("p = {} must be >= 2", self.p)));
        }
        if self.k == 0 {
            return Err(HebbError::Config("k must be >= 1".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(HebbError::Config(format!("delta = {} must be >= 0", self.delta)));
        }
        if !(self.precision > 0.0) {
            return Err(HebbError::Config(format!("precision = {} must be > 0", self.precision)));
        }
        Ok(())
    }
}

/// A weight step direction for one layer, before the learning rate.
#[derive(Debug, Clone)]
pub struct RuleUpdate {
    /// `[units × inputs]`, max-abs normalized.
    pub delta_w: Tensor,
    /// Largest `|raw|` before normalization.
    pub raw_max: f64,
    /// Samples whose k-th ranked unit received a non-zero anti-Hebbian term.
    pub anti_hebbian: usize,
}

/// A rule that turns a layer's weights and its (preprocessed) inputs into a step.
pub trait LearningRule: Send + Sync {
    /// `weights` is `[units × d]`, `inputs` is `[samples × d]`.
    fn update(&self, weights: &Tensor, inputs: &Tensor) -> Result<RuleUpdate>;

    fn name(&self) -> &str;
}

#[derive(Debug, Clone, Default)]
pub struct KrotovRule {
    pub params: KrotovParams,
}

impl KrotovRule {
    pub fn new(params: KrotovParams) -> Result<Self> {
        params.validate()?;
        Ok(KrotovRule { params })
    }
}

impl LearningRule for KrotovRule {
    fn update(&self, weights: &Tensor, inputs: &Tensor) -> Result<RuleUpdate> {
        krotov_update(weights, inputs, &self.params)
    }

    fn name(&self) -> &str {
        "krotov"
    }
}

fn check_pair(weights: &Tensor, inputs: &Tensor, context: &str) -> Result<(usize, usize, usize)> {
    let (units, d) = weights.dims2(context)?;
    let (b, d2) = inputs.dims2(context)?;
    if d != d2 {
        return Err(HebbError::dim(
            context,
            format!("weights {:?} vs inputs {:?}", weights.shape(), inputs.shape()),
        ));
    }
    Ok((units, d, b))
}

/// `sign(W) · |W|^(p−1)`, the weight transform inside the bracket.
fn bracket_weights(weights: &Tensor, p: f64) -> Tensor {
    if p == 2.0 {
        return weights.clone();
    }
    let e = p - 1.0;
    let int_e = e.fract() == 0.0 && e <= 64.0;
    weights.map(|w| {
        let m = if int_e { w.abs().powi(e as i32) } else { w.abs().powf(e) };
        m.copysign(w)
    })
}

/// `currents[s][μ] = Σ_i |W_μi|^(p−2) W_μi v_si`, shape `[batch × units]`.
pub fn bracket_currents(weights: &Tensor, inputs: &Tensor, p: f64) -> Result<Tensor> {
    if !(p >= 2.0) {
        return Err(HebbError::Config(format!("p = {p} must be >= 2")));
    }
    check_pair(weights, inputs, "bracket_currents")?;
    matmul_nt(inputs, &bracket_weights(weights, p))
}

/// Gating vector for one row of currents.
pub fn gate(currents_row: &[f64], params: &KrotovParams) -> Result<Vec<f64>> {
    let row = Tensor::new(vec![1, currents_row.len()], currents_row.to_vec())?;
    let r = rank_rows(&row, params.k)?[0];
    let mut g = vec![0.0; currents_row.len()];
    g[r.kth] = -params.delta;
    // the Hebbian term wins when k = 1
    g[r.winner] = 1.0;
    Ok(g)
}

/// One batch step of the Krotov-Hopfield rule. `weights` is not modified.
pub fn krotov_update(weights: &Tensor, inputs: &Tensor, params: &KrotovParams) -> Result<RuleUpdate> {
    params.validate()?;
    let (units, d, b) = check_pair(weights, inputs, "krotov_update")?;
    if b == 0 {
        return Err(HebbError::Config("empty batch".into()));
    }
    let currents = bracket_currents(weights, inputs, params.p)?;
    let ranks = rank_rows(&currents, params.k)?;

    // For each unit, the (sample, g, current) triples that touch it, in sample order.
    let mut touches: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); units];
    let mut anti_hebbian = 0;
    for (s, r) in ranks.iter().enumerate() {
        let row = currents.row(s);
        if r.kth != r.winner {
            touches[r.kth].push((s, -params.delta, row[r.kth]));
            if params.delta != 0.0 {
                anti_hebbian += 1;
            }
        }
        touches[r.winner].push((s, 1.0, row[r.winner]));
    }

    // raw[μ] = Σ_s g_sμ v_s − (Σ_s g_sμ I_sμ) W_μ, one unit per task.
    let v = inputs.data();
    let w = weights.data();
    let mut raw = vec![0.0; units * d];
    raw.par_chunks_mut(d).enumerate().for_each(|(mu, out)| {
        let mut drive = 0.0;
        for &(s, g, current) in &touches[mu] {
            for (o, x) in out.iter_mut().zip(&v[s * d..(s + 1) * d]) {
                *o += g * x;
            }
            drive += g * current;
        }
        if drive != 0.0 {
            for (o, wv) in out.iter_mut().zip(&w[mu * d..(mu + 1) * d]) {
                *o -= drive * wv;
            }
        }
    });

    let raw_max = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let norm = raw_max.max(params.precision);
    raw.iter_mut().for_each(|x| *x /= norm);
    Ok(RuleUpdate {
        delta_w: Tensor::new(vec![units, d], raw)?,
        raw_max,
        anti_hebbian,
    })
}

/// Whether a local rule can train this layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applicability {
    /// Trainable; inputs are the flattened layer input.
    Dense,
    /// Trainable; inputs are patches of the layer input.
    Patches,
    Frozen,
    NotApplicable,
}

impl Applicability {
    pub fn is_trainable(self) -> bool {
        matches!(self, Applicability::Dense | Applicability::Patches)
    }
}

pub fn rule_for_layer(layer: &LayerNode) -> Applicability {
    let kind = match layer.kind {
        LayerKind::Linear { .. } => Applicability::Dense,
        LayerKind::Conv2d { .. } => Applicability::Patches,
        _ => return Applicability::NotApplicable,
    };
    if layer.frozen {
        Applicability::Frozen
    } else {
        kind
    }
}
