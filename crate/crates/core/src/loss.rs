//! The joint prediction/attention objective.
//!
//! The total loss is
//!
//! ```text
//! L = Lp(train) + α·Lp(UA) + β·Lp(UIA) + γ·Lp(RIA)
//!   + (1−α)·La(UA) + (1−β)·La(UIA) + (1−γ)·La(RIA)
//! ```
//!
//! where `Lp` is mean cross-entropy over a batch and `La` is the mean
//! divergence between the normalized Grad-CAM map of the ground-truth class
//! and the target attention grid. Which attention terms are present depends
//! on the fine-tuning [`Condition`]; a quadrant without its attention term
//! keeps weight 1 on its prediction loss.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, attention_map, AttentionMap, TargetAttentionGrid};
use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::model::{accumulate_grad, forward, softmax, Adjoint, Gradients, Parameters};
use crate::reasonability::Quadrant;

/// Prediction-vs-attention weights for the UA (`alpha`), UIA (`beta`) and
/// RIA (`gamma`) terms. A factor `f` weights prediction by `f` and
/// attention by `1 − f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceFactors {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for BalanceFactors {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.5,
            gamma: 0.8,
        }
    }
}

impl BalanceFactors {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let f = Self { alpha, beta, gamma };
        f.validate()?;
        Ok(f)
    }

    /// The same factor for all three quadrants.
    pub fn uniform(value: f64) -> Result<Self> {
        Self::new(value, value, value)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// The factor for a quadrant that carries loss terms.
    pub fn factor(&self, quadrant: Quadrant) -> f64 {
        match quadrant {
            Quadrant::UA => self.alpha,
            Quadrant::UIA => self.beta,
            Quadrant::RIA => self.gamma,
            Quadrant::RA => 1.0,
        }
    }
}

/// Which quadrants contribute attention terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Prediction loss only.
    C1,
    /// Inaccurate quadrants: RIA and UIA.
    C2,
    /// Unreasonable quadrants: UA and UIA.
    C3,
    /// UA, RIA and UIA.
    C4,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::C1, Condition::C2, Condition::C3, Condition::C4];

    pub fn attention_active(self, quadrant: Quadrant) -> bool {
        use Quadrant::*;
        match self {
            Condition::C1 => false,
            Condition::C2 => matches!(quadrant, RIA | UIA),
            Condition::C3 => matches!(quadrant, UA | UIA),
            Condition::C4 => matches!(quadrant, UA | RIA | UIA),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::C1 => "C1",
            Condition::C2 => "C2",
            Condition::C3 => "C3",
            Condition::C4 => "C4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    #[default]
    Absolute,
    Squared,
}

/// Cross-entropy `−log softmax(logits)[label]`.
pub fn prediction_loss(logits: &[f64], label: usize) -> Result<f64> {
    Ok(prediction_loss_grad(logits, label)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn prediction_loss_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(logits.iter().map(|&z| libm::exp(z - max)).sum::<f64>());
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// Mean elementwise divergence between a normalized map and its target.
pub fn attention_loss(
    map: &AttentionMap,
    target: &TargetAttentionGrid,
    divergence: Divergence,
) -> Result<f64> {
    Ok(attention_loss_grad(&map.grid, &target.grid, divergence)?.0)
}

fn attention_loss_grad(map: &Grid, target: &Grid, divergence: Divergence) -> Result<(f64, Grid)> {
    if map.dims() != target.dims() {
        return Err(Error::Input(format!(
            "attention map is {:?}, target is {:?}",
            map.dims(),
            target.dims()
        )));
    }
    let n = map.as_slice().len() as f64;
    let mut value = 0.0;
    let grad: Vec<f64> = map
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&m, &t)| {
            let d = m - t;
            match divergence {
                Divergence::Absolute => {
                    value += d.abs();
                    // subgradient 0 at d = 0
                    (if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }) / n
                }
                Divergence::Squared => {
                    value += d * d;
                    2.0 * d / n
                }
            }
        })
        .collect();
    Ok((value / n, Grid::from_vec(map.rows(), map.cols(), grad)?))
}

/// One labelled image, optionally carrying its attention target.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a Image,
    pub label: usize,
    pub target: Option<&'a TargetAttentionGrid>,
}

#[derive(Debug, Clone)]
pub struct QuadrantBatch<'a> {
    pub quadrant: Quadrant,
    pub instances: Vec<Sample<'a>>,
}

impl<'a> QuadrantBatch<'a> {
    pub fn new(quadrant: Quadrant, instances: Vec<Sample<'a>>) -> Self {
        Self { quadrant, instances }
    }

    pub fn empty(quadrant: Quadrant) -> Self {
        Self::new(quadrant, Vec::new())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_train_p: f64,
    pub l_ua_p: f64,
    pub l_uia_p: f64,
    pub l_ria_p: f64,
    pub l_ua_a: f64,
    pub l_uia_a: f64,
    pub l_ria_a: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes `total` from the terms and the factors.
    pub fn combine(&mut self, f: &BalanceFactors) {
        self.total = self.l_train_p
            + f.alpha * self.l_ua_p
            + f.beta * self.l_uia_p
            + f.gamma * self.l_ria_p
            + (1.0 - f.alpha) * self.l_ua_a
            + (1.0 - f.beta) * self.l_uia_a
            + (1.0 - f.gamma) * self.l_ria_a;
    }

    fn set_terms(&mut self, quadrant: Quadrant, prediction: f64, attention: f64) {
        match quadrant {
            Quadrant::UA => (self.l_ua_p, self.l_ua_a) = (prediction, attention),
            Quadrant::UIA => (self.l_uia_p, self.l_uia_a) = (prediction, attention),
            Quadrant::RIA => (self.l_ria_p, self.l_ria_a) = (prediction, attention),
            Quadrant::RA => {}
        }
    }

    /// `(name, value)` pairs for every term plus the total.
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("train_p", self.l_train_p),
            ("ua_p", self.l_ua_p),
            ("uia_p", self.l_uia_p),
            ("ria_p", self.l_ria_p),
            ("ua_a", self.l_ua_a),
            ("uia_a", self.l_uia_a),
            ("ria_a", self.l_ria_a),
            ("total", self.total),
        ]
    }
}

/// Everything that fixes the objective apart from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub factors: BalanceFactors,
    pub condition: Condition,
    pub divergence: Divergence,
    /// Differentiate through the Grad-CAM weights into the head. When off,
    /// the weights are constants during back-propagation.
    pub higher_order: bool,
}

impl ObjectiveSpec {
    /// The factors actually applied: a quadrant whose attention term is
    /// switched off by the condition keeps its full prediction loss.
    pub fn effective_factors(&self) -> BalanceFactors {
        let pick = |q: Quadrant| {
            if self.condition.attention_active(q) {
                self.factors.factor(q)
            } else {
                1.0
            }
        };
        BalanceFactors {
            alpha: pick(Quadrant::UA),
            beta: pick(Quadrant::UIA),
            gamma: pick(Quadrant::RIA),
        }
    }
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            factors: BalanceFactors::default(),
            condition: Condition::C4,
            divergence: Divergence::Absolute,
            higher_order: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveGradient {
    pub breakdown: LossBreakdown,
    pub gradients: Gradients,
    /// Whether the Grad-CAM weights were differentiated (false for the
    /// stop-gradient fallback).
    pub higher_order: bool,
}

/// Loss terms of the objective without gradients.
pub fn gradia_objective(
    params: &Parameters,
    train_batch: &[Sample<'_>],
    ua: &QuadrantBatch<'_>,
    uia: &QuadrantBatch<'_>,
    ria: &QuadrantBatch<'_>,
    spec: &ObjectiveSpec,
) -> Result<LossBreakdown> {
    evaluate(params, train_batch, [ua, uia, ria], spec, None)
}

/// Loss terms and the gradient of the total with respect to every parameter.
pub fn objective_gradient(
    params: &Parameters,
    train_batch: &[Sample<'_>],
    ua: &QuadrantBatch<'_>,
    uia: &QuadrantBatch<'_>,
    ria: &QuadrantBatch<'_>,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveGradient> {
    let mut gradients = Gradients::zeros_like(params);
    let breakdown = evaluate(params, train_batch, [ua, uia, ria], spec, Some(&mut gradients))?;
    Ok(ObjectiveGradient {
        breakdown,
        gradients,
        higher_order: spec.higher_order,
    })
}

fn evaluate(
    params: &Parameters,
    train_batch: &[Sample<'_>],
    quadrants: [&QuadrantBatch<'_>; 3],
    spec: &ObjectiveSpec,
    mut grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    spec.factors.validate()?;
    let expected = [Quadrant::UA, Quadrant::UIA, Quadrant::RIA];
    for (batch, q) in quadrants.iter().zip(expected) {
        if batch.quadrant != q {
            return Err(Error::Data(format!(
                "batch tagged {} passed in the {q} slot",
                batch.quadrant
            )));
        }
    }
    let effective = spec.effective_factors();
    let mut breakdown = LossBreakdown {
        l_train_p: batch_terms(params, train_batch, 1.0, None, spec, grads.as_deref_mut())?.0,
        ..LossBreakdown::default()
    };
    for batch in quadrants {
        let q = batch.quadrant;
        let factor = effective.factor(q);
        let attention_weight = spec
            .condition
            .attention_active(q)
            .then_some(1.0 - factor);
        let (p, a) = batch_terms(
            params,
            &batch.instances,
            factor,
            attention_weight,
            spec,
            grads.as_deref_mut(),
        )
        .map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{q} batch: {m}")),
            other => other,
        })?;
        breakdown.set_terms(q, p, a);
    }
    breakdown.combine(&effective);
    Ok(breakdown)
}

/// Mean prediction and attention loss over a batch, accumulating
/// `prediction_weight·∇Lp + attention_weight·∇La` into `grads`.
fn batch_terms(
    params: &Parameters,
    batch: &[Sample<'_>],
    prediction_weight: f64,
    attention_weight: Option<f64>,
    spec: &ObjectiveSpec,
    mut grads: Option<&mut Gradients>,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = batch.len() as f64;
    let (mut lp, mut la) = (0.0, 0.0);
    for sample in batch {
        let trace = forward(params, sample.image)?;
        let (loss, mut dlogits) = prediction_loss_grad(&trace.logits, sample.label)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite prediction loss {loss}")));
        }
        lp += loss;
        dlogits.iter_mut().for_each(|d| *d *= prediction_weight / n);
        let mut adjoint = Adjoint::from_logits(dlogits);

        if let Some(weight) = attention_weight {
            let target = sample
                .target
                .ok_or_else(|| Error::Data("instance lacks a target attention grid".into()))?;
            let map = attention_map(params, &trace, sample.label)?;
            let (value, mut dmap) = attention_loss_grad(&map.grid, &target.grid, spec.divergence)?;
            la += value;
            if grads.is_some() {
                dmap.as_mut_slice().iter_mut().for_each(|d| *d *= weight / n);
                let (dfeatures, dhead) =
                    attention_backward(params, &trace, sample.label, &dmap, spec.higher_order)?;
                adjoint.features = Some(dfeatures);
                adjoint.head_weight = dhead;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            accumulate_grad(params, &trace, &adjoint, g)?;
        }
    }
    Ok((lp / n, la / n))
}

/// Mean cross-entropy over a batch, for reporting.
pub fn mean_prediction_loss(params: &Parameters, batch: &[Sample<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in batch {
        total += prediction_loss(&forward(params, s.image)?.logits, s.label)?;
    }
    Ok(total / batch.len() as f64)
}

/// Attention loss of one sample under the current parameters.
pub fn sample_attention_loss(
    params: &Parameters,
    sample: &Sample<'_>,
    divergence: Divergence,
) -> Result<f64> {
    let target = sample
        .target
        .ok_or_else(|| Error::Data("instance lacks a target attention grid".into()))?;
    let trace = forward(params, sample.image)?;
    let map = attention_map(params, &trace, sample.label)?;
    attention_loss(&map, target, divergence)
}
