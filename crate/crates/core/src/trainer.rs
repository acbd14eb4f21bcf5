//! Baseline training, Reasonability-Matrix construction, attention-aligned
//! fine-tuning, evaluation and the few-shot study.
//!
//! Every routine is sequential and a pure function of its inputs and seed.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_map, mask_to_target_grid, AttentionMap, BinaryMask, TargetAttentionGrid};
use crate::dataset::{Example, InstanceId};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::loss::{
    objective_gradient, BalanceFactors, Condition, Divergence, LossBreakdown, ObjectiveSpec, QuadrantBatch, Sample,
};
use crate::model::{forward, init_model, predict_from_logits, Gradients, ModelConfig, Parameters};
use crate::reasonability::{
    build_matrix, iou, mean_std, MetricsReport, Quadrant, ReasonabilityMatrix, ReasonabilityRecord, Verdict,
};
use crate::synthetic::{binarized_attention, oracle_mask, oracle_verdict, OracleConfig, SyntheticInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub higher_order: bool,
    pub divergence: Divergence,
    pub factors: BalanceFactors,
    pub condition: Condition,
}

impl TrainConfig {
    /// Defaults for training the base model. Smaller batches and a larger
    /// step than fine-tuning so the base model learns the class glyphs as
    /// well as the shortcut.
    pub fn baseline() -> Self {
        Self {
            optimizer: Optimizer::Momentum,
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            higher_order: true,
            divergence: Divergence::Absolute,
            factors: BalanceFactors::default(),
            condition: Condition::C4,
        }
    }

    /// Defaults for fine-tuning a trained model.
    pub fn finetune() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 32,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.factors.validate()
    }

    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            factors: self.factors,
            condition: self.condition,
            divergence: self.divergence,
            higher_order: self.higher_order,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

/// Loss terms recorded after one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: Parameters,
    pub curve: Vec<LossPoint>,
}

struct Stepper {
    config: TrainConfig,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Stepper {
    fn new(config: TrainConfig) -> Self {
        Self { config, velocity: None }
    }

    fn apply(&mut self, params: &mut Parameters, grads: &Gradients) {
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            Optimizer::Sgd => {
                for (t, g) in params.tensors_mut().iter_mut().zip(grads.tensors()) {
                    t.data.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Optimizer::Momentum => {
                let mu = self.config.momentum;
                let velocity = self.velocity.get_or_insert_with(|| grads.tensors().iter().map(|g| alloc::vec![0.0; g.len()]).collect());
                for ((t, g), v) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(velocity) {
                    for ((p, g), v) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
        }
    }
}

fn sample_of<E: Example>(e: &E) -> Sample<'_> {
    Sample {
        image: e.image(),
        label: e.label(),
        target: None,
    }
}

fn checked_step(
    params: &mut Parameters,
    stepper: &mut Stepper,
    train: &[Sample<'_>],
    pools: [QuadrantBatch<'_>; 3],
    spec: &ObjectiveSpec,
    step: usize,
) -> Result<LossBreakdown> {
    let [ua, uia, ria] = pools;
    let g = objective_gradient(params, train, &ua, &uia, &ria, spec)
        .map_err(|e| match e {
            Error::Training(m) => Error::Training(format!("step {step}: {m}")),
            other => other,
        })?;
    if !g.breakdown.total.is_finite() || !g.gradients.is_finite() {
        return Err(Error::Training(format!(
            "step {step}: loss diverged (total {}, train {}); lower the learning rate",
            g.breakdown.total, g.breakdown.l_train_p
        )));
    }
    stepper.apply(params, &g.gradients);
    Ok(g.breakdown)
}

/// State after one optimizer step, handed to a training observer.
#[derive(Debug, Clone, Copy)]
pub struct Progress<'a> {
    pub step: usize,
    pub total_steps: usize,
    pub breakdown: LossBreakdown,
    pub params: &'a Parameters,
}

/// Trains a fresh model on the prediction loss alone.
pub fn train_baseline<E: Example>(train: &[E], model: &ModelConfig, config: &TrainConfig) -> Result<Trained> {
    train_baseline_observed(train, model, config, &mut |_| {})
}

/// [`train_baseline`] calling `observe` after every step.
pub fn train_baseline_observed<E: Example>(
    train: &[E],
    model: &ModelConfig,
    config: &TrainConfig,
    observe: &mut dyn FnMut(&Progress<'_>),
) -> Result<Trained> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut params = init_model(model, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stepper = Stepper::new(*config);
    let spec = ObjectiveSpec {
        condition: Condition::C1,
        ..config.objective()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_steps = config.epochs * train.len().div_ceil(config.batch_size);
    let mut curve = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| sample_of(&train[i])).collect();
            let step = curve.len();
            let breakdown = checked_step(&mut params, &mut stepper, &batch, empty_pools(), &spec, step)?;
            curve.push(LossPoint { step, breakdown });
            observe(&Progress {
                step,
                total_steps,
                breakdown,
                params: &params,
            });
        }
    }
    Ok(Trained { params, curve })
}

fn empty_pools<'a>() -> [QuadrantBatch<'a>; 3] {
    [
        QuadrantBatch::empty(Quadrant::UA),
        QuadrantBatch::empty(Quadrant::UIA),
        QuadrantBatch::empty(Quadrant::RIA),
    ]
}

/// Answers the two reasonability questions and supplies the region the
/// model should have attended to.
pub trait Annotator<E: ?Sized> {
    fn verdict(&self, instance: &E, attention: &AttentionMap) -> Result<Verdict>;
    fn mask(&self, instance: &E) -> Result<Option<BinaryMask>>;
}

/// Ground-truth annotator over the synthetic benchmark.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OracleAnnotator {
    pub config: OracleConfig,
}

impl Annotator<SyntheticInstance> for OracleAnnotator {
    fn verdict(&self, instance: &SyntheticInstance, attention: &AttentionMap) -> Result<Verdict> {
        oracle_verdict(attention, instance, &self.config)
    }

    fn mask(&self, instance: &SyntheticInstance) -> Result<Option<BinaryMask>> {
        Ok(Some(oracle_mask(instance)))
    }
}

/// Verdicts and masks collected from people, keyed by instance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoredAnnotations {
    pub verdicts: BTreeMap<InstanceId, Verdict>,
    pub masks: BTreeMap<InstanceId, BinaryMask>,
}

impl<E: Example> Annotator<E> for StoredAnnotations {
    fn verdict(&self, instance: &E, _attention: &AttentionMap) -> Result<Verdict> {
        self.verdicts
            .get(&instance.id())
            .cloned()
            .ok_or_else(|| Error::Data(format!("no verdict stored for instance {}", instance.id())))
    }

    fn mask(&self, instance: &E) -> Result<Option<BinaryMask>> {
        Ok(self.masks.get(&instance.id()).cloned())
    }
}

/// An instance queued for adjustment together with its attention target.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: InstanceId,
    pub image: Image,
    pub label: usize,
    pub target: TargetAttentionGrid,
}

impl Example for PoolEntry {
    fn id(&self) -> InstanceId {
        self.id
    }

    fn image(&self) -> &Image {
        &self.image
    }

    fn label(&self) -> usize {
        self.label
    }
}

impl PoolEntry {
    fn sample(&self) -> Sample<'_> {
        Sample {
            image: &self.image,
            label: self.label,
            target: Some(&self.target),
        }
    }
}

/// Instances needing adjustment, grouped by quadrant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationPools {
    pub ua: Vec<PoolEntry>,
    pub uia: Vec<PoolEntry>,
    pub ria: Vec<PoolEntry>,
}

impl AnnotationPools {
    pub fn get(&self, quadrant: Quadrant) -> &[PoolEntry] {
        match quadrant {
            Quadrant::UA => &self.ua,
            Quadrant::UIA => &self.uia,
            Quadrant::RIA => &self.ria,
            Quadrant::RA => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.ua.len() + self.uia.len() + self.ria.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds an attention target at the model's feature resolution.
pub fn pool_entry<E: Example>(params: &Parameters, instance: &E, mask: &BinaryMask) -> Result<PoolEntry> {
    let (u, v) = params.config().feature_dims()?;
    Ok(PoolEntry {
        id: instance.id(),
        image: instance.image().clone(),
        label: instance.label(),
        target: mask_to_target_grid(mask, u, v)?,
    })
}

/// Pairs every instance with the annotator's mask; all must have one.
pub fn annotate_pool<E: Example, A: Annotator<E>>(
    params: &Parameters,
    instances: &[E],
    annotator: &A,
) -> Result<Vec<PoolEntry>> {
    let mut out = Vec::with_capacity(instances.len());
    let mut missing = Vec::new();
    for e in instances {
        match annotator.mask(e)? {
            Some(mask) => out.push(pool_entry(params, e, &mask)?),
            None => missing.push(e.id()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing attention masks for instances {}", id_list(&missing))));
    }
    Ok(out)
}

fn id_list(ids: &[InstanceId]) -> String {
    let parts: Vec<String> = ids.iter().map(|id| format!("{id}")).collect();
    format!("[{}]", parts.join(", "))
}

/// What one instance looks like to an annotator under the current model.
struct Assessment {
    record: ReasonabilityRecord,
    attention: AttentionMap,
    score: f64,
}

/// The map shown to the annotator is the one for the predicted class.
fn assess<E: Example, A: Annotator<E>>(params: &Parameters, instance: &E, annotator: &A) -> Result<Assessment> {
    let trace = forward(params, instance.image())?;
    let (predicted, probs) = predict_from_logits(&trace.logits);
    let mut attention = attention_map(params, &trace, predicted)?;
    attention.instance_id = Some(instance.id());
    let verdict = annotator.verdict(instance, &attention)?;
    Ok(Assessment {
        record: ReasonabilityRecord {
            instance_id: instance.id(),
            prediction_correct: predicted == instance.label(),
            verdict,
        },
        attention,
        score: probs.get(1).copied().unwrap_or(0.0),
    })
}

/// Places every validation instance in a quadrant and collects attention
/// targets for the three quadrants that need adjustment.
pub fn build_validation_matrix<E: Example, A: Annotator<E>>(
    params: &Parameters,
    validation: &[E],
    annotator: &A,
) -> Result<(ReasonabilityMatrix, AnnotationPools)> {
    let mut records = Vec::with_capacity(validation.len());
    for e in validation {
        records.push(assess(params, e, annotator)?.record);
    }
    let matrix = build_matrix(&records)?;
    let mut pools = AnnotationPools::default();
    let mut missing = Vec::new();
    for e in validation {
        let pool = match matrix.quadrant_of(e.id()) {
            Some(Quadrant::UA) => &mut pools.ua,
            Some(Quadrant::UIA) => &mut pools.uia,
            Some(Quadrant::RIA) => &mut pools.ria,
            _ => continue,
        };
        match annotator.mask(e)? {
            Some(mask) => pool.push(pool_entry(params, e, &mask)?),
            None => missing.push(e.id()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "instances needing adjustment lack a drawn mask: {}",
            id_list(&missing)
        )));
    }
    Ok((matrix, pools))
}

/// Warm-started fine-tuning on the training set plus the annotation pools.
///
/// One epoch is a pass over the training set (over the largest pool when the
/// training set is empty). Each step draws one minibatch from the training
/// set and one from every nonempty pool, cycling through shuffled orders.
pub fn finetune_gradia<E: Example>(
    params: &Parameters,
    train: &[E],
    pools: &AnnotationPools,
    config: &TrainConfig,
) -> Result<Trained> {
    finetune_gradia_observed(params, train, pools, config, &mut |_| {})
}

/// [`finetune_gradia`] calling `observe` after every step.
pub fn finetune_gradia_observed<E: Example>(
    params: &Parameters,
    train: &[E],
    pools: &AnnotationPools,
    config: &TrainConfig,
    observe: &mut dyn FnMut(&Progress<'_>),
) -> Result<Trained> {
    config.validate()?;
    let b = config.batch_size;
    let largest_pool = [Quadrant::UA, Quadrant::UIA, Quadrant::RIA]
        .iter()
        .map(|&q| pools.get(q).len())
        .max()
        .unwrap_or(0);
    let per_epoch_len = if train.is_empty() { largest_pool } else { train.len() };
    if per_epoch_len == 0 {
        return Err(Error::Data("nothing to fine-tune on: training set and pools are empty".into()));
    }
    let steps_per_epoch = per_epoch_len.div_ceil(b);
    let total_steps = config.epochs * steps_per_epoch;
    let spec = config.objective();
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stepper = Stepper::new(*config);

    let quadrants = [Quadrant::UA, Quadrant::UIA, Quadrant::RIA];
    let mut train_cursor = Cycle::new(train.len());
    let mut pool_cursors = quadrants.map(|q| Cycle::new(pools.get(q).len()));
    let mut curve = Vec::new();
    for _ in 0..config.epochs {
        for c in pool_cursors.iter_mut() {
            c.restart(&mut rng);
        }
        for _ in 0..steps_per_epoch {
            let train_batch: Vec<Sample<'_>> =
                train_cursor.take(b, &mut rng).into_iter().map(|i| sample_of(&train[i])).collect();
            let mut batches = empty_pools();
            for ((batch, cursor), q) in batches.iter_mut().zip(pool_cursors.iter_mut()).zip(quadrants) {
                let entries = pools.get(q);
                batch.instances = cursor.take(b, &mut rng).into_iter().map(|i| entries[i].sample()).collect();
            }
            let step = curve.len();
            let breakdown = checked_step(&mut params, &mut stepper, &train_batch, batches, &spec, step)?;
            curve.push(LossPoint { step, breakdown });
            observe(&Progress {
                step,
                total_steps,
                breakdown,
                params: &params,
            });
        }
    }
    Ok(Trained { params, curve })
}

/// Endless walk through a reshuffled index order.
struct Cycle {
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn restart(&mut self, rng: &mut ChaCha8Rng) {
        self.order.shuffle(rng);
        self.pos = 0;
    }

    /// Up to `n` distinct indices; reshuffles when the order runs out.
    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = n.min(self.order.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.restart(rng);
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Test-set measures of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub matrix: ReasonabilityMatrix,
    pub metrics: MetricsReport,
    /// IoU per instance that has a reference mask, in test-set order.
    pub ious: Vec<f64>,
    pub auc: Option<f64>,
}

/// Full evaluation: test matrix, M1–M4 and ROC-AUC of the class-1
/// probability. `tau` binarizes the upsampled attention for IoU.
pub fn evaluate<E: Example, A: Annotator<E>>(
    params: &Parameters,
    test: &[E],
    annotator: &A,
    tau: f64,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let mut records = Vec::with_capacity(test.len());
    let mut ious = Vec::new();
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for e in test {
        let a = assess(params, e, annotator)?;
        if let Some(mask) = annotator.mask(e)? {
            let (h, w) = mask.dims();
            let focus = binarized_attention(&a.attention, h, w, tau)?;
            ious.push(iou(&focus, &mask)?);
        }
        records.push(a.record);
        scores.push(a.score);
        labels.push(e.label());
    }
    let matrix = build_matrix(&records)?;
    let metrics = MetricsReport::from_matrix(&matrix, &ious)?;
    let auc = match roc_auc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        matrix,
        metrics,
        ious,
        auc,
    })
}

/// Before/after record of one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub condition: Condition,
    pub matrix_before: ReasonabilityMatrix,
    pub matrix_after: ReasonabilityMatrix,
    pub metrics_before: MetricsReport,
    pub metrics_after: MetricsReport,
    pub auc_before: Option<f64>,
    pub auc_after: Option<f64>,
    pub loss_curve: Vec<LossPoint>,
    pub config: TrainConfig,
    pub wall_time_secs: Option<f64>,
}

impl RunReport {
    pub fn new(config: TrainConfig, before: Evaluation, after: Evaluation, loss_curve: Vec<LossPoint>) -> Self {
        Self {
            condition: config.condition,
            matrix_before: before.matrix,
            matrix_after: after.matrix,
            metrics_before: before.metrics,
            metrics_after: after.metrics,
            auc_before: before.auc,
            auc_after: after.auc,
            loss_curve,
            config,
            wall_time_secs: None,
        }
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("spearman needs two equal-length series of length ≥ 2".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant series".into()));
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

/// Probability of class 1 for every example.
pub fn class1_scores<E: Example>(params: &Parameters, examples: &[E]) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|e| Ok(predict_from_logits(&forward(params, e.image())?.logits).1[1]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotScenario {
    pub shots_per_class: usize,
    pub num_seeds: usize,
}

impl FewShotScenario {
    pub fn new(shots_per_class: usize) -> Self {
        Self {
            shots_per_class,
            num_seeds: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots_per_class == 0 || self.num_seeds == 0 {
            return Err(Error::Config("shots_per_class and num_seeds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fine-tuning settings shared by both arms of the few-shot study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    /// Optimizer settings; condition and factors are set per arm.
    pub finetune: TrainConfig,
    /// Weight of the attention loss in the attention-aligned arm; the
    /// prediction loss gets `1 − attention_weight`.
    pub attention_weight: f64,
    /// Seed `s` of a study samples its shots with `base_seed + s`.
    pub base_seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            finetune: TrainConfig {
                learning_rate: 0.05,
                ..TrainConfig::finetune()
            },
            attention_weight: 0.5,
            base_seed: 0,
        }
    }
}

/// Per-seed test AUCs of one arm and their mean and population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub aucs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ArmSummary {
    fn from_aucs(aucs: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&aucs);
        Self { aucs, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub scenario: FewShotScenario,
    pub baseline: ArmSummary,
    pub gradia: ArmSummary,
}

impl FewShotResult {
    /// Mean AUC gain of the attention-aligned arm.
    pub fn improvement(&self) -> f64 {
        self.gradia.mean - self.baseline.mean
    }

    /// Seeds on which the attention-aligned arm scored strictly higher.
    pub fn wins(&self) -> usize {
        self.gradia.aucs.iter().zip(&self.baseline.aucs).filter(|(g, b)| g > b).count()
    }
}

fn draw_shots(pool: &[PoolEntry], shots: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PoolEntry>> {
    let mut out = Vec::with_capacity(2 * shots);
    for class in 0..2 {
        let mut idx: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == class).collect();
        if idx.len() < shots {
            return Err(Error::Data(format!(
                "pool has {} instances of class {class}, {shots} shots requested",
                idx.len()
            )));
        }
        idx.shuffle(rng);
        out.extend(idx[..shots].iter().map(|&i| pool[i].clone()));
    }
    Ok(out)
}

fn arm_config(cfg: &FewShotConfig, seed: u64, attention_weight: Option<f64>) -> Result<TrainConfig> {
    let mut c = cfg.finetune;
    c.seed = seed;
    match attention_weight {
        None => c.condition = Condition::C1,
        Some(w) => {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("attention weight {w} outside [0, 1]")));
            }
            c.condition = Condition::C4;
            c.factors = BalanceFactors::uniform(1.0 - w)?;
        }
    }
    Ok(c)
}

/// Fine-tunes on the shots alone. `None` is the attention-free arm; `Some(w)`
/// treats the shots as a UA pool with attention weight `w`.
fn run_arm<E: Example>(
    base: &Parameters,
    shots: &[PoolEntry],
    test: &[E],
    config: &TrainConfig,
    attention: bool,
) -> Result<f64> {
    let trained = if attention {
        let pools = AnnotationPools {
            ua: shots.to_vec(),
            ..AnnotationPools::default()
        };
        finetune_gradia::<PoolEntry>(base, &[], &pools, config)?
    } else {
        finetune_gradia(base, shots, &AnnotationPools::default(), config)?
    };
    let scores = class1_scores(&trained.params, test)?;
    let labels: Vec<usize> = test.iter().map(|e| e.label()).collect();
    roc_auc(&scores, &labels)
}

fn seed_shots(pool: &[PoolEntry], scenario: &FewShotScenario, cfg: &FewShotConfig) -> Result<Vec<(u64, Vec<PoolEntry>)>> {
    scenario.validate()?;
    (0..scenario.num_seeds as u64)
        .map(|s| {
            let seed = cfg.base_seed.wrapping_add(s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((seed, draw_shots(pool, scenario.shots_per_class, &mut rng)?))
        })
        .collect()
}

/// Paired comparison of attention-free and attention-aligned fine-tuning
/// from shared base parameters on `shots_per_class` annotated examples per
/// class, repeated over seeds.
pub fn few_shot_study<E: Example>(
    base: &Parameters,
    pool: &[PoolEntry],
    test: &[E],
    scenario: &FewShotScenario,
    cfg: &FewShotConfig,
) -> Result<FewShotResult> {
    let (mut baseline, mut gradia) = (Vec::new(), Vec::new());
    for (seed, shots) in seed_shots(pool, scenario, cfg)? {
        baseline.push(run_arm(base, &shots, test, &arm_config(cfg, seed, None)?, false)?);
        let c = arm_config(cfg, seed, Some(cfg.attention_weight))?;
        gradia.push(run_arm(base, &shots, test, &c, true)?);
    }
    Ok(FewShotResult {
        scenario: *scenario,
        baseline: ArmSummary::from_aucs(baseline),
        gradia: ArmSummary::from_aucs(gradia),
    })
}

/// The attention-aligned arm of [`few_shot_study`] at each attention weight,
/// on the same seeds and shots.
pub fn sensitivity_sweep<E: Example>(
    base: &Parameters,
    pool: &[PoolEntry],
    test: &[E],
    weights: &[f64],
    scenario: &FewShotScenario,
    cfg: &FewShotConfig,
) -> Result<Vec<ArmSummary>> {
    let seeds = seed_shots(pool, scenario, cfg)?;
    weights
        .iter()
        .map(|&w| {
            let mut aucs = Vec::with_capacity(seeds.len());
            for (seed, shots) in &seeds {
                aucs.push(run_arm(base, shots, test, &arm_config(cfg, *seed, Some(w))?, true)?);
            }
            Ok(ArmSummary::from_aucs(aucs))
        })
        .collect()
}
