//! Article-factored outcome classifier.
//!
//! A shared encoder layer feeds one small head per article: either a binary
//! head scoring the probability that the article was violated, or a
//! three-way head over {violated, not violated, not claimed}. Training is
//! seeded mini-batch gradient descent with manual backprop, optional
//! inverted dropout on the hidden layer, and early stopping on validation
//! loss. Given the same corpus, config, and seed, training is bitwise
//! reproducible.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Case, Corpus, Outcome};
use crate::vecmath::{axpy, dot, norm2, sigmoid};

/// Probabilities are clamped to this floor inside logarithms so a confident
/// wrong prediction yields a large finite loss instead of infinity.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("case {id} has no embedding")]
    MissingEmbedding { id: String },
    #[error("prediction and gold lists differ in length: {predicted} vs {gold}")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// One sigmoid per article: violated vs not.
    Simple,
    /// One 3-way softmax per article: violated / not violated / not claimed.
    Joint,
}

impl Head {
    fn rows(self) -> usize {
        match self {
            Head::Simple => 1,
            Head::Joint => 3,
        }
    }
}

fn default_head() -> Head {
    Head::Joint
}
fn default_d2() -> usize {
    100
}
fn default_learning_rate() -> f64 {
    3e-4
}
fn default_l2() -> f64 {
    1e-4
}
fn default_dropout() -> f64 {
    0.1
}
fn default_max_epochs() -> usize {
    10
}
fn default_patience() -> usize {
    2
}
fn default_batch_size() -> usize {
    16
}
fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_head")]
    pub head: Head,
    /// Input embedding dimension.
    pub d1: usize,
    /// Hidden layer width; unused when `linear` is set.
    #[serde(default = "default_d2")]
    pub d2: usize,
    /// Number of articles.
    pub k: usize,
    /// Bypass the hidden layer: heads read the embedding directly. The
    /// objective is then convex, which the closed-form checks rely on.
    #[serde(default)]
    pub linear: bool,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_l2")]
    pub l2_strength: f64,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// When set, training also stops once the full-objective gradient norm
    /// drops to this value; used to push fixtures to stationarity.
    #[serde(default)]
    pub grad_tol: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d1 == 0 || self.k == 0 || (!self.linear && self.d2 == 0) {
            return Err(ModelError::BadConfig("dimensions must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::BadConfig("learning_rate must be positive".into()));
        }
        if !(self.l2_strength >= 0.0 && self.l2_strength.is_finite()) {
            return Err(ModelError::BadConfig("l2_strength must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::BadConfig("dropout_rate must lie in [0,1)".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::BadConfig("max_epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout { head: self.head, d1: self.d1, d2: self.d2, k: self.k, linear: self.linear }
    }
}

/// Shape of the flattened parameter vector: the shared encoder block first
/// (row-major d2 x d1), then one row-major block per article.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub head: Head,
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    pub linear: bool,
}

impl Layout {
    pub fn rows(&self) -> usize {
        self.head.rows()
    }

    /// Width of each head row: the hidden size, or the input size when the
    /// hidden layer is bypassed.
    pub fn width(&self) -> usize {
        if self.linear {
            self.d1
        } else {
            self.d2
        }
    }

    pub fn shared_len(&self) -> usize {
        if self.linear {
            0
        } else {
            self.d2 * self.d1
        }
    }

    pub fn param_count(&self) -> usize {
        self.shared_len() + self.k * self.rows() * self.width()
    }

    pub fn article_range(&self, k: usize) -> std::ops::Range<usize> {
        let block = self.rows() * self.width();
        let start = self.shared_len() + k * block;
        start..start + block
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: Layout) -> Self {
        ModelParams { layout, values: vec![0.0; layout.param_count()] }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn from_flat(layout: Layout, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != layout.param_count() {
            return Err(ModelError::DimMismatch {
                expected: layout.param_count(),
                got: values.len(),
            });
        }
        Ok(ModelParams { layout, values })
    }

    pub(crate) fn shared(&self) -> &[f64] {
        &self.values[..self.layout.shared_len()]
    }

    pub(crate) fn article(&self, k: usize) -> &[f64] {
        &self.values[self.layout.article_range(k)]
    }
}

fn init_params(layout: Layout, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut values = Vec::with_capacity(layout.param_count());
    if !layout.linear {
        let normal = Normal::new(0.0, 1.0 / (layout.d1 as f64).sqrt()).unwrap();
        for _ in 0..layout.shared_len() {
            values.push(normal.sample(rng));
        }
    }
    let normal = Normal::new(0.0, 1.0 / (layout.width() as f64).sqrt()).unwrap();
    for _ in 0..layout.k * layout.rows() * layout.width() {
        values.push(normal.sample(rng));
    }
    ModelParams { layout, values }
}

fn softmax3(y: [f64; 3]) -> [f64; 3] {
    let m = y[0].max(y[1]).max(y[2]);
    let e = [(y[0] - m).exp(), (y[1] - m).exp(), (y[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

fn ln_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Target encoding. The binary head collapses "not violated" and "not
/// claimed" into the negative class; the joint head keeps all three.
fn simple_target(o: Outcome) -> f64 {
    if o == Outcome::Pos {
        1.0
    } else {
        0.0
    }
}

fn joint_class(o: Outcome) -> usize {
    match o {
        Outcome::Pos => 0,
        Outcome::Neg => 1,
        Outcome::Null => 2,
    }
}

pub(crate) struct ForwardTrace {
    /// Hidden pre-activations; empty in linear mode.
    pub(crate) pre: Vec<f64>,
    /// Hidden activations after ReLU and any dropout mask; empty in linear
    /// mode.
    pub(crate) hidden: Vec<f64>,
    /// Per-article probabilities: 1 value (binary head) or 3 (joint head).
    pub(crate) probs: Vec<Vec<f64>>,
}

/// `mask` multipliers already include the inverted-dropout 1/keep factor.
pub(crate) fn forward_pass(
    params: &ModelParams,
    x: &[f64],
    mask: Option<&[f64]>,
) -> Result<ForwardTrace, ModelError> {
    let layout = params.layout;
    if x.len() != layout.d1 {
        return Err(ModelError::DimMismatch { expected: layout.d1, got: x.len() });
    }

    let (pre, hidden) = if layout.linear {
        (Vec::new(), Vec::new())
    } else {
        let shared = params.shared();
        let mut pre = vec![0.0; layout.d2];
        for (i, row) in shared.chunks_exact(layout.d1).enumerate() {
            pre[i] = dot(row, x);
        }
        let mut hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
        if let Some(mask) = mask {
            for (h, m) in hidden.iter_mut().zip(mask) {
                *h *= m;
            }
        }
        (pre, hidden)
    };

    let feature: &[f64] = if layout.linear { x } else { &hidden };
    let mut probs = Vec::with_capacity(layout.k);
    for k in 0..layout.k {
        let block = params.article(k);
        match layout.head {
            Head::Simple => {
                probs.push(vec![sigmoid(dot(block, feature))]);
            }
            Head::Joint => {
                let w = layout.width();
                let y = [
                    dot(&block[0..w], feature),
                    dot(&block[w..2 * w], feature),
                    dot(&block[2 * w..3 * w], feature),
                ];
                probs.push(softmax3(y).to_vec());
            }
        }
    }
    Ok(ForwardTrace { pre, hidden, probs })
}

/// Per-article probabilities in evaluation mode (no dropout).
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
    Ok(forward_pass(params, x, None)?.probs)
}

fn raw_loss_of(probs: &[Vec<f64>], outcomes: &[Outcome], head: Head) -> f64 {
    let mut loss = 0.0;
    for (p, &o) in probs.iter().zip(outcomes) {
        match head {
            Head::Simple => {
                let t = simple_target(o);
                loss -= t * ln_floored(p[0]) + (1.0 - t) * ln_floored(1.0 - p[0]);
            }
            Head::Joint => {
                loss -= ln_floored(p[joint_class(o)]);
            }
        }
    }
    loss
}

/// Negative log-likelihood of one case, raw and with the L2 penalty added.
pub fn instance_loss(
    params: &ModelParams,
    x: &[f64],
    outcomes: &[Outcome],
    l2: f64,
) -> Result<(f64, f64), ModelError> {
    if outcomes.len() != params.layout.k {
        return Err(ModelError::DimMismatch { expected: params.layout.k, got: outcomes.len() });
    }
    let trace = forward_pass(params, x, None)?;
    let raw = raw_loss_of(&trace.probs, outcomes, params.layout.head);
    let reg = raw + l2 * dot(&params.values, &params.values);
    Ok((raw, reg))
}

/// Backprop for one instance. Adds `weight` times the raw-loss gradient into
/// `grad` and returns the raw loss.
pub(crate) fn loss_grad_into(
    params: &ModelParams,
    x: &[f64],
    outcomes: &[Outcome],
    mask: Option<&[f64]>,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64, ModelError> {
    let layout = params.layout;
    if outcomes.len() != layout.k {
        return Err(ModelError::DimMismatch { expected: layout.k, got: outcomes.len() });
    }
    let trace = forward_pass(params, x, mask)?;
    let loss = raw_loss_of(&trace.probs, outcomes, layout.head);

    let feature: &[f64] = if layout.linear { x } else { &trace.hidden };
    let w = layout.width();
    let mut g_hidden = vec![0.0; if layout.linear { 0 } else { layout.d2 }];

    for k in 0..layout.k {
        let range = layout.article_range(k);
        let block = &params.values[range.clone()];
        let gblock = &mut grad[range];
        match layout.head {
            Head::Simple => {
                let g = trace.probs[k][0] - simple_target(outcomes[k]);
                axpy(weight * g, feature, gblock);
                if !layout.linear {
                    axpy(g, block, &mut g_hidden);
                }
            }
            Head::Joint => {
                let target = joint_class(outcomes[k]);
                for c in 0..3 {
                    let g = trace.probs[k][c] - if c == target { 1.0 } else { 0.0 };
                    axpy(weight * g, feature, &mut gblock[c * w..(c + 1) * w]);
                    if !layout.linear {
                        axpy(g, &block[c * w..(c + 1) * w], &mut g_hidden);
                    }
                }
            }
        }
    }

    if !layout.linear {
        if let Some(mask) = mask {
            for (g, m) in g_hidden.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        for (i, g) in g_hidden.iter().enumerate() {
            if trace.pre[i] > 0.0 {
                let row = &mut grad[i * layout.d1..(i + 1) * layout.d1];
                axpy(weight * g, x, row);
            }
        }
    }
    Ok(loss)
}

/// Raw loss and its gradient for one instance, evaluation mode.
pub fn instance_grad(
    params: &ModelParams,
    x: &[f64],
    outcomes: &[Outcome],
) -> Result<(f64, Vec<f64>), ModelError> {
    let mut grad = vec![0.0; params.layout.param_count()];
    let loss = loss_grad_into(params, x, outcomes, None, 1.0, &mut grad)?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub x: Vec<f64>,
    pub outcomes: Vec<Outcome>,
}

/// Extracts (embedding, outcomes) pairs, requiring materialized embeddings.
pub fn instances(cases: &[Case], d1: usize, k: usize) -> Result<Vec<Instance>, ModelError> {
    cases
        .iter()
        .map(|case| {
            let x = case
                .embedding
                .clone()
                .ok_or_else(|| ModelError::MissingEmbedding { id: case.id.clone() })?;
            if x.len() != d1 {
                return Err(ModelError::DimMismatch { expected: d1, got: x.len() });
            }
            if case.outcomes.len() != k {
                return Err(ModelError::DimMismatch { expected: k, got: case.outcomes.len() });
            }
            Ok(Instance { x, outcomes: case.outcomes.clone() })
        })
        .collect()
}

/// Weighted training objective: sum of per-instance weights times raw losses
/// plus the L2 penalty. `weights` of None means uniform 1/n.
pub fn objective(
    params: &ModelParams,
    instances: &[Instance],
    weights: Option<&[f64]>,
    l2: f64,
) -> Result<f64, ModelError> {
    let n = instances.len() as f64;
    let mut total = 0.0;
    for (i, inst) in instances.iter().enumerate() {
        let w = weights.map_or(1.0 / n, |w| w[i]);
        let (raw, _) = instance_loss(params, &inst.x, &inst.outcomes, 0.0)?;
        total += w * raw;
    }
    Ok(total + l2 * dot(&params.values, &params.values))
}

/// Mean raw (unregularized) loss over the given instances.
pub fn mean_instance_loss(params: &ModelParams, instances: &[Instance]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for inst in instances {
        let (raw, _) = instance_loss(params, &inst.x, &inst.outcomes, 0.0)?;
        total += raw;
    }
    Ok(total / instances.len() as f64)
}

/// Objective value and full gradient at the current parameters.
pub fn full_gradient(
    params: &ModelParams,
    instances: &[Instance],
    weights: Option<&[f64]>,
    l2: f64,
) -> Result<(f64, Vec<f64>), ModelError> {
    let n = instances.len() as f64;
    let mut grad = vec![0.0; params.layout.param_count()];
    let mut total = 0.0;
    for (i, inst) in instances.iter().enumerate() {
        let w = weights.map_or(1.0 / n, |w| w[i]);
        total += w * loss_grad_into(params, &inst.x, &inst.outcomes, None, w, &mut grad)?;
    }
    axpy(2.0 * l2, &params.values, &mut grad);
    Ok((total + l2 * dot(&params.values, &params.values), grad))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Full weighted objective, L2 penalty included, after the epoch.
    pub train_objective: f64,
    pub val_loss: Option<f64>,
    pub grad_norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub log: Vec<EpochStats>,
    pub stopped_early: bool,
    /// Epoch whose parameters were returned (1-based; 0 when no validation
    /// split exists and the final parameters are returned).
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Per-instance objective weights; defaults to uniform 1/n.
    pub weights: Option<&'a [f64]>,
    /// Warm start from these parameters instead of a fresh seeded init.
    pub init: Option<&'a ModelParams>,
}

pub fn train(corpus: &Corpus, config: &ModelConfig) -> Result<TrainedModel, ModelError> {
    let train = instances(&corpus.train, config.d1, config.k)?;
    let validation = instances(&corpus.validation, config.d1, config.k)?;
    train_with(&train, &validation, config, TrainOptions::default())
}

/// Minimizes the weighted objective by mini-batch gradient descent.
///
/// Each batch applies an unbiased estimate of the full gradient,
/// (n/|B|) * sum of w_i * grad_i over the batch, plus the exact L2 term.
/// With a validation split the parameters from the best validation epoch are
/// returned and `patience` controls early stopping; without one the final
/// parameters are returned and only `max_epochs` (or `grad_tol`) ends
/// training.
pub fn train_with(
    train: &[Instance],
    validation: &[Instance],
    config: &ModelConfig,
    options: TrainOptions,
) -> Result<TrainedModel, ModelError> {
    config.validate()?;
    let n = train.len();
    if n == 0 {
        return Err(ModelError::EmptyTrainSplit);
    }
    let uniform = vec![1.0 / n as f64; n];
    let weights: &[f64] = match options.weights {
        Some(w) => {
            if w.len() != n {
                return Err(ModelError::BadConfig(format!(
                    "{} weights for {} training instances",
                    w.len(),
                    n
                )));
            }
            w
        }
        None => &uniform,
    };

    let layout = config.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = match options.init {
        Some(p) => {
            if p.layout != layout {
                return Err(ModelError::BadConfig("warm-start layout differs".into()));
            }
            p.clone()
        }
        None => init_params(layout, &mut rng),
    };

    let p_count = layout.param_count();
    let keep = 1.0 - config.dropout_rate;
    let use_dropout = config.dropout_rate > 0.0 && !layout.linear;

    let mut order: Vec<usize> = (0..n).collect();
    let mut log: Vec<EpochStats> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<ModelParams> = None;
    let mut best_epoch = 0usize;
    let mut since_improved = 0usize;
    let mut stopped_early = false;
    let mut grad = vec![0.0; p_count];
    let mut mask = vec![1.0; if use_dropout { layout.d2 } else { 0 }];

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = n as f64 / batch.len() as f64;
            for &i in batch {
                let mask_ref = if use_dropout {
                    for m in mask.iter_mut() {
                        *m = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    }
                    Some(mask.as_slice())
                } else {
                    None
                };
                let inst = &train[i];
                loss_grad_into(
                    &params,
                    &inst.x,
                    &inst.outcomes,
                    mask_ref,
                    scale * weights[i],
                    &mut grad,
                )?;
            }
            axpy(2.0 * config.l2_strength, &params.values, &mut grad);
            axpy(-config.learning_rate, &grad, &mut params.values);
        }

        let train_objective = objective(&params, train, Some(weights), config.l2_strength)?;
        if !train_objective.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        let val_loss = if validation.is_empty() {
            None
        } else {
            let v = mean_instance_loss(&params, validation)?;
            if !v.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
            Some(v)
        };
        let grad_norm = if config.grad_tol.is_some() {
            let (_, g) = full_gradient(&params, train, Some(weights), config.l2_strength)?;
            Some(norm2(&g))
        } else {
            None
        };
        log.push(EpochStats { epoch, train_objective, val_loss, grad_norm });

        if let Some(v) = val_loss {
            if v < best_val {
                best_val = v;
                best_params = Some(params.clone());
                best_epoch = epoch;
                since_improved = 0;
            } else {
                since_improved += 1;
                if since_improved >= config.patience.max(1) {
                    stopped_early = true;
                    break;
                }
            }
        }
        if let (Some(tol), Some(gn)) = (config.grad_tol, grad_norm) {
            if gn <= tol {
                break;
            }
        }
    }

    let params = best_params.unwrap_or(params);
    Ok(TrainedModel { params, log, stopped_early, best_epoch })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// Per-article distributions: `[p]` for the binary head, three-way
    /// simplex rows for the joint head.
    pub probs: Vec<Vec<f64>>,
    pub decoded: Vec<Outcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSet {
    pub head: Head,
    pub threshold: f64,
    pub predictions: Vec<Prediction>,
}

/// Decodes outcomes for each case.
///
/// Binary head: POS at probability >= threshold; below it the article maps
/// to NEG when the gold vector claims it and NULL otherwise, a lossy bridge
/// from two classes back to three. Joint head: argmax, ties broken in class
/// order POS, NEG, NULL.
pub fn predict(
    params: &ModelParams,
    cases: &[Case],
    threshold: f64,
) -> Result<PredictionSet, ModelError> {
    let layout = params.layout;
    let mut predictions = Vec::with_capacity(cases.len());
    for case in cases {
        let x = case
            .embedding
            .as_deref()
            .ok_or_else(|| ModelError::MissingEmbedding { id: case.id.clone() })?;
        if case.outcomes.len() != layout.k {
            return Err(ModelError::DimMismatch { expected: layout.k, got: case.outcomes.len() });
        }
        let probs = forward(params, x)?;
        let decoded = probs
            .iter()
            .zip(&case.outcomes)
            .map(|(p, &gold)| match layout.head {
                Head::Simple => {
                    if p[0] >= threshold {
                        Outcome::Pos
                    } else if gold.claimed() {
                        Outcome::Neg
                    } else {
                        Outcome::Null
                    }
                }
                Head::Joint => {
                    let mut best = 0;
                    for c in 1..3 {
                        if p[c] > p[best] {
                            best = c;
                        }
                    }
                    [Outcome::Pos, Outcome::Neg, Outcome::Null][best]
                }
            })
            .collect();
        predictions.push(Prediction { id: case.id.clone(), probs, decoded });
    }
    Ok(PredictionSet { head: layout.head, threshold, predictions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub value: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    /// No positive labels in either predictions or gold; value pinned to 0.
    pub degenerate: bool,
}

/// Micro-averaged F1 over all (case, article) pairs, positive class = POS.
pub fn micro_f1(predicted: &[Vec<Outcome>], gold: &[Vec<Outcome>]) -> Result<F1Score, ModelError> {
    if predicted.len() != gold.len() {
        return Err(ModelError::LengthMismatch { predicted: predicted.len(), gold: gold.len() });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p_vec, g_vec) in predicted.iter().zip(gold) {
        if p_vec.len() != g_vec.len() {
            return Err(ModelError::LengthMismatch { predicted: p_vec.len(), gold: g_vec.len() });
        }
        for (&p, &g) in p_vec.iter().zip(g_vec) {
            match (p == Outcome::Pos, g == Outcome::Pos) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(F1Score {
            value: 0.0,
            precision: 0.0,
            recall: 0.0,
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
            degenerate: true,
        });
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let value =
        if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(F1Score {
        value,
        precision,
        recall,
        true_pos: tp,
        false_pos: fp,
        false_neg: fn_,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroF1 {
    pub value: f64,
    pub per_article: Vec<f64>,
    pub degenerate: bool,
}

/// Macro alternative: per-article F1 averaged over articles. Articles with
/// no positive support anywhere score 0 and set the degenerate flag.
pub fn macro_f1(predicted: &[Vec<Outcome>], gold: &[Vec<Outcome>]) -> Result<MacroF1, ModelError> {
    if predicted.len() != gold.len() {
        return Err(ModelError::LengthMismatch { predicted: predicted.len(), gold: gold.len() });
    }
    if predicted.is_empty() {
        return Ok(MacroF1 { value: 0.0, per_article: vec![], degenerate: true });
    }
    let k = gold[0].len();
    let mut per_article = Vec::with_capacity(k);
    let mut degenerate = false;
    for article in 0..k {
        let p_col: Vec<Vec<Outcome>> = predicted.iter().map(|v| vec![v[article]]).collect();
        let g_col: Vec<Vec<Outcome>> = gold.iter().map(|v| vec![v[article]]).collect();
        let score = micro_f1(&p_col, &g_col)?;
        degenerate |= score.degenerate;
        per_article.push(score.value);
    }
    let value = per_article.iter().sum::<f64>() / k as f64;
    Ok(MacroF1 { value, per_article, degenerate })
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    /// Provenance annotation; readers ignore it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    config: ModelConfig,
    values: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "outcome-model/1";

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<(), ModelError> {
    save_checkpoint_stamped(path, config, params, None)
}

/// Like `save_checkpoint`, with an optional provenance stamp in the file.
pub fn save_checkpoint_stamped(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ModelParams,
    config_hash: Option<&str>,
) -> Result<(), ModelError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        config_hash: config_hash.map(str::to_string),
        config: *config,
        values: params.flatten(),
    };
    let mut writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut writer, &file)
        .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    writer.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams), ModelError> {
    let reader = BufReader::new(File::open(path)?);
    let file: CheckpointFile =
        serde_json::from_reader(reader).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(ModelError::BadCheckpoint(format!("unknown format {}", file.format)));
    }
    let params = ModelParams::from_flat(file.config.layout(), file.values)?;
    Ok((file.config, params))
}

/// Training log as CSV: epoch, objective, validation loss, gradient norm.
pub fn write_log_csv<W: Write>(log: &[EpochStats], writer: &mut W) -> io::Result<()> {
    writeln!(writer, "epoch,train_loss,val_loss,grad_norm")?;
    for s in log {
        let val = s.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let gn = s.grad_norm.map(|v| v.to_string()).unwrap_or_default();
        writeln!(writer, "{},{},{},{}", s.epoch, s.train_objective, val, gn)?;
    }
    Ok(())
}
