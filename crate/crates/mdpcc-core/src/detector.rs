//! Stage 4 — the misinformation detector: text encoders, a linear
//! classification head with a per-feature scale, two-group Adam, early
//! stopping on validation Macro F1, and multi-seed runs.
//!
//! The model scores an article as `z = Σ_d w_d · s_d · x_d + b` where `x` is
//! the encoder's sparse feature vector, `s` is a per-feature scale trained
//! with the encoder learning rate (the stand-in for encoder fine-tuning),
//! and `w`, `b` form the head trained with the head learning rate. The
//! probability `σ(z)` is the chance the article is real; training minimizes
//! binary cross-entropy.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Veracity;
use crate::metrics::{ConfusionCounts, MetricsError, MetricsReport, MetricsRow};
use crate::text::{space_join, token_count, tokens, truncate_tokens};

/// Sparse feature vector: `(index, value)` pairs with strictly increasing
/// indices, all below the encoder's width.
pub type SparseFeatures = Vec<(usize, f64)>;

/// Turns article text into sparse features.
pub trait TextEncoder {
    /// Stable identifier recorded alongside trained models.
    fn id(&self) -> &str;

    /// Dimensionality of the feature space; all emitted indices are below it.
    fn width(&self) -> usize;

    /// Whether the per-feature scale vector should receive gradient updates.
    /// Frozen encoders (precomputed embeddings) return false and keep the
    /// scale at one.
    fn trainable_scale(&self) -> bool;

    fn encode(&self, text: &str) -> Result<SparseFeatures, EncodeError>;
}

impl<T: TextEncoder + ?Sized> TextEncoder for &T {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn width(&self) -> usize {
        (**self).width()
    }
    fn trainable_scale(&self) -> bool {
        (**self).trainable_scale()
    }
    fn encode(&self, text: &str) -> Result<SparseFeatures, EncodeError> {
        (**self).encode(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("encoding failed: {reason}")]
pub struct EncodeError {
    pub reason: String,
}

/// Hashed bag of whitespace tokens: FNV-1a over the token bytes into
/// 2^15 buckets, counts L2-normalized.
#[derive(Debug, Clone, Default)]
pub struct BagOfTokensEncoder;

impl BagOfTokensEncoder {
    pub const WIDTH: usize = 1 << 15;

    fn bucket(token: &str) -> usize {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for &byte in token.as_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (hash & (Self::WIDTH as u64 - 1)) as usize
    }
}

impl TextEncoder for BagOfTokensEncoder {
    fn id(&self) -> &str {
        "bag-of-tokens"
    }

    fn width(&self) -> usize {
        Self::WIDTH
    }

    fn trainable_scale(&self) -> bool {
        true
    }

    fn encode(&self, text: &str) -> Result<SparseFeatures, EncodeError> {
        let mut counts: alloc::collections::BTreeMap<usize, f64> = alloc::collections::BTreeMap::new();
        for token in tokens(text) {
            *counts.entry(Self::bucket(token)).or_insert(0.0) += 1.0;
        }
        let norm = libm::sqrt(counts.values().map(|c| c * c).sum::<f64>());
        if norm == 0.0 {
            return Ok(Vec::new());
        }
        Ok(counts.into_iter().map(|(d, c)| (d, c / norm)).collect())
    }
}

/// Builds the detector input from an article body and its commonsense
/// expression. The expression always survives whole; the body keeps only its
/// leading tokens so the total stays within `max_tokens` (when the
/// expression alone exceeds the budget, the result is just the expression).
pub fn assemble_input(body: &str, expression: &str, max_tokens: usize) -> String {
    let expression_len = token_count(expression);
    if expression_len == 0 {
        return truncate_tokens(body, max_tokens);
    }
    let body_budget = max_tokens.saturating_sub(expression_len);
    let kept = truncate_tokens(body, body_budget);
    space_join([kept.as_str(), expression])
}

/// An article already encoded for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub features: SparseFeatures,
    pub label: Veracity,
}

/// Encodes `(text, label)` pairs with one encoder.
pub fn encode_split<'a, E, I>(encoder: &E, items: I) -> Result<Vec<EncodedExample>, EncodeError>
where
    E: TextEncoder + ?Sized,
    I: IntoIterator<Item = (&'a str, Veracity)>,
{
    items
        .into_iter()
        .map(|(text, label)| {
            Ok(EncodedExample {
                features: encoder.encode(text)?,
                label,
            })
        })
        .collect()
}

/// Linear head over scaled features. Initialized to scale one, zero weights,
/// zero bias, so an untrained model scores every article at probability 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl DetectorModel {
    pub fn new(width: usize) -> Self {
        Self {
            scale: vec![1.0; width],
            weights: vec![0.0; width],
            bias: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, features: &[(usize, f64)]) -> f64 {
        let mut z = self.bias;
        for &(d, x) in features {
            z += self.weights[d] * self.scale[d] * x;
        }
        z
    }

    pub fn probability(&self, features: &[(usize, f64)]) -> f64 {
        sigmoid(self.logit(features))
    }

    pub fn predict(&self, features: &[(usize, f64)]) -> Veracity {
        if self.probability(features) >= 0.5 {
            Veracity::Real
        } else {
            Veracity::Fake
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// Numerically stable binary cross-entropy from the logit.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    if z >= 0.0 {
        z - z * y + libm::log1p(libm::exp(-z))
    } else {
        -z * y + libm::log1p(libm::exp(z))
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate for the scale (encoder) parameter group.
    pub encoder_lr: f64,
    /// Learning rate for the weight/bias (head) parameter group.
    pub head_lr: f64,
    pub batch_size: usize,
    /// Epochs without strict validation improvement before stopping.
    pub patience: u32,
    pub max_epochs: u32,
    /// Token budget for assembled detector inputs.
    pub max_tokens: usize,
    /// Seeds for multi-seed runs, in run order.
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder_lr: 7e-5,
            head_lr: 1e-4,
            batch_size: 64,
            patience: 10,
            max_epochs: 50,
            max_tokens: 512,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |value: f64, name: &str| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(TrainError::Config {
                    reason: alloc::format!("{name} must be positive and finite, got {value}"),
                })
            }
        };
        positive(self.encoder_lr, "encoder_lr")?;
        positive(self.head_lr, "head_lr")?;
        if self.batch_size == 0 {
            return Err(TrainError::Config {
                reason: "batch_size must be at least 1".into(),
            });
        }
        if self.patience == 0 {
            return Err(TrainError::Config {
                reason: "patience must be at least 1".into(),
            });
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config {
                reason: "max_epochs must be at least 1".into(),
            });
        }
        if self.seeds.is_empty() {
            return Err(TrainError::Config {
                reason: "at least one seed is required".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {reason}")]
    Config { reason: String },
    #[error("the {split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: u32 },
    #[error("validation metrics failed: {0}")]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Adam state for one parameter group (β1 = 0.9, β2 = 0.999, ε = 1e-8).
struct AdamGroup {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    b1_pow: f64,
    b2_pow: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamGroup {
    fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            b1_pow: 1.0,
            b2_pow: 1.0,
        }
    }

    /// Advances the step count; returns the bias-correction denominators.
    fn begin_step(&mut self) -> (f64, f64) {
        self.b1_pow *= BETA1;
        self.b2_pow *= BETA2;
        (1.0 - self.b1_pow, 1.0 - self.b2_pow)
    }

    fn update(&mut self, idx: usize, param: &mut f64, grad: f64, correction: (f64, f64)) {
        self.m[idx] = BETA1 * self.m[idx] + (1.0 - BETA1) * grad;
        self.v[idx] = BETA2 * self.v[idx] + (1.0 - BETA2) * grad * grad;
        let m_hat = self.m[idx] / correction.0;
        let v_hat = self.v[idx] / correction.1;
        *param -= self.lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
    }
}

/// One optimization driver: the model plus per-group Adam state and reusable
/// gradient buffers.
struct Trainer {
    model: DetectorModel,
    head: AdamGroup,
    encoder_group: AdamGroup,
    trainable_scale: bool,
    grad_weights: Vec<f64>,
    grad_scale: Vec<f64>,
}

impl Trainer {
    fn new(width: usize, config: &TrainConfig, trainable_scale: bool) -> Self {
        Self {
            model: DetectorModel::new(width),
            // Head group covers the weights plus the bias at the last slot.
            head: AdamGroup::new(width + 1, config.head_lr),
            encoder_group: AdamGroup::new(width, config.encoder_lr),
            trainable_scale,
            grad_weights: vec![0.0; width],
            grad_scale: vec![0.0; width],
        }
    }

    /// Runs one mini-batch step; returns the mean batch loss.
    fn step(&mut self, examples: &[EncodedExample], chunk: &[usize]) -> f64 {
        let width = self.model.width();
        let count = chunk.len() as f64;
        self.grad_weights.fill(0.0);
        self.grad_scale.fill(0.0);
        let mut grad_bias = 0.0;
        let mut loss_sum = 0.0;

        for &i in chunk {
            let example = &examples[i];
            let z = self.model.logit(&example.features);
            let y = f64::from(example.label.as_u8());
            loss_sum += bce_with_logit(z, y);
            let err = sigmoid(z) - y;
            for &(d, x) in &example.features {
                self.grad_weights[d] += err * self.model.scale[d] * x;
                self.grad_scale[d] += err * self.model.weights[d] * x;
            }
            grad_bias += err;
        }

        let correction = self.head.begin_step();
        for d in 0..width {
            self.head
                .update(d, &mut self.model.weights[d], self.grad_weights[d] / count, correction);
        }
        self.head
            .update(width, &mut self.model.bias, grad_bias / count, correction);

        if self.trainable_scale {
            let correction = self.encoder_group.begin_step();
            for d in 0..width {
                self.encoder_group
                    .update(d, &mut self.model.scale[d], self.grad_scale[d] / count, correction);
            }
        }

        loss_sum / count
    }
}

/// One epoch's summary in the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    /// The score early stopping compared (validation Macro F1 unless a
    /// custom selection metric was injected).
    pub selection_score: f64,
}

/// The trained model (best validation snapshot) plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    /// 1-based epoch whose snapshot was kept.
    pub best_epoch: u32,
    /// Selection score at the best epoch.
    pub best_metric: f64,
    /// Full validation metrics at the best epoch.
    pub best_val_metrics: MetricsRow,
    pub epochs_run: u32,
    pub history: Vec<EpochRecord>,
}

/// Evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub metrics: MetricsRow,
}

pub fn evaluate(
    model: &DetectorModel,
    examples: &[EncodedExample],
) -> Result<Evaluation, MetricsError> {
    let mut counts = ConfusionCounts::new();
    for example in examples {
        counts.record(example.label, model.predict(&example.features));
    }
    let metrics = counts.metrics()?;
    Ok(Evaluation { counts, metrics })
}

/// Trains with validation Macro F1 as the early-stopping metric.
pub fn train<E: TextEncoder + ?Sized>(
    encoder: &E,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    train_with_metric(encoder, train_set, val_set, config, seed, |_, row| {
        row.macro_f1
    })
}

/// Trains with an injected selection metric. Each epoch the closure maps the
/// validation metrics to a score; strictly higher scores become the new best
/// snapshot, and training stops once `epoch - best_epoch >= patience` or
/// `max_epochs` is reached. The returned model is the best snapshot.
pub fn train_with_metric<E, F>(
    encoder: &E,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    config: &TrainConfig,
    seed: u64,
    mut select: F,
) -> Result<TrainOutcome, TrainError>
where
    E: TextEncoder + ?Sized,
    F: FnMut(u32, &MetricsRow) -> f64,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit { split: "val" });
    }

    struct Best {
        epoch: u32,
        score: f64,
        model: DetectorModel,
        val_metrics: MetricsRow,
    }

    let mut trainer = Trainer::new(encoder.width(), config, encoder.trainable_scale());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<Best> = None;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let loss = trainer.step(train_set, chunk);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += loss;
            batches += 1;
        }

        let val = evaluate(&trainer.model, val_set)?;
        let score = select(epoch, &val.metrics);
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_macro_f1: val.metrics.macro_f1,
            selection_score: score,
        });

        let improved = best.as_ref().is_none_or(|b| score > b.score);
        if improved {
            best = Some(Best {
                epoch,
                score,
                model: trainer.model.clone(),
                val_metrics: val.metrics,
            });
        }
        let best_epoch = best.as_ref().expect("best is set by the first epoch").epoch;
        if epoch - best_epoch >= config.patience {
            break;
        }
    }

    let best = best.expect("max_epochs >= 1 guarantees at least one epoch");
    Ok(TrainOutcome {
        model: best.model,
        best_epoch: best.epoch,
        best_metric: best.score,
        best_val_metrics: best.val_metrics,
        epochs_run,
        history,
    })
}

/// One seed's training outcome and test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub test: Evaluation,
}

/// The first failure in a multi-seed run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: TrainError,
}

/// All completed seed runs; on failure, the runs finished before it are
/// preserved alongside the failing seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedRun>,
    pub failure: Option<SeedFailure>,
}

impl MultiSeedReport {
    /// Aggregates the per-seed test metrics into mean ± population std.
    pub fn test_report(&self) -> Result<MetricsReport, MetricsError> {
        MetricsReport::aggregate(
            self.runs
                .iter()
                .map(|run| (run.seed, run.test.metrics))
                .collect(),
        )
    }
}

/// Trains and evaluates once per configured seed, in order.
pub fn multi_seed_run<E: TextEncoder + ?Sized>(
    encoder: &E,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    test_set: &[EncodedExample],
    config: &TrainConfig,
) -> MultiSeedReport {
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let outcome = match train(encoder, train_set, val_set, config, seed) {
            Ok(outcome) => outcome,
            Err(error) => {
                return MultiSeedReport {
                    runs,
                    failure: Some(SeedFailure { seed, error }),
                }
            }
        };
        match evaluate(&outcome.model, test_set) {
            Ok(test) => runs.push(SeedRun {
                seed,
                outcome,
                test,
            }),
            Err(error) => {
                return MultiSeedReport {
                    runs,
                    failure: Some(SeedFailure {
                        seed,
                        error: TrainError::Metrics(error),
                    }),
                }
            }
        }
    }
    MultiSeedReport {
        runs,
        failure: None,
    }
}
