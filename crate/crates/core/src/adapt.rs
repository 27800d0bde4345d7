//! Adaptation variants over one batch, and a stateful per-stream driver.
//!
//! Every variant ends with inference: a forward pass under the (possibly
//! updated) LayerNorm state and a softmax against the averaged prototypes.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{Array1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::{sgd_step, EmbeddingBatch, EncoderError, LayerNormState, Targets, ToyEncoder};
use crate::ot::{sinkhorn, NanPolicy, OtError, SimilarityMatrix, SinkhornConfig, Stabilization};
use crate::prototypes::{predict, similarity, PredictionMatrix, PrototypeBank, PrototypeError, PrototypeSelector, DEFAULT_TEMPERATURE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptError {
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("variant {variant} {reason}")]
    UnsupportedVariant { variant: Variant, reason: &'static str },
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
}

impl AdaptError {
    /// Short stable identifier for reports.
    pub fn code(&self) -> &'static str {
        match self {
            AdaptError::InvalidConfig(_) => "invalid_config",
            AdaptError::EmptyBatch => "empty_batch",
            AdaptError::UnsupportedVariant { .. } => "unsupported_variant",
            AdaptError::Ot(e) | AdaptError::Encoder(EncoderError::Prototype(PrototypeError::Similarity(e))) | AdaptError::Prototype(PrototypeError::Similarity(e)) => ot_code(e),
            AdaptError::Encoder(EncoderError::NonFiniteLoss) => "non_finite_loss",
            AdaptError::Encoder(EncoderError::DegenerateEmbedding { .. }) => "degenerate_embedding",
            AdaptError::Encoder(_) => "encoder",
            AdaptError::Prototype(_) => "prototype",
        }
    }
}

fn ot_code(e: &OtError) -> &'static str {
    match e {
        OtError::NonFiniteKernel { .. } => "non_finite_kernel",
        OtError::InvalidConfig(_) => "invalid_sinkhorn_config",
        OtError::InvalidSimilarity(_) => "invalid_similarity",
        OtError::InvalidPlan(_) | OtError::ShapeMismatch { .. } => "invalid_plan",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    #[default]
    ClipOt,
    TrainingFree,
    AvgTemplate,
    Tent,
    ZeroShot,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ZeroShot,
        Variant::TrainingFree,
        Variant::AvgTemplate,
        Variant::ClipOt,
        Variant::Tent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ClipOt => "clip_ot",
            Variant::TrainingFree => "training_free",
            Variant::AvgTemplate => "avg_template",
            Variant::Tent => "tent",
            Variant::ZeroShot => "zero_shot",
        }
    }

    /// Whether the variant updates LayerNorm parameters (and so needs raw
    /// encoder inputs rather than fixed embeddings).
    pub fn updates_encoder(self) -> bool {
        matches!(self, Variant::ClipOt | Variant::AvgTemplate | Variant::Tent)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                format!("unknown variant `{s}` (expected clip_ot, training_free, avg_template, tent or zero_shot)")
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub variant: Variant,
    pub stabilization: Stabilization,
    pub nan_policy: NanPolicy,
    /// Restart from `gamma = 1, beta = 0` at the start of every stream.
    pub reset_per_scenario: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.7,
            sinkhorn_iters: 3,
            lr: 1e-4,
            batch_size: 128,
            tau: DEFAULT_TEMPERATURE,
            seed: 0,
            variant: Variant::ClipOt,
            stabilization: Stabilization::Shifted,
            nan_policy: NanPolicy::Error,
            reset_per_scenario: true,
        }
    }
}

impl AdaptConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        let fail = |m: String| Err(AdaptError::InvalidConfig(m));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.sinkhorn_iters == 0 {
            return fail("sinkhorn_iters must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return fail(format!("tau must be > 0, got {}", self.tau));
        }
        Ok(())
    }

    pub fn sinkhorn_config(&self) -> SinkhornConfig {
        SinkhornConfig::new(self.epsilon, self.sinkhorn_iters)
            .with_stabilization(self.stabilization)
            .with_nan_policy(self.nan_policy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    /// Inference after this batch's updates.
    pub predictions: PredictionMatrix,
    pub hard_labels: Vec<usize>,
    /// One loss per update step, in the order the steps ran.
    pub loss_trace: Vec<f64>,
    /// Templates in the order their codes were used.
    pub template_order: Vec<usize>,
    /// Per-class mass of each B-rescaled code, in `template_order`.
    pub code_class_mass: Vec<Array1<f64>>,
    pub wall_time: Duration,
}

impl BatchResult {
    fn new(predictions: PredictionMatrix, started: Instant) -> Self {
        Self {
            hard_labels: predictions.hard_labels(),
            predictions,
            loss_trace: Vec::new(),
            template_order: Vec::new(),
            code_class_mass: Vec::new(),
            wall_time: started.elapsed(),
        }
    }

    fn with_codes(mut self, order: Vec<usize>, mass: Vec<Array1<f64>>) -> Self {
        self.template_order = order;
        self.code_class_mass = mass;
        self
    }

    fn with_losses(mut self, losses: Vec<f64>) -> Self {
        self.loss_trace = losses;
        self
    }
}

fn check_batch(x: ArrayView2<'_, f64>) -> Result<(), AdaptError> {
    if x.ncols() == 0 {
        return Err(AdaptError::EmptyBatch);
    }
    Ok(())
}

fn check_variant(cfg: &AdaptConfig, expected: Variant) -> Result<(), AdaptError> {
    cfg.validate()?;
    if cfg.variant != expected {
        return Err(AdaptError::InvalidConfig(format!(
            "config variant is {}, called {expected}",
            cfg.variant
        )));
    }
    Ok(())
}

/// B-rescaled balanced code for one template on fixed embeddings. The solver
/// sees logits, `T_m^T z / tau`, the same scale the softmax sees.
pub fn template_code(
    bank: &PrototypeBank,
    template: usize,
    z: &EmbeddingBatch,
    cfg: &SinkhornConfig,
    tau: f64,
) -> Result<Targets, AdaptError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(PrototypeError::InvalidTemperature(tau).into());
    }
    let cosines = similarity(bank, PrototypeSelector::Template(template), z)?;
    let sim = SimilarityMatrix::new(cosines.into_inner() / tau)?;
    let plan = sinkhorn(&sim, cfg)?;
    Ok(Targets::from_plan(&plan))
}

/// Zero-shot inference on fixed embeddings.
pub fn infer_embeddings(bank: &PrototypeBank, z: &EmbeddingBatch, tau: f64) -> Result<BatchResult, AdaptError> {
    let started = Instant::now();
    if z.is_empty() {
        return Err(AdaptError::EmptyBatch);
    }
    Ok(BatchResult::new(predict(bank, z, tau)?, started))
}

/// Training-free OT on fixed embeddings: the mean of all templates' rescaled
/// codes, columns renormalised, is the prediction.
pub fn training_free_embeddings(
    bank: &PrototypeBank,
    z: &EmbeddingBatch,
    cfg: &AdaptConfig,
) -> Result<BatchResult, AdaptError> {
    let started = Instant::now();
    cfg.validate()?;
    if z.is_empty() {
        return Err(AdaptError::EmptyBatch);
    }
    let sinkhorn_cfg = cfg.sinkhorn_config();
    let codes = (0..bank.templates())
        .map(|m| template_code(bank, m, z, &sinkhorn_cfg, cfg.tau))
        .collect::<Result<Vec<_>, _>>()?;
    let mass = codes.iter().map(Targets::class_mass).collect();
    let mean = Targets::average(&codes)?;
    let mut p = mean.q().to_owned();
    for mut col in p.axis_iter_mut(Axis(1)) {
        let sum = col.sum();
        col /= sum;
    }
    Ok(BatchResult::new(PredictionMatrix::from_columns(p), started).with_codes((0..bank.templates()).collect(), mass))
}

/// Forward pass plus averaged-prototype prediction; never changes `ln`.
pub fn infer(
    encoder: &ToyEncoder,
    ln: &LayerNormState,
    bank: &PrototypeBank,
    x: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<BatchResult, AdaptError> {
    let started = Instant::now();
    check_batch(x)?;
    let z = encoder.forward(ln, x)?;
    Ok(BatchResult::new(predict(bank, &z, tau)?, started))
}

/// One SGD step per template, in a permutation drawn from `rng`. Each code is
/// computed from embeddings under the state left by the previous step.
pub fn run_clip_ot<R: rand::Rng + ?Sized>(
    encoder: &ToyEncoder,
    ln: &LayerNormState,
    bank: &PrototypeBank,
    x: ArrayView2<'_, f64>,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<(BatchResult, LayerNormState), AdaptError> {
    let started = Instant::now();
    check_variant(cfg, Variant::ClipOt)?;
    check_batch(x)?;
    let sinkhorn_cfg = cfg.sinkhorn_config();
    let mut order: Vec<usize> = (0..bank.templates()).collect();
    order.shuffle(rng);

    let mut state = ln.clone();
    let mut losses = Vec::with_capacity(order.len());
    let mut mass = Vec::with_capacity(order.len());
    for &m in &order {
        let z = encoder.forward(&state, x)?;
        let targets = template_code(bank, m, &z, &sinkhorn_cfg, cfg.tau)?;
        mass.push(targets.class_mass());
        let (loss, grads) = encoder.loss_and_grad(&state, x, &targets, bank, cfg.tau)?;
        losses.push(loss);
        state = sgd_step(&state, &grads, cfg.lr);
    }

    let z = encoder.forward(&state, x)?;
    let result = BatchResult::new(predict(bank, &z, cfg.tau)?, started)
        .with_codes(order, mass)
        .with_losses(losses);
    Ok((result, state))
}

/// Training-free OT on the embeddings of the current state. The state is only
/// read.
pub fn run_training_free(
    encoder: &ToyEncoder,
    ln: &LayerNormState,
    bank: &PrototypeBank,
    x: ArrayView2<'_, f64>,
    cfg: &AdaptConfig,
) -> Result<BatchResult, AdaptError> {
    let started = Instant::now();
    check_variant(cfg, Variant::TrainingFree)?;
    check_batch(x)?;
    let z = encoder.forward(ln, x)?;
    let mut result = training_free_embeddings(bank, &z, cfg)?;
    result.wall_time = started.elapsed();
    Ok(result)
}

/// All codes from the pre-update embeddings, averaged, then a single step.
pub fn run_avg_template(
    encoder: &ToyEncoder,
    ln: &LayerNormState,
    bank: &PrototypeBank,
    x: ArrayView2<'_, f64>,
    cfg: &AdaptConfig,
) -> Result<(BatchResult, LayerNormState), AdaptError> {
    let started = Instant::now();
    check_variant(cfg, Variant::AvgTemplate)?;
    check_batch(x)?;
    let sinkhorn_cfg = cfg.sinkhorn_config();
    let z = encoder.forward(ln, x)?;
    let codes = (0..bank.templates())
        .map(|m| template_code(bank, m, &z, &sinkhorn_cfg, cfg.tau))
        .collect::<Result<Vec<_>, _>>()?;
    let mass = codes.iter().map(Targets::class_mass).collect();
    let targets = Targets::average(&codes)?;
    let (loss, grads) = encoder.loss_and_grad(ln, x, &targets, bank, cfg.tau)?;
    let state = sgd_step(ln, &grads, cfg.lr);

    let z = encoder.forward(&state, x)?;
    let result = BatchResult::new(predict(bank, &z, cfg.tau)?, started)
        .with_codes((0..bank.templates()).collect(), mass)
        .with_losses(vec![loss]);
    Ok((result, state))
}

/// One SGD step on the mean prediction entropy.
pub fn run_tent(
    encoder: &ToyEncoder,
    ln: &LayerNormState,
    bank: &PrototypeBank,
    x: ArrayView2<'_, f64>,
    cfg: &AdaptConfig,
) -> Result<(BatchResult, LayerNormState), AdaptError> {
    let started = Instant::now();
    check_variant(cfg, Variant::Tent)?;
    check_batch(x)?;
    let (loss, grads) = encoder.entropy_and_grad(ln, x, bank, cfg.tau)?;
    let state = sgd_step(ln, &grads, cfg.lr);
    let z = encoder.forward(&state, x)?;
    let result = BatchResult::new(predict(bank, &z, cfg.tau)?, started).with_losses(vec![loss]);
    Ok((result, state))
}

/// Sequential adaptation over one stream of batches. Owns its LayerNorm state
/// and template-order RNG; separate streams need separate adapters.
#[derive(Debug, Clone)]
pub struct Adapter<'a> {
    encoder: &'a ToyEncoder,
    bank: &'a PrototypeBank,
    cfg: AdaptConfig,
    ln: LayerNormState,
    rng: ChaCha8Rng,
}

impl<'a> Adapter<'a> {
    pub fn new(encoder: &'a ToyEncoder, bank: &'a PrototypeBank, cfg: AdaptConfig) -> Result<Self, AdaptError> {
        cfg.validate()?;
        Ok(Self {
            ln: encoder.identity_state(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            encoder,
            bank,
            cfg,
        })
    }

    /// Starts from a given state instead of the identity.
    pub fn with_state(mut self, ln: LayerNormState) -> Self {
        self.ln = ln;
        self
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn state(&self) -> &LayerNormState {
        &self.ln
    }

    /// Identity LayerNorm state and a freshly seeded RNG.
    pub fn reset(&mut self) {
        self.ln = self.encoder.identity_state();
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
    }

    /// Adapts on one batch (per the configured variant) and returns the
    /// post-update predictions. The state carries over to the next call.
    pub fn step(&mut self, x: ArrayView2<'_, f64>) -> Result<BatchResult, AdaptError> {
        let (encoder, bank, cfg) = (self.encoder, self.bank, &self.cfg);
        let (result, state) = match cfg.variant {
            Variant::ZeroShot => (infer(encoder, &self.ln, bank, x, cfg.tau)?, None),
            Variant::TrainingFree => (run_training_free(encoder, &self.ln, bank, x, cfg)?, None),
            Variant::ClipOt => {
                let (r, s) = run_clip_ot(encoder, &self.ln, bank, x, cfg, &mut self.rng)?;
                (r, Some(s))
            }
            Variant::AvgTemplate => {
                let (r, s) = run_avg_template(encoder, &self.ln, bank, x, cfg)?;
                (r, Some(s))
            }
            Variant::Tent => {
                let (r, s) = run_tent(encoder, &self.ln, bank, x, cfg)?;
                (r, Some(s))
            }
        };
        if let Some(state) = state {
            self.ln = state;
        }
        Ok(result)
    }
}

/// Adaptation of fixed embeddings (no encoder): only `zero_shot` and
/// `training_free` apply.
pub fn step_embeddings(bank: &PrototypeBank, z: &EmbeddingBatch, cfg: &AdaptConfig) -> Result<BatchResult, AdaptError> {
    cfg.validate()?;
    match cfg.variant {
        Variant::ZeroShot => infer_embeddings(bank, z, cfg.tau),
        Variant::TrainingFree => training_free_embeddings(bank, z, cfg),
        variant => Err(AdaptError::UnsupportedVariant {
            variant,
            reason: "needs encoder inputs to update LayerNorm parameters",
        }),
    }
}

/// Fraction of hard labels falling in the most frequent class.
pub fn collapse_metric(labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    *counts.iter().max().expect("classes >= 1") as f64 / labels.len() as f64
}

/// Percentage of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "label count");
    if truth.is_empty() {
        return 0.0;
    }
    100.0 * predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}
