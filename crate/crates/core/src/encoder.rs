//! Toy visual encoder whose LayerNorm affine parameters are the only trainable
//! state.
//!
//! Architecture, per column of the input `x` (`d_in x B`):
//!
//! ```text
//! a_0 = x
//! for each block l:   h = W_l a_{l-1}            (frozen, d_hidden rows)
//!                     n = (h - mean h) / sqrt(var h + 1e-5)
//!                     a_l = gelu(gamma_l * n + beta_l)
//! o = W_head a_L                                 (frozen, d_out rows)
//! z = o / |o|
//! ```
//!
//! The frozen weights are seeded and arranged so that, at `gamma = 1, beta = 0`,
//! the map is close to direction preserving when `d_in == d_out` (a stand-in
//! for an encoder pretrained to align with the prototypes). Gradients of the
//! prediction losses with respect to every `gamma`/`beta` are hand-derived,
//! including the Jacobian of the final L2 normalisation.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::random_semi_orthogonal;
use crate::ot::TransportPlan;
use crate::prototypes::{softmax_columns, PredictionMatrix, PrototypeBank, PrototypeError};

pub const LN_EPS: f64 = 1e-5;
/// Floor applied inside `log` in the cross-entropy and entropy losses.
pub const LOG_FLOOR: f64 = 1e-12;
const FROZEN_NOISE: f64 = 0.05;
const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("{what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("embedding column {column} collapsed to zero before normalisation")]
    DegenerateEmbedding { column: usize },
    #[error("embedding column {column} has norm {norm}, expected unit norm")]
    NotNormalized { column: usize, norm: f64 },
    #[error("invalid targets: {0}")]
    InvalidTargets(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
}

fn shape_mismatch(what: &'static str, expected: impl ToString, found: impl ToString) -> EncoderError {
    EncoderError::ShapeMismatch {
        what,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyEncoderSpec {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    /// Number of linear -> LayerNorm -> GELU blocks.
    pub layers: usize,
    /// Seed for the frozen weights.
    pub seed: u64,
}

impl Default for ToyEncoderSpec {
    fn default() -> Self {
        Self {
            d_in: 64,
            d_hidden: 64,
            d_out: 32,
            layers: 2,
            seed: 0,
        }
    }
}

impl ToyEncoderSpec {
    /// Encoder for `d`-dimensional inputs and embeddings, hidden width `2d`.
    pub fn for_dim(d: usize, seed: u64) -> Self {
        Self {
            d_in: d,
            d_hidden: 2 * d,
            d_out: d,
            layers: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 || self.layers == 0 {
            return Err(EncoderError::InvalidSpec(format!(
                "all dimensions and layers must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-layer LayerNorm scales and shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormState {
    gamma: Vec<Array1<f64>>,
    beta: Vec<Array1<f64>>,
}

impl LayerNormState {
    /// `gamma = 1`, `beta = 0` for every layer of `spec`.
    pub fn identity(spec: &ToyEncoderSpec) -> Self {
        Self {
            gamma: vec![Array1::ones(spec.d_hidden); spec.layers],
            beta: vec![Array1::zeros(spec.d_hidden); spec.layers],
        }
    }

    pub fn new(gamma: Vec<Array1<f64>>, beta: Vec<Array1<f64>>) -> Result<Self, EncoderError> {
        if gamma.len() != beta.len() || gamma.iter().zip(&beta).any(|(g, b)| g.len() != b.len()) {
            return Err(shape_mismatch("layer norm", "matching gamma/beta", "mismatched lengths"));
        }
        if gamma.iter().chain(&beta).flatten().any(|x| !x.is_finite()) {
            return Err(EncoderError::NonFiniteInput);
        }
        Ok(Self { gamma, beta })
    }

    pub fn gamma(&self) -> &[Array1<f64>] {
        &self.gamma
    }

    pub fn beta(&self) -> &[Array1<f64>] {
        &self.beta
    }

    pub fn layers(&self) -> usize {
        self.gamma.len()
    }

    pub fn num_params(&self) -> usize {
        self.gamma.iter().chain(&self.beta).map(Array1::len).sum()
    }

    /// Flattened as `gamma_0, beta_0, gamma_1, beta_1, ...`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (g, b) in self.gamma.iter().zip(&self.beta) {
            out.extend(g.iter());
            out.extend(b.iter());
        }
        out
    }

    /// Inverse of [`LayerNormState::to_vec`] using `self` for the shapes.
    pub fn with_values(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.num_params(), "parameter count");
        let mut offset = 0;
        let mut take = |n: usize| {
            let a = Array1::from(values[offset..offset + n].to_vec());
            offset += n;
            a
        };
        let mut gamma = Vec::with_capacity(self.layers());
        let mut beta = Vec::with_capacity(self.layers());
        for (g, b) in self.gamma.iter().zip(&self.beta) {
            gamma.push(take(g.len()));
            beta.push(take(b.len()));
        }
        Self { gamma, beta }
    }

    pub fn max_abs(&self) -> f64 {
        self.gamma
            .iter()
            .chain(&self.beta)
            .flatten()
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    fn check_against(&self, spec: &ToyEncoderSpec) -> Result<(), EncoderError> {
        if self.layers() != spec.layers
            || self.gamma.iter().chain(&self.beta).any(|v| v.len() != spec.d_hidden)
        {
            return Err(shape_mismatch(
                "layer norm state",
                format!("{} layers of width {}", spec.layers, spec.d_hidden),
                format!("{} layers", self.layers()),
            ));
        }
        Ok(())
    }
}

/// Plain SGD: `ln - lr * grads`.
///
/// Panics if the shapes differ.
pub fn sgd_step(ln: &LayerNormState, grads: &LayerNormState, lr: f64) -> LayerNormState {
    assert_eq!(ln.layers(), grads.layers(), "layer count");
    let step = |p: &Vec<Array1<f64>>, g: &Vec<Array1<f64>>| -> Vec<Array1<f64>> {
        p.iter()
            .zip(g)
            .map(|(p, g)| {
                assert_eq!(p.len(), g.len(), "layer width");
                p - &(g * lr)
            })
            .collect()
    };
    LayerNormState {
        gamma: step(&ln.gamma, &grads.gamma),
        beta: step(&ln.beta, &grads.beta),
    }
}

/// `gamma = 1`, `beta = 0` with the shapes of `ln`.
pub fn reset(ln: &LayerNormState) -> LayerNormState {
    LayerNormState {
        gamma: ln.gamma.iter().map(|g| Array1::ones(g.len())).collect(),
        beta: ln.beta.iter().map(|b| Array1::zeros(b.len())).collect(),
    }
}

/// `d x B` unit-norm embeddings, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    z: Array2<f64>,
    labels: Option<Vec<usize>>,
}

impl EmbeddingBatch {
    /// Wraps columns that are already unit norm (within 1e-6).
    pub fn new(z: Array2<f64>) -> Result<Self, EncoderError> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::NonFiniteInput);
        }
        for (column, col) in z.axis_iter(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(EncoderError::NotNormalized { column, norm });
            }
        }
        Ok(Self { z, labels: None })
    }

    /// Normalises every column to unit length.
    pub fn normalized(mut z: Array2<f64>) -> Result<Self, EncoderError> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::NonFiniteInput);
        }
        for (column, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm < 1e-12 {
                return Err(EncoderError::DegenerateEmbedding { column });
            }
            col.mapv_inplace(|x| x / norm);
        }
        Ok(Self { z, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self, EncoderError> {
        if labels.len() != self.len() {
            return Err(shape_mismatch("labels", self.len(), labels.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn len(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.z.ncols() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.z
    }
}

/// `K x B` per-sample target distributions for the pseudo cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    q: Array2<f64>,
}

impl Targets {
    pub fn new(q: Array2<f64>) -> Result<Self, EncoderError> {
        if q.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(EncoderError::InvalidTargets("entries must be finite and nonnegative".into()));
        }
        for (i, col) in q.axis_iter(Axis(1)).enumerate() {
            let sum = col.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(EncoderError::InvalidTargets(format!("column {i} sums to {sum}")));
            }
        }
        Ok(Self { q })
    }

    /// Rescales a plan by `B`. Class mass stays exactly `B/K`; columns sum to
    /// one up to `B` times the plan's column residual.
    pub fn from_plan(plan: &TransportPlan) -> Self {
        Self {
            q: plan.q().mapv(|x| x * plan.batch() as f64),
        }
    }

    pub fn from_predictions(p: &PredictionMatrix) -> Self {
        Self { q: p.p().to_owned() }
    }

    /// Element-wise mean of equally shaped targets.
    pub fn average(all: &[Targets]) -> Result<Self, EncoderError> {
        let first = all
            .first()
            .ok_or_else(|| EncoderError::InvalidTargets("nothing to average".into()))?;
        let mut acc = Array2::<f64>::zeros(first.q.dim());
        for t in all {
            if t.q.dim() != acc.dim() {
                return Err(shape_mismatch("targets", format!("{:?}", acc.dim()), format!("{:?}", t.q.dim())));
            }
            acc += &t.q;
        }
        acc /= all.len() as f64;
        Ok(Self { q: acc })
    }

    pub fn q(&self) -> ArrayView2<'_, f64> {
        self.q.view()
    }

    /// Total target mass per class.
    pub fn class_mass(&self) -> Array1<f64> {
        self.q.sum_axis(Axis(1))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct BlockCache {
    normed: Array2<f64>,
    inv_std: Array1<f64>,
    pre_act: Array2<f64>,
}

struct ForwardPass {
    blocks: Vec<BlockCache>,
    out_norm: Array1<f64>,
    z: Array2<f64>,
}

enum Objective<'a> {
    CrossEntropy(&'a Targets),
    Entropy,
}

/// Frozen encoder weights plus the architecture they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    spec: ToyEncoderSpec,
    blocks: Vec<Array2<f64>>,
    head: Array2<f64>,
}

impl ToyEncoder {
    pub fn new(spec: ToyEncoderSpec) -> Result<Self, EncoderError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let half = spec.d_hidden / 2;
        let noise = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let scale = FROZEN_NOISE / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
        };

        // Mirrored pairs [E; -E] survive GELU as gelu(u) - gelu(-u) = u, which
        // the next block (and the head) read back out.
        let embed = if half > 0 {
            random_semi_orthogonal(half, spec.d_in, &mut rng)
        } else {
            Array2::zeros((0, spec.d_in))
        };
        let mut blocks = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let fan_in = if l == 0 { spec.d_in } else { spec.d_hidden };
            let mut w = noise(spec.d_hidden, fan_in, &mut rng);
            if l == 0 {
                let mut top = w.slice_mut(s![..half, ..]);
                top += &embed;
                let mut bottom = w.slice_mut(s![half..2 * half, ..]);
                bottom -= &embed;
            } else {
                for i in 0..half {
                    w[[i, i]] += 1.0;
                    w[[i, half + i]] -= 1.0;
                    w[[half + i, i]] -= 1.0;
                    w[[half + i, half + i]] += 1.0;
                }
            }
            if spec.d_hidden % 2 == 1 {
                // unpaired unit: plain random row
                let row = noise(1, fan_in, &mut rng) / FROZEN_NOISE;
                w.row_mut(spec.d_hidden - 1).assign(&row.row(0));
            }
            blocks.push(w);
        }

        let mut head = noise(spec.d_out, spec.d_hidden, &mut rng);
        let shared = spec.d_out.min(spec.d_in);
        // rectangular identity from input space to output space, composed with E^T
        let readout = embed.t().slice(s![..shared, ..]).to_owned();
        {
            let mut pos = head.slice_mut(s![..shared, ..half]);
            pos += &readout;
        }
        {
            let mut neg = head.slice_mut(s![..shared, half..2 * half]);
            neg -= &readout;
        }
        Ok(Self { spec, blocks, head })
    }

    pub fn spec(&self) -> &ToyEncoderSpec {
        &self.spec
    }

    /// Frozen block weights followed by the head.
    pub fn frozen_weights(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.blocks.iter().chain(std::iter::once(&self.head))
    }

    /// Little-endian bytes of all frozen weights.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.frozen_weights()
            .flat_map(|w| w.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>())
            .collect()
    }

    pub fn identity_state(&self) -> LayerNormState {
        LayerNormState::identity(&self.spec)
    }

    pub fn forward(&self, ln: &LayerNormState, x: ArrayView2<'_, f64>) -> Result<EmbeddingBatch, EncoderError> {
        let pass = self.forward_pass(ln, x)?;
        Ok(EmbeddingBatch { z: pass.z, labels: None })
    }

    fn forward_pass(&self, ln: &LayerNormState, x: ArrayView2<'_, f64>) -> Result<ForwardPass, EncoderError> {
        ln.check_against(&self.spec)?;
        if x.nrows() != self.spec.d_in {
            return Err(shape_mismatch("input rows", self.spec.d_in, x.nrows()));
        }
        if x.ncols() == 0 {
            return Err(shape_mismatch("input columns", "at least 1", 0));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFiniteInput);
        }

        let mut caches = Vec::with_capacity(self.spec.layers);
        let mut a = x.to_owned();
        for (l, w) in self.blocks.iter().enumerate() {
            let h = w.dot(&a);
            let mean = h.mean_axis(Axis(0)).expect("nonempty");
            let centered = &h - &mean.view().insert_axis(Axis(0));
            let var = centered.mapv(|c| c * c).mean_axis(Axis(0)).expect("nonempty");
            let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
            let normed = &centered * &inv_std.view().insert_axis(Axis(0));
            let pre_act = &normed * &ln.gamma[l].view().insert_axis(Axis(1))
                + ln.beta[l].view().insert_axis(Axis(1));
            a = pre_act.mapv(gelu);
            caches.push(BlockCache {
                normed,
                inv_std,
                pre_act,
            });
        }

        let mut z = self.head.dot(&a);
        let mut out_norm = Array1::zeros(z.ncols());
        for (column, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm.is_nan() || norm < 1e-12 {
                return Err(EncoderError::DegenerateEmbedding { column });
            }
            col.mapv_inplace(|v| v / norm);
            out_norm[column] = norm;
        }
        Ok(ForwardPass {
            blocks: caches,
            out_norm,
            z,
        })
    }

    /// Mean pseudo cross-entropy `-(1/B) sum_i sum_k q_ik ln p_ik` against
    /// averaged-prototype predictions, and its gradient in `gamma`/`beta`.
    /// Targets are constants.
    pub fn loss_and_grad(
        &self,
        ln: &LayerNormState,
        x: ArrayView2<'_, f64>,
        targets: &Targets,
        bank: &PrototypeBank,
        tau: f64,
    ) -> Result<(f64, LayerNormState), EncoderError> {
        self.objective_and_grad(ln, x, Objective::CrossEntropy(targets), bank, tau)
    }

    /// Mean Shannon entropy of the averaged-prototype predictions and its
    /// gradient.
    pub fn entropy_and_grad(
        &self,
        ln: &LayerNormState,
        x: ArrayView2<'_, f64>,
        bank: &PrototypeBank,
        tau: f64,
    ) -> Result<(f64, LayerNormState), EncoderError> {
        self.objective_and_grad(ln, x, Objective::Entropy, bank, tau)
    }

    pub fn cross_entropy(
        &self,
        ln: &LayerNormState,
        x: ArrayView2<'_, f64>,
        targets: &Targets,
        bank: &PrototypeBank,
        tau: f64,
    ) -> Result<f64, EncoderError> {
        let pass = self.forward_pass(ln, x)?;
        let p = self.predictions(&pass, bank, tau)?;
        check_targets(targets, &p)?;
        finite_loss(cross_entropy_value(&p, targets))
    }

    pub fn entropy(
        &self,
        ln: &LayerNormState,
        x: ArrayView2<'_, f64>,
        bank: &PrototypeBank,
        tau: f64,
    ) -> Result<f64, EncoderError> {
        let pass = self.forward_pass(ln, x)?;
        let p = self.predictions(&pass, bank, tau)?;
        finite_loss(entropy_value(&p))
    }

    fn predictions(&self, pass: &ForwardPass, bank: &PrototypeBank, tau: f64) -> Result<Array2<f64>, EncoderError> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(PrototypeError::InvalidTemperature(tau).into());
        }
        if bank.dim() != self.spec.d_out {
            return Err(PrototypeError::DimensionMismatch {
                expected: bank.dim(),
                found: self.spec.d_out,
            }
            .into());
        }
        let logits = bank.averaged().t().dot(&pass.z);
        Ok(softmax_columns(logits.view(), tau))
    }

    fn objective_and_grad(
        &self,
        ln: &LayerNormState,
        x: ArrayView2<'_, f64>,
        objective: Objective<'_>,
        bank: &PrototypeBank,
        tau: f64,
    ) -> Result<(f64, LayerNormState), EncoderError> {
        let pass = self.forward_pass(ln, x)?;
        let p = self.predictions(&pass, bank, tau)?;
        let batch = p.ncols() as f64;

        // d loss / d logits, logits = T^T z / tau
        let mut dlogits = Array2::<f64>::zeros(p.dim());
        let loss = match objective {
            Objective::CrossEntropy(targets) => {
                check_targets(targets, &p)?;
                let q = targets.q();
                for j in 0..p.ncols() {
                    let active: f64 = (0..p.nrows())
                        .filter(|&k| p[[k, j]] > LOG_FLOOR)
                        .map(|k| q[[k, j]])
                        .sum();
                    for k in 0..p.nrows() {
                        let direct = if p[[k, j]] > LOG_FLOOR { q[[k, j]] } else { 0.0 };
                        dlogits[[k, j]] = (p[[k, j]] * active - direct) / batch;
                    }
                }
                cross_entropy_value(&p, targets)
            }
            Objective::Entropy => {
                for j in 0..p.ncols() {
                    let g: Vec<f64> = (0..p.nrows())
                        .map(|k| {
                            let pk = p[[k, j]];
                            if pk > LOG_FLOOR {
                                -(pk.ln() + 1.0)
                            } else {
                                -LOG_FLOOR.ln()
                            }
                        })
                        .collect();
                    let mean_g: f64 = (0..p.nrows()).map(|k| p[[k, j]] * g[k]).sum();
                    for k in 0..p.nrows() {
                        dlogits[[k, j]] = p[[k, j]] * (g[k] - mean_g) / batch;
                    }
                }
                entropy_value(&p)
            }
        };
        let loss = finite_loss(loss)?;

        let dz = bank.averaged().dot(&dlogits) / tau;
        Ok((loss, self.backward(ln, &pass, dz)))
    }

    fn backward(&self, ln: &LayerNormState, pass: &ForwardPass, dz: Array2<f64>) -> LayerNormState {
        let z = &pass.z;
        let radial = (z * &dz).sum_axis(Axis(0));
        let d_out = (&dz - z * &radial.view().insert_axis(Axis(0)))
            / pass.out_norm.view().insert_axis(Axis(0));
        let mut da = self.head.t().dot(&d_out);

        let layers = self.spec.layers;
        let mut gamma = vec![Array1::zeros(0); layers];
        let mut beta = vec![Array1::zeros(0); layers];
        for l in (0..layers).rev() {
            let cache = &pass.blocks[l];
            let dy = &da * &cache.pre_act.mapv(gelu_grad);
            gamma[l] = (&dy * &cache.normed).sum_axis(Axis(1));
            beta[l] = dy.sum_axis(Axis(1));
            if l == 0 {
                break;
            }
            let dn = &dy * &ln.gamma[l].view().insert_axis(Axis(1));
            let mean_dn = dn.mean_axis(Axis(0)).expect("nonempty");
            let mean_dn_n = (&dn * &cache.normed).mean_axis(Axis(0)).expect("nonempty");
            let dh = (&dn
                - &mean_dn.view().insert_axis(Axis(0))
                - &cache.normed * &mean_dn_n.view().insert_axis(Axis(0)))
                * cache.inv_std.view().insert_axis(Axis(0));
            da = self.blocks[l].t().dot(&dh);
        }
        LayerNormState { gamma, beta }
    }
}

fn check_targets(targets: &Targets, p: &Array2<f64>) -> Result<(), EncoderError> {
    if targets.q.dim() != p.dim() {
        return Err(shape_mismatch(
            "targets",
            format!("{:?}", p.dim()),
            format!("{:?}", targets.q.dim()),
        ));
    }
    Ok(())
}

fn finite_loss(loss: f64) -> Result<f64, EncoderError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(EncoderError::NonFiniteLoss)
    }
}

fn cross_entropy_value(p: &Array2<f64>, targets: &Targets) -> f64 {
    let total: f64 = p
        .iter()
        .zip(targets.q.iter())
        .map(|(&pk, &qk)| -qk * pk.max(LOG_FLOOR).ln())
        .sum();
    total / p.ncols() as f64
}

fn entropy_value(p: &Array2<f64>) -> f64 {
    let total: f64 = p.iter().map(|&pk| -pk * pk.max(LOG_FLOOR).ln()).sum();
    total / p.ncols() as f64
}
