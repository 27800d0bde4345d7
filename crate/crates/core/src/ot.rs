//! Balanced entropic optimal transport between class prototypes and a batch.
//!
//! Given a `K x B` similarity matrix `S`, the solver returns the plan
//!
//! ```text
//! Q* = Diag(u) exp(S / eps) Diag(v)
//! ```
//!
//! which maximises `<Q, S> + eps H(Q)` over the transportation polytope with
//! row sums `1/K` and column sums `1/B`. The scalings are found with
//! Sinkhorn-Knopp iterations starting from `v = 1`; every iteration ends on a
//! row update except the last, which stops right after it, so row marginals
//! are exact and column marginals converge as the iteration count grows.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite kernel at epsilon {epsilon} (iteration {iteration})")]
    NonFiniteKernel { epsilon: f64, iteration: usize },
    #[error("invalid similarity matrix: {0}")]
    InvalidSimilarity(String),
    #[error("invalid transport plan: {0}")]
    InvalidPlan(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// `K x B` prototype/embedding similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self, OtError> {
        let (k, b) = values.dim();
        if k < 2 || b < 1 {
            return Err(OtError::InvalidSimilarity(format!(
                "need at least 2 classes and 1 sample, got {k}x{b}"
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(OtError::InvalidSimilarity(format!(
                "entry {pos} is not finite"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn classes(&self) -> usize {
        self.values.nrows()
    }

    pub fn batch(&self) -> usize {
        self.values.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Soft assignment of `B` samples to `K` classes (the pseudo-code matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    q: Array2<f64>,
}

impl TransportPlan {
    /// Wraps a nonnegative finite matrix. Marginals are not enforced here, use
    /// [`marginal_residuals`] to measure them.
    pub fn new(q: Array2<f64>) -> Result<Self, OtError> {
        let (k, b) = q.dim();
        if k < 1 || b < 1 {
            return Err(OtError::InvalidPlan(format!("empty plan {k}x{b}")));
        }
        if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(OtError::InvalidPlan(
                "entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { q })
    }

    pub fn q(&self) -> ArrayView2<'_, f64> {
        self.q.view()
    }

    pub fn classes(&self) -> usize {
        self.q.nrows()
    }

    pub fn batch(&self) -> usize {
        self.q.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.q
    }

    /// Per-class mass (row sums).
    pub fn class_mass(&self) -> Array1<f64> {
        self.q.sum_axis(Axis(1))
    }

    /// Hard label per column; ties go to the lowest class index.
    pub fn hard_assignment(&self) -> Vec<usize> {
        self.q
            .axis_iter(Axis(1))
            .map(|col| crate::argmax(col.iter().copied()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stabilization {
    /// `exp(S / eps)` as is.
    Plain,
    /// Subtract the row-wise maximum of `S / eps` before exponentiating. The
    /// row factor is absorbed by the first `u` update, so the plan equals the
    /// plain one at every iteration count.
    #[default]
    Shifted,
    /// Dual potentials updated with log-sum-exp; never overflows.
    LogDomain,
}

impl fmt::Display for Stabilization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stabilization::Plain => "plain",
            Stabilization::Shifted => "shifted",
            Stabilization::LogDomain => "log_domain",
        })
    }
}

impl FromStr for Stabilization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Stabilization::Plain),
            "shifted" => Ok(Stabilization::Shifted),
            "log_domain" | "log" => Ok(Stabilization::LogDomain),
            other => Err(format!(
                "unknown stabilization `{other}` (expected plain, shifted or log_domain)"
            )),
        }
    }
}

/// What to do when the scaling iterations hit a non-finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NanPolicy {
    #[default]
    Error,
    FallbackLogDomain,
}

impl fmt::Display for NanPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NanPolicy::Error => "error",
            NanPolicy::FallbackLogDomain => "fallback_log_domain",
        })
    }
}

impl FromStr for NanPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "error" => Ok(NanPolicy::Error),
            "fallback_log_domain" | "fallback" => Ok(NanPolicy::FallbackLogDomain),
            other => Err(format!(
                "unknown nan policy `{other}` (expected error or fallback_log_domain)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic weight; also the kernel bandwidth in `exp(S / eps)`.
    pub epsilon: f64,
    /// Number of row (u) updates. Column updates run between them.
    pub iterations: usize,
    pub stabilization: Stabilization,
    pub nan_policy: NanPolicy,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.7,
            iterations: 3,
            stabilization: Stabilization::Shifted,
            nan_policy: NanPolicy::Error,
        }
    }
}

impl SinkhornConfig {
    pub fn new(epsilon: f64, iterations: usize) -> Self {
        Self {
            epsilon,
            iterations,
            ..Self::default()
        }
    }

    pub fn with_stabilization(mut self, stabilization: Stabilization) -> Self {
        self.stabilization = stabilization;
        self
    }

    pub fn with_nan_policy(mut self, nan_policy: NanPolicy) -> Self {
        self.nan_policy = nan_policy;
        self
    }

    pub fn validate(&self) -> Result<(), OtError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(OtError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.iterations < 1 {
            return Err(OtError::InvalidConfig(
                "iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Solves the entropic assignment problem for `sim`.
pub fn sinkhorn(sim: &SimilarityMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan, OtError> {
    cfg.validate()?;
    let outcome = match cfg.stabilization {
        Stabilization::Plain => scaling_iterations(sim, cfg, false),
        Stabilization::Shifted => scaling_iterations(sim, cfg, true),
        Stabilization::LogDomain => return Ok(log_domain_iterations(sim, cfg)),
    };
    match (outcome, cfg.nan_policy) {
        (Err(OtError::NonFiniteKernel { iteration, .. }), NanPolicy::FallbackLogDomain) => {
            log::warn!(
                "sinkhorn: non-finite scaling at iteration {iteration} (eps={}), retrying in log domain",
                cfg.epsilon
            );
            Ok(log_domain_iterations(sim, cfg))
        }
        (outcome, _) => outcome,
    }
}

fn scaling_iterations(
    sim: &SimilarityMatrix,
    cfg: &SinkhornConfig,
    shifted: bool,
) -> Result<TransportPlan, OtError> {
    let s = sim.values();
    let (k, b) = s.dim();
    let eps = cfg.epsilon;
    let non_finite = |iteration| OtError::NonFiniteKernel {
        epsilon: eps,
        iteration,
    };

    let mut kernel = s.mapv(|x| x / eps);
    if shifted {
        for mut row in kernel.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| x - max);
        }
    }
    kernel.mapv_inplace(f64::exp);
    if kernel.iter().any(|x| !x.is_finite()) {
        return Err(non_finite(0));
    }

    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    let mut u = Array1::<f64>::ones(k);
    let mut v = Array1::<f64>::ones(b);
    for t in 1..=cfg.iterations {
        let kv = kernel.dot(&v);
        u = kv.mapv(|x| row_target / x);
        if u.iter().any(|x| !x.is_finite()) {
            return Err(non_finite(t));
        }
        if t < cfg.iterations {
            let ktu = kernel.t().dot(&u);
            v = ktu.mapv(|x| col_target / x);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(non_finite(t));
            }
        }
    }

    let mut q = kernel;
    for ((i, j), x) in q.indexed_iter_mut() {
        *x *= u[i] * v[j];
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(non_finite(cfg.iterations));
    }
    Ok(TransportPlan { q })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

// Potentials f = eps ln u, g = eps ln v, so Q_kj = exp((S_kj + f_k + g_j) / eps).
fn log_domain_iterations(sim: &SimilarityMatrix, cfg: &SinkhornConfig) -> TransportPlan {
    let s = sim.values();
    let (k, b) = s.dim();
    let eps = cfg.epsilon;
    let log_row = -(k as f64).ln();
    let log_col = -(b as f64).ln();
    let scaled = s.mapv(|x| x / eps);

    let mut f = Array1::<f64>::zeros(k);
    let mut g = Array1::<f64>::zeros(b);
    for t in 1..=cfg.iterations {
        for i in 0..k {
            let row = scaled.row(i);
            let lse = log_sum_exp(row.iter().zip(g.iter()).map(|(x, gj)| x + gj / eps));
            f[i] = eps * (log_row - lse);
        }
        if t < cfg.iterations {
            for j in 0..b {
                let col = scaled.column(j);
                let lse = log_sum_exp(col.iter().zip(f.iter()).map(|(x, fi)| x + fi / eps));
                g[j] = eps * (log_col - lse);
            }
        }
    }

    // The last update was f, so row i is (1/K) softmax_j(S_ij / eps + g_j / eps).
    // Normalising each row directly keeps row sums exact; going through
    // exp(f + g + S) loses ulp(S / eps) in relative terms, ~1e-13 at logit scale.
    let row_target = 1.0 / k as f64;
    let mut q = scaled;
    for mut row in q.axis_iter_mut(Axis(0)) {
        row.zip_mut_with(&g, |x, gj| *x += gj / eps);
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| row_target * x / sum);
    }
    TransportPlan { q }
}

/// `<Q, S> + eps H(Q)` with `0 ln 0 = 0`.
pub fn objective(sim: &SimilarityMatrix, plan: &TransportPlan, epsilon: f64) -> Result<f64, OtError> {
    if sim.values.dim() != plan.q.dim() {
        return Err(OtError::ShapeMismatch {
            expected: sim.values.dim(),
            found: plan.q.dim(),
        });
    }
    let transport: f64 = sim.values.iter().zip(plan.q.iter()).map(|(s, q)| s * q).sum();
    Ok(transport + epsilon * entropy(plan))
}

/// Shannon entropy of the plan entries.
pub fn entropy(plan: &TransportPlan) -> f64 {
    -plan
        .q
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

/// Max absolute deviation of row sums from `1/K` and of column sums from `1/B`.
pub fn marginal_residuals(plan: &TransportPlan) -> (f64, f64) {
    let (k, b) = plan.q.dim();
    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    let row_err = plan
        .q
        .sum_axis(Axis(1))
        .iter()
        .fold(0.0_f64, |m, r| m.max((r - row_target).abs()));
    let col_err = plan
        .q
        .sum_axis(Axis(0))
        .iter()
        .fold(0.0_f64, |m, c| m.max((c - col_target).abs()));
    (row_err, col_err)
}
