//! Test-time adaptation of an embedding model against fixed class prototypes.
//!
//! Unlabelled batches are assigned soft pseudo-labels by solving a balanced
//! entropic optimal-transport problem between the batch embeddings and each
//! template's class prototypes ([`ot`]). Those codes are then distilled into
//! the LayerNorm affine parameters of an encoder ([`encoder`]), one template at
//! a time ([`adapt`]). [`data`] carries embeddings between processes and
//! synthesises shifted streams; [`eval`] runs seeded experiment grids.

pub mod adapt;
pub mod data;
pub mod encoder;
pub mod eval;
mod linalg;
pub mod ot;
pub mod prototypes;

pub use adapt::{AdaptConfig, AdaptError, Adapter, BatchResult, Variant};
pub use data::{
    generate_synthetic, read_embedding_file, write_embedding_file, DataError, EmbeddingFile, LabeledBatch,
    ShiftKind, SyntheticScenario, SyntheticShiftSpec,
};
pub use encoder::{EmbeddingBatch, LayerNormState, Targets, ToyEncoder, ToyEncoderSpec};
pub use eval::{render_report, run_grid, EvalError, ExperimentGrid, Report, ResultRow, Scenario};
pub use ot::{
    marginal_residuals, objective, sinkhorn, NanPolicy, SimilarityMatrix, SinkhornConfig,
    Stabilization, TransportPlan,
};
pub use prototypes::{build_bank, predict, similarity, PredictionMatrix, PrototypeBank, PrototypeSelector};

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}
