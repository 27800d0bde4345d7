//! Fixed-seed inputs shared by the benchmarks.

use ndarray::{Array2, Array3};
use otadapt::encoder::{ToyEncoder, ToyEncoderSpec};
use otadapt::ot::SimilarityMatrix;
use otadapt::prototypes::{build_bank, PrototypeBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `k x b` logit-scale similarities (cosines / 0.01).
pub fn logits(k: usize, b: usize, seed: u64) -> SimilarityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SimilarityMatrix::new(Array2::from_shape_fn((k, b), |_| rng.random_range(-1.0..1.0) / 0.01)).unwrap()
}

pub struct Workload {
    pub encoder: ToyEncoder,
    pub bank: PrototypeBank,
    pub x: Array2<f64>,
}

/// Default-sized encoder (64 -> 64 -> 32, two blocks), `classes x templates`
/// random prototypes and a batch of `batch` inputs.
pub fn workload(classes: usize, templates: usize, batch: usize) -> Workload {
    let spec = ToyEncoderSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bank = build_bank(Array3::from_shape_fn((spec.d_out, classes, templates), |_| {
        rng.random_range(-1.0..1.0)
    }))
    .unwrap();
    let x = Array2::from_shape_fn((spec.d_in, batch), |_| rng.random_range(-1.0..1.0));
    Workload {
        encoder: ToyEncoder::new(spec).unwrap(),
        bank,
        x,
    }
}
