//! Small fixtures shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::model::{gaussian, InitConfig, Model, ModelDims};

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        feature_dim: 5,
        embed_dim: 8,
        vocab_size: 12,
        fusion_layers: 2,
        heads: 2,
        ffn_hidden: 6,
        max_caption_len: 6,
    }
}

/// Tiny model with embeddings large enough to give non-trivial dot products.
pub fn tiny_model(seed: u64) -> Model {
    let init = InitConfig {
        embedding_std: 0.5,
        ..InitConfig::default()
    };
    Model::init(tiny_dims(), &init, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    gaussian(rows, cols, std, rng)
}
