//! Shared fixtures for unit tests: the miniature codec configs used by the
//! finite-difference gradient checks, and seeded random image batches.

use crate::codec::{Arch, ModelConfig, Ratio};
use crate::data::ImageBatch;
use ndarray::Array4;
use rand::Rng;

/// Miniature ViT: 8x8 images, 2x2 patches (16 tokens), embed dim 8. Small
/// enough to sweep every parameter with central differences.
pub fn mini_vitsc_config() -> ModelConfig {
    ModelConfig {
        arch: Arch::Vitsc,
        cbr: Ratio::new(1, 6),
        image_size: 8,
        channels: 3,
        patch_size: 2,
        embed_dim: 8,
        num_heads: 2,
        enc_layers: 4,
        dec_layers: 2,
        mlp_ratio: 4,
    }
}

/// Miniature conv codec on the same 8x8 geometry.
pub fn mini_deepjscc_config() -> ModelConfig {
    ModelConfig { arch: Arch::Deepjscc, ..mini_vitsc_config() }
}

pub fn random_batch(b: usize, config: &ModelConfig, seed: u64) -> ImageBatch<f32> {
    let mut rng = crate::keys::rng_for(seed, "test-batch", &[b as u64]);
    let s = config.image_size;
    let data = Array4::from_shape_fn((b, config.channels, s, s), |_| rng.random_range(0.0..1.0f32));
    ImageBatch::from_bounded(data)
}
