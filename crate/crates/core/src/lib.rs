//! Desk-scale contrastive self-supervised learning lab built around in-batch
//! image mixtures with softened positive-pair targets.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — a minimal dense f32 tensor core with reverse-mode autodiff,
//!   optimizers, and a versioned binary checkpoint container.
//! - [`mixer`] — global (pixel blend) and region (box paste) self-mixture of a
//!   mini-batch under the flip pairing `i ↦ N−1−i`.
//! - [`data`] — CIFAR binary ingestion, a deterministic synthetic dataset, and
//!   seeded augmentation primitives.
//! - [`encoder`] — a small convolutional backbone plus projection head with an
//!   optional momentum ("key") copy.
//! - [`losses`] — InfoNCE, positive-pair distance loss, the softened distance
//!   matrix, and the composed single-branch / both-branch mixture objectives.
//! - [`bank`] / [`engine`] — FIFO negative-key memory bank and the training
//!   orchestration (two-view augmentation, mixture injection, loss dispatch,
//!   momentum updates, multi-scale training, metrics, checkpoints).
//! - [`evalsuite`] — weighted kNN monitor and linear probe on frozen features.
//! - [`config`] — flat dotted-key run configuration with override support.

pub mod bank;
pub mod config;
pub mod data;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod mixer;
pub mod tensor;
pub mod types;

/// Derive an independent, reproducible RNG stream from `(seed, stream name,
/// index)`. Every consumer of randomness gets its own stream so adding or
/// reordering one never perturbs another.
pub fn derive_rng(seed: u64, stream: &str, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    // FNV-1a over the stream name; distinct (seed, name, index) triples map to
    // distinct 32-byte ChaCha seeds by construction.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&h.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&0x5eed_cafe_f00d_d00du64.to_le_bytes());
    rand_chacha::ChaCha8Rng::from_seed(key)
}

pub use bank::MemoryBank;
pub use config::RunConfig;
pub use encoder::{Encoder, EncoderSpec, MomentumPair, Predictor};
pub use error::{Error, Result};
pub use losses::{BaseLossKind, LossMode, LossReport};
pub use mixer::{MixConfig, MixMode, MixedBatch};
pub use tensor::{Graph, TensorId};
pub use types::{EmbeddingBatch, ImageBatch, KeySource, TaggedKeys};
