//! Text-conditioned scene change detection at desk scale.
//!
//! Given two images of the same scene and a natural-language prompt naming
//! the object classes of interest, the model predicts a binary mask of the
//! prompted changes. The crate ships everything needed to run the pipeline
//! end to end on a CPU:
//!
//! - [`tensor`]: a deterministic reverse-mode autodiff engine
//! - [`embed`]: frozen text/image token producers plus a binary token cache
//! - [`model`]: the transformer fusion network and its ablation variants
//! - [`scenegen`]: a synthetic change-pair generator with red herrings
//! - [`train`]: BCE loss, Adam, warmup + cosine schedule, training loop
//! - [`metrics`]: confusion counts, IoU/F1/precision/recall, eval protocols
//! - [`config`]: run configuration files shared by the CLI and examples

pub mod cli;
pub mod config;
pub mod embed;
pub mod img;
pub mod metrics;
pub mod model;
pub mod scenegen;
pub mod tensor;
pub mod train;
pub mod verify;

/// 64-bit FNV-1a; used wherever a stable string/content hash seeds an RNG.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64; derives per-sample seeds from (master seed, index).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
