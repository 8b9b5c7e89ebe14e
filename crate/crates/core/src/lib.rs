//! Failure-prediction pipeline for 20-channel MRI Head/Neck coils: a
//! fully connected network on per-channel scalar features, convolutional
//! networks on per-coil noise covariance matrices, and a decision-forest
//! meta-learner stacking both, evaluated with leave-coils-out
//! cross-validation.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod forest;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod preprocess;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};

/// Deterministic sub-seed derivation (FNV-1a mix + splitmix finalizer).
pub fn derive_seed(master: u64, tag: &str, idx: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ master.wrapping_mul(0x9e3779b97f4a7c15);
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h = (h ^ idx).wrapping_mul(0x100000001b3);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}
