//! Identification of feedforward tanh networks from finite input-output queries.
//!
//! The pipeline recovers a pyramidal network in four stages:
//! 1. [`context`] — sample (approximate) Hessians near a base point and extract
//!    the subspace spanned by outer products of entangled weight vectors.
//! 2. [`power`] — recover the spanning rank-one directions with a projected
//!    gradient ascent over the sphere, restarted many times.
//! 3. [`assignment`] — cluster the restart outputs and attribute each recovered
//!    weight to the first, last, or an inner layer.
//! 4. [`completion`] — fit the remaining shift/scale parameters by gradient
//!    descent on a least squares objective.
//!
//! [`net`] and [`derivatives`] supply the network model, its derivatives and the
//! sampling laws; [`theory`] evaluates the supporting bounds numerically;
//! [`harness`] orchestrates full runs and reproduces the reference experiments.

// Force linkage of the system BLAS/LAPACK backing ndarray's `blas` feature.
extern crate blas_src;

pub mod assignment;
pub mod completion;
pub mod context;
pub mod derivatives;
pub mod error;
pub mod harness;
pub(crate) mod linalg;
pub mod net;
pub(crate) mod par;
pub mod power;
pub mod theory;

pub use error::{Error, Result};
pub use net::{Activation, Architecture, EntangledWeights, NetworkParams};
pub use par::configure_pool;

use rand_chacha::ChaCha8Rng;

/// Derive a deterministic per-stage RNG from a master seed and a stage tag.
///
/// Stages draw from independent streams, so any stage can be re-run in
/// isolation with identical results.
pub fn stage_rng(master_seed: u64, tag: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    for (i, b) in tag.bytes().enumerate() {
        seed[8 + (i % 24)] ^= b.rotate_left((i / 24) as u32);
    }
    ChaCha8Rng::from_seed(seed)
}
