//! Seeded random streams.
//!
//! Every random draw in the toolkit is addressed by a `(seed, stream, index)`
//! triple so that runs can share or isolate randomness explicitly. A triple is
//! expanded into a ChaCha8 key, so draws are reproducible independent of the
//! order in which they are requested.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Reserved stream ids. Controller methods use their own ids (see
/// [`crate::controllers::Method::stream_id`]).
pub mod streams {
    pub const PLANT: u64 = 0x70_6c61_6e74;
    pub const OBJECTIVE: u64 = 0x6f62_6a65_6374;
    pub const SMOOTHING: u64 = 0x736d_6f6f_7468;
    pub const VALIDATION: u64 = 0x76_616c_6964;
}

/// Builds a generator keyed by `(seed, stream, index)`.
pub fn keyed_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(b"zofo-v1\0");
    ChaCha8Rng::from_seed(key)
}

/// Draws a standard normal vector of length `dim`.
pub fn standard_normal_vector<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)))
}
