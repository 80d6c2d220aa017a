//! Language-conditioned manipulation agent: demonstration generation,
//! voxel observation encoding, discrete skill codes, a latent-bottleneck
//! voxel policy, training, and rollout evaluation.

pub mod action;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod lang;
pub mod model;
pub mod nn;
pub mod policy;
pub mod skill;
pub mod train;
pub mod voxel;

pub use action::{
    discretize, undiscretize, DiscretizedAction, GRIP_CLASSES, ROT_BINS, ROT_BIN_RAD,
};
pub use error::{AgentError, Result};
pub use voxel::{observe_grid, unproject, voxelize, ColoredPoint, VoxelGrid, GRID_CHANNELS};

/// Purpose tags keeping the independent random streams apart.
pub mod rng_tag {
    pub const GEN: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const ACCURACY: u64 = 4;
}

/// Deterministic stream derivation: every consumer of randomness gets its
/// own generator keyed by (root seed, purpose tag, coarse index, fine index),
/// so reordering or parallelizing work cannot change any draw.
pub fn derived_rng(seed: u64, tag: u64, a: u64, b: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut key = [0_u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    rand_chacha::ChaCha8Rng::from_seed(key)
}
