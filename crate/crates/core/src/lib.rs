//! Autonomous characterization and tuning of gate-defined double quantum dots.
//!
//! The crate is organised along the measurement workflow:
//!
//! - [`device`]: constant-interaction device simulator and measurement session.
//! - [`pinchoff`]: 1D gate-characterization analysis (tanh fit, transition voltages, features).
//! - [`charge_map`]: charge stability diagram acquisition, range control and tiling.
//! - [`ml`]: from-scratch binary classifiers, preprocessing and evaluation protocol.
//! - [`characterize`]: initial quality assessment and per-gate device characterization.
//! - [`tuner`]: the closed-loop dot tuning state machine.
//! - [`harness`]: dataset generation, model training, fleets and benchmarks.

pub mod characterize;
pub mod charge_map;
pub mod device;
mod error;
pub mod harness;
pub mod ml;
pub mod pinchoff;
pub mod tuner;

pub use error::{Error, Result};

/// Independent 64-bit stream seed for sub-task `stream` of a run seeded with
/// `master` (SplitMix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
