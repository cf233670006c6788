//! Semantic appearance transfer and multi-view style lifting at desk scale.
//!
//! The crate is organised around the stages of a style-lifting run:
//!
//! - [`scene`]: raster containers, the JSON scene manifest and a synthetic
//!   pinhole-camera scene generator with analytic ground truth.
//! - [`segmatch`]: semantic class matching and attention-mask construction.
//! - [`attention`]: QKV projection, masked cross-image attention and a
//!   patch-statistics appearance-transfer demonstrator.
//! - [`diffusion`]: noise schedules, ancestral sampling, edit-friendly
//!   inversion, guidance combination and partial (SDEdit-style) refinement.
//! - [`warp`]: flow from pointmaps, softmax splatting, history blending and
//!   frame selection.
//! - [`lift`]: the autoregressive multi-view propagation loop and its
//!   reference refiners.
//! - [`metrics`]: depth, image and pose evaluation.
//! - [`cli`]: the `restyle` command-line front end.
//!
//! Every stochastic operation takes an explicit seeded [`SeededRng`]; there is
//! no global random state.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod cli;
pub mod diffusion;
pub mod lift;
pub mod metrics;
pub mod scene;
pub mod segmatch;
pub mod warp;

/// Random stream used throughout the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Creates a [`SeededRng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Splits an independent child stream off `parent`.
pub fn split_rng(parent: &mut SeededRng) -> SeededRng {
    use rand::{RngCore, SeedableRng};
    SeededRng::seed_from_u64(parent.next_u64())
}
