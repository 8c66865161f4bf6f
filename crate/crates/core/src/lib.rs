//! Few-shot and zero-shot point-cloud semantic segmentation with prototypes.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. It contains
//! the tensor and autodiff substrate, the point-cloud data pipeline and
//! synthetic scene generator, the episodic sampler, an EdgeConv backbone,
//! prototype scoring with query-guided adaption and self-reconstruction,
//! the semantic projection network, and the training and evaluation loops.
//! File formats and the command-line front end live in the `protoseg` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod data;
pub mod episode;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod projection;
pub mod prototype;
pub mod qgpa;
pub mod self_recon;
pub mod suites;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Deterministic generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds a generator from a root seed and a stream label, so independent
/// tasks (blocks, episodes, runs) get decorrelated but reproducible streams.
pub fn derive_rng(root: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng
}
