//! Decentralized sparse recovery over communication graphs.
//!
//! A network of agents jointly recovers a sparse vector from private linear
//! measurements by running proximal first-order methods (Prox-DGD and
//! PG-EXTRA) over a mixing graph. The per-iteration step-sizes and
//! regularization weights can either be fixed, grid-tuned, or learned by
//! differentiating through the unrolled iterations ([`unroll`]).
//!
//! Module layout:
//! - [`topology`]: connected graph sampling, Metropolis mixing matrices and
//!   their structural checks.
//! - [`instance`]: problem sampling (sensing matrices, sparse signals,
//!   noise), the NAMSE metric, dataset files.
//! - [`solvers`]: soft-thresholding, the Prox-DGD / PG-EXTRA iteration maps
//!   and trajectory recording.
//! - [`unroll`]: reverse-mode differentiation of the unrolled solver with
//!   respect to the per-iteration schedule, Adam training.
//! - [`diagnostics`]: centralized LASSO oracle, step-size bounds, Lyapunov
//!   descent certification and the measurement-scaling experiment.

// `!(x > 0.0)` is the NaN-rejecting form of the positivity guards.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
mod error;
pub mod instance;
pub mod linalg;
pub mod solvers;
pub mod topology;
pub mod unroll;

pub use error::{Error, Result};

/// Derives an independent per-item seed from a master seed.
///
/// SplitMix64 over `master ^ (index + 1) * phi`; used so batch generation can
/// fan out across workers while staying reproducible.
pub fn split_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ (index.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
