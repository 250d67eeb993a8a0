//! Ordinal constraint hashing.
//!
//! Learns `r`-bit binary codes whose Hamming distances preserve the ranking
//! relations of the input data. Training runs in four stages:
//!
//! 1. K-means shrinks the training set to `L` centers ([`clustering`]).
//! 2. The Gram matrix of the training data is eigendecomposed and its top
//!    `d_svd` eigenvectors form a projection `Z` ([`ocp`]).
//! 3. Triplet constraints among the embedded centers are read off the
//!    tensor ordinal graph `S ⊗ DS` without ever materializing it
//!    ([`ordinal_graph`]).
//! 4. A row-orthonormal `V` is learned by stochastic gradient descent on the
//!    Stiefel manifold against a sigmoid relaxation of the triplet violations
//!    ([`optimizer`]).
//!
//! The resulting hash function is `sgn(Vᵀ Z x)` ([`encoder`]). The
//! [`evaluation`] module implements Hamming-ranking retrieval metrics and a
//! benchmark runner that compares against a random-projection LSH baseline.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod ocp;
pub mod optimizer;
pub mod ordinal_graph;
pub mod pipeline;

pub use error::{Error, Result};
