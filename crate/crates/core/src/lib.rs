//! Closed-form bag-of-paths statistics on weighted directed graphs.
//!
//! Given a graph and an inverse temperature `β`, every quantity is derived
//! from the fundamental matrix `Z = (I - W)⁻¹` of the weight matrix
//! `W = P_ref ∘ exp(-β C)`: constrained path weights, presence and occurrence
//! moments, the eight covariance/correlation kernels, betweenness measures and
//! the bag-of-paths distance. The [`oracle`] module re-derives all of them by
//! summing paths explicitly.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod graph;
pub mod measures;
pub mod oracle;
pub mod paths;
pub mod ssl;

pub use error::{Error, Result};
pub use graph::{build_weight_matrix, spectral_radius, validate_weight_matrix, Edge, WeightMatrix, WeightedGraph};
pub use measures::{
    absorption_probability, bop_distance, cooccurrence_moments, copresence_moments, kernel, occurrence_betweenness,
    presence_betweenness, KernelMatrix, KernelMethod, MomentSet, Statistic,
};
pub use paths::{fundamental_matrix, Framework, PairForm, PathWeightTables};
