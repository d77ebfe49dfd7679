//! Conditional neural processes (CNP) and conditional graph neural processes
//! (CGNP) for 1-D function regression.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: dense matrices, a reverse-mode tape with exact backward
//!   rules, batch normalization, the Gaussian likelihood and Adam.
//! - [`gpgen`]: Gaussian-process episode generation (exponentiated quadratic
//!   kernel, Cholesky sampling, train batches and grid test episodes).
//! - [`rgraph`]: radius neighbourhood bipartite graphs, the bipartite graph
//!   convolution and mean pooling.
//! - [`npmodels`]: the CNP and CGNP encoder/decoder stacks.
//! - [`trainer`]: the training loop and test metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gpgen;
pub mod npmodels;
pub mod numkit;
pub mod rgraph;
pub mod trainer;

pub use error::{Error, Result};
