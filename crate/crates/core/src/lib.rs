//! Discrete-observation hidden Markov models and their compression.
//!
//! The crate covers the full pipeline used to study low-bit HMMs:
//!
//! * [`hmm`]: the model triple (initial, transition, emission), validation,
//!   scaled forward/backward inference and ancestral sampling.
//! * [`compression`]: ratio pruning, layer-wise integer quantization,
//!   fixed-point linear quantization, Norm-Q (linear quantization with
//!   row-wise ε-normalization on read), weighted 1-D K-means and row KL.
//! * [`training`]: Baum-Welch EM over chunked corpora and quantization-aware
//!   EM with a configurable quantization interval.
//! * [`metrics`]: sparsity sweeps, compression rates, LLD gaps and model
//!   comparisons.
//! * [`decode`]: keyword DFAs, HMM backward guidance tables and the
//!   constraint success rate.
//! * [`io`]: the binary model format, corpus files.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Results never depend on the number of worker threads.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod compression;
pub mod decode;
pub mod error;
pub mod hmm;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod par;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use hmm::{HmmModel, TokenSequence};
pub use matrix::Matrix;
