//! Adaptive rank allocation for dense linear layers and MLP blocks.
//!
//! A linear layer `W x` is replaced by `A (m(x) ⊙ B x)`, where `A`, `B` come
//! from an activation-aware low-rank factorization and `m(x)` is an
//! input-dependent binary mask over ranks. MLP blocks combine rank-adapted
//! Up/Gate projections with neuron thresholding on the Down projection, and
//! a FLOP allocator distributes a compute budget across the pieces.
//!
//! Module map:
//! - [`tensor`]: dense matrices, products, thin SVD, quantiles.
//! - [`decomposition`]: activation-aware factorization and rank contributions.
//! - [`maskers`]: B-masker, neuron thresholding, sigmoid-MLP masker, oracle top-k.
//! - [`adapters`]: rank-adapted linear layers, RaNA MLPs and baseline adapters.
//! - [`flops`]: FLOP accounting and instrumented op tallies.
//! - [`allocation`]: per-layer line search and per-MLP grid search.
//! - [`evaluation`]: normalized error, sparsity histograms, adapter comparison.
//! - [`kernels`]: masked GEMV and its latency harness.
//! - [`toy`]: seeded toy MLPs and transformers used for desk-scale studies.
//!
//! Batch work goes through [`exec::Exec`]. With the `parallel` feature (on by
//! default) it fans out over rayon; without it every path is sequential.
//! Results are identical either way.

pub mod adapters;
pub mod allocation;
pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod flops;
pub mod kernels;
pub mod maskers;
pub mod tensor;
pub mod toy;

pub use error::{RanaError, Result};
pub use exec::Exec;
pub use tensor::Matrix;
