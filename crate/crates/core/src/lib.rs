//! Cross-modal collaborative quantization.
//!
//! Paired two-modality features are mapped into a shared latent space
//! (sparse coding for modality A, matrix factorization for modality B, and
//! a transform aligning the two), each modality is compressed with a
//! composite quantizer whose reconstructions are pulled toward their
//! partner's, and cross-modal nearest-neighbour queries are answered with
//! per-query distance tables.

pub mod common_space;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod kmeans;
pub mod model_io;
pub mod quantizer;
pub mod search;
pub mod solvers;
pub mod synth;
pub mod trainer;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use data::{expand_codes, CodeMatrix, DenseMatrix, LabelSet, Modality, PairedDataset};
pub use error::{Error, Result};
