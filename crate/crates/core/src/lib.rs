//! Privacy-preserving, Byzantine-robust gradient aggregation.
//!
//! Gradients are masked into two shares (g+r, g-r) with noise vectors whose
//! pairwise squared distances are all a known constant C; two non-colluding
//! workers compute pairwise distances on the shares they hold and the
//! enclave decodes their sum into an order-preserving affine image of the
//! true distances, which Multi-Krum consumes directly. The crate bundles:
//!
//! - [`model`]: domain types and exact vector arithmetic
//! - [`codebook`]: constant-distance noise codebooks and the NCBK file format
//! - [`codec`]: two-share encoding, per-worker distances, distance decoding
//! - [`krum`]: Multi-Krum scoring, selection, and aggregation
//! - [`leakage`]: Gaussian-channel leakage bounds and noise calibration
//! - [`seal`]: authenticated sealed channels between roles
//! - [`protocol`]: the multi-role round simulator
//! - [`trainer`]: a least-squares federated training harness with attacks

pub mod codebook;
pub mod codec;
pub mod error;
pub mod krum;
pub mod leakage;
pub mod model;
pub mod protocol;
pub mod seal;
pub mod trainer;

pub use error::{Error, Result};
