//! Attribute-guided Transformer for zero-shot learning on grid features.
//!
//! Images arrive as `R x C` grids of region features. An encoder refines
//! them with self-attention whose logits are offset by a learned pairwise
//! geometry term, a decoder lets each attribute's semantic vector attend over
//! the refined regions, and the per-attribute features are mapped to scores
//! compared against class signatures. Seen classes train the model; unseen
//! classes are recognized through their signatures alone.
//!
//! Everything runs on a small dense-matrix library with a reverse-mode tape
//! in [`numeric`].

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod train;

pub use config::{Ablation, RunConfig};
pub use data::{generate_synthetic, load_dataset, save_dataset, SyntheticSpec, ZslDataset};
pub use error::{Error, Result};
pub use model::Model;
pub use numeric::{Matrix, Rng};
pub use train::{evaluate, harmonic_mean, train, GzslMetrics, Setting};
