//! Visual-similarity analysis of writing systems.
//!
//! The crate covers the whole pipeline: glyph corpus loading and
//! preprocessing, label-preserving augmentation, a two-pathway encoder
//! (residual CNN + shifted-window transformer fused through a projection
//! head), self-supervised contrastive training of seeded ensembles,
//! consensus embeddings, and the statistical and structural analysis of
//! cross-script cosine similarity.
//!
//! Data-parallel inner loops (per-sample convolutions, attention windows,
//! per-image preprocessing, pairwise similarity) run on rayon when the
//! `parallel` feature is enabled (the default) and fall back to plain
//! sequential iteration otherwise.

pub mod analysis;
pub mod augment;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod explain;
pub mod model;
pub mod nn;
pub mod par;
pub mod plot;
pub mod raster;
pub mod rng;
pub mod structure;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
