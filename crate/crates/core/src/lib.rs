//! Material retrieval from object images.
//!
//! The crate synthesizes paired (object render, material swatch) datasets
//! from procedural PBR materials, trains an image encoder and a material
//! encoder into one embedding space with a contrastive objective, and
//! retrieves gallery materials for a query image by exhaustive similarity
//! search.
//!
//! With the default `parallel` feature, per-pixel, per-sample and per-query
//! loops run on rayon; without it they run sequentially with bit-identical
//! results.

pub mod encoder;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod index;
pub mod material;
pub mod math;
pub mod par;
pub mod renderer;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
