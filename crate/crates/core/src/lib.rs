//! Lesion classification by fusing local patch embeddings with global
//! saliency context.
//!
//! The pipeline: a synthetic dataset ([`data`]) feeds a patch classifier
//! ([`local`]) and a whole-image context network ([`context`]); their outputs
//! are rasterized onto a coarse grid ([`maps`]) and consumed by the
//! aggregation network ([`agg`]). [`train`] and [`eval`] implement the
//! training protocol and the lesion-level metrics.

pub mod agg;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod local;
pub mod maps;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod train;

pub use error::{Error, Result};
