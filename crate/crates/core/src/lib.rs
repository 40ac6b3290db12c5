//! Tiled-view vision-language pipeline at desk scale: image tiling, a small
//! ViT encoder, an MLP projector, a byte-level causal decoder with LoRA,
//! two-phase training, an analytic cost model and a synthetic eval harness.

pub mod cost;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod grid;
pub mod image;
pub mod manifest;
mod nn;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use pipeline::{build_pipeline, Pipeline, PipelineConfig, Stage};
