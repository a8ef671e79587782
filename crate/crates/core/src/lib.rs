//! Parameter-efficient fine-tuning with a three-pathway adapter toolbox and
//! Fisher-information module gating, on a toy ViT and a synthetic
//! multi-domain segmentation benchmark.

pub mod backbone;
pub mod error;
pub mod fisher_gate;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod toolbox;
pub mod train;

pub use error::{Error, Result};
pub use model::Model;
