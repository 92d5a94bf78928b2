//! Masked-region reuse for image classification: mask generation, reuse
//! image composition, dual-branch fusion models, entropy and similarity
//! analysis, Grad-CAM, and the experiment harness behind the CLI.

pub mod cli;
pub mod error;
pub mod explain;
pub mod harness;
pub mod image;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reuse;
pub mod seed;

pub use error::{Error, Result};
