//! Experiment engine: dataset ingestion, seeded training and evaluation,
//! ablation and sweep protocols, corpus analysis, and run records.

mod analyze;
mod config;
mod dataset;
mod record;
mod sweep;
mod train;

pub use analyze::*;
pub use config::*;
pub use dataset::*;
pub use record::*;
pub use sweep::*;
pub use train::*;
