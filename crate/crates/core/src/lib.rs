//! Melting-temperature change (ΔTm) regression from precomputed protein
//! language-model embeddings.
//!
//! The crate trains small fusion heads on frozen backbone features:
//!
//! * [`math`]: dense kernels and a gradient tape with hand-derived backward rules
//! * [`heads`]: track projection, the outer-product and LayerNorm-difference
//!   heads, four ablation heads, and their two-head ensemble
//! * [`optim`]: Adam, OneCycle learning-rate schedule, global-norm clipping
//! * [`data`]: mutation records, dataset text format, DTME embedding files,
//!   synthetic embeddings
//! * [`splitter`]: homology-aware train/validation splitting
//! * [`metrics`]: Pearson r, MAE, RMSE
//! * [`trainer`]: losses, the training loop, evaluation and checkpoints
//! * [`gradcheck`]: finite-difference verification of every head
//! * [`run`]: run directories and manifests used by the `dtm` binary

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod run;
pub mod splitter;
pub mod trainer;

pub use error::{Error, Result};
