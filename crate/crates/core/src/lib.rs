//! iodlab-core: a desk-scale laboratory for incremental object detection.
//!
//! The crate implements the full experiment stack in plain Rust:
//!
//! * [`tensor`]: dense tensors with a reverse-mode autodiff tape, generic
//!   over `f32` (training) and `f64` (finite-difference verification);
//! * [`store`] / [`optim`]: named parameter stores with freeze sets,
//!   checkpoint serialization, and AdamW;
//! * [`scene`]: seeded synthetic scene generation across domain styles,
//!   plus the task-incremental data protocol;
//! * [`detector`]: a miniature two-stage query detector (backbone, encoder,
//!   proposal selection, decoder, per-stage heads);
//! * [`lora`]: low-rank adapters injected into attention and MLP projections;
//! * [`matching`] / [`losses`]: Hungarian assignment, focal / GIoU / L1
//!   losses, and the base and incremental loss assemblies;
//! * [`dualpath`]: the frozen-localization / adapted-classification model;
//! * [`replay`]: Gaussian pseudo-feature statistics, sampling, persistence;
//! * [`evaluation`]: mAP / mAR harness;
//! * [`trainer`]: pretraining, per-task training loops, run orchestration;
//! * [`config`]: run configuration files and validation.

pub mod boxes;
pub mod config;
pub mod detector;
pub mod dualpath;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod iodf;
pub mod lora;
pub mod losses;
pub mod matching;
pub mod optim;
pub mod replay;
pub mod scene;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
