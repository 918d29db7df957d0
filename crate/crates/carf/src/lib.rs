//! Learned-bitwidth quantization for neural fields.
//!
//! Every weight tensor and inter-layer activation of a small hash-grid field
//! model carries a fake quantizer whose bitwidth is itself a trained,
//! continuous parameter. Training alternates between fitting the model under
//! quantization noise and pushing bitwidths down against a quality target, so
//! the final mixed-precision assignment adapts to the content being fitted.
//!
//! Crate layout:
//! - [`tensor`], [`autodiff`], [`optim`]: a minimal deterministic f32 tape
//!   engine with exactly the primitives the pipeline needs.
//! - [`quant`]: the fake quantizer (three grid schemes, trainable bitwidth /
//!   range / ceiling, analytic straight-through gradients).
//! - [`field`]: hash-grid encoder, direction encoding, MLP heads, and the
//!   component registry that assigns one quantizer per tensor/activation.
//! - [`scene`]: procedural 2D/3D reference content, cameras, sampling, and
//!   image I/O.
//! - [`train`]: full-precision fitting, calibration, and the adversarial
//!   bitwidth loop.
//! - [`metrics`], [`report`]: quality/complexity accounting and run reports.
//! - [`intmodel`]: integer export container and the integer inference path.
//! - [`config`], [`checkpoint`], [`cli`]: run configuration and the command
//!   layer used by the `carf` binary.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod intmodel;
pub mod metrics;
pub mod optim;
pub mod quant;
pub mod report;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
