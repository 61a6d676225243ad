//! Desk-scale gaze-gated causal video diffusion.
//!
//! The crate is organized around the training pipeline of a miniature
//! text+video conditioned diffusion model:
//!
//! - [`tape`]: reverse-mode autodiff over f64 `ndarray` tensors.
//! - [`nn`]: parameter store, optimizer, and layer primitives.
//! - [`diffusion`]: noise schedules, forward/reverse processes, losses.
//! - [`encoder`]: frozen deterministic text/vision/metric embedders.
//! - [`backbone`]: miniature 3D-UNet noise predictor with post-TA hooks.
//! - [`causal`]: training-only CTS/CTG blocks (gaze-gated token selection
//!   and answer-grounded token classification).
//! - [`gaze`]: fixation ingestion, gaze-map rendering, gaze tokenization.
//! - [`scenario`]: synthetic accident scenario generator and manifests.
//! - [`training`]: three-stage recipe, checkpoint chaining, loss logs.
//! - [`infer`]: T2V / V2V sampling with hooks detached.
//! - [`metrics`]: alignment score, temporal consistency, Fréchet distance,
//!   and the causal-editing affordance ratio.

pub mod backbone;
pub mod causal;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod gaze;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Grads, NodeId, Tape};
