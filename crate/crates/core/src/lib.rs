//! Pattern-guided diffusion forecasting.
//!
//! Archetypal patterns are extracted from training frames, future pattern
//! coefficients are predicted in archetype space, and the lifted prediction
//! conditions a DDPM denoiser through classifier-free guidance whose scale
//! shrinks as the history moves away from the archetype hull.

pub mod archetypal;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
pub use exec::Execution;
