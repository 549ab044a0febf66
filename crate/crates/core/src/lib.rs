//! Disentangled, domain-invariant representation learning.
//!
//! Two encoders split each image into identity-specific and domain-specific
//! factors. Adversarial maximum-entropy heads keep each factor blind to the
//! other label, and a backdoor-adjustment block trains identity prediction
//! over sampled or interpolated domain factors. Everything runs on a small
//! deterministic CPU autograd engine.

pub mod autograd;
pub mod backdoor;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod scm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
