//! Differentially private training of a toy image captioner.
//!
//! The crate covers the full pipeline at desk scale: Rényi-DP accounting for
//! Poisson-subsampled Gaussian noise ([`accountant`]), privacy/compute
//! trade-off planning ([`planner`]), a small reverse-mode layer library
//! ([`nn`]), per-sample gradient norms without per-sample gradients
//! ([`ghost`]), the noisy AdamW update ([`dpsgd`]), an encoder–decoder
//! captioner with a procedural dataset ([`captioner`]) and zero-shot / linear
//! probe evaluation ([`eval`]).

pub mod accountant;
pub mod captioner;
pub mod dpsgd;
pub mod error;
pub mod eval;
pub mod ghost;
pub mod nn;
pub mod planner;
pub mod rng;

pub use accountant::{Accountant, Conversion, EpsilonReport, MechanismParams, PrivacySpec, RdpCurve, RdpPoint};
pub use error::{Error, Result};
