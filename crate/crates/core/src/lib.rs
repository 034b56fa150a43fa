//! Quality assurance for 2D/3D registration results.
//!
//! The crate covers the full loop: synthetic labeled X-ray/DRR pairs
//! ([`phantom`]), an early-fusion convolutional verifier with bidirectional
//! cross-attention ([`model`]), Grad-CAM heatmaps and split conformal
//! prediction sets ([`explain`]), cross-validated evaluation ([`eval`]) and
//! session orchestration for operator review studies ([`review`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod explain;
mod hashing;
pub mod imageio;
pub mod model;
pub mod phantom;
pub mod pose;
pub mod review;
pub mod rng;

pub use error::{Error, Result};
pub use hashing::{bytes_hash, config_hash};
pub use pose::{RegistrationLabel, RigidTransform};
