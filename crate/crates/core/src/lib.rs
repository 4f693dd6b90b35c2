//! Cross-domain semantic segmentation with dual-style students, a domain
//! disentangled module, adversarial feature alignment and EMA self-training.
//!
//! The crate is organised bottom-up: [`nn`] holds the tensor primitives,
//! [`ddm`] the disentangling math, [`network`] the students and
//! discriminators, [`selftrain`] the teachers, [`losses`] the objective,
//! [`train`] the optimisation loop and checkpoints, and [`metrics`] the
//! evaluation protocol. [`data`] produces patches and [`cli`] binds it all.

pub mod cli;
pub mod data;
pub mod ddm;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod selftrain;
pub mod train;

pub use error::{Error, Result};
