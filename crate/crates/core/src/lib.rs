//! Preference optimization with latent-environment discovery and cross-environment MMD
//! invariance, on small differentiable policies over synthetic confounded data.
//!
//! Modules build bottom-up: [`model`] and [`preference`] give the policy and the DPO objective,
//! [`environments`] and [`divergence`] give per-batch environment discovery and the invariance
//! penalty, [`trainer`] combines them, and [`causal`], [`evalrec`] and [`recsim`] supply
//! ground-truth checks, evaluation splits and the synthetic recommendation task.

pub mod causal;
pub mod divergence;
pub mod environments;
pub mod error;
pub mod evalrec;
pub mod linalg;
pub mod model;
pub mod preference;
pub mod recsim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
