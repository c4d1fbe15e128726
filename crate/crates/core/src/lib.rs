//! Gradient-sparsity attack and defense laboratory for federated learning.
//!
//! The crate simulates a FedSGD client whose first linear layer has been
//! maliciously initialized (QBI / PAIRS), reconstructs training samples from
//! the resulting batch-averaged gradients, evaluates the closed-form success
//! bounds of such attacks, and applies the AGGP pruning defense.

pub mod attack;
pub mod error;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream};
