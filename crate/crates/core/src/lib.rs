//! Training classifiers together with a policy for when to ask a human.
//!
//! Two families of human–machine teams are provided:
//!
//! - [`discriminative`]: a prediction network and a query network, trained either in
//!   sequence (fixed) or end-to-end on a mixture loss (joint);
//! - [`voi`]: three Platt-calibrated probabilistic models combined through an exact
//!   value-of-information rule, trained either independently (fixed) or fine-tuned
//!   end-to-end through a soft VOI surrogate (joint).
//!
//! [`evaluation`] runs cost sweeps, baselines and error analyses over them, and
//! [`cli`] drives everything from a JSON run configuration.

pub mod calibration;
pub mod cli;
pub mod data;
pub mod discriminative;
pub mod error;
pub mod evaluation;
pub mod numerics;
mod objectives;
pub mod team;
pub mod verify;
pub mod voi;

pub use error::{Error, Result};
pub use objectives::{with_human_one_hot, Target, WeightedCe};
