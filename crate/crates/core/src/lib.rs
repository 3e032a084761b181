//! Simulation, HD-Space collection, dataset, policy, training and
//! evaluation for the 2D manipulation lab.

pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod expert;
pub mod hdspace;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod trainer;
pub mod verify;

pub use error::{Error, ErrorClass, Result};
