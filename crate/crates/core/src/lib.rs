//! Numerical workbench for the strongly asynchronous slotted massive access
//! channel: divergences and Chernoff exponents, rate-region evaluation,
//! massive identification, and desk-scale Monte Carlo of the decoders.

pub mod assignment;
pub mod cli;
pub mod error;
pub mod graph;
pub mod identification;
pub mod prob;
pub mod regions;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use prob::{Channel, Distribution, TypeComposition};
