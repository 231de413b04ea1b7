//! Optimal-transport scoring of training-sample permutations.

pub mod grouping;
pub mod harness;
pub mod rng;
pub mod sequencing;
pub mod shell;
pub mod theory;
pub mod transport;
