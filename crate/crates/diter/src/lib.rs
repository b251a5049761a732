//! Fluid-diffusion ("D-iteration") solver for PageRank-style fixed points
//! `X = d Q X + (1-d) V`, together with a deterministic, time-stepped
//! simulator of the same computation split across several asynchronous
//! compute units that exchange fluid by messages.

pub mod graph;
pub mod oracle;
pub mod partition;
pub mod sim;
pub mod solver;
pub mod sweep;
pub mod synth;

pub use graph::Graph;
pub use partition::Partition;
pub use solver::{SolverConfig, SolverState};
