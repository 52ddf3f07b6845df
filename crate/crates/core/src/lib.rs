//! Segmented learning-from-demonstration on a deterministic corridor-pushing
//! world: scripted demonstrations are split at a critical point into pre-,
//! corrective- and post-movement primitives, each learned by a conditional
//! neural movement primitive (CNMP), and compared against an equal-parameter
//! monolithic baseline.

pub mod cli;
pub mod cnmp;
pub mod context_ae;
pub mod dataset;
pub mod demo;
pub mod nn;
pub mod pipeline;
pub mod selftest;
pub mod sim;
