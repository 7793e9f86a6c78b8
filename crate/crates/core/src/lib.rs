//! Core numerics for heterogeneous reservoir benchmarks.
//!
//! The crate is organised by pipeline stage: stimulus synthesis, network
//! construction, rate and spiking dynamics, the task family, ridge readouts,
//! state analysis and cost models. Every random draw goes through
//! [`seed::SeedScheme`] so a whole experiment is a pure function of one
//! master seed.

pub mod analysis;
pub mod dynamics;
pub mod energy;
mod linalg;
pub mod readout;
pub mod seed;
pub mod stimgen;
pub mod taskbench;
pub mod topology;
