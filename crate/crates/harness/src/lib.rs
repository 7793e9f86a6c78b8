//! Configuration, orchestration, persistence and reporting.
//!
//! A run is a pure function of its [`config::RunConfig`]: the master seed
//! fixes every random draw, and results do not depend on the worker count.

pub mod config;
pub mod container;
pub mod costs;
pub mod pipeline;
pub mod results;
pub mod report;

pub use costs::energy_table;
