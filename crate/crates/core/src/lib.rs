//! Cycle-level and analytical models of a weight-stationary systolic
//! inference accelerator, with the workloads, compiler and sweeps used to
//! study it.

pub mod analysis;
pub mod archconfig;
pub mod dse;
pub mod funcsim;
pub mod isa;
pub mod workloads;
pub mod lowering;
pub mod timesim;
