//! Flat equilibria, stability analysis and transformed-domain simulation of compressible
//! two-phase Darcy flow in a vertical capillary with a sharp, surface-tension-loaded interface.
//!
//! Phase 1 occupies the bottom `(−h̲, h)`, phase 2 the top `(h, h̄)`. Jumps are `[[f]] = f₂ − f₁`
//! evaluated at the interface.

pub mod cli;
pub mod config;
pub mod eos;
pub mod equilibria;
pub mod geometry;
pub mod linops;
pub mod error;
pub mod numerics;
pub mod output;
pub mod simulator;
pub mod stability;

pub use error::{Error, Result};
