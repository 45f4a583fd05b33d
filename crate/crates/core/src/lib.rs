//! Discrete-target flow matching: closed-form optimal velocity fields, generation
//! dynamics, convex-region geometry, the OSDNet decomposition and its training loops.

mod error;

pub mod data;
pub mod dynamics;
pub mod exec;
pub mod field;
pub mod geometry;
pub mod osdnet;
pub mod paths;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod subspace;
pub mod trainer;
pub mod verify;

pub use data::{DataFormat, DataMatrix};
pub use error::{Error, Result};
pub use field::VelocityField;
pub use paths::PathSchedule;
pub use rng::RngSpec;
pub use subspace::SubspaceBasis;
