//! Dynamics of a continuously pumped spin ensemble subject to magnetic feedback.
//!
//! The feedback closes a loop between the transverse spin polarization and the
//! field it precesses in, which destabilizes the usual pumped steady state and
//! produces self-sustained oscillation, bistability, multi-peaked limit cycles
//! and chaos. This crate nondimensionalizes the equations of motion, integrates
//! them, locates equilibria and periodic orbits, measures oscillation phases
//! over ensembles of runs, and maps the resulting phases across parameter space.

pub mod ctc;
pub mod equilibria;
pub mod integrate;
pub mod model;
pub mod orbits;
pub mod seeding;
pub mod sweep;

pub use model::{DimensionlessParams, PhysicalParams, SpinState};
