//! Feasibility models and simulators for a storage-ring trapped-ion
//! quantum computer.
//!
//! - [`physcore`]: constants, species registry, ring configurations
//! - [`budget`]: closed-form feasibility estimates
//! - [`crystal`]: Coulomb-crystal equilibria and normal modes
//! - [`dynamics`]: stochastic laser cooling on the ring orbit
//! - [`gates`]: pulse scheduling and two-level Rabi evolution
//! - [`tracking`]: bright/dark isotope fingerprinting of the ion chain

pub mod budget;
pub mod crystal;
pub mod dynamics;
pub mod gates;
pub mod physcore;
pub mod tracking;

pub use physcore::{load_species, IonSpecies, RingConfig};
