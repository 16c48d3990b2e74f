//! Deterministic simulation of checkpoint and firmware-deploy atomicity under
//! crash-recovery failures.
//!
//! A run is a pure function of its configuration and seed. The kernel in
//! [`sim`] drives per-component [`persistence`] processes; [`protocols`]
//! implements the checkpoint protocols on top of it, [`adversary`] builds the
//! schedules that break the naive one, and [`deploy`] does the same for fleet
//! firmware transitions. [`lattice`] and [`optimizer`] hold the analytic side.

pub mod adversary;
pub mod cli;
pub mod deploy;
pub mod error;
pub mod lattice;
pub mod optimizer;
pub mod persistence;
pub mod protocols;
pub mod report;
pub mod sim;

pub use error::{AdversaryError, DeployError, LatticeError, OptimizerError, PersistError, SimError};
