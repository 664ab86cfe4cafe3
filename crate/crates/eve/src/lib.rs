//! Transactive-energy market simulator.
//!
//! The pipeline clears a day-ahead-style local energy market by distributed
//! dual decomposition across aggregators, verifies the resulting power
//! injections against sensor data with a robust consensus algorithm that
//! isolates false-data injectors, and records every step on a simulated
//! two-tier permissioned ledger.

pub mod grid;
pub mod ledger;
pub mod market;
pub mod resources;
pub mod solver;
pub mod verification;
