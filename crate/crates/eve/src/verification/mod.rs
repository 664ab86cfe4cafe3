//! Robust state verification across aggregator regions.
//!
//! After a window is dispatched and metered, every aggregator fits a local
//! estimate of its slice of the network state against three pulls: its own
//! sensor readings, the linearized branch-flow physics, and the schedule it
//! settled on the ledger. Regions sharing tie-line variables reconcile the
//! overlapping coordinates through consensus iterations; all cross-region
//! traffic flows over the common ledger channel under access control.
//!
//! Alongside the consensus loop, each region scores how much its neighbors'
//! shared-variable messages disagree with its own estimates. The scores are
//! row-normalized into a stochastic matrix whose left principal eigenvector
//! ranks the regions by distrust; a stable, clearly separated maximum names
//! a false-data injector. The loop ends either with every region's estimate
//! settled (verified injections and schedule deviations are reported) or
//! with an identified attacker, who is removed before the loop restarts on
//! the surviving regions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::RegionMatrices;
use crate::ledger::LedgerError;

mod admm;
mod detection;
mod run;

#[cfg(test)]
mod tests;

pub use admm::{
    admm_consensus_update, admm_init, admm_x_update, initial_x, x_update_matrix,
};
pub use detection::{
    check_termination, disagreement_row, disagreement_update, excluded_stats, trust_scores,
    DetectionState, Termination,
};
pub use run::{
    collect_region_inputs, run_verification, EdgeConduct, HonestParticipants, PiSample,
    RegionInputs, Saboteur, VerificationReport,
};

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error("region {region}: estimation matrix is not positive definite; some coordinate is unmeasured, unconstrained, and unshared")]
    SingularSystem { region: usize },
    #[error("trust power iteration did not converge within {iterations} iterations; the communication graph may lack a 3-clique")]
    NoConvergence { iterations: usize },
    #[error("removing {removed:?} disconnected the communication graph")]
    GraphDisconnected { removed: Vec<usize> },
    #[error("only {alive} regions left; verification needs at least 2")]
    InsufficientRegions { alive: usize },
    #[error("verification hit the iteration cap of {iterations} without terminating")]
    IterationLimit { iterations: u64 },
    #[error("region {region} missing record {key} at iteration {iter}")]
    MissingRecord { region: usize, key: String, iter: u64 },
    #[error("{0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Smoothing weight schedule for the disagreement recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSchedule {
    /// α_k = 1/k: turns the score into a running average that keeps early
    /// transients visible.
    Reciprocal,
    /// Fixed α ∈ (0, 1]: exponential forgetting.
    Constant(f64),
}

impl AlphaSchedule {
    /// Weight for iteration `k` (1-based).
    pub fn at(&self, k: u64) -> f64 {
        match self {
            AlphaSchedule::Reciprocal => 1.0 / k.max(1) as f64,
            AlphaSchedule::Constant(a) => *a,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerificationConfig {
    /// Weight on the measurement misfit.
    pub c1: f64,
    /// Weight on the physics residual.
    pub c2: f64,
    /// Weight on the schedule misfit.
    pub c3: f64,
    /// Weight coupling the consensus variables.
    pub c4: f64,
    /// Convergence tolerance on the per-region step, ∞-norm.
    pub epsilon: f64,
    /// Stability tolerance on the trust vector, ∞-norm.
    pub epsilon_pi: f64,
    /// How many excluded standard deviations above the excluded mean a trust
    /// entry must sit to be called an attacker.
    pub beta: f64,
    /// Disagreement smoothing schedule.
    pub alpha: AlphaSchedule,
    /// Power-iteration convergence tolerance.
    pub eig_tol: f64,
    /// Power-iteration cap. Generous: one attacker dominating every honest
    /// row makes the matrix nearly periodic, and the iteration then needs
    /// many passes to damp the oscillating mode.
    pub eig_max_iters: usize,
    /// Additive guard on row sums when normalizing disagreements.
    pub denom_guard: f64,
    /// Hard cap on total consensus iterations across restarts.
    pub max_iters: u64,
    /// Start the estimates at zero instead of backfilling measurements.
    pub zero_init: bool,
    /// Wall-clock allowance for threaded workers waiting on a peer record.
    pub poll_timeout: f64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            c1: 1.0,
            c2: 1.0,
            c3: 0.5,
            c4: 0.5,
            epsilon: 1e-3,
            epsilon_pi: 1e-3,
            beta: 2.0,
            alpha: AlphaSchedule::Reciprocal,
            eig_tol: 1e-10,
            eig_max_iters: 50_000,
            denom_guard: 1e-16,
            max_iters: 5000,
            zero_init: false,
            poll_timeout: 60.0,
        }
    }
}

impl VerificationConfig {
    /// Preset that nearly ignores the schedule pull, for runs where a tight
    /// schedule fit would mask what the sensors actually say.
    pub fn strict_verification() -> Self {
        VerificationConfig { c3: 1e-3, ..VerificationConfig::default() }
    }

    pub fn validate(&self) -> Result<(), VerificationError> {
        let weights = [("c1", self.c1), ("c2", self.c2), ("c3", self.c3), ("c4", self.c4)];
        for (name, w) in weights {
            if !(w > 0.0) {
                return Err(VerificationError::Config(format!("{name} must be positive, got {w}")));
            }
        }
        let tols = [
            ("epsilon", self.epsilon),
            ("epsilon_pi", self.epsilon_pi),
            ("eig_tol", self.eig_tol),
            ("denom_guard", self.denom_guard),
        ];
        for (name, t) in tols {
            if !(t > 0.0) {
                return Err(VerificationError::Config(format!("{name} must be positive, got {t}")));
            }
        }
        if let AlphaSchedule::Constant(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(VerificationError::Config(format!("constant α must be in (0,1], got {a}")));
            }
        }
        Ok(())
    }
}

/// One region's consensus-estimation state over a window of `T` intervals.
/// Columns index intervals; rows follow the region's local coordinate order.
#[derive(Debug, Clone)]
pub struct RegionState {
    /// Current estimate x⁽ⁿ⁾, one column per interval.
    pub x: DMatrix<f64>,
    /// Neighbor average of the shared coordinates; zero where nothing is
    /// shared.
    pub psi: DMatrix<f64>,
    /// Consensus memory driving the next estimate through the D-weighted
    /// term.
    pub upsilon: DMatrix<f64>,
    /// Completed consensus iterations.
    pub k: u64,
    /// Selector and physics matrices for this region.
    pub matrices: RegionMatrices,
    /// Sensor readings, one row per measured coordinate.
    pub z: DMatrix<f64>,
    /// Measurement noise variance per measured coordinate.
    pub sigma_z: DVector<f64>,
    /// Scheduled injections for the region's own buses.
    pub p_star: DMatrix<f64>,
}

impl RegionState {
    pub fn horizon(&self) -> usize {
        self.x.ncols()
    }

    /// The shared-coordinate slice this region would send to neighbor `m`.
    pub fn slice_for(&self, m: usize) -> Option<DMatrix<f64>> {
        self.matrices.s_nm.get(&m).map(|s| s * &self.x)
    }

    /// Verified injections at the region's own buses.
    pub fn injections(&self) -> DMatrix<f64> {
        &self.matrices.s_p * &self.x
    }

    /// Schedule minus verified injections.
    pub fn deviations(&self) -> DMatrix<f64> {
        &self.p_star - self.injections()
    }

    /// Relabels neighbor bookkeeping after regions leave the graph.
    pub fn retain_neighbors(&mut self, alive: &std::collections::BTreeSet<usize>) {
        self.matrices.shared.retain(|m, _| alive.contains(m));
        self.matrices.s_nm.retain(|m, _| alive.contains(m));
        self.matrices.recompute_d();
    }
}

/// Convenience alias for a per-neighbor map of shared-coordinate slices.
pub type SliceMap = BTreeMap<usize, DMatrix<f64>>;
