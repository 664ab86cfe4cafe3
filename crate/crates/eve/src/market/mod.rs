//! Distributed market clearing.
//!
//! Each aggregator repeatedly solves one small convex program per prosumer
//! against the current price vector, publishes its aggregate profile, and a
//! coordinating aggregator walks the dual variable along the summed
//! aggregate with a diminishing step until prices stop moving and supply
//! meets demand. Billing charges every prosumer the inner product of its
//! dispatched profile with the settled price.

mod centralized;
mod pricing;
mod subproblem;

pub use centralized::{centralized_clearing, CentralizedSolution};
pub use pricing::{run_pricing, ExecutionMode, PricingConfig, PricingOutcome};
pub use subproblem::{solve_subproblem, ProsumerBid, ScheduleMatrix};

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::LedgerError;
use crate::resources::ResourceError;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("prosumer {prosumer}: empty feasible set (violation {violation:.3e})")]
    Infeasible { prosumer: String, violation: f64 },
    #[error("prosumer {prosumer}: inner solver stalled after {iterations} iterations (residual {residual:.3e})")]
    SolverStall {
        prosumer: String,
        iterations: usize,
        residual: f64,
    },
    #[error("aggregator {region} has no aggregate for round {round}")]
    MissingAggregator { region: usize, round: u64 },
    #[error("round timed out with no prior solution to recycle")]
    NoPriorSolution,
    #[error("dimensions disagree: {0}")]
    Dimension(String),
    #[error("bid from {prosumer} is malformed: {message}")]
    BadBid { prosumer: String, message: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
}

/// Price vector over the market horizon, tagged with the dual iteration
/// that produced it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriceVector {
    pub lambda: DVector<f64>,
    pub k: u64,
}

impl PriceVector {
    pub fn new(lambda: DVector<f64>, k: u64) -> Result<Self, MarketError> {
        if !lambda.iter().all(|x| x.is_finite()) {
            return Err(MarketError::Dimension("price vector has non-finite entries".into()));
        }
        Ok(PriceVector { lambda, k })
    }

    pub fn zeros(t: usize) -> Self {
        PriceVector { lambda: DVector::zeros(t), k: 0 }
    }
}

/// Diminishing dual step for iteration `k` (0-based).
pub fn step_size(alpha_hat: f64, k: u64) -> f64 {
    alpha_hat / (k as f64 + 1.0)
}

/// One dual ascent step: λ_{k+1} = λ_k + α Σ_n p⋆⁽ⁿ⁾. Every region in
/// `0..n_regions` must have reported an aggregate of the right length.
pub fn price_update(
    lambda: &PriceVector,
    aggregates: &BTreeMap<usize, DVector<f64>>,
    n_regions: usize,
    alpha: f64,
) -> Result<PriceVector, MarketError> {
    let t = lambda.lambda.len();
    let mut total = DVector::zeros(t);
    for region in 0..n_regions {
        let agg = aggregates
            .get(&region)
            .ok_or(MarketError::MissingAggregator { region, round: lambda.k })?;
        if agg.len() != t {
            return Err(MarketError::Dimension(format!(
                "aggregate of region {region} has length {}, horizon is {t}",
                agg.len()
            )));
        }
        total += agg;
    }
    PriceVector::new(&lambda.lambda + alpha * total, lambda.k + 1)
}

/// True iff the price moved by less than `epsilon` in every interval.
pub fn check_convergence(next: &DVector<f64>, prev: &DVector<f64>, epsilon: f64) -> bool {
    next.len() == prev.len() && (next - prev).amax() < epsilon
}

/// One prosumer's settlement for a window.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BillingEntry {
    pub prosumer: String,
    pub charge: f64,
    pub r_b_before: f64,
    pub r_b_after: f64,
}

/// Settle one region's dispatched schedule at the final price:
/// r_b ← r_b + p⋆ᵀλ⋆ per prosumer. Rows with positive inner product gain
/// funds; the rest pay.
pub fn billing_update(
    schedule: &ScheduleMatrix,
    lambda_star: &DVector<f64>,
    budgets: &mut BTreeMap<String, f64>,
) -> Vec<BillingEntry> {
    let mut entries = Vec::with_capacity(schedule.prosumers.len());
    for (i, prosumer) in schedule.prosumers.iter().enumerate() {
        let charge = schedule.p.row(i).transpose().dot(lambda_star);
        let before = budgets.get(prosumer).copied().unwrap_or(0.0);
        let after = before + charge;
        budgets.insert(prosumer.clone(), after);
        entries.push(BillingEntry {
            prosumer: prosumer.clone(),
            charge,
            r_b_before: before,
            r_b_after: after,
        });
    }
    entries
}
