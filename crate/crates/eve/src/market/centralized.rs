//! Centralized clearing used as a reference for the distributed market.
//!
//! Stacks every prosumer's variables into one QP and couples them with the
//! power-balance equality Σ_b p_b = 0 per interval. Budgets are not
//! enforced here: the reference is meaningful exactly when no affordability
//! constraint binds, which is how the equivalence check is stated.

use nalgebra::{DMatrix, DVector};

use crate::resources::eval_cost;
use crate::solver::{solve_qp, QpProblem, SolverError};

use super::subproblem::{assemble, ProsumerBid};
use super::MarketError;

#[derive(Debug, Clone)]
pub struct CentralizedSolution {
    /// Per-prosumer optimal profiles, in bid order.
    pub profiles: Vec<DVector<f64>>,
    /// Sum of true asset costs at the optimum.
    pub total_cost: f64,
}

/// Solves the pooled clearing problem min Σ C_b(p_b) s.t. Σ p_b = 0 and
/// each p_b in its feasible set.
pub fn centralized_clearing(
    bids: &[ProsumerBid],
    horizon: usize,
) -> Result<CentralizedSolution, MarketError> {
    let t = horizon;
    let assembled: Vec<_> = bids
        .iter()
        .map(|b| {
            if b.model.horizon != t {
                return Err(MarketError::Dimension(format!(
                    "bid {} has horizon {}, market runs on {t}",
                    b.id, b.model.horizon
                )));
            }
            Ok(assemble(&b.model))
        })
        .collect::<Result<_, _>>()?;

    // Prosumers without control variables are fixed at p = ℓ; pooling their
    // zero-column constraint rows would only make the KKT system singular.
    for (bid, asm) in bids.iter().zip(&assembled) {
        if asm.n_vars > 0 {
            continue;
        }
        let eq_violation = if asm.b_eq.is_empty() { 0.0 } else { asm.b_eq.amax() };
        let ineq_violation = if asm.h.is_empty() { 0.0 } else { (-asm.h.min()).max(0.0) };
        let violation = eq_violation.max(ineq_violation);
        if violation > 1e-9 {
            return Err(MarketError::Infeasible { prosumer: bid.id.clone(), violation });
        }
    }

    let n_vars: usize = assembled.iter().map(|a| a.n_vars).sum();
    let n_eq: usize =
        assembled.iter().filter(|a| a.n_vars > 0).map(|a| a.b_eq.len()).sum::<usize>() + t;
    let n_ineq: usize =
        assembled.iter().filter(|a| a.n_vars > 0).map(|a| a.h.len()).sum();

    let mut q = DMatrix::zeros(n_vars, n_vars);
    let mut c = DVector::zeros(n_vars);
    let mut a_eq = DMatrix::zeros(n_eq, n_vars);
    let mut b_eq = DVector::zeros(n_eq);
    let mut g = DMatrix::zeros(n_ineq, n_vars);
    let mut h = DVector::zeros(n_ineq);

    let mut col = 0;
    let mut eq_row = 0;
    let mut ineq_row = 0;
    let mut balance_rhs = DVector::zeros(t);
    for asm in &assembled {
        balance_rhs -= &asm.ell_t;
        let nv = asm.n_vars;
        if nv == 0 {
            continue;
        }
        q.view_mut((col, col), (nv, nv)).copy_from(&asm.q);
        c.rows_mut(col, nv).copy_from(&asm.c);
        a_eq.view_mut((eq_row, col), (asm.b_eq.len(), nv)).copy_from(&asm.a_eq);
        b_eq.rows_mut(eq_row, asm.b_eq.len()).copy_from(&asm.b_eq);
        g.view_mut((ineq_row, col), (asm.h.len(), nv)).copy_from(&asm.g);
        h.rows_mut(ineq_row, asm.h.len()).copy_from(&asm.h);
        // Balance rows live at the bottom: Σ_b (profile_b z_b + ℓ_b) = 0.
        a_eq.view_mut((n_eq - t, col), (t, nv)).copy_from(&asm.profile);
        eq_row += asm.b_eq.len();
        ineq_row += asm.h.len();
        col += nv;
    }
    b_eq.rows_mut(n_eq - t, t).copy_from(&balance_rhs);

    let problem = QpProblem { q, c, a_eq, b_eq, g, h };
    let sol = solve_qp(&problem).map_err(|e| match e {
        SolverError::Infeasible { violation } => MarketError::Infeasible {
            prosumer: "pooled".into(),
            violation,
        },
        SolverError::SolverStall { iterations, residual } => MarketError::SolverStall {
            prosumer: "pooled".into(),
            iterations,
            residual,
        },
        SolverError::Dimension(msg) => MarketError::Dimension(msg),
    })?;

    let mut profiles = Vec::with_capacity(bids.len());
    let mut total_cost = 0.0;
    let mut col = 0;
    for (bid, asm) in bids.iter().zip(&assembled) {
        let z = sol.x.rows(col, asm.n_vars).clone_owned();
        let p = &asm.profile * z + &asm.ell_t;
        total_cost += eval_cost(&bid.model, &p)?;
        profiles.push(p);
        col += asm.n_vars;
    }
    Ok(CentralizedSolution { profiles, total_cost })
}
