//! Per-prosumer clearing subproblem.
//!
//! Every asset's description is already affine (p = Au + ℓ with box bounds),
//! so the response to a price is a small dense QP over the control vector
//! plus a handful of helper variables: split variables for the positive and
//! negative parts of a piecewise-linear tariff, and an epigraph variable
//! for a deferral credit. Pinned bounds become equalities so the
//! interior-point kernel keeps a strict interior to work in.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::resources::{AssetKind, AssetModel};
use crate::solver::{solve_qp, QpProblem, SolverError};

use super::MarketError;

/// Largest KKT residual tolerated from the inner solver per prosumer.
pub const KKT_TOL: f64 = 1e-6;

const PIN_TOL: f64 = 1e-12;

/// One enrolled prosumer as the market sees it for a window: identity,
/// metering bus, resource description, and spending allowance.
#[derive(Debug, Clone)]
pub struct ProsumerBid {
    pub id: String,
    pub bus: usize,
    pub model: AssetModel,
    pub budget: f64,
}

/// Cleared profiles for one region: one row per prosumer, MW over the
/// market horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleMatrix {
    pub prosumers: Vec<String>,
    pub buses: Vec<usize>,
    pub p: DMatrix<f64>,
}

impl ScheduleMatrix {
    /// Aggregate profile Pᵀ1: the region's net injection per interval.
    pub fn aggregate(&self) -> DVector<f64> {
        let t = self.p.ncols();
        let mut agg = DVector::zeros(t);
        for i in 0..self.p.nrows() {
            agg += self.p.row(i).transpose();
        }
        agg
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.p.row(i).transpose()
    }
}

/// A prosumer's feasible set and cost, flattened to the solver's canonical
/// form over z = [u | w? | s⁺? | s⁻?]. The price term is not included; the
/// caller adds λ against `profile` and the budget row.
pub(crate) struct AssembledProsumer {
    pub n_vars: usize,
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    /// T × n_vars map with p = profile · z + ell_t.
    pub profile: DMatrix<f64>,
    pub ell_t: DVector<f64>,
}

struct RowStack {
    rows: Vec<RowDVector<f64>>,
    rhs: Vec<f64>,
}

impl RowStack {
    fn new() -> Self {
        RowStack { rows: Vec::new(), rhs: Vec::new() }
    }

    fn push(&mut self, row: RowDVector<f64>, rhs: f64) {
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    fn into_matrix(self, n_vars: usize) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.rows.len();
        let mut mat = DMatrix::zeros(m, n_vars);
        for (i, row) in self.rows.into_iter().enumerate() {
            mat.row_mut(i).copy_from(&row);
        }
        (mat, DVector::from_vec(self.rhs))
    }
}

pub(crate) fn assemble(model: &AssetModel) -> AssembledProsumer {
    let t = model.horizon;
    let nu = model.n_controls();
    let a_t = model.a.rows(0, t).clone_owned();
    let ell_t = model.ell.rows(0, t).clone_owned();

    let deadline = model.cost.deadline.as_ref().filter(|d| d.c_d > 0.0);
    let w_col = deadline.map(|_| nu);
    let piecewise = model.cost.piecewise.as_ref();
    let s_pos0 = nu + usize::from(w_col.is_some());
    let n_vars = s_pos0 + if piecewise.is_some() { 2 * t } else { 0 };

    let mut q = DMatrix::zeros(n_vars, n_vars);
    let mut c = DVector::zeros(n_vars);
    let mut eq = RowStack::new();
    let mut ineq = RowStack::new();

    let unit = |j: usize, v: f64| {
        let mut row = RowDVector::zeros(n_vars);
        row[j] = v;
        row
    };

    // Control box; pinned entries become equalities.
    for j in 0..nu {
        let (lo, hi) = (model.u_lower[j], model.u_upper[j]);
        if (hi - lo).abs() <= PIN_TOL {
            eq.push(unit(j, 1.0), lo);
        } else {
            ineq.push(unit(j, 1.0), hi);
            ineq.push(unit(j, -1.0), -lo);
        }
    }

    // Power box through the profile map.
    for i in 0..t {
        let mut row = RowDVector::zeros(n_vars);
        for j in 0..nu {
            row[j] = a_t[(i, j)];
        }
        let (lo, hi) = (model.p_lower[i], model.p_upper[i]);
        if (hi - lo).abs() <= PIN_TOL {
            eq.push(row, lo - ell_t[i]);
        } else {
            ineq.push(row.clone(), hi - ell_t[i]);
            ineq.push(-row, ell_t[i] - lo);
        }
    }

    // A deferrable appliance picks exactly one start slot (relaxed to the
    // simplex; the constraint matrix is totally cycle-shifted so vertices
    // are integral whenever costs are strict).
    if model.kind == AssetKind::DeferrableAppliance {
        eq.push(RowDVector::from_element(nu, 1.0).resize_horizontally(n_vars, 0.0), 1.0);
    }

    // Quadratic comfort/deviation cost on the control.
    if model.cost.quad_u != 0.0 {
        for j in 0..nu {
            q[(j, j)] += 2.0 * model.cost.quad_u;
        }
    }

    // Quadratic anchor cost on the profile.
    if model.cost.quad_p_anchor != 0.0 {
        let anchor = piecewise
            .map(|pw| pw.anchor.clone())
            .unwrap_or_else(|| DVector::zeros(t));
        let qp = model.cost.quad_p_anchor;
        let ata = a_t.transpose() * &a_t;
        let mut head = q.view_mut((0, 0), (nu, nu));
        head += ata * (2.0 * qp);
        let shift = a_t.transpose() * (&ell_t - &anchor);
        c.rows_mut(0, nu).axpy(2.0 * qp, &shift, 1.0);
    }

    if let Some(c1) = &model.cost.linear_p {
        c.rows_mut(0, nu).axpy(1.0, &(a_t.transpose() * c1), 1.0);
    }
    if let Some(cu) = &model.cost.linear_u {
        c.rows_mut(0, nu).axpy(1.0, cu, 1.0);
    }

    if let Some(dl) = deadline {
        let w = w_col.unwrap();
        c[w] = -dl.c_d;
        // w ≤ target + 1ᵀp  and  w ≤ cap, plus a harmless floor so the box
        // the interior-point method works in stays bounded.
        let mut row = unit(w, 1.0);
        for j in 0..nu {
            row[j] = -a_t.column(j).sum();
        }
        ineq.push(row, dl.target + ell_t.sum());
        ineq.push(unit(w, 1.0), dl.cap);
        let w_floor = dl.cap.min(dl.target + model.p_lower.sum()) - 1.0;
        ineq.push(unit(w, -1.0), -w_floor);
    }

    if let Some(pw) = piecewise {
        for i in 0..t {
            // A_T u − s⁺ + s⁻ = anchor − ℓ  so that s⁺ − s⁻ = p − anchor.
            let mut row = RowDVector::zeros(n_vars);
            for j in 0..nu {
                row[j] = a_t[(i, j)];
            }
            row[s_pos0 + i] = -1.0;
            row[s_pos0 + t + i] = 1.0;
            eq.push(row, pw.anchor[i] - ell_t[i]);
            let span = (model.p_upper[i] - model.p_lower[i]).abs()
                + pw.anchor[i].abs()
                + ell_t[i].abs()
                + 1.0;
            for &col in &[s_pos0 + i, s_pos0 + t + i] {
                ineq.push(unit(col, 1.0), span);
                ineq.push(unit(col, -1.0), 0.0);
            }
            c[s_pos0 + i] += pw.c_pos[i];
            c[s_pos0 + t + i] += pw.c_neg[i];
        }
    }

    let (a_eq, b_eq) = eq.into_matrix(n_vars);
    let (g, h) = ineq.into_matrix(n_vars);
    let mut profile = DMatrix::zeros(t, n_vars);
    profile.view_mut((0, 0), (t, nu)).copy_from(&a_t);

    AssembledProsumer { n_vars, q, c, a_eq, b_eq, g, h, profile, ell_t }
}

fn map_solver_error(prosumer: &str, err: SolverError) -> MarketError {
    match err {
        SolverError::Infeasible { violation } => MarketError::Infeasible {
            prosumer: prosumer.to_string(),
            violation,
        },
        SolverError::SolverStall { iterations, residual } => MarketError::SolverStall {
            prosumer: prosumer.to_string(),
            iterations,
            residual,
        },
        SolverError::Dimension(msg) => MarketError::Dimension(msg),
    }
}

/// Clears one region against a fixed price: independently minimizes each
/// prosumer's cost plus λᵀp over its feasible set, with spending capped at
/// the prosumer's balance (pᵀλ ≤ r_b, λ held fixed).
pub fn solve_subproblem(
    bids: &[ProsumerBid],
    lambda: &DVector<f64>,
) -> Result<ScheduleMatrix, MarketError> {
    let t = lambda.len();
    let mut p = DMatrix::zeros(bids.len(), t);
    let mut prosumers = Vec::with_capacity(bids.len());
    let mut buses = Vec::with_capacity(bids.len());
    for (i, bid) in bids.iter().enumerate() {
        if bid.model.horizon != t {
            return Err(MarketError::Dimension(format!(
                "bid {} has horizon {}, market runs on {t}",
                bid.id, bid.model.horizon
            )));
        }
        let profile = clear_prosumer(bid, lambda)?;
        p.row_mut(i).copy_from(&profile.transpose());
        prosumers.push(bid.id.clone());
        buses.push(bid.bus);
    }
    Ok(ScheduleMatrix { prosumers, buses, p })
}

fn clear_prosumer(bid: &ProsumerBid, lambda: &DVector<f64>) -> Result<DVector<f64>, MarketError> {
    let model = &bid.model;
    let t = model.horizon;
    if model.n_controls() == 0 {
        // Singleton feasible set: the profile is pinned; only affordability
        // can fail.
        let p = model.ell.rows(0, t).clone_owned();
        let spend = p.dot(lambda);
        if spend > bid.budget + 1e-9 {
            return Err(MarketError::Infeasible {
                prosumer: bid.id.clone(),
                violation: spend - bid.budget,
            });
        }
        return Ok(p);
    }

    let mut asm = assemble(model);
    // Price term λᵀp and the affordability row (λᵀ profile) z ≤ r_b − λᵀℓ.
    // The row is dropped when no profile inside the power box can spend the
    // budget: a vacuous constraint with a huge right-hand side would only
    // stretch the solver's scaling.
    let price_row = lambda.transpose() * &asm.profile;
    asm.c += price_row.transpose();
    let max_spend: f64 = (0..t)
        .map(|i| lambda[i].abs() * model.p_lower[i].abs().max(model.p_upper[i].abs()))
        .sum();
    let (g, h) = if bid.budget >= max_spend {
        (asm.g.clone(), asm.h.clone())
    } else {
        let mut g = asm.g.clone().resize_vertically(asm.g.nrows() + 1, 0.0);
        g.row_mut(asm.g.nrows()).copy_from(&price_row);
        let h = asm.h.clone().push(bid.budget - lambda.dot(&asm.ell_t));
        (g, h)
    };

    let problem = QpProblem { q: asm.q, c: asm.c, a_eq: asm.a_eq, b_eq: asm.b_eq, g, h };
    let sol = solve_qp(&problem).map_err(|e| map_solver_error(&bid.id, e))?;
    if sol.kkt_residual > KKT_TOL {
        return Err(MarketError::SolverStall {
            prosumer: bid.id.clone(),
            iterations: sol.iterations,
            residual: sol.kkt_residual,
        });
    }
    Ok(&asm.profile * &sol.x + &asm.ell_t)
}
