//! Dense convex quadratic programming by a primal-dual interior-point method.
//!
//! Solves
//! ```text
//!   minimize    ½ xᵀQx + cᵀx
//!   subject to  A x = b,   G x ≤ h
//! ```
//! with `Q` symmetric positive semidefinite. Every prosumer subproblem and the
//! centralized clearing oracle reduce to this form; problem sizes stay in the
//! tens of variables, so dense factorizations are the simplest reliable choice.
//! The method is Mehrotra's predictor-corrector. For fixed inputs the iteration
//! is fully deterministic, which the market tests rely on.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("problem dimensions disagree: {0}")]
    Dimension(String),
    #[error("infeasible subproblem (worst constraint violation {violation:.3e})")]
    Infeasible { violation: f64 },
    #[error("solver stalled after {iterations} iterations (kkt residual {residual:.3e})")]
    SolverStall { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl QpProblem {
    /// Convenience constructor for a problem with no equality constraints.
    pub fn inequality_only(q: DMatrix<f64>, c: DVector<f64>, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        let n = c.len();
        QpProblem { q, c, a_eq: DMatrix::zeros(0, n), b_eq: DVector::zeros(0), g, h }
    }

    fn check(&self) -> Result<(), SolverError> {
        let n = self.c.len();
        if self.q.nrows() != n || self.q.ncols() != n {
            return Err(SolverError::Dimension(format!("Q is {}x{}, expected {n}x{n}", self.q.nrows(), self.q.ncols())));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(SolverError::Dimension("equality block shape".into()));
        }
        if self.g.ncols() != n || self.g.nrows() != self.h.len() {
            return Err(SolverError::Dimension("inequality block shape".into()));
        }
        Ok(())
    }

    /// Objective value ½xᵀQx + cᵀx.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.q * x)[(0, 0)] + self.c.dot(x)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// Worst KKT residual at exit: stationarity, primal feasibility, complementarity.
    pub kkt_residual: f64,
}

const MAX_ITERS: usize = 120;

pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, SolverError> {
    p.check()?;
    let n = p.c.len();
    let me = p.b_eq.len();
    let mi = p.h.len();

    if mi == 0 {
        return solve_equality_qp(p);
    }

    let scale = 1.0
        + p.c.amax().max(p.h.amax()).max(if me > 0 { p.b_eq.amax() } else { 0.0 })
        + p.q.amax();
    let tol = 1e-9 * scale;

    let mut x = DVector::<f64>::zeros(n);
    let mut y = DVector::<f64>::zeros(me);
    let mut s = DVector::<f64>::from_iterator(mi, p.h.iter().map(|&hi| hi.max(1.0)));
    let mut z = DVector::<f64>::from_element(mi, 1.0);

    let gt = p.g.transpose();
    let at = p.a_eq.transpose();

    let mut last_residual = f64::INFINITY;
    for iter in 0..MAX_ITERS {
        let r_d = &p.q * &x + &p.c + &at * &y + &gt * &z;
        let r_p = &p.a_eq * &x - &p.b_eq;
        let r_g = &p.g * &x + &s - &p.h;
        let mu = s.dot(&z) / mi as f64;

        let residual = r_d.amax().max(if me > 0 { r_p.amax() } else { 0.0 }).max(r_g.amax()).max(mu);
        last_residual = residual;
        if residual < tol {
            return Ok(QpSolution { x, iterations: iter, kkt_residual: residual / scale.max(1.0) });
        }

        // Reduced KKT matrix. W = Z S⁻¹ is recomputed every iteration.
        let w: DVector<f64> = z.component_div(&s);
        let mut gtwg = DMatrix::<f64>::zeros(n, n);
        for r in 0..mi {
            let wr = w[r];
            for a in 0..n {
                let ga = p.g[(r, a)];
                if ga == 0.0 {
                    continue;
                }
                for b in 0..n {
                    gtwg[(a, b)] += wr * ga * p.g[(r, b)];
                }
            }
        }
        let dim = n + me;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&(&p.q + &gtwg));
        if me > 0 {
            kkt.view_mut((0, n), (n, me)).copy_from(&at);
            kkt.view_mut((n, 0), (me, n)).copy_from(&p.a_eq);
        }
        for d in 0..n {
            kkt[(d, d)] += 1e-12 * scale;
        }
        let lu = kkt.full_piv_lu();

        let solve_kkt = |rhs_x: &DVector<f64>, rhs_y: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>)> {
            let mut rhs = DVector::<f64>::zeros(dim);
            rhs.rows_mut(0, n).copy_from(rhs_x);
            if me > 0 {
                rhs.rows_mut(n, me).copy_from(rhs_y);
            }
            let sol = lu.solve(&rhs)?;
            Some((sol.rows(0, n).into_owned(), sol.rows(n, me).into_owned()))
        };

        // Affine (predictor) direction: r_c = S z.
        let rc_aff: DVector<f64> = s.component_mul(&z);
        let rhs_x_aff = -&r_d + &gt * (rc_aff.component_div(&s) - w.component_mul(&r_g));
        let rhs_y_aff = -&r_p;
        let Some((dx_aff, _dy_aff)) = solve_kkt(&rhs_x_aff, &rhs_y_aff) else {
            return Err(SolverStallAt(iter, residual / scale).into());
        };
        let ds_aff = -&r_g - &p.g * &dx_aff;
        let dz_aff = -rc_aff.component_div(&s) - w.component_mul(&ds_aff);

        let alpha_p_aff = max_step(&s, &ds_aff);
        let alpha_d_aff = max_step(&z, &dz_aff);
        let mu_aff = (&s + alpha_p_aff * &ds_aff).dot(&(&z + alpha_d_aff * &dz_aff)) / mi as f64;
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };

        // Corrector direction: r_c = S z + Δs∘Δz − σμ.
        let rc: DVector<f64> = s.component_mul(&z) + ds_aff.component_mul(&dz_aff) - DVector::from_element(mi, sigma * mu);
        let rhs_x = -&r_d + &gt * (rc.component_div(&s) - w.component_mul(&r_g));
        let rhs_y = -&r_p;
        let Some((dx, dy)) = solve_kkt(&rhs_x, &rhs_y) else {
            return Err(SolverStallAt(iter, residual / scale).into());
        };
        let ds = -&r_g - &p.g * &dx;
        let dz = -rc.component_div(&s) - w.component_mul(&ds);

        let alpha_p = (0.995 * max_step(&s, &ds)).min(1.0);
        let alpha_d = (0.995 * max_step(&z, &dz)).min(1.0);

        x += alpha_p * &dx;
        s += alpha_p * &ds;
        y += alpha_d * &dy;
        z += alpha_d * &dz;

        if y.amax().max(z.amax()) > 1e13 {
            break;
        }
    }

    // No convergence: decide between an infeasibility report and a stall.
    let r_p = &p.a_eq * &x - &p.b_eq;
    let r_g = &p.g * &x - &p.h;
    let viol = (if me > 0 { r_p.amax() } else { 0.0 }).max(r_g.iter().fold(0.0f64, |m, &v| m.max(v)));
    if viol > 1e-6 * scale {
        Err(SolverError::Infeasible { violation: viol })
    } else {
        Err(SolverError::SolverStall { iterations: MAX_ITERS, residual: last_residual / scale })
    }
}

/// Equality-constrained QP: one KKT solve.
fn solve_equality_qp(p: &QpProblem) -> Result<QpSolution, SolverError> {
    let n = p.c.len();
    let me = p.b_eq.len();
    let dim = n + me;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.q);
    for d in 0..n {
        kkt[(d, d)] += 1e-12;
    }
    if me > 0 {
        kkt.view_mut((0, n), (n, me)).copy_from(&p.a_eq.transpose());
        kkt.view_mut((n, 0), (me, n)).copy_from(&p.a_eq);
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&p.c));
    if me > 0 {
        rhs.rows_mut(n, me).copy_from(&p.b_eq);
    }
    let sol = kkt
        .full_piv_lu()
        .solve(&rhs)
        .ok_or(SolverError::SolverStall { iterations: 1, residual: f64::INFINITY })?;
    let x = sol.rows(0, n).into_owned();
    let y = sol.rows(n, me).into_owned();
    let r_d = (&p.q * &x + &p.c + p.a_eq.transpose() * y).amax();
    let r_p = if me > 0 { (&p.a_eq * &x - &p.b_eq).amax() } else { 0.0 };
    Ok(QpSolution { x, iterations: 1, kkt_residual: r_d.max(r_p) })
}

/// Largest step in [0, 1] keeping v + α dv strictly positive.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

struct SolverStallAt(usize, f64);

impl From<SolverStallAt> for SolverError {
    fn from(v: SolverStallAt) -> Self {
        SolverError::SolverStall { iterations: v.0, residual: v.1 }
    }
}
