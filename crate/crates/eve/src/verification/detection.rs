//! Disagreement scoring and attacker ranking.
//!
//! Every region smooths the squared mismatch between the shared-coordinate
//! slices it computed and the ones its neighbors reported, normalizes its
//! scores into one row of a stochastic matrix, and publishes the row. The
//! left principal eigenvector of the assembled matrix concentrates on the
//! region whose edges carry persistent disagreement.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{VerificationConfig, VerificationError};

/// Outcome of one termination check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Every region's estimate step fell below the tolerance.
    Converged,
    /// The trust vector stabilized with this region clearly separated.
    AttackerIdentified(usize),
    Continue,
}

/// One smoothing step of an edge's disagreement score:
/// d ← (1−α)·d + (α/4)·mean-squared mismatch per coordinate and interval.
pub fn disagreement_update(
    d_nm: f64,
    own: &DMatrix<f64>,
    seen: &DMatrix<f64>,
    alpha_k: f64,
) -> f64 {
    assert_eq!(own.shape(), seen.shape(), "slices on one edge must align");
    let len = own.nrows() as f64;
    let horizon = own.ncols() as f64;
    let mismatch = (own - seen).norm_squared();
    (1.0 - alpha_k) * d_nm + (alpha_k / 4.0) * mismatch / (len * horizon)
}

/// A region's row of the normalized disagreement matrix, aligned to
/// `agents` (ascending region ids). Entries for non-neighbors are zero.
pub fn disagreement_row(
    d_row: &BTreeMap<usize, f64>,
    agents: &[usize],
    denom_guard: f64,
) -> DVector<f64> {
    let total: f64 = d_row.values().sum();
    let mut row = DVector::zeros(agents.len());
    for (j, agent) in agents.iter().enumerate() {
        if let Some(d) = d_row.get(agent) {
            row[j] = d / (total + denom_guard);
        }
    }
    row
}

/// Snapshot of the detection side of the loop: every region's raw scores,
/// the assembled row-stochastic matrix, and the trust ranking.
#[derive(Debug, Clone)]
pub struct DetectionState {
    /// Region ids in row/column order, ascending.
    pub agents: Vec<usize>,
    /// Raw smoothed disagreement per directed edge: d[n][m].
    pub d: BTreeMap<usize, BTreeMap<usize, f64>>,
    /// Row-normalized disagreement matrix over `agents`.
    pub b: DMatrix<f64>,
    /// Trust vector: higher means less trusted. Sums to 1.
    pub pi: DVector<f64>,
}

impl DetectionState {
    /// Assembles the matrix from per-region score rows and ranks the
    /// regions.
    pub fn from_rows(
        d: BTreeMap<usize, BTreeMap<usize, f64>>,
        cfg: &VerificationConfig,
    ) -> Result<Self, VerificationError> {
        let agents: Vec<usize> = d.keys().copied().collect();
        let mut b = DMatrix::zeros(agents.len(), agents.len());
        for (i, n) in agents.iter().enumerate() {
            let row = disagreement_row(&d[n], &agents, cfg.denom_guard);
            b.row_mut(i).copy_from(&row.transpose());
        }
        let pi = trust_scores(&b, cfg.eig_tol, cfg.eig_max_iters)?;
        Ok(DetectionState { agents, d, b, pi })
    }
}

/// Left principal eigenvector of `b`, normalized to sum 1, by power
/// iteration on bᵀ from a uniform start.
///
/// For a row-stochastic matrix assembled from a connected graph with a
/// 3-clique the iteration converges; on bipartite-like graphs (no odd
/// cycles) it can oscillate forever, which surfaces as `NoConvergence`.
pub fn trust_scores(
    b: &DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>, VerificationError> {
    let n = b.nrows();
    assert_eq!(n, b.ncols(), "disagreement matrix must be square");
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let bt = b.transpose();
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..max_iters {
        let mut next = &bt * &pi;
        let mass = next.sum();
        if mass <= 0.0 {
            // No disagreement anywhere: nothing to rank.
            return Ok(DVector::from_element(n, 1.0 / n as f64));
        }
        next /= mass;
        let delta = (&next - &pi).amax();
        pi = next;
        if delta <= tol {
            return Ok(pi);
        }
    }
    Err(VerificationError::NoConvergence { iterations: max_iters })
}

/// Mean and standard deviation of the trust entries excluding index `m`,
/// both centered at that excluded mean.
pub fn excluded_stats(pi: &DVector<f64>, m: usize) -> (f64, f64) {
    let n = pi.len();
    assert!(n >= 2, "excluded statistics need at least two entries");
    let rest = (n - 1) as f64;
    let mean = (pi.sum() - pi[m]) / rest;
    let var = pi
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != m)
        .map(|(_, v)| (v - mean).powi(2))
        .sum::<f64>()
        / rest;
    (mean, var.sqrt())
}

/// Decides whether the loop is done.
///
/// Convergence is checked first: every region's estimate step at or below
/// `epsilon`. Otherwise an attacker is declared when at least three
/// participants remain, the trust vector has stopped moving, and some entry
/// exceeds its excluded mean by more than `beta` excluded standard
/// deviations; the removal target is the argmax.
pub fn check_termination(
    step_norms: &[f64],
    pi: &DVector<f64>,
    pi_prev: &DVector<f64>,
    agents: &[usize],
    cfg: &VerificationConfig,
) -> Termination {
    assert_eq!(step_norms.len(), agents.len());
    assert_eq!(pi.len(), agents.len());
    if !step_norms.is_empty() && step_norms.iter().all(|s| *s <= cfg.epsilon) {
        return Termination::Converged;
    }
    // Two regions cannot corroborate an accusation: the excluded spread is
    // identically zero and any float-level tie break would convict someone.
    // Isolation needs a third witness, the same reason the communication
    // graph needs a 3-clique.
    if pi.len() < 3 || pi_prev.len() != pi.len() {
        return Termination::Continue;
    }
    if (pi - pi_prev).amax() > cfg.epsilon_pi {
        return Termination::Continue;
    }
    // The slack keeps rounding-level asymmetry in an otherwise tied ranking
    // from counting as separation.
    let slack = 1e-9;
    let exceeded = (0..pi.len()).any(|m| {
        let (mean, std) = excluded_stats(pi, m);
        pi[m] > mean + cfg.beta * std + slack
    });
    if exceeded {
        let argmax = pi.imax();
        return Termination::AttackerIdentified(agents[argmax]);
    }
    Termination::Continue
}
