//! Consensus least-squares updates for one region.
//!
//! Each iteration solves a fixed symmetric positive-definite system with the
//! window's intervals as right-hand-side columns, then folds in the shared
//! coordinates reported by neighbors. The system matrix depends only on the
//! region's selectors and the communication graph, so callers factor it once
//! per graph epoch and reuse the factorization across iterations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::grid::RegionMatrices;

use super::{RegionState, SliceMap, VerificationConfig, VerificationError};

/// The normal-equations matrix of the per-region estimate update:
/// c1·S_Aᵀ Σ⁻¹ S_A + c2·HᵀH + c3·S_PᵀS_P + c4·D.
///
/// Every term is assembled as a Gram product, so the result is symmetric to
/// the bit.
pub fn x_update_matrix(
    mats: &RegionMatrices,
    sigma_z: &DVector<f64>,
    cfg: &VerificationConfig,
) -> DMatrix<f64> {
    let l_n = mats.n_vars();
    let mut weighted_sa = mats.s_a.clone();
    for (i, mut row) in weighted_sa.row_iter_mut().enumerate() {
        row *= (cfg.c1 / sigma_z[i]).sqrt();
    }
    let mut weighted_h = mats.h.clone();
    weighted_h *= cfg.c2.sqrt();
    let mut weighted_sp = mats.s_p.clone();
    weighted_sp *= cfg.c3.sqrt();

    let mut m = weighted_sa.transpose() * &weighted_sa;
    m += weighted_h.transpose() * &weighted_h;
    m += weighted_sp.transpose() * &weighted_sp;
    for j in 0..l_n {
        m[(j, j)] += cfg.c4 * mats.d[j];
    }
    m
}

/// Factors the update matrix, failing if it is not positive definite.
pub(crate) fn factor_x_update(
    mats: &RegionMatrices,
    sigma_z: &DVector<f64>,
    cfg: &VerificationConfig,
) -> Result<Cholesky<f64, Dyn>, VerificationError> {
    let m = x_update_matrix(mats, sigma_z, cfg);
    debug_assert_eq!(m, m.transpose(), "Gram assembly must be exactly symmetric");
    Cholesky::new(m).ok_or(VerificationError::SingularSystem { region: mats.region })
}

/// Starting estimate: sensor readings copied onto their coordinates, zeros
/// elsewhere (or all zeros when `zero_init` is set).
pub fn initial_x(
    mats: &RegionMatrices,
    z: &DMatrix<f64>,
    horizon: usize,
    zero_init: bool,
) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(mats.n_vars(), horizon);
    if !zero_init {
        for (i, g) in mats.measured.iter().enumerate() {
            let j = mats.local_index(*g).expect("measured coordinate is in the region view");
            x.row_mut(j).copy_from(&z.row(i));
        }
    }
    x
}

/// Neighbor average of the shared coordinates. Slices absent from the map
/// (a neighbor that has sent nothing yet) count as zero; coordinates shared
/// with nobody stay exactly zero.
fn consensus_average(mats: &RegionMatrices, slices: &SliceMap, horizon: usize) -> DMatrix<f64> {
    let mut psi = DMatrix::zeros(mats.n_vars(), horizon);
    for (m, sel) in &mats.s_nm {
        let Some(slice) = slices.get(m) else { continue };
        psi += sel.transpose() * slice;
    }
    for (j, mut row) in psi.row_iter_mut().enumerate() {
        row *= mats.d_bar[j];
    }
    psi
}

/// Builds the iteration-zero state: x₀, the neighbor average ψ₀ of the
/// exchanged starting slices, and υ₀ = ½(ψ₀ + x₀).
pub fn admm_init(
    matrices: RegionMatrices,
    z: DMatrix<f64>,
    sigma_z: DVector<f64>,
    p_star: DMatrix<f64>,
    neighbor_x0: &SliceMap,
    zero_init: bool,
) -> Result<RegionState, VerificationError> {
    let horizon = p_star.ncols();
    if z.nrows() != matrices.measured.len() {
        return Err(VerificationError::Dimension(format!(
            "region {}: {} measurement rows for {} measured coordinates",
            matrices.region,
            z.nrows(),
            matrices.measured.len()
        )));
    }
    if sigma_z.len() != matrices.measured.len() {
        return Err(VerificationError::Dimension(format!(
            "region {}: {} variances for {} measured coordinates",
            matrices.region,
            sigma_z.len(),
            matrices.measured.len()
        )));
    }
    if sigma_z.iter().any(|v| *v <= 0.0) {
        return Err(VerificationError::Dimension(format!(
            "region {}: measurement variances must be positive",
            matrices.region
        )));
    }
    if p_star.nrows() != matrices.own_buses.len() || (z.ncols() != horizon && !matrices.measured.is_empty()) {
        return Err(VerificationError::Dimension(format!(
            "region {}: schedule is {}×{}, measurements {}×{}",
            matrices.region,
            p_star.nrows(),
            p_star.ncols(),
            z.nrows(),
            z.ncols()
        )));
    }
    let x = initial_x(&matrices, &z, horizon, zero_init);
    let psi = consensus_average(&matrices, neighbor_x0, horizon);
    let upsilon = 0.5 * (&psi + &x);
    Ok(RegionState { x, psi, upsilon, k: 0, matrices, z, sigma_z, p_star })
}

/// One estimate update: factors the system and solves it for every interval.
/// The loop driver keeps the factorization cached; this entry point is for
/// callers stepping a region by hand.
pub fn admm_x_update(
    state: &RegionState,
    cfg: &VerificationConfig,
) -> Result<DMatrix<f64>, VerificationError> {
    let factor = factor_x_update(&state.matrices, &state.sigma_z, cfg)?;
    Ok(x_update_with(&factor, state, cfg))
}

/// Estimate update against a pre-computed factorization.
pub(crate) fn x_update_with(
    factor: &Cholesky<f64, Dyn>,
    state: &RegionState,
    cfg: &VerificationConfig,
) -> DMatrix<f64> {
    let mats = &state.matrices;
    let horizon = state.horizon();
    let mut rhs = DMatrix::zeros(mats.n_vars(), horizon);
    if !mats.measured.is_empty() {
        let mut weighted_z = state.z.clone();
        for (i, mut row) in weighted_z.row_iter_mut().enumerate() {
            row *= cfg.c1 / state.sigma_z[i];
        }
        rhs += mats.s_a.transpose() * weighted_z;
    }
    rhs += mats.s_p.transpose() * (cfg.c3 * &state.p_star);
    for (j, row) in state.upsilon.row_iter().enumerate() {
        let w = cfg.c4 * mats.d[j];
        if w != 0.0 {
            for t in 0..horizon {
                rhs[(j, t)] += w * row[t];
            }
        }
    }
    factor.solve(&rhs)
}

/// Folds the received neighbor slices into the consensus variables and
/// installs the new estimate:
/// ψ ← neighbor average, υ ← υ + ψ_new − ½(ψ_old + x_old), x ← x_new.
pub fn admm_consensus_update(state: &mut RegionState, x_new: DMatrix<f64>, slices: &SliceMap) {
    let horizon = state.horizon();
    let psi_new = consensus_average(&state.matrices, slices, horizon);
    let mut upsilon = std::mem::take(&mut state.upsilon);
    upsilon += &psi_new;
    upsilon -= 0.5 * (&state.psi + &state.x);
    debug_assert!(
        (0..state.matrices.n_vars())
            .filter(|&j| state.matrices.d[j] == 0.0)
            .all(|j| psi_new.row(j).iter().all(|v| *v == 0.0)),
        "neighbor average must vanish on unshared coordinates"
    );
    state.psi = psi_new;
    state.upsilon = upsilon;
    state.x = x_new;
    state.k += 1;
}
