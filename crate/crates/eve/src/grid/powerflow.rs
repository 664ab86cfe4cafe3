//! Ground-truth power flow by backward/forward sweep on the radial network.

use nalgebra::DVector;

use super::{Grid, GridError, SystemState};

const MAX_SWEEPS: usize = 200;
const SWEEP_TOL: f64 = 1e-10;

/// Solves the branch-flow equations for given bus injections.
///
/// `p_mw` / `q_mvar` are net injections per bus rank (generation positive);
/// the root entry is ignored and overwritten with the slack injection that
/// balances the network including losses. The root voltage is fixed at
/// 1.0 p.u.
pub fn solve_power_flow(
    grid: &Grid,
    p_mw: &DVector<f64>,
    q_mvar: &DVector<f64>,
) -> Result<SystemState, GridError> {
    let nb = grid.n_buses();
    let nl = grid.n_lines();
    if p_mw.len() != nb || q_mvar.len() != nb {
        return Err(GridError::DimensionMismatch(format!(
            "injection vectors have {} / {} entries, grid has {} buses",
            p_mw.len(),
            q_mvar.len(),
            nb
        )));
    }
    let s = grid.base_mva();
    let root_rank = grid.bus_rank(grid.root()).unwrap();

    // Per-unit working vectors.
    let p_pu: Vec<f64> = (0..nb).map(|i| p_mw[i] / s).collect();
    let q_pu: Vec<f64> = (0..nb).map(|i| q_mvar[i] / s).collect();
    let mut fp = vec![0.0_f64; nl];
    let mut fq = vec![0.0_f64; nl];
    let mut c2 = vec![0.0_f64; nl];
    let mut v2 = vec![1.0_f64; nb];

    let lines = grid.lines();
    let order = &grid.topo_order;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        // Backward: accumulate flows from the leaves toward the root. The
        // sending-end flow covers the downstream net load plus line losses.
        for &bus in order.iter().rev() {
            let Some(l) = grid.parent_line_of(bus) else { continue };
            let t = grid.bus_rank(bus).unwrap();
            let mut ps = -p_pu[t] + lines[l].r * c2[l];
            let mut qs = -q_pu[t] + lines[l].x * c2[l];
            for &lc in grid.children_lines_of(bus) {
                ps += fp[lc];
                qs += fq[lc];
            }
            fp[l] = ps;
            fq[l] = qs;
        }
        // Forward: propagate voltages from the root, then refresh currents.
        let mut delta = 0.0_f64;
        for &bus in order.iter() {
            let Some(l) = grid.parent_line_of(bus) else { continue };
            let f = grid.bus_rank(grid.lines()[l].from).unwrap();
            let t = grid.bus_rank(bus).unwrap();
            let line = &lines[l];
            let v2_new =
                v2[f] - 2.0 * (line.r * fp[l] + line.x * fq[l]) + line.z_abs2() * c2[l];
            if v2_new <= 0.0 {
                return Err(GridError::VoltageCollapse(bus));
            }
            delta = delta.max((v2_new - v2[t]).abs());
            v2[t] = v2_new;
            let c2_new = (fp[l] * fp[l] + fq[l] * fq[l]) / v2[f];
            delta = delta.max((c2_new - c2[l]).abs());
            c2[l] = c2_new;
        }
        if delta < SWEEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GridError::NoConvergence(MAX_SWEEPS));
    }

    let mut st = SystemState::zeros(grid);
    for i in 0..nb {
        st.p[i] = p_mw[i];
        st.q[i] = q_mvar[i];
        st.v2[i] = v2[i];
    }
    // Slack absorbs the flows leaving the root.
    let mut root_p = 0.0;
    let mut root_q = 0.0;
    for &lc in grid.children_lines_of(grid.root()) {
        root_p += fp[lc];
        root_q += fq[lc];
    }
    st.p[root_rank] = root_p * s;
    st.q[root_rank] = root_q * s;
    for j in 0..nl {
        st.fp[j] = fp[j] * s;
        st.fq[j] = fq[j] * s;
        st.c2[j] = c2[j];
        let f = grid.bus_rank(lines[j].from).unwrap();
        st.xp[j] = v2[f];
    }
    Ok(st)
}
