use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use approx::assert_abs_diff_eq;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde_json::json;

use crate::grid::{
    build_communication_graph, build_region_matrices, solve_power_flow, validate_radial, Grid,
    GridTopology, Line, SensorGrant, VarKind,
};
use crate::ledger::{LedgerNetwork, SharedLedger};
use crate::market::ExecutionMode;

use super::*;

fn chain_grid(n: usize, regions: &[usize], grants: Vec<SensorGrant>) -> Grid {
    let buses: Vec<usize> = (1..=n).collect();
    let lines = (1..n).map(|i| Line { from: i, to: i + 1, r: 0.05, x: 0.05 }).collect();
    let region_of = buses.iter().map(|&b| (b, regions[b - 1])).collect();
    validate_radial(GridTopology {
        buses,
        lines,
        root: 1,
        region_of,
        sensor_grants: grants,
        base_mva: 100.0,
    })
    .unwrap()
}

fn bus_sensors(grid: &Grid) -> BTreeSet<usize> {
    let mut s = BTreeSet::new();
    for &b in &grid.topology().buses {
        s.insert(grid.var_index(VarKind::BusP, b));
        s.insert(grid.var_index(VarKind::BusQ, b));
        s.insert(grid.var_index(VarKind::BusV2, b));
    }
    s
}

fn ledger_fixture(n: usize) -> (SharedLedger, Vec<String>) {
    let mut net = LedgerNetwork::new(n);
    let admins: Vec<String> = (0..n).map(|r| net.register_aggregator(r)).collect();
    (Arc::new(parking_lot::Mutex::new(net)), admins)
}

/// Solved network states for the given per-bus injection profiles, flattened
/// into the canonical variable order.
fn truth_states(grid: &Grid, profiles: &[Vec<f64>]) -> Vec<DVector<f64>> {
    profiles
        .iter()
        .map(|p| {
            let pv = DVector::from_vec(p.clone());
            let qv = 0.3 * &pv;
            solve_power_flow(grid, &pv, &qv).unwrap().to_flat(grid)
        })
        .collect()
}

/// Region inputs with exact readings of the true state and a schedule equal
/// to the true own-bus injections.
fn exact_inputs(grid: &Grid, region: usize, placement: &BTreeSet<usize>, truth: &[DVector<f64>]) -> RegionInputs {
    let matrices = build_region_matrices(grid, region, placement).unwrap();
    let horizon = truth.len();
    let mut z = DMatrix::zeros(matrices.measured.len(), horizon);
    for (i, g) in matrices.measured.iter().enumerate() {
        for (t, y) in truth.iter().enumerate() {
            z[(i, t)] = y[*g];
        }
    }
    let sigma_z = DVector::from_element(matrices.measured.len(), 1.0);
    let mut p_star = DMatrix::zeros(matrices.own_buses.len(), horizon);
    for (r, b) in matrices.own_buses.iter().enumerate() {
        let g = grid.var_index(VarKind::BusP, *b);
        for (t, y) in truth.iter().enumerate() {
            p_star[(r, t)] = y[g];
        }
    }
    RegionInputs { matrices, z, sigma_z, p_star }
}

/// A hand-built region over explicit ascending global variable ids, with no
/// physics rows and no owned buses, so tests can exercise the consensus
/// algebra in isolation.
fn toy_region(
    region: usize,
    vars: &[usize],
    measured: &[usize],
    shared: &[(usize, &[usize])],
) -> RegionMatrices {
    let l = vars.len();
    let local = |g: usize| vars.iter().position(|v| *v == g).unwrap();
    let mut s_a = DMatrix::zeros(measured.len(), l);
    for (i, g) in measured.iter().enumerate() {
        s_a[(i, local(*g))] = 1.0;
    }
    let mut shared_map = BTreeMap::new();
    let mut s_nm = BTreeMap::new();
    for (m, ids) in shared {
        let mut sel = DMatrix::zeros(ids.len(), l);
        for (r, g) in ids.iter().enumerate() {
            sel[(r, local(*g))] = 1.0;
        }
        shared_map.insert(*m, ids.to_vec());
        s_nm.insert(*m, sel);
    }
    let mut rm = RegionMatrices {
        region,
        vars: vars.to_vec(),
        own_buses: vec![],
        h: DMatrix::zeros(0, l),
        s_a,
        measured: measured.to_vec(),
        s_p: DMatrix::zeros(0, l),
        shared: shared_map,
        s_nm,
        d: DVector::zeros(l),
        d_bar: DVector::zeros(l),
    };
    rm.recompute_d();
    rm
}

fn slice1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

#[test]
fn init_mirrors_the_neighbor_start_and_splits_the_memory() {
    // Two regions sharing one coordinate start at their own readings 4 and 2;
    // each sees the other's start as its neighbor average and the memory
    // starts at the midpoint.
    let r0 = toy_region(0, &[7], &[7], &[(1, &[7])]);
    let r1 = toy_region(1, &[7], &[7], &[(0, &[7])]);
    let mut from1 = SliceMap::new();
    from1.insert(1, slice1(2.0));
    let s0 = admm_init(r0, slice1(4.0), DVector::from_element(1, 1.0), DMatrix::zeros(0, 1), &from1, false)
        .unwrap();
    assert_eq!(s0.x[(0, 0)], 4.0);
    assert_eq!(s0.psi[(0, 0)], 2.0);
    assert_eq!(s0.upsilon[(0, 0)], 3.0);

    let mut from0 = SliceMap::new();
    from0.insert(0, slice1(4.0));
    let s1 = admm_init(r1, slice1(2.0), DVector::from_element(1, 1.0), DMatrix::zeros(0, 1), &from0, false)
        .unwrap();
    assert_eq!(s1.x[(0, 0)], 2.0);
    assert_eq!(s1.psi[(0, 0)], 4.0);
    assert_eq!(s1.upsilon[(0, 0)], 3.0);
}

#[test]
fn consensus_update_tracks_the_neighbor_and_charges_the_memory() {
    let r0 = toy_region(0, &[7], &[7], &[(1, &[7])]);
    let mut from1 = SliceMap::new();
    from1.insert(1, slice1(2.0));
    let mut state =
        admm_init(r0, slice1(4.0), DVector::from_element(1, 1.0), DMatrix::zeros(0, 1), &from1, false)
            .unwrap();
    // Neighbor now reports 6 while this region keeps 4: the average becomes
    // 6 and the memory gains 6 − (2 + 4)/2 = 3.
    let mut seen = SliceMap::new();
    seen.insert(1, slice1(6.0));
    admm_consensus_update(&mut state, slice1(4.0), &seen);
    assert_eq!(state.psi[(0, 0)], 6.0);
    assert_eq!(state.upsilon[(0, 0)], 6.0);
    assert_eq!(state.x[(0, 0)], 4.0);
    assert_eq!(state.k, 1);
}

#[test]
fn agreement_leaves_the_consensus_memory_unchanged() {
    let r0 = toy_region(0, &[7], &[7], &[(1, &[7])]);
    let mut from1 = SliceMap::new();
    from1.insert(1, slice1(1.5));
    let mut state =
        admm_init(r0, slice1(1.5), DVector::from_element(1, 1.0), DMatrix::zeros(0, 1), &from1, false)
            .unwrap();
    let upsilon0 = state.upsilon.clone();
    for _ in 0..5 {
        let mut seen = SliceMap::new();
        seen.insert(1, slice1(1.5));
        admm_consensus_update(&mut state, slice1(1.5), &seen);
    }
    assert_abs_diff_eq!(state.upsilon[(0, 0)], upsilon0[(0, 0)], epsilon = 1e-15);
    assert_eq!(state.psi[(0, 0)], 1.5);
}

#[test]
fn consensus_dimensions_span_the_full_region_view() {
    // The neighbor average and the memory live on every local coordinate,
    // not just the shared ones.
    let r0 = toy_region(0, &[3, 7, 9], &[3, 7, 9], &[(1, &[7])]);
    let z = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut from1 = SliceMap::new();
    from1.insert(1, DMatrix::from_row_slice(1, 2, &[8.0, 9.0]));
    let s = admm_init(r0, z, DVector::from_element(3, 1.0), DMatrix::zeros(0, 2), &from1, false)
        .unwrap();
    assert_eq!(s.x.shape(), (3, 2));
    assert_eq!(s.psi.shape(), (3, 2));
    assert_eq!(s.upsilon.shape(), (3, 2));
    // Unshared rows of the neighbor average stay zero.
    assert_eq!(s.psi[(0, 0)], 0.0);
    assert_eq!(s.psi[(2, 1)], 0.0);
    assert_eq!(s.psi[(1, 0)], 8.0);
    assert_eq!(s.psi[(1, 1)], 9.0);
}

#[test]
fn injected_slices_shift_consensus_variables_by_the_mapped_perturbation() {
    // Regions 0 and 1 share coordinates 5 and 8 over two intervals. Feeding
    // the consensus update a perturbed neighbor slice must move ψ and υ by
    // exactly the selector-mapped, degree-scaled perturbation, and the next
    // estimate by the solved image of the memory shift.
    let r0 = toy_region(0, &[2, 5, 8], &[2, 5, 8], &[(1, &[5, 8])]);
    let z = DMatrix::from_row_slice(3, 2, &[0.4, -0.2, 1.0, 0.3, -0.7, 0.9]);
    let mut from1 = SliceMap::new();
    from1.insert(1, DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.6, 1.1]));
    let cfg = VerificationConfig::default();
    let base = admm_init(
        r0.clone(),
        z,
        DVector::from_element(3, 1.0),
        DMatrix::zeros(0, 2),
        &from1,
        false,
    )
    .unwrap();

    let honest = DMatrix::from_row_slice(2, 2, &[1.3, -0.5, 0.8, 0.1]);
    let a = DMatrix::from_row_slice(2, 2, &[0.25, -0.75, 0.5, 1.25]);
    let x_new = base.x.clone();

    let mut clean = base.clone();
    let mut seen = SliceMap::new();
    seen.insert(1, honest.clone());
    admm_consensus_update(&mut clean, x_new.clone(), &seen);

    let mut tampered = base.clone();
    let mut seen_t = SliceMap::new();
    seen_t.insert(1, &honest + &a);
    admm_consensus_update(&mut tampered, x_new, &seen_t);

    // ψ and υ move by D̄ Sᵀ a, to machine precision.
    let mut mapped = r0.s_nm[&1].transpose() * &a;
    for (j, mut row) in mapped.row_iter_mut().enumerate() {
        row *= r0.d_bar[j];
    }
    assert!(((&tampered.psi - &clean.psi) - &mapped).amax() < 1e-12);
    assert!(((&tampered.upsilon - &clean.upsilon) - &mapped).amax() < 1e-12);

    // The next estimates differ by the solved image of the memory shift.
    let m = x_update_matrix(&r0, &clean.sigma_z, &cfg);
    let factor = Cholesky::new(m).unwrap();
    let x_clean = admm_x_update(&clean, &cfg).unwrap();
    let x_tampered = admm_x_update(&tampered, &cfg).unwrap();
    let mut shift = &tampered.upsilon - &clean.upsilon;
    for (j, mut row) in shift.row_iter_mut().enumerate() {
        row *= cfg.c4 * r0.d[j];
    }
    let expected = factor.solve(&shift);
    assert!(((x_tampered - x_clean) - expected).amax() < 1e-10);
}

#[test]
fn single_region_update_solves_the_weighted_least_squares() {
    // No neighbors, no memory term: the update must equal the directly
    // solved weighted least-squares fit of readings and schedule.
    let mut rm = toy_region(0, &[0, 1], &[0, 1], &[]);
    rm.own_buses = vec![4];
    rm.s_p = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    rm.h = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
    let z = DMatrix::from_row_slice(2, 1, &[2.0, 1.0]);
    let sigma = DVector::from_vec(vec![0.5, 2.0]);
    let p_star = DMatrix::from_element(1, 1, 1.8);
    let cfg = VerificationConfig::default();
    let state = admm_init(rm.clone(), z.clone(), sigma.clone(), p_star.clone(), &SliceMap::new(), false)
        .unwrap();
    let x = admm_x_update(&state, &cfg).unwrap();

    let mut w = DMatrix::zeros(4, 2);
    let mut rhs = DVector::zeros(4);
    w[(0, 0)] = (cfg.c1 / sigma[0]).sqrt();
    rhs[0] = (cfg.c1 / sigma[0]).sqrt() * z[(0, 0)];
    w[(1, 1)] = (cfg.c1 / sigma[1]).sqrt();
    rhs[1] = (cfg.c1 / sigma[1]).sqrt() * z[(1, 0)];
    w[(2, 0)] = cfg.c2.sqrt();
    w[(2, 1)] = -cfg.c2.sqrt();
    w[(3, 0)] = cfg.c3.sqrt();
    rhs[3] = cfg.c3.sqrt() * p_star[(0, 0)];
    let sol = nalgebra::SVD::new(w, true, true).solve(&rhs, 1e-13).unwrap();
    assert_abs_diff_eq!(x[(0, 0)], sol[0], epsilon = 1e-10);
    assert_abs_diff_eq!(x[(1, 0)], sol[1], epsilon = 1e-10);
}

#[test]
fn disagreement_smoothing_follows_the_running_average() {
    // Full weight on the first sample: one shared coordinate differing by 2
    // over one interval scores 2²/4 = 1.
    let d1 = disagreement_update(0.0, &slice1(3.0), &slice1(1.0), 1.0);
    assert_eq!(d1, 1.0);
    // Second sample agrees exactly; the running average halves the score.
    let d2 = disagreement_update(d1, &slice1(2.0), &slice1(2.0), 0.5);
    assert_eq!(d2, 0.5);
    // Multi-coordinate slices average over entries and intervals.
    let own = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let seen = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
    let d = disagreement_update(0.0, &own, &seen, 1.0);
    assert_abs_diff_eq!(d, 2.0 / (4.0 * 2.0 * 2.0), epsilon = 1e-15);
}

#[test]
fn disagreement_rows_are_stochastic_over_neighbors() {
    let mut row = BTreeMap::new();
    row.insert(0, 0.3);
    row.insert(2, 1.7);
    row.insert(5, 0.04);
    let agents = [0, 1, 2, 4, 5];
    let r = disagreement_row(&row, &agents, 1e-16);
    assert_abs_diff_eq!(r.sum(), 1.0, epsilon = 1e-9);
    assert_eq!(r[1], 0.0);
    assert_eq!(r[3], 0.0);
    assert_abs_diff_eq!(r[2], 1.7 / 2.04, epsilon = 1e-12);
}

#[test]
fn equal_disagreement_ranks_everyone_the_same() {
    let mut d = BTreeMap::new();
    for n in 0..3usize {
        let mut row = BTreeMap::new();
        for m in 0..3usize {
            if m != n {
                row.insert(m, 0.7);
            }
        }
        d.insert(n, row);
    }
    let cfg = VerificationConfig::default();
    let det = DetectionState::from_rows(d, &cfg).unwrap();
    for i in 0..3 {
        assert_abs_diff_eq!(det.pi[i], 1.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(det.b.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }
}

/// Independent ranking oracle: leading eigenvalue from the dense solver,
/// eigenvector from the null space of the shifted matrix.
fn eigen_oracle(b: &DMatrix<f64>) -> DVector<f64> {
    let bt = b.transpose();
    let eigs = bt.complex_eigenvalues();
    let lead = eigs
        .iter()
        .max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap())
        .copied()
        .unwrap();
    assert!(lead.im.abs() < 1e-9, "leading eigenvalue must be real, got {lead}");
    let n = bt.nrows();
    let shifted = bt - DMatrix::identity(n, n) * lead.re;
    let svd = nalgebra::SVD::new(shifted, true, true);
    let idx = svd.singular_values.imin();
    let mut v: DVector<f64> = svd.v_t.as_ref().unwrap().row(idx).transpose();
    let total = v.sum();
    assert!(total.abs() > 1e-9, "eigenvector must have usable mass");
    v /= total;
    v
}

#[test]
fn dominant_disagreement_concentrates_the_ranking() {
    // Both honest regions score region 0 ten times higher than each other.
    let mut d = BTreeMap::new();
    d.insert(0, BTreeMap::from([(1, 1.0), (2, 1.0)]));
    d.insert(1, BTreeMap::from([(0, 10.0), (2, 1.0)]));
    d.insert(2, BTreeMap::from([(0, 10.0), (1, 1.0)]));
    let cfg = VerificationConfig::default();
    let det = DetectionState::from_rows(d, &cfg).unwrap();
    assert_eq!(det.pi.imax(), 0);
    let oracle = eigen_oracle(&det.b);
    for i in 0..3 {
        assert_abs_diff_eq!(det.pi[i], oracle[i], epsilon = 1e-8);
    }
}

#[test]
fn ranking_without_an_odd_cycle_does_not_settle() {
    // A path of three regions produces a two-periodic power iteration; the
    // failure names the missing 3-clique.
    let b = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.5, 0.0, 0.5, 0.0, 1.0, 0.0]);
    let err = trust_scores(&b, 1e-10, 500).unwrap_err();
    assert!(matches!(err, VerificationError::NoConvergence { .. }));
    assert!(err.to_string().contains("3-clique"));
}

#[test]
fn zero_disagreement_ranks_uniformly() {
    let b = DMatrix::zeros(4, 4);
    let pi = trust_scores(&b, 1e-10, 100).unwrap();
    for i in 0..4 {
        assert_eq!(pi[i], 0.25);
    }
}

#[test]
fn settled_estimates_end_the_loop_before_any_accusation() {
    let cfg = VerificationConfig::default();
    let pi = DVector::from_vec(vec![0.9, 0.05, 0.05]);
    let agents = [4, 5, 6];
    // Steps below tolerance win even with a wildly separated ranking.
    let t = check_termination(&[1e-4, 2e-4, 5e-5], &pi, &pi, &agents, &cfg);
    assert_eq!(t, Termination::Converged);
}

#[test]
fn stable_separated_ranking_names_the_attacker() {
    let cfg = VerificationConfig::default();
    let pi = DVector::from_vec(vec![0.9, 0.05, 0.05]);
    let agents = [4, 5, 6];
    // Ranking still moving: no verdict.
    let moving = DVector::from_vec(vec![0.7, 0.2, 0.1]);
    assert_eq!(check_termination(&[0.1, 0.1, 0.1], &pi, &moving, &agents, &cfg), Termination::Continue);
    // Stable and separated: the argmax region is named.
    assert_eq!(
        check_termination(&[0.1, 0.1, 0.1], &pi, &pi, &agents, &cfg),
        Termination::AttackerIdentified(4)
    );
    let (mean, std) = excluded_stats(&pi, 0);
    assert_abs_diff_eq!(mean, 0.05, epsilon = 1e-12);
    assert_abs_diff_eq!(std, 0.0, epsilon = 1e-12);
}

#[test]
fn balanced_ranking_never_accuses() {
    let cfg = VerificationConfig::default();
    let pi = DVector::from_vec(vec![0.5, 0.5]);
    assert_eq!(check_termination(&[0.1, 0.1], &pi, &pi, &[0, 1], &cfg), Termination::Continue);
}

#[test]
fn pooled_least_squares_matches_the_distributed_estimates() {
    // Two regions over a four-bus feeder, exact readings of a solved state.
    // The distributed loop must land on the pooled weighted least-squares
    // fit, which in turn recovers the true state.
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let placement = bus_sensors(&grid);
    let truth = truth_states(
        &grid,
        &[vec![0.0, -3.0, 1.0, -2.0], vec![0.0, -1.0, 0.5, -4.0]],
    );
    let inputs: Vec<RegionInputs> =
        (0..2).map(|n| exact_inputs(&grid, n, &placement, &truth)).collect();
    let graph = build_communication_graph(&grid);
    let (ledger, admins) = ledger_fixture(2);
    let cfg = VerificationConfig { epsilon: 1e-9, ..VerificationConfig::default() };
    let report = run_verification(
        &ledger,
        &admins,
        3,
        &inputs,
        &graph,
        &cfg,
        &HonestParticipants,
        ExecutionMode::Deterministic,
    )
    .unwrap();
    assert!(report.removed.is_empty());
    assert_eq!(report.epochs, 1);

    let pooled = pooled_least_squares(&inputs, grid.n_vars(), &cfg);
    for t in 0..2 {
        for g in 0..grid.n_vars() {
            assert_abs_diff_eq!(pooled[(g, t)], truth[t][g], epsilon = 1e-4);
        }
    }
    for n in 0..2usize {
        let state = &report.states[&n];
        for (i, g) in state.matrices.vars.iter().enumerate() {
            for t in 0..2 {
                assert_abs_diff_eq!(state.x[(i, t)], pooled[(*g, t)], epsilon = 1e-5);
            }
        }
        // Verified injections agree with the true bus injections.
        let inj = &report.injections[&n];
        for (r, b) in state.matrices.own_buses.iter().enumerate() {
            let g = grid.var_index(VarKind::BusP, *b);
            for t in 0..2 {
                assert_abs_diff_eq!(inj[(r, t)], truth[t][g], epsilon = 1e-4);
            }
        }
        // Deviations from an exact schedule are negligible.
        assert!(report.deviations[&n].amax() < 1e-4);
        // The converged estimate is a fixed point of the update.
        let next = admm_x_update(state, &cfg).unwrap();
        assert!((next - &state.x).amax() <= 1e-7);
    }
    // Tie-line coordinates agree across the edge.
    let s0 = report.states[&0].slice_for(1).unwrap();
    let s1 = report.states[&1].slice_for(0).unwrap();
    assert!((s0 - s1).amax() < 1e-6);
    // The step trace ends below the tolerance and the scores stay balanced.
    assert!(*report.step_trace.last().unwrap() <= cfg.epsilon);
    for (_, p) in &report.pi {
        assert_abs_diff_eq!(*p, 0.5, epsilon = 1e-6);
    }
}

/// Stacks every region's weighted rows into one global least-squares system
/// and solves it directly; the independent yardstick for the consensus loop.
fn pooled_least_squares(
    inputs: &[RegionInputs],
    n_global: usize,
    cfg: &VerificationConfig,
) -> DMatrix<f64> {
    let horizon = inputs[0].p_star.ncols();
    let total_rows: usize = inputs
        .iter()
        .map(|i| i.matrices.measured.len() + i.matrices.h.nrows() + i.matrices.own_buses.len())
        .sum();
    let mut w = DMatrix::zeros(total_rows, n_global);
    let mut rhs = DMatrix::zeros(total_rows, horizon);
    let mut r = 0;
    for inp in inputs {
        let m = &inp.matrices;
        for (i, g) in m.measured.iter().enumerate() {
            let wgt = (cfg.c1 / inp.sigma_z[i]).sqrt();
            w[(r, *g)] = wgt;
            for t in 0..horizon {
                rhs[(r, t)] = wgt * inp.z[(i, t)];
            }
            r += 1;
        }
        let wgt_h = cfg.c2.sqrt();
        for hr in 0..m.h.nrows() {
            for c in 0..m.n_vars() {
                if m.h[(hr, c)] != 0.0 {
                    w[(r, m.vars[c])] = wgt_h * m.h[(hr, c)];
                }
            }
            r += 1;
        }
        let wgt_p = cfg.c3.sqrt();
        for br in 0..m.own_buses.len() {
            let col = m.s_p.row(br).iter().position(|v| *v == 1.0).unwrap();
            w[(r, m.vars[col])] = wgt_p;
            for t in 0..horizon {
                rhs[(r, t)] = wgt_p * inp.p_star[(br, t)];
            }
            r += 1;
        }
    }
    nalgebra::SVD::new(w, true, true).solve(&rhs, 1e-12).unwrap()
}

#[test]
fn threaded_and_deterministic_runs_agree_to_the_bit() {
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let placement = bus_sensors(&grid);
    let truth = truth_states(&grid, &[vec![0.0, -2.0, 1.5, -1.0]]);
    let inputs: Vec<RegionInputs> =
        (0..2).map(|n| exact_inputs(&grid, n, &placement, &truth)).collect();
    let graph = build_communication_graph(&grid);
    let cfg = VerificationConfig { epsilon: 1e-6, ..VerificationConfig::default() };

    let (l1, a1) = ledger_fixture(2);
    let det = run_verification(
        &l1, &a1, 0, &inputs, &graph, &cfg, &HonestParticipants, ExecutionMode::Deterministic,
    )
    .unwrap();
    let (l2, a2) = ledger_fixture(2);
    let thr = run_verification(
        &l2, &a2, 0, &inputs, &graph, &cfg, &HonestParticipants, ExecutionMode::Threaded,
    )
    .unwrap();

    assert_eq!(det.iterations, thr.iterations);
    for n in 0..2usize {
        assert_eq!(det.states[&n].x, thr.states[&n].x);
    }
    assert_eq!(det.pi, thr.pi);
    assert_eq!(det.step_trace, thr.step_trace);
}

#[test]
fn zero_start_runs_reproduce_bitwise() {
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let placement = bus_sensors(&grid);
    let truth = truth_states(&grid, &[vec![0.0, -2.0, 1.5, -1.0]]);
    let inputs: Vec<RegionInputs> =
        (0..2).map(|n| exact_inputs(&grid, n, &placement, &truth)).collect();
    let graph = build_communication_graph(&grid);
    let cfg =
        VerificationConfig { epsilon: 1e-6, zero_init: true, ..VerificationConfig::default() };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let (ledger, admins) = ledger_fixture(2);
        runs.push(
            run_verification(
                &ledger,
                &admins,
                0,
                &inputs,
                &graph,
                &cfg,
                &HonestParticipants,
                ExecutionMode::Deterministic,
            )
            .unwrap(),
        );
    }
    assert_eq!(runs[0].iterations, runs[1].iterations);
    for n in 0..2usize {
        assert_eq!(runs[0].states[&n].x, runs[1].states[&n].x);
    }
}

/// Flips the sign of a constant perturbation every iteration, so the honest
/// estimates keep moving while the smoothed disagreement scores settle.
struct FlippingInjector {
    attacker: usize,
}

impl Saboteur for FlippingInjector {
    fn conduct(&self, from: usize, _to: usize, iter: u64, rows: usize, cols: usize) -> EdgeConduct {
        if from != self.attacker {
            return EdgeConduct::Honest;
        }
        let sign = if iter % 2 == 0 { 1.0 } else { -1.0 };
        EdgeConduct::Add(DMatrix::from_element(rows, cols, 0.5 * sign))
    }
}

/// Three regions on a six-bus feeder with a sensor grant closing the
/// triangle, so disagreement can be corroborated.
fn triangle_fixture() -> (Grid, Vec<RegionInputs>, crate::grid::CommunicationGraph) {
    let grid = chain_grid(
        6,
        &[0, 0, 1, 1, 2, 2],
        vec![SensorGrant { aggregator: 0, bus: 6 }],
    );
    let placement = bus_sensors(&grid);
    let truth = truth_states(&grid, &[vec![0.0, -2.0, 1.0, -1.5, 0.5, -1.0]]);
    let inputs: Vec<RegionInputs> =
        (0..3).map(|n| exact_inputs(&grid, n, &placement, &truth)).collect();
    let graph = build_communication_graph(&grid);
    assert!(graph.clique3, "fixture must contain a 3-clique");
    (grid, inputs, graph)
}

#[test]
fn message_injector_is_isolated_and_the_survivors_settle() {
    let (_grid, inputs, graph) = triangle_fixture();
    let (ledger, admins) = ledger_fixture(3);
    let cfg = VerificationConfig::default();
    let saboteur = FlippingInjector { attacker: 2 };
    let report = run_verification(
        &ledger,
        &admins,
        0,
        &inputs,
        &graph,
        &cfg,
        &saboteur,
        ExecutionMode::Deterministic,
    )
    .unwrap();
    assert_eq!(report.removed, vec![2]);
    assert_eq!(report.epochs, 2);
    assert_eq!(report.states.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
    // The attacker led the ranking when the verdict fell.
    let verdict_sample = report
        .pi_trace
        .iter()
        .rev()
        .find(|s| s.epoch == 0)
        .expect("first epoch produced samples");
    let argmax = verdict_sample
        .pi
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert_eq!(verdict_sample.agents[argmax], 2);
    // Survivors converged honestly.
    assert!(*report.step_trace.last().unwrap() <= cfg.epsilon);
}

#[test]
fn threaded_isolation_matches_the_deterministic_run() {
    let (_grid, inputs, graph) = triangle_fixture();
    let cfg = VerificationConfig::default();
    let saboteur = FlippingInjector { attacker: 2 };
    let (l1, a1) = ledger_fixture(3);
    let det = run_verification(
        &l1, &a1, 0, &inputs, &graph, &cfg, &saboteur, ExecutionMode::Deterministic,
    )
    .unwrap();
    let (l2, a2) = ledger_fixture(3);
    let thr =
        run_verification(&l2, &a2, 0, &inputs, &graph, &cfg, &saboteur, ExecutionMode::Threaded)
            .unwrap();
    assert_eq!(det.removed, thr.removed);
    assert_eq!(det.iterations, thr.iterations);
    for n in [0usize, 1] {
        assert_eq!(det.states[&n].x, thr.states[&n].x);
    }
}

#[test]
fn removing_a_cut_vertex_reports_the_disconnection() {
    // Four regions: a triangle over 0,1,2 plus region 3 hanging off region
    // 2. Convicting region 2 strands region 3.
    let grid = chain_grid(
        8,
        &[0, 0, 1, 1, 2, 2, 3, 3],
        vec![SensorGrant { aggregator: 0, bus: 6 }],
    );
    let placement = bus_sensors(&grid);
    let truth = truth_states(&grid, &[vec![0.0, -2.0, 1.0, -1.5, 0.5, -1.0, 0.8, -0.6]]);
    let inputs: Vec<RegionInputs> =
        (0..4).map(|n| exact_inputs(&grid, n, &placement, &truth)).collect();
    let graph = build_communication_graph(&grid);
    let (ledger, admins) = ledger_fixture(4);
    let cfg = VerificationConfig::default();
    let saboteur = FlippingInjector { attacker: 2 };
    let err = run_verification(
        &ledger,
        &admins,
        0,
        &inputs,
        &graph,
        &cfg,
        &saboteur,
        ExecutionMode::Deterministic,
    )
    .unwrap_err();
    match err {
        VerificationError::GraphDisconnected { removed } => assert_eq!(removed, vec![2]),
        other => panic!("expected a disconnection report, got {other}"),
    }
}

#[test]
fn two_regions_cannot_convict_each_other() {
    // Without a third witness the ranking stays balanced, so a persistent
    // injector just exhausts the iteration budget.
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let placement = bus_sensors(&grid);
    let truth = truth_states(&grid, &[vec![0.0, -2.0, 1.5, -1.0]]);
    let inputs: Vec<RegionInputs> =
        (0..2).map(|n| exact_inputs(&grid, n, &placement, &truth)).collect();
    let graph = build_communication_graph(&grid);
    let (ledger, admins) = ledger_fixture(2);
    let cfg = VerificationConfig { max_iters: 60, ..VerificationConfig::default() };
    let saboteur = FlippingInjector { attacker: 1 };
    let err = run_verification(
        &ledger,
        &admins,
        0,
        &inputs,
        &graph,
        &cfg,
        &saboteur,
        ExecutionMode::Deterministic,
    )
    .unwrap_err();
    assert!(matches!(err, VerificationError::IterationLimit { iterations: 60 }));
}

/// Withholds every message from one region for a few iterations.
struct Mute {
    region: usize,
    until: u64,
}

impl Saboteur for Mute {
    fn conduct(&self, from: usize, _to: usize, iter: u64, _rows: usize, _cols: usize) -> EdgeConduct {
        if from == self.region && iter >= 1 && iter <= self.until {
            EdgeConduct::Withhold
        } else {
            EdgeConduct::Honest
        }
    }
}

#[test]
fn withheld_slices_fall_back_to_the_previous_message() {
    // Region 1 goes quiet for three iterations; peers substitute its last
    // slice and the run still settles once it speaks again.
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let placement = bus_sensors(&grid);
    let truth = truth_states(&grid, &[vec![0.0, -2.0, 1.5, -1.0]]);
    let inputs: Vec<RegionInputs> =
        (0..2).map(|n| exact_inputs(&grid, n, &placement, &truth)).collect();
    let graph = build_communication_graph(&grid);
    let (ledger, admins) = ledger_fixture(2);
    let cfg = VerificationConfig { epsilon: 1e-7, ..VerificationConfig::default() };
    let saboteur = Mute { region: 1, until: 3 };
    let report = run_verification(
        &ledger,
        &admins,
        0,
        &inputs,
        &graph,
        &cfg,
        &saboteur,
        ExecutionMode::Deterministic,
    )
    .unwrap();
    assert!(report.removed.is_empty());
    // The withheld rounds left empty payloads on the ledger.
    let net = ledger.lock();
    for iter in 1..=3u64 {
        let key = crate::ledger::contracts::edge_state_key(0, iter, 1, 0, 1);
        let rec = net
            .query_key(&admins[0], crate::ledger::COMMON_CHANNEL, &key)
            .expect("withheld rounds still post a record");
        let cols: Vec<Vec<f64>> = serde_json::from_value(rec.value["slice"].clone()).unwrap();
        assert!(cols.is_empty());
    }
}

#[test]
fn honest_runs_leave_a_vanishing_disagreement_trail() {
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let placement = bus_sensors(&grid);
    let truth = truth_states(&grid, &[vec![0.0, -2.0, 1.5, -1.0]]);
    let inputs: Vec<RegionInputs> =
        (0..2).map(|n| exact_inputs(&grid, n, &placement, &truth)).collect();
    let graph = build_communication_graph(&grid);
    let (ledger, admins) = ledger_fixture(2);
    let cfg = VerificationConfig::default();
    let report = run_verification(
        &ledger,
        &admins,
        0,
        &inputs,
        &graph,
        &cfg,
        &HonestParticipants,
        ExecutionMode::Deterministic,
    )
    .unwrap();
    // Steps decay past a burn-in and end below the tolerance.
    let steps = &report.step_trace;
    assert!(*steps.last().unwrap() <= cfg.epsilon);
    let burn = steps.len().min(20);
    for w in steps[burn - 1..].windows(2) {
        assert!(w[1] <= w[0] * 1.5 + 1e-12, "steps must trend down after burn-in");
    }
}

#[test]
fn region_inputs_come_from_ledger_records() {
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let placement = bus_sensors(&grid);
    let matrices = build_region_matrices(&grid, 0, &placement).unwrap();
    let (ledger, admins) = ledger_fixture(2);
    {
        let mut net = ledger.lock();
        // Region 0's view covers buses 1..=3; post readings for each.
        for bus in 1..=3usize {
            let mut vars = serde_json::Map::new();
            let mut variance = serde_json::Map::new();
            for kind in [VarKind::BusP, VarKind::BusQ, VarKind::BusV2] {
                let g = grid.var_index(kind, bus);
                vars.insert(g.to_string(), json!([bus as f64, 10.0 + bus as f64]));
                variance.insert(g.to_string(), json!(2.0));
            }
            net.mc_submit_measurements(
                &admins[0],
                5,
                bus,
                json!({ "vars": vars, "variance": variance }),
            )
            .unwrap();
        }
        // A schedule for bus 1 only; bus 2 falls back to zero.
        net.rc_put_bus_dispatch(&admins[0], 5, 1, &[5.0, 6.0]).unwrap();
    }
    let inputs = collect_region_inputs(&ledger, &admins[0], &grid, matrices, 5, 2).unwrap();
    assert_eq!(inputs.z.nrows(), inputs.matrices.measured.len());
    for (i, g) in inputs.matrices.measured.iter().enumerate() {
        let (_, bus) = grid.var_of_index(*g);
        assert_eq!(inputs.z[(i, 0)], bus as f64);
        assert_eq!(inputs.z[(i, 1)], 10.0 + bus as f64);
        assert_eq!(inputs.sigma_z[i], 2.0);
    }
    assert_eq!(inputs.p_star.nrows(), 2);
    assert_eq!(inputs.p_star[(0, 0)], 5.0);
    assert_eq!(inputs.p_star[(0, 1)], 6.0);
    assert_eq!(inputs.p_star[(1, 0)], 0.0);
    assert_eq!(inputs.p_star[(1, 1)], 0.0);
}

#[test]
fn missing_measurements_are_reported_with_their_key() {
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let placement = bus_sensors(&grid);
    let matrices = build_region_matrices(&grid, 0, &placement).unwrap();
    let (ledger, admins) = ledger_fixture(2);
    let err = collect_region_inputs(&ledger, &admins[0], &grid, matrices, 5, 2).unwrap_err();
    match err {
        VerificationError::MissingRecord { region: 0, key, .. } => {
            assert!(key.contains("meas/window5"));
        }
        other => panic!("expected a missing record, got {other}"),
    }
}

#[test]
fn line_sensors_cannot_back_measurement_records() {
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let mut placement = bus_sensors(&grid);
    placement.insert(grid.var_index(VarKind::LineP, 0));
    let matrices = build_region_matrices(&grid, 0, &placement).unwrap();
    let (ledger, admins) = ledger_fixture(2);
    let err = collect_region_inputs(&ledger, &admins[0], &grid, matrices, 5, 2).unwrap_err();
    assert!(matches!(err, VerificationError::Dimension(_)));
}

#[test]
fn single_region_runs_are_rejected() {
    let grid = chain_grid(2, &[0, 0], vec![]);
    let placement = bus_sensors(&grid);
    let truth = truth_states(&grid, &[vec![0.0, -1.0]]);
    let inputs = vec![exact_inputs(&grid, 0, &placement, &truth)];
    let graph = build_communication_graph(&grid);
    let (ledger, admins) = ledger_fixture(1);
    let err = run_verification(
        &ledger,
        &admins,
        0,
        &inputs,
        &graph,
        &VerificationConfig::default(),
        &HonestParticipants,
        ExecutionMode::Deterministic,
    )
    .unwrap_err();
    assert!(matches!(err, VerificationError::InsufficientRegions { alive: 1 }));
}

#[test]
fn config_validation_rejects_nonpositive_weights() {
    let mut cfg = VerificationConfig::default();
    cfg.c2 = 0.0;
    assert!(matches!(cfg.validate(), Err(VerificationError::Config(_))));
    let mut cfg = VerificationConfig::default();
    cfg.alpha = AlphaSchedule::Constant(1.5);
    assert!(matches!(cfg.validate(), Err(VerificationError::Config(_))));
    assert!(VerificationConfig::strict_verification().validate().is_ok());
    assert_eq!(AlphaSchedule::Reciprocal.at(4), 0.25);
    assert_eq!(AlphaSchedule::Constant(0.3).at(9), 0.3);
}

#[test]
fn unmeasured_unshared_coordinates_make_the_update_singular() {
    // One lonely coordinate with no reading, no physics, and no neighbor:
    // nothing pins it, and the factorization must refuse.
    let rm = toy_region(0, &[0], &[], &[]);
    let state = admm_init(
        rm,
        DMatrix::zeros(0, 1),
        DVector::zeros(0),
        DMatrix::zeros(0, 1),
        &SliceMap::new(),
        false,
    )
    .unwrap();
    let err = admm_x_update(&state, &VerificationConfig::default()).unwrap_err();
    assert!(matches!(err, VerificationError::SingularSystem { region: 0 }));
}
