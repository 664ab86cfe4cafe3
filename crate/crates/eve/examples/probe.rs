use std::collections::BTreeSet;
use std::sync::Arc;

use eve::grid::{
    build_communication_graph, build_region_matrices, solve_power_flow, validate_radial, Grid,
    GridTopology, Line, SensorGrant, VarKind,
};
use eve::ledger::LedgerNetwork;
use eve::market::ExecutionMode;
use eve::verification::{
    run_verification, EdgeConduct, HonestParticipants, RegionInputs, Saboteur,
    VerificationConfig,
};
use nalgebra::{DMatrix, DVector};

fn chain_grid(n: usize, regions: &[usize], grants: Vec<SensorGrant>) -> Grid {
    let buses: Vec<usize> = (1..=n).collect();
    let lines = (1..n).map(|i| Line { from: i, to: i + 1, r: 0.01, x: 0.01 }).collect();
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

fn placement_of(grid: &Grid) -> BTreeSet<usize> {
    let mut placement = BTreeSet::new();
    for &b in &grid.topology().buses {
        placement.insert(grid.var_index(VarKind::BusP, b));
        placement.insert(grid.var_index(VarKind::BusQ, b));
        placement.insert(grid.var_index(VarKind::BusV2, b));
    }
    placement
}

fn inputs_of(
    grid: &Grid,
    n_regions: usize,
    profile: &[f64],
    discord: f64,
) -> (Vec<RegionInputs>, DVector<f64>) {
    let placement = placement_of(grid);
    let p = DVector::from_vec(profile.to_vec());
    let q = 0.3 * &p;
    let truth = solve_power_flow(grid, &p, &q).unwrap().to_flat(grid);
    let inputs = (0..n_regions)
        .map(|n| {
            let matrices = build_region_matrices(grid, n, &placement).unwrap();
            let mut z = DMatrix::zeros(matrices.measured.len(), 1);
            for (i, g) in matrices.measured.iter().enumerate() {
                let wobble = if (i + n) % 2 == 0 { 1.0 } else { -1.0 };
                z[(i, 0)] = truth[*g] + discord * (n as f64 + 1.0) * wobble;
            }
            let sigma_z = DVector::from_element(matrices.measured.len(), 1.0);
            let mut p_star = DMatrix::zeros(matrices.own_buses.len(), 1);
            for (r, b) in matrices.own_buses.iter().enumerate() {
                p_star[(r, 0)] = truth[grid.var_index(VarKind::BusP, *b)];
            }
            RegionInputs { matrices, z, sigma_z, p_star }
        })
        .collect();
    (inputs, truth)
}

fn pooled(inputs: &[RegionInputs], n_global: usize, cfg: &VerificationConfig) -> DMatrix<f64> {
    let horizon = inputs[0].p_star.ncols();
    let total: usize = inputs
        .iter()
        .map(|i| i.matrices.measured.len() + i.matrices.h.nrows() + i.matrices.own_buses.len())
        .sum();
    let mut w = DMatrix::zeros(total, n_global);
    let mut rhs = DMatrix::zeros(total, horizon);
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
        let wh = cfg.c2.sqrt();
        for hr in 0..m.h.nrows() {
            for c in 0..m.n_vars() {
                if m.h[(hr, c)] != 0.0 {
                    w[(r, m.vars[c])] = wh * m.h[(hr, c)];
                }
            }
            r += 1;
        }
        let wp = cfg.c3.sqrt();
        for br in 0..m.own_buses.len() {
            let col = m.s_p.row(br).iter().position(|v| *v == 1.0).unwrap();
            w[(r, m.vars[col])] = wp;
            for t in 0..horizon {
                rhs[(r, t)] = wp * inp.p_star[(br, t)];
            }
            r += 1;
        }
    }
    nalgebra::SVD::new(w, true, true).solve(&rhs, 1e-12).unwrap()
}

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

fn main() {
    // 2-region: is the gap to the pooled fit confined to line coordinates?
    let grid = chain_grid(4, &[0, 0, 1, 1], vec![]);
    let (inputs, truth) = inputs_of(&grid, 2, &[0.0, -3.0, 1.0, -2.0], 0.0);
    let graph = build_communication_graph(&grid);
    let mut net = LedgerNetwork::new(2);
    let admins: Vec<String> = (0..2).map(|r| net.register_aggregator(r)).collect();
    let ledger = Arc::new(parking_lot::Mutex::new(net));
    let cfg = VerificationConfig { epsilon: 2e-7, max_iters: 20000, ..VerificationConfig::default() };
    match run_verification(
        &ledger, &admins, 0, &inputs, &graph, &cfg, &HonestParticipants,
        ExecutionMode::Deterministic,
    ) {
        Ok(report) => {
            println!("2-region eps=2e-7: {} iters", report.iterations);
            let sol = pooled(&inputs, grid.n_vars(), &cfg);
            let n_bus_vars = 3 * grid.topology().buses.len();
            for n in 0..2usize {
                let st = &report.states[&n];
                let mut bus_dx: f64 = 0.0;
                let mut line_dx: f64 = 0.0;
                for (i, g) in st.matrices.vars.iter().enumerate() {
                    let d = (st.x[(i, 0)] - sol[(*g, 0)]).abs();
                    if *g < n_bus_vars {
                        bus_dx = bus_dx.max(d);
                    } else {
                        line_dx = line_dx.max(d);
                    }
                }
                println!("  region {n}: bus |x-pooled|={bus_dx:.3e} line |x-pooled|={line_dx:.3e}");
                let inj = &report.injections[&n];
                let mut di: f64 = 0.0;
                for (r, b) in st.matrices.own_buses.iter().enumerate() {
                    di = di.max((inj[(r, 0)] - truth[grid.var_index(VarKind::BusP, *b)]).abs());
                }
                println!("  region {n}: |inj-truth|={di:.3e}");
            }
            // Cross-region agreement on the full shared slice (lines included).
            let s0 = report.states[&0].slice_for(1).unwrap();
            let s1 = report.states[&1].slice_for(0).unwrap();
            println!("  tie-line slice gap={:.3e}", (s0 - s1).amax());
        }
        Err(e) => println!("2-region eps=2e-7: ERROR {e}"),
    }

    // Triangle attack with sensor discord: mixing should now be fast enough
    // to rank and convict.
    let grid = chain_grid(6, &[0, 0, 1, 1, 2, 2], vec![SensorGrant { aggregator: 0, bus: 6 }]);
    let (inputs, _) = inputs_of(&grid, 3, &[0.0, -2.0, 1.0, -1.5, 0.5, -1.0], 0.05);
    let graph = build_communication_graph(&grid);
    let mut net = LedgerNetwork::new(3);
    let admins: Vec<String> = (0..3).map(|r| net.register_aggregator(r)).collect();
    let ledger = Arc::new(parking_lot::Mutex::new(net));
    let cfg = VerificationConfig { max_iters: 40_000, ..VerificationConfig::default() };
    let sab = FlippingInjector { attacker: 2 };
    match run_verification(
        &ledger, &admins, 0, &inputs, &graph, &cfg, &sab, ExecutionMode::Deterministic,
    ) {
        Ok(report) => {
            println!(
                "triangle attack: {} iters epochs={} removed={:?}",
                report.iterations, report.epochs, report.removed
            );
            if let Some(s) = report.pi_trace.iter().rev().find(|s| s.epoch == 0) {
                println!("  verdict sample k={} pi={:?}", s.iter, s.pi);
            }
            let e0: Vec<_> = report.pi_trace.iter().filter(|s| s.epoch == 0).collect();
            for s in e0.iter().rev().take(4).rev() {
                println!("  tail k={} pi={:?} step={:.2e}", s.iter, s.pi, s.max_step);
            }
        }
        Err(e) => println!("triangle attack: ERROR {e}"),
    }

    // Honest triangle with discord: does convergence still win the race?
    let (inputs, _) = inputs_of(&grid, 3, &[0.0, -2.0, 1.0, -1.5, 0.5, -1.0], 0.05);
    let mut net = LedgerNetwork::new(3);
    let admins: Vec<String> = (0..3).map(|r| net.register_aggregator(r)).collect();
    let ledger = Arc::new(parking_lot::Mutex::new(net));
    match run_verification(
        &ledger, &admins, 0, &inputs, &graph, &cfg, &HonestParticipants,
        ExecutionMode::Deterministic,
    ) {
        Ok(report) => println!(
            "triangle honest: {} iters removed={:?}",
            report.iterations, report.removed
        ),
        Err(e) => println!("triangle honest: ERROR {e}"),
    }

    // Cut vertex: grant on bus 5 keeps region 3 reachable only through 2.
    let grid = chain_grid(
        8,
        &[0, 0, 1, 1, 2, 2, 3, 3],
        vec![SensorGrant { aggregator: 0, bus: 5 }],
    );
    let (inputs, _) = inputs_of(&grid, 4, &[0.0, -2.0, 1.0, -1.5, 0.5, -1.0, 0.8, -0.6], 0.05);
    let graph = build_communication_graph(&grid);
    println!("cut-vertex edges: {:?}", graph.edges);
    let mut net = LedgerNetwork::new(4);
    let admins: Vec<String> = (0..4).map(|r| net.register_aggregator(r)).collect();
    let ledger = Arc::new(parking_lot::Mutex::new(net));
    let sab = FlippingInjector { attacker: 2 };
    match run_verification(
        &ledger, &admins, 0, &inputs, &graph, &cfg, &sab, ExecutionMode::Deterministic,
    ) {
        Ok(report) => println!(
            "cut-vertex: OK?! iters={} removed={:?}",
            report.iterations, report.removed
        ),
        Err(e) => println!("cut-vertex: ERROR {e}"),
    }
}
