//! Radial distribution-network model: topology validation, DistFlow constraint
//! rows, power-flow ground truth, and region/communication-graph construction.
//!
//! State variables follow the branch-flow convention: per bus `(p, q, v²)` and
//! per line `(P, Q, c², x′)`, where `x′` is the auxiliary variable standing in
//! for the quotient `(P² + Q²)/c²`. Bus and line powers are carried in MW/MVAr
//! while `v²` and `c²` are per-unit, matching how the source network case files
//! report quantities; the constraint rows carry the base-MVA conversion.

mod matpower;
mod powerflow;
mod regions;

pub use matpower::{import_matpower, MatpowerCase};
pub use powerflow::solve_power_flow;
pub use regions::{build_communication_graph, build_region_matrices, CommunicationGraph, RegionMatrices};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("topology contains a cycle (|lines| = {lines}, |buses| = {buses}, or duplicated parent)")]
    CycleDetected { buses: usize, lines: usize },
    #[error("bus {0} is not reachable from the root")]
    Disconnected(usize),
    #[error("region {0} is empty or not contiguous")]
    NonContiguousRegion(usize),
    #[error("region ids must form 0..N, found {0:?}")]
    InvalidRegionIds(Vec<usize>),
    #[error("line references unknown bus {0}")]
    UnknownBus(usize),
    #[error("unknown region {0}")]
    UnknownRegion(usize),
    #[error("power flow did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("voltage collapse at bus {0} (v² ≤ 0)")]
    VoltageCollapse(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// A directed line of the radial network, from parent to child, impedance per unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

impl Line {
    pub fn z_abs2(&self) -> f64 {
        self.r * self.r + self.x * self.x
    }
}

/// Grants an aggregator read access to a neighboring region's bus sensors,
/// making that bus's (p, q, v²) shared variables of both regions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SensorGrant {
    pub aggregator: usize,
    pub bus: usize,
}

/// Raw network description prior to validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridTopology {
    pub buses: Vec<usize>,
    pub lines: Vec<Line>,
    pub root: usize,
    /// bus id → aggregator id; ids must form 0..N.
    pub region_of: BTreeMap<usize, usize>,
    #[serde(default)]
    pub sensor_grants: Vec<SensorGrant>,
    pub base_mva: f64,
}

/// Kinds of state variables attached to buses and lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarKind {
    BusP,
    BusQ,
    BusV2,
    LineP,
    LineQ,
    LineC2,
    LineAux,
}

/// A validated radial grid with derived indexing structures.
#[derive(Debug, Clone)]
pub struct Grid {
    topo: GridTopology,
    bus_rank: BTreeMap<usize, usize>,
    parent_line: BTreeMap<usize, usize>,
    children_lines: BTreeMap<usize, Vec<usize>>,
    /// Bus ids in topological order (root first).
    pub topo_order: Vec<usize>,
    pub n_regions: usize,
}

/// Checks that the topology is a connected radial tree with contiguous,
/// densely numbered regions, and returns the validated grid.
pub fn validate_radial(topo: GridTopology) -> Result<Grid, GridError> {
    let nb = topo.buses.len();
    let bus_set: BTreeSet<usize> = topo.buses.iter().copied().collect();
    if bus_set.len() != nb || !bus_set.contains(&topo.root) {
        return Err(GridError::UnknownBus(topo.root));
    }
    if topo.lines.len() != nb.saturating_sub(1) {
        return Err(GridError::CycleDetected { buses: nb, lines: topo.lines.len() });
    }
    let mut parent_line: BTreeMap<usize, usize> = BTreeMap::new();
    let mut children_lines: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, line) in topo.lines.iter().enumerate() {
        if !bus_set.contains(&line.from) {
            return Err(GridError::UnknownBus(line.from));
        }
        if !bus_set.contains(&line.to) {
            return Err(GridError::UnknownBus(line.to));
        }
        if line.to == topo.root || parent_line.insert(line.to, idx).is_some() {
            return Err(GridError::CycleDetected { buses: nb, lines: topo.lines.len() });
        }
        children_lines.entry(line.from).or_default().push(idx);
    }
    // Reachability from the root; with |E| = |B|−1 and unique parents this
    // also rules out cycles.
    let mut order = Vec::with_capacity(nb);
    let mut stack = vec![topo.root];
    let mut seen = BTreeSet::new();
    seen.insert(topo.root);
    while let Some(b) = stack.pop() {
        order.push(b);
        for &l in children_lines.get(&b).into_iter().flatten() {
            let c = topo.lines[l].to;
            if seen.insert(c) {
                stack.push(c);
            }
        }
    }
    if order.len() != nb {
        let missing = bus_set.iter().find(|b| !seen.contains(b)).copied().unwrap();
        return Err(GridError::Disconnected(missing));
    }

    let mut n_regions = 0;
    if !topo.region_of.is_empty() {
        let ids: BTreeSet<usize> = topo.region_of.values().copied().collect();
        let max = *ids.iter().max().unwrap();
        if ids.len() != max + 1 {
            return Err(GridError::InvalidRegionIds(ids.into_iter().collect()));
        }
        n_regions = max + 1;
        for b in &topo.buses {
            if !topo.region_of.contains_key(b) {
                return Err(GridError::UnknownBus(*b));
            }
        }
        // Contiguity: each region's induced subgraph must be connected.
        for region in 0..n_regions {
            let members: BTreeSet<usize> =
                topo.region_of.iter().filter(|(_, &r)| r == region).map(|(&b, _)| b).collect();
            if members.is_empty() {
                return Err(GridError::NonContiguousRegion(region));
            }
            let start = *members.iter().next().unwrap();
            let mut rseen = BTreeSet::new();
            rseen.insert(start);
            let mut rstack = vec![start];
            while let Some(b) = rstack.pop() {
                let mut neighbors = Vec::new();
                if let Some(&pl) = parent_line.get(&b) {
                    neighbors.push(topo.lines[pl].from);
                }
                for &l in children_lines.get(&b).into_iter().flatten() {
                    neighbors.push(topo.lines[l].to);
                }
                for nb2 in neighbors {
                    if members.contains(&nb2) && rseen.insert(nb2) {
                        rstack.push(nb2);
                    }
                }
            }
            if rseen.len() != members.len() {
                return Err(GridError::NonContiguousRegion(region));
            }
        }
        for g in &topo.sensor_grants {
            if !bus_set.contains(&g.bus) {
                return Err(GridError::UnknownBus(g.bus));
            }
            if g.aggregator >= n_regions {
                return Err(GridError::UnknownRegion(g.aggregator));
            }
        }
    }

    let bus_rank = {
        let mut sorted: Vec<usize> = topo.buses.clone();
        sorted.sort_unstable();
        sorted.into_iter().enumerate().map(|(i, b)| (b, i)).collect()
    };
    Ok(Grid { topo, bus_rank, parent_line, children_lines, topo_order: order, n_regions })
}

impl Grid {
    pub fn topology(&self) -> &GridTopology {
        &self.topo
    }

    pub fn n_buses(&self) -> usize {
        self.topo.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.topo.lines.len()
    }

    pub fn root(&self) -> usize {
        self.topo.root
    }

    pub fn base_mva(&self) -> f64 {
        self.topo.base_mva
    }

    pub fn lines(&self) -> &[Line] {
        &self.topo.lines
    }

    /// Sorted bus ids; ranks index the per-bus state vectors.
    pub fn sorted_buses(&self) -> Vec<usize> {
        let mut v = self.topo.buses.clone();
        v.sort_unstable();
        v
    }

    pub fn bus_rank(&self, bus: usize) -> Option<usize> {
        self.bus_rank.get(&bus).copied()
    }

    pub fn region_of(&self, bus: usize) -> Option<usize> {
        self.topo.region_of.get(&bus).copied()
    }

    pub fn parent_line_of(&self, bus: usize) -> Option<usize> {
        self.parent_line.get(&bus).copied()
    }

    pub fn children_lines_of(&self, bus: usize) -> &[usize] {
        self.children_lines.get(&bus).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Total number of state variables: 3 per bus + 4 per line.
    pub fn n_vars(&self) -> usize {
        3 * self.n_buses() + 4 * self.n_lines()
    }

    /// Canonical global index of a state variable.
    pub fn var_index(&self, kind: VarKind, id: usize) -> usize {
        let nb = self.n_buses();
        match kind {
            VarKind::BusP => 3 * self.bus_rank[&id],
            VarKind::BusQ => 3 * self.bus_rank[&id] + 1,
            VarKind::BusV2 => 3 * self.bus_rank[&id] + 2,
            VarKind::LineP => 3 * nb + 4 * id,
            VarKind::LineQ => 3 * nb + 4 * id + 1,
            VarKind::LineC2 => 3 * nb + 4 * id + 2,
            VarKind::LineAux => 3 * nb + 4 * id + 3,
        }
    }

    /// Reverse lookup of a canonical variable index.
    pub fn var_of_index(&self, idx: usize) -> (VarKind, usize) {
        let nb = self.n_buses();
        if idx < 3 * nb {
            let bus = self.sorted_buses()[idx / 3];
            match idx % 3 {
                0 => (VarKind::BusP, bus),
                1 => (VarKind::BusQ, bus),
                _ => (VarKind::BusV2, bus),
            }
        } else {
            let rest = idx - 3 * nb;
            let line = rest / 4;
            match rest % 4 {
                0 => (VarKind::LineP, line),
                1 => (VarKind::LineQ, line),
                2 => (VarKind::LineC2, line),
                _ => (VarKind::LineAux, line),
            }
        }
    }

    /// Dense global constraint matrix H: the linearized branch-flow rows.
    ///
    /// Row layout: per line (real balance, reactive balance, voltage drop,
    /// auxiliary identification), then the two root balance rows. The root
    /// rows tie the slack injection to the flows leaving the root, so every
    /// bus injection appears in exactly one balance row.
    pub fn global_h(&self) -> DMatrix<f64> {
        let nl = self.n_lines();
        let mut h = DMatrix::<f64>::zeros(4 * nl + 2, self.n_vars());
        let s = self.topo.base_mva;
        for (j, line) in self.topo.lines.iter().enumerate() {
            let t = line.to;
            // Real balance at t(ℓ): P_ℓ − Σ P_ℓ' − r c² S + p_t = 0 (MW).
            let r0 = 4 * j;
            h[(r0, self.var_index(VarKind::LineP, j))] = 1.0;
            for &lc in self.children_lines_of(t) {
                h[(r0, self.var_index(VarKind::LineP, lc))] = -1.0;
            }
            h[(r0, self.var_index(VarKind::LineC2, j))] = -line.r * s;
            h[(r0, self.var_index(VarKind::BusP, t))] = 1.0;
            // Reactive balance.
            let r1 = 4 * j + 1;
            h[(r1, self.var_index(VarKind::LineQ, j))] = 1.0;
            for &lc in self.children_lines_of(t) {
                h[(r1, self.var_index(VarKind::LineQ, lc))] = -1.0;
            }
            h[(r1, self.var_index(VarKind::LineC2, j))] = -line.x * s;
            h[(r1, self.var_index(VarKind::BusQ, t))] = 1.0;
            // Voltage drop: v²_f − v²_t − 2(rP + xQ)/S + |z|² c² = 0.
            let r2 = 4 * j + 2;
            h[(r2, self.var_index(VarKind::BusV2, line.from))] = 1.0;
            h[(r2, self.var_index(VarKind::BusV2, t))] = -1.0;
            h[(r2, self.var_index(VarKind::LineP, j))] = -2.0 * line.r / s;
            h[(r2, self.var_index(VarKind::LineQ, j))] = -2.0 * line.x / s;
            h[(r2, self.var_index(VarKind::LineC2, j))] = line.z_abs2();
            // Auxiliary identification: v²_f − x′ = 0.
            let r3 = 4 * j + 3;
            h[(r3, self.var_index(VarKind::BusV2, line.from))] = 1.0;
            h[(r3, self.var_index(VarKind::LineAux, j))] = -1.0;
        }
        // Root balance: p_root − Σ_{ℓ ∈ f⁻¹(root)} P_ℓ = 0 and the Q analog.
        let rp = 4 * nl;
        h[(rp, self.var_index(VarKind::BusP, self.topo.root))] = 1.0;
        h[(rp + 1, self.var_index(VarKind::BusQ, self.topo.root))] = 1.0;
        for &lc in self.children_lines_of(self.topo.root) {
            h[(rp, self.var_index(VarKind::LineP, lc))] = -1.0;
            h[(rp + 1, self.var_index(VarKind::LineQ, lc))] = -1.0;
        }
        h
    }
}

/// Full network state over one interval.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemState {
    /// Per-bus real injection, MW (generation positive), indexed by bus rank.
    pub p: DVector<f64>,
    /// Per-bus reactive injection, MVAr.
    pub q: DVector<f64>,
    /// Per-bus squared voltage magnitude, p.u.².
    pub v2: DVector<f64>,
    /// Per-line sending-end real flow, MW.
    pub fp: DVector<f64>,
    /// Per-line sending-end reactive flow, MVAr.
    pub fq: DVector<f64>,
    /// Per-line squared current magnitude, p.u.².
    pub c2: DVector<f64>,
    /// Per-line auxiliary variable x′ = (P² + Q²)/c² in p.u.².
    pub xp: DVector<f64>,
}

impl SystemState {
    pub fn zeros(grid: &Grid) -> Self {
        SystemState {
            p: DVector::zeros(grid.n_buses()),
            q: DVector::zeros(grid.n_buses()),
            v2: DVector::zeros(grid.n_buses()),
            fp: DVector::zeros(grid.n_lines()),
            fq: DVector::zeros(grid.n_lines()),
            c2: DVector::zeros(grid.n_lines()),
            xp: DVector::zeros(grid.n_lines()),
        }
    }

    /// Flattens into the canonical variable ordering used by `Grid::var_index`.
    pub fn to_flat(&self, grid: &Grid) -> DVector<f64> {
        let mut x = DVector::zeros(grid.n_vars());
        let nb = grid.n_buses();
        for i in 0..nb {
            x[3 * i] = self.p[i];
            x[3 * i + 1] = self.q[i];
            x[3 * i + 2] = self.v2[i];
        }
        for j in 0..grid.n_lines() {
            x[3 * nb + 4 * j] = self.fp[j];
            x[3 * nb + 4 * j + 1] = self.fq[j];
            x[3 * nb + 4 * j + 2] = self.c2[j];
            x[3 * nb + 4 * j + 3] = self.xp[j];
        }
        x
    }

    pub fn from_flat(grid: &Grid, x: &DVector<f64>) -> Result<Self, GridError> {
        if x.len() != grid.n_vars() {
            return Err(GridError::DimensionMismatch(format!(
                "state vector has {} entries, grid needs {}",
                x.len(),
                grid.n_vars()
            )));
        }
        let nb = grid.n_buses();
        let nl = grid.n_lines();
        let mut st = SystemState::zeros(grid);
        for i in 0..nb {
            st.p[i] = x[3 * i];
            st.q[i] = x[3 * i + 1];
            st.v2[i] = x[3 * i + 2];
        }
        for j in 0..nl {
            st.fp[j] = x[3 * nb + 4 * j];
            st.fq[j] = x[3 * nb + 4 * j + 1];
            st.c2[j] = x[3 * nb + 4 * j + 2];
            st.xp[j] = x[3 * nb + 4 * j + 3];
        }
        Ok(st)
    }
}

/// Stacked residuals of the linearized branch-flow rows (same layout as
/// `Grid::global_h`): real balance, reactive balance, voltage drop, and the
/// auxiliary identification per line, then the two root balance rows.
pub fn distflow_residual(state: &SystemState, grid: &Grid) -> Result<DVector<f64>, GridError> {
    if state.p.len() != grid.n_buses() || state.fp.len() != grid.n_lines() {
        return Err(GridError::DimensionMismatch(format!(
            "state has {} buses / {} lines, grid has {} / {}",
            state.p.len(),
            state.fp.len(),
            grid.n_buses(),
            grid.n_lines()
        )));
    }
    Ok(grid.global_h() * state.to_flat(grid))
}
