//! Per-aggregator views of the network state and the induced communication
//! graph.
//!
//! Region `n` estimates copies of every variable attached to its own buses,
//! to lines touching its buses, and to periphery buses at the far end of
//! those lines. Sensor grants extend a region's view with the granted bus's
//! variables, which makes those variables shared with the granting region and
//! adds communication edges (and 3-cliques) beyond the physical tie-lines.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use super::{Grid, GridError, VarKind};

/// Matrices defining one aggregator's slice of the verification problem.
#[derive(Debug, Clone)]
pub struct RegionMatrices {
    pub region: usize,
    /// Global variable ids in this region's view, ascending; position defines
    /// the local coordinate order of x⁽ⁿ⁾.
    pub vars: Vec<usize>,
    /// Bus ids owned by this region, ascending; row order of `s_p`.
    pub own_buses: Vec<usize>,
    /// Physics rows fully supported on `vars`, columns in local order.
    pub h: DMatrix<f64>,
    /// Selector of measured coordinates (rows follow `measured`).
    pub s_a: DMatrix<f64>,
    /// Global ids of the measured coordinates, ascending.
    pub measured: Vec<usize>,
    /// Selector of own-bus real injections (rows follow `own_buses`).
    pub s_p: DMatrix<f64>,
    /// neighbor id → shared global variable ids, ascending. Row order of the
    /// selectors below; both sides of an edge sort by global id, so the rows
    /// of S_nm and S_mn align coordinate by coordinate.
    pub shared: BTreeMap<usize, Vec<usize>>,
    /// neighbor id → selector of the shared coordinates from x⁽ⁿ⁾.
    pub s_nm: BTreeMap<usize, DMatrix<f64>>,
    /// Diagonal of D: per local coordinate, the number of other regions that
    /// also carry it.
    pub d: DVector<f64>,
    /// Diagonal of the pseudo-inverse of D.
    pub d_bar: DVector<f64>,
}

impl RegionMatrices {
    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    /// Local coordinate of a global variable id, if present in this region.
    pub fn local_index(&self, global: usize) -> Option<usize> {
        self.vars.binary_search(&global).ok()
    }

    /// Recomputes D and D̄ from the current shared sets (used after a
    /// neighbor is removed from the graph).
    pub fn recompute_d(&mut self) {
        let mut d = DVector::zeros(self.vars.len());
        for ids in self.shared.values() {
            for g in ids {
                d[self.local_index(*g).expect("shared var must be in region view")] += 1.0;
            }
        }
        let d_bar = d.map(|v: f64| if v != 0.0 { 1.0 / v } else { 0.0 });
        self.d = d;
        self.d_bar = d_bar;
    }
}

/// Set of global variable ids visible to a region.
fn region_var_set(grid: &Grid, region: usize) -> BTreeSet<usize> {
    let mut vars = BTreeSet::new();
    let add_bus = |vars: &mut BTreeSet<usize>, b: usize| {
        vars.insert(grid.var_index(VarKind::BusP, b));
        vars.insert(grid.var_index(VarKind::BusQ, b));
        vars.insert(grid.var_index(VarKind::BusV2, b));
    };
    for &b in &grid.topology().buses {
        if grid.region_of(b) == Some(region) {
            add_bus(&mut vars, b);
        }
    }
    for (j, line) in grid.lines().iter().enumerate() {
        let touches = grid.region_of(line.from) == Some(region)
            || grid.region_of(line.to) == Some(region);
        if touches {
            vars.insert(grid.var_index(VarKind::LineP, j));
            vars.insert(grid.var_index(VarKind::LineQ, j));
            vars.insert(grid.var_index(VarKind::LineC2, j));
            vars.insert(grid.var_index(VarKind::LineAux, j));
            add_bus(&mut vars, line.from);
            add_bus(&mut vars, line.to);
        }
    }
    for g in &grid.topology().sensor_grants {
        if g.aggregator == region {
            add_bus(&mut vars, g.bus);
        }
    }
    vars
}

/// Builds the estimation matrices for one region.
///
/// `placement` lists the global variable ids covered by physical sensors; a
/// region measures every placed sensor inside its view (boundary sensors are
/// read by every sharing region, so identical readings reach both sides).
pub fn build_region_matrices(
    grid: &Grid,
    region: usize,
    placement: &BTreeSet<usize>,
) -> Result<RegionMatrices, GridError> {
    if region >= grid.n_regions {
        return Err(GridError::UnknownRegion(region));
    }
    let var_sets: Vec<BTreeSet<usize>> =
        (0..grid.n_regions).map(|r| region_var_set(grid, r)).collect();
    let vars: Vec<usize> = var_sets[region].iter().copied().collect();
    let l_n = vars.len();
    let local: BTreeMap<usize, usize> = vars.iter().enumerate().map(|(i, &g)| (g, i)).collect();

    let own_buses: Vec<usize> = {
        let mut v: Vec<usize> = grid
            .topology()
            .buses
            .iter()
            .copied()
            .filter(|&b| grid.region_of(b) == Some(region))
            .collect();
        v.sort_unstable();
        v
    };

    // Physics rows fully supported on the region's view.
    let global_h = grid.global_h();
    let mut kept_rows = Vec::new();
    for r in 0..global_h.nrows() {
        let supported = (0..global_h.ncols())
            .all(|c| global_h[(r, c)] == 0.0 || local.contains_key(&c));
        if supported {
            kept_rows.push(r);
        }
    }
    let mut h = DMatrix::<f64>::zeros(kept_rows.len(), l_n);
    for (ri, &r) in kept_rows.iter().enumerate() {
        for (&g, &c) in &local {
            h[(ri, c)] = global_h[(r, g)];
        }
    }

    let measured: Vec<usize> = vars.iter().copied().filter(|g| placement.contains(g)).collect();
    let mut s_a = DMatrix::<f64>::zeros(measured.len(), l_n);
    for (ri, g) in measured.iter().enumerate() {
        s_a[(ri, local[g])] = 1.0;
    }

    let mut s_p = DMatrix::<f64>::zeros(own_buses.len(), l_n);
    for (ri, &b) in own_buses.iter().enumerate() {
        s_p[(ri, local[&grid.var_index(VarKind::BusP, b)])] = 1.0;
    }

    let mut shared = BTreeMap::new();
    let mut s_nm = BTreeMap::new();
    for m in 0..grid.n_regions {
        if m == region {
            continue;
        }
        let common: Vec<usize> = var_sets[region].intersection(&var_sets[m]).copied().collect();
        if common.is_empty() {
            continue;
        }
        let mut sel = DMatrix::<f64>::zeros(common.len(), l_n);
        for (ri, g) in common.iter().enumerate() {
            sel[(ri, local[g])] = 1.0;
        }
        shared.insert(m, common);
        s_nm.insert(m, sel);
    }

    let mut rm = RegionMatrices {
        region,
        vars,
        own_buses,
        h,
        s_a,
        measured,
        s_p,
        shared,
        s_nm,
        d: DVector::zeros(l_n),
        d_bar: DVector::zeros(l_n),
    };
    rm.recompute_d();
    Ok(rm)
}

/// Communication graph induced by shared variables.
#[derive(Debug, Clone)]
pub struct CommunicationGraph {
    pub n_regions: usize,
    /// Undirected edges with endpoints ordered low < high.
    pub edges: BTreeSet<(usize, usize)>,
    pub triangles: Vec<(usize, usize, usize)>,
    /// True when the graph contains at least one 3-clique; attacker isolation
    /// needs two honest regions with a common view of any suspect.
    pub clique3: bool,
    pub warning: Option<String>,
}

impl CommunicationGraph {
    pub fn neighbors(&self, n: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == n {
                    Some(b)
                } else if b == n {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Whether the subgraph on `alive` nodes is connected.
    pub fn is_connected_over(&self, alive: &BTreeSet<usize>) -> bool {
        let Some(&start) = alive.iter().next() else { return true };
        let mut seen = BTreeSet::new();
        seen.insert(start);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for m in self.neighbors(n) {
                if alive.contains(&m) && seen.insert(m) {
                    stack.push(m);
                }
            }
        }
        seen.len() == alive.len()
    }
}

/// Derives the aggregator communication graph from shared variables (tie
/// lines, common periphery buses, and sensor grants) and enumerates its
/// triangles exactly.
pub fn build_communication_graph(grid: &Grid) -> CommunicationGraph {
    let n = grid.n_regions;
    let var_sets: Vec<BTreeSet<usize>> = (0..n).map(|r| region_var_set(grid, r)).collect();
    let mut edges = BTreeSet::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if !var_sets[a].is_disjoint(&var_sets[b]) {
                edges.insert((a, b));
            }
        }
    }
    let mut triangles = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if !edges.contains(&(a, b)) {
                continue;
            }
            for c in (b + 1)..n {
                if edges.contains(&(a, c)) && edges.contains(&(b, c)) {
                    triangles.push((a, b, c));
                }
            }
        }
    }
    let clique3 = !triangles.is_empty();
    let warning = if clique3 {
        None
    } else {
        Some(format!(
            "communication graph over {n} regions has no 3-clique; \
             trust-based attacker isolation cannot corroborate disagreements"
        ))
    };
    CommunicationGraph { n_regions: n, edges, triangles, clique3, warning }
}
