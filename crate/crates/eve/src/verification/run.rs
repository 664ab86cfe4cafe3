//! The verification loop: ledger-mediated consensus with attacker isolation.
//!
//! All cross-region traffic rides the common channel. Shared-coordinate
//! slices are posted under iteration-scoped, edge-scoped keys; a region that
//! withholds its payload still posts an empty record so peers can tell
//! "nothing sent this round" from "not arrived yet" without wall clocks, and
//! substitute the neighbor's previous slice. After the consensus step each
//! region posts its detection row (raw disagreement scores plus its own step
//! norm) under an iteration-scoped key; once all rows of a round are visible
//! every region assembles the same matrix, ranks the regions, and reaches
//! the same termination decision without a coordinator.
//!
//! On an attacker verdict the culprit is dropped, the surviving regions
//! rebuild their neighbor bookkeeping, and the loop restarts at the next
//! free iteration index. The deterministic scheduler and the threaded
//! actors run the identical record protocol, so both modes produce the same
//! estimates, scores, and verdicts bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde_json::{json, Value};

use crate::grid::{CommunicationGraph, Grid, RegionMatrices, VarKind};
use crate::ledger::contracts::{
    bus_dispatch_key, detection_row_key, edge_state_key, measurement_key,
};
use crate::ledger::{agg_channel, LedgerError, SharedLedger, COMMON_CHANNEL};
use crate::market::ExecutionMode;

use super::admm::{admm_consensus_update, admm_init, factor_x_update, initial_x, x_update_with};
use super::detection::{
    check_termination, disagreement_row, disagreement_update, trust_scores, Termination,
};
use super::{RegionState, SliceMap, VerificationConfig, VerificationError};

/// What a region does with one outbound shared-coordinate message.
#[derive(Debug, Clone)]
pub enum EdgeConduct {
    /// Send the true slice.
    Honest,
    /// Add this perturbation to the slice (false data injection).
    Add(DMatrix<f64>),
    /// Post an empty record: peers fall back to the previous slice.
    Withhold,
}

/// Per-message behavior hook, consulted for every outbound slice.
pub trait Saboteur: Sync {
    /// Conduct for the slice `from` sends toward `to` at global iteration
    /// `iter`; the slice has `rows` shared coordinates over `cols`
    /// intervals.
    fn conduct(&self, from: usize, to: usize, iter: u64, rows: usize, cols: usize) -> EdgeConduct;
}

/// Everyone sends truthful messages.
pub struct HonestParticipants;

impl Saboteur for HonestParticipants {
    fn conduct(&self, _: usize, _: usize, _: u64, _: usize, _: usize) -> EdgeConduct {
        EdgeConduct::Honest
    }
}

/// Everything one region contributes to a verification run.
#[derive(Debug, Clone)]
pub struct RegionInputs {
    pub matrices: RegionMatrices,
    /// Sensor readings, one row per measured coordinate, one column per
    /// interval.
    pub z: DMatrix<f64>,
    /// Noise variance per measured coordinate.
    pub sigma_z: DVector<f64>,
    /// Scheduled injections for the region's own buses.
    pub p_star: DMatrix<f64>,
}

/// Result of a completed verification run.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    /// Verified injections per surviving region (own buses × intervals).
    pub injections: BTreeMap<usize, DMatrix<f64>>,
    /// Schedule minus verified injections, same shape.
    pub deviations: BTreeMap<usize, DMatrix<f64>>,
    /// Final estimation states of the surviving regions.
    pub states: BTreeMap<usize, RegionState>,
    /// Regions isolated as attackers, in removal order.
    pub removed: Vec<usize>,
    /// Consensus iterations spent, summed over restarts.
    pub iterations: u64,
    /// Number of graph epochs (1 + removals).
    pub epochs: u64,
    /// Final trust scores of the surviving regions.
    pub pi: Vec<(usize, f64)>,
    /// Trust trajectory, one sample per iteration.
    pub pi_trace: Vec<PiSample>,
    /// Largest per-region step norm, one entry per iteration.
    pub step_trace: Vec<f64>,
}

/// One iteration's detection snapshot.
#[derive(Debug, Clone)]
pub struct PiSample {
    /// Global iteration index (unique across restarts).
    pub iter: u64,
    pub epoch: u64,
    /// Region ids the scores refer to, ascending.
    pub agents: Vec<usize>,
    pub pi: Vec<f64>,
    pub max_step: f64,
}

/// Reads one region's measurements from its local channel and its bus
/// schedules from the common channel into verification inputs.
///
/// Measurement records are keyed by bus and carry per-variable readings and
/// variances; every coordinate listed as measured must be covered. Buses
/// without a dispatch record default to a zero schedule.
pub fn collect_region_inputs(
    ledger: &SharedLedger,
    admin: &str,
    grid: &Grid,
    matrices: RegionMatrices,
    window: u64,
    horizon: usize,
) -> Result<RegionInputs, VerificationError> {
    // Structural validation up front, before any ledger traffic.
    let mut measured_buses = Vec::with_capacity(matrices.measured.len());
    for gid in &matrices.measured {
        let (kind, bus) = grid.var_of_index(*gid);
        if !matches!(kind, VarKind::BusP | VarKind::BusQ | VarKind::BusV2) {
            return Err(VerificationError::Dimension(format!(
                "measured coordinate {gid} is a line variable; only bus sensors carry records"
            )));
        }
        measured_buses.push(bus);
    }
    let net = ledger.lock();
    let channel = agg_channel(matrices.region);
    let mut bus_records: BTreeMap<usize, Value> = BTreeMap::new();
    let mut z = DMatrix::zeros(matrices.measured.len(), horizon);
    let mut sigma_z = DVector::from_element(matrices.measured.len(), 1.0);
    for (i, gid) in matrices.measured.iter().enumerate() {
        let bus = measured_buses[i];
        if !bus_records.contains_key(&bus) {
            let rec = net.query_key(admin, &channel, &measurement_key(window, bus)).map_err(
                |_| VerificationError::MissingRecord {
                    region: matrices.region,
                    key: measurement_key(window, bus),
                    iter: 0,
                },
            )?;
            bus_records.insert(bus, rec.value);
        }
        let value = &bus_records[&bus];
        let readings: Vec<f64> = serde_json::from_value(value["vars"][gid.to_string()].clone())
            .map_err(|_| VerificationError::MissingRecord {
                region: matrices.region,
                key: format!("{}#var{gid}", measurement_key(window, bus)),
                iter: 0,
            })?;
        if readings.len() != horizon {
            return Err(VerificationError::Dimension(format!(
                "bus {bus} variable {gid}: {} readings for horizon {horizon}",
                readings.len()
            )));
        }
        for (t, v) in readings.iter().enumerate() {
            z[(i, t)] = *v;
        }
        if let Some(var) = value["variance"][gid.to_string()].as_f64() {
            sigma_z[i] = var;
        }
    }
    let mut p_star = DMatrix::zeros(matrices.own_buses.len(), horizon);
    for (r, bus) in matrices.own_buses.iter().enumerate() {
        match net.query_key(admin, COMMON_CHANNEL, &bus_dispatch_key(window, *bus)) {
            Ok(rec) => {
                let profile: Vec<f64> = serde_json::from_value(rec.value["profile"].clone())
                    .map_err(|_| {
                        VerificationError::Dimension(format!("bus {bus}: malformed dispatch"))
                    })?;
                if profile.len() != horizon {
                    return Err(VerificationError::Dimension(format!(
                        "bus {bus}: dispatch horizon {} vs {horizon}",
                        profile.len()
                    )));
                }
                for (t, v) in profile.iter().enumerate() {
                    p_star[(r, t)] = *v;
                }
            }
            Err(LedgerError::NotFound(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(RegionInputs { matrices, z, sigma_z, p_star })
}

/// Runs verification for one window across all regions.
///
/// `inputs[n]` belongs to region `n`; `admins[n]` is its channel identity.
/// The run ends when every surviving region's estimate settles. Identified
/// attackers are removed along the way; the final report covers survivors
/// only.
#[allow(clippy::too_many_arguments)]
pub fn run_verification(
    ledger: &SharedLedger,
    admins: &[String],
    window: u64,
    inputs: &[RegionInputs],
    graph: &CommunicationGraph,
    config: &VerificationConfig,
    saboteur: &dyn Saboteur,
    mode: ExecutionMode,
) -> Result<VerificationReport, VerificationError> {
    config.validate()?;
    if admins.len() != inputs.len() || admins.len() != graph.n_regions {
        return Err(VerificationError::Dimension(format!(
            "{} admins, {} inputs, graph over {} regions",
            admins.len(),
            inputs.len(),
            graph.n_regions
        )));
    }
    for (n, inp) in inputs.iter().enumerate() {
        if inp.matrices.region != n {
            return Err(VerificationError::Dimension(format!(
                "inputs[{n}] carries matrices for region {}",
                inp.matrices.region
            )));
        }
    }
    if inputs.len() < 2 {
        return Err(VerificationError::InsufficientRegions { alive: inputs.len() });
    }

    let mut alive: BTreeSet<usize> = (0..admins.len()).collect();
    let mut removed: Vec<usize> = Vec::new();
    let mut base: u64 = 0;
    let mut steps_done: u64 = 0;
    let mut epoch: u64 = 0;
    let mut epoch_marks: Vec<(u64, Vec<usize>)> = Vec::new();

    let final_states: BTreeMap<usize, RegionState> = loop {
        epoch_marks.push((base, alive.iter().copied().collect()));
        let outcome = match mode {
            ExecutionMode::Deterministic => run_epoch_deterministic(
                ledger, admins, window, inputs, &alive, config, saboteur, epoch, base, steps_done,
            )?,
            ExecutionMode::Threaded => run_epoch_threaded(
                ledger, admins, window, inputs, &alive, config, saboteur, epoch, base, steps_done,
            )?,
        };
        match outcome {
            EpochEnd::Converged { states, iters } => {
                steps_done += iters;
                break states;
            }
            EpochEnd::Removed { attacker, iters } => {
                steps_done += iters;
                base += iters + 1;
                epoch += 1;
                alive.remove(&attacker);
                removed.push(attacker);
                if alive.len() < 2 {
                    return Err(VerificationError::InsufficientRegions { alive: alive.len() });
                }
                if !graph.is_connected_over(&alive) {
                    return Err(VerificationError::GraphDisconnected { removed });
                }
            }
        }
    };

    // Survivors publish their final scores; the lowest-indexed survivor
    // seals the verdict.
    let survivors: Vec<usize> = alive.iter().copied().collect();
    let (pi_trace, step_trace) =
        build_traces(ledger, &admins[survivors[0]], window, &epoch_marks, config)?;
    let last = pi_trace.last();
    let final_pi: Vec<(usize, f64)> = match last {
        Some(sample) if sample.agents == survivors => {
            survivors.iter().copied().zip(sample.pi.iter().copied()).collect()
        }
        _ => survivors.iter().map(|n| (*n, 1.0 / survivors.len() as f64)).collect(),
    };
    {
        let pi_json: BTreeMap<String, f64> =
            final_pi.iter().map(|(n, p)| (n.to_string(), *p)).collect();
        let mut net = ledger.lock();
        for n in &survivors {
            let state = &final_states[n];
            net.rc_put_trust(
                &admins[*n],
                window,
                json!({
                    "agents": survivors,
                    "pi": pi_json,
                    "iterations": steps_done,
                    "final_step": step_trace.last().copied().unwrap_or(0.0),
                    "horizon": state.horizon(),
                }),
            )?;
        }
        net.rc_put_verdict(
            &admins[survivors[0]],
            window,
            json!({
                "converged": true,
                "removed": removed,
                "iterations": steps_done,
                "epochs": epoch + 1,
            }),
        )?;
    }

    let injections: BTreeMap<usize, DMatrix<f64>> =
        final_states.iter().map(|(n, s)| (*n, s.injections())).collect();
    let deviations: BTreeMap<usize, DMatrix<f64>> =
        final_states.iter().map(|(n, s)| (*n, s.deviations())).collect();
    Ok(VerificationReport {
        injections,
        deviations,
        states: final_states,
        removed,
        iterations: steps_done,
        epochs: epoch + 1,
        pi: final_pi,
        pi_trace,
        step_trace,
    })
}

enum EpochEnd {
    Converged { states: BTreeMap<usize, RegionState>, iters: u64 },
    Removed { attacker: usize, iters: u64 },
}

enum WorkerEnd {
    Converged(Box<RegionState>, u64),
    Removed(usize, u64),
}

/// One region's working set for an epoch.
struct Actor {
    state: RegionState,
    factor: Cholesky<f64, Dyn>,
    /// Last slice received per neighbor; zeros until the first delivery.
    stale: SliceMap,
    /// Own smoothed disagreement per neighbor.
    d: BTreeMap<usize, f64>,
    pi_prev: DVector<f64>,
}

impl Actor {
    /// Builds a region's epoch ingredients: matrices restricted to the
    /// living regions, the factored update system, and the starting
    /// estimate. The caller exchanges starting slices before `finish_init`.
    fn prepare(
        inputs: &RegionInputs,
        alive: &BTreeSet<usize>,
        cfg: &VerificationConfig,
        horizon: usize,
    ) -> Result<(RegionMatrices, Cholesky<f64, Dyn>, DMatrix<f64>), VerificationError> {
        let mut matrices = inputs.matrices.clone();
        matrices.shared.retain(|m, _| alive.contains(m));
        matrices.s_nm.retain(|m, _| alive.contains(m));
        matrices.recompute_d();
        let factor = factor_x_update(&matrices, &inputs.sigma_z, cfg)?;
        let x0 = initial_x(&matrices, &inputs.z, horizon, cfg.zero_init);
        Ok((matrices, factor, x0))
    }

    /// Assembles the actor once the starting slices have been exchanged.
    fn finish_init(
        inputs: &RegionInputs,
        matrices: RegionMatrices,
        factor: Cholesky<f64, Dyn>,
        init_slices: SliceMap,
        n_agents: usize,
        cfg: &VerificationConfig,
    ) -> Result<Actor, VerificationError> {
        let state = admm_init(
            matrices,
            inputs.z.clone(),
            inputs.sigma_z.clone(),
            inputs.p_star.clone(),
            &init_slices,
            cfg.zero_init,
        )?;
        Ok(Actor {
            state,
            factor,
            stale: init_slices,
            d: BTreeMap::new(),
            pi_prev: DVector::zeros(n_agents),
        })
    }

    fn neighbors(&self) -> Vec<usize> {
        self.state.matrices.s_nm.keys().copied().collect()
    }

    /// Solves the update system; returns the candidate estimate and the
    /// step norm against the current one.
    fn local_step(&self, cfg: &VerificationConfig) -> (DMatrix<f64>, f64) {
        let x_new = x_update_with(&self.factor, &self.state, cfg);
        let step = (&x_new - &self.state.x).amax();
        (x_new, step)
    }

    /// Installs the new estimate, folds in the received slices, and smooths
    /// the per-neighbor disagreement scores.
    fn absorb(&mut self, x_new: DMatrix<f64>, received: &SliceMap, k: u64, cfg: &VerificationConfig) {
        admm_consensus_update(&mut self.state, x_new, received);
        let alpha = cfg.alpha.at(k);
        for m in self.neighbors() {
            let own = self.state.slice_for(m).expect("slice exists for every neighbor");
            let prev = self.d.get(&m).copied().unwrap_or(0.0);
            self.d.insert(m, disagreement_update(prev, &own, &received[&m], alpha));
        }
    }
}

/// Posts the slice of `x` for every neighbor, applying the sender's conduct.
#[allow(clippy::too_many_arguments)]
fn post_slices(
    ledger: &SharedLedger,
    admin: &str,
    window: u64,
    iter: u64,
    region: usize,
    matrices: &RegionMatrices,
    x: &DMatrix<f64>,
    saboteur: &dyn Saboteur,
) -> Result<(), VerificationError> {
    for (m, sel) in &matrices.s_nm {
        let slice = sel * x;
        let payload: Vec<Vec<f64>> =
            match saboteur.conduct(region, *m, iter, slice.nrows(), slice.ncols()) {
                EdgeConduct::Honest => columns_of(&slice),
                EdgeConduct::Add(a) => {
                    assert_eq!(a.shape(), slice.shape(), "perturbation must match the slice");
                    columns_of(&(slice + a))
                }
                EdgeConduct::Withhold => Vec::new(),
            };
        ledger.lock().rc_put_edge_state(admin, window, iter, *m, &payload)?;
    }
    Ok(())
}

/// Receives every neighbor's slice for `iter`, substituting the previous
/// slice when the neighbor posted an empty record. Updates the stale cache.
#[allow(clippy::too_many_arguments)]
fn read_slices(
    ledger: &SharedLedger,
    admin: &str,
    window: u64,
    iter: u64,
    region: usize,
    matrices: &RegionMatrices,
    horizon: usize,
    stale: &mut SliceMap,
    deadline: Option<Instant>,
) -> Result<SliceMap, VerificationError> {
    let mut received = SliceMap::new();
    for (m, shared) in &matrices.shared {
        let rows = shared.len();
        let key = edge_state_key(window, iter, *m, region, *m);
        let value = wait_for(ledger, admin, &key, deadline).ok_or_else(|| {
            VerificationError::MissingRecord { region, key: key.clone(), iter }
        })?;
        let columns: Vec<Vec<f64>> =
            serde_json::from_value(value["slice"].clone()).map_err(|_| {
                VerificationError::MissingRecord { region, key: key.clone(), iter }
            })?;
        let slice = if columns.is_empty() {
            stale.get(m).cloned().unwrap_or_else(|| DMatrix::zeros(rows, horizon))
        } else {
            if columns.len() != horizon || columns.iter().any(|c| c.len() != rows) {
                return Err(VerificationError::Dimension(format!(
                    "slice {key}: expected {rows}×{horizon}"
                )));
            }
            let mut s = DMatrix::zeros(rows, horizon);
            for (t, col) in columns.iter().enumerate() {
                for (i, v) in col.iter().enumerate() {
                    s[(i, t)] = *v;
                }
            }
            stale.insert(*m, s.clone());
            s
        };
        received.insert(*m, slice);
    }
    Ok(received)
}

/// Matrix columns as JSON-ready vectors (one per interval).
fn columns_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// Reads the key once (no deadline) or polls until it exists.
fn wait_for(
    ledger: &SharedLedger,
    admin: &str,
    key: &str,
    deadline: Option<Instant>,
) -> Option<Value> {
    loop {
        match ledger.lock().query_key(admin, COMMON_CHANNEL, key) {
            Ok(rec) => return Some(rec.value),
            Err(_) => match deadline {
                None => return None,
                Some(d) if Instant::now() >= d => return None,
                Some(_) => std::thread::sleep(Duration::from_micros(100)),
            },
        }
    }
}

/// Per-iteration detection record: raw scores, normalized row, step norm.
#[allow(clippy::too_many_arguments)]
fn post_detection_row(
    ledger: &SharedLedger,
    admin: &str,
    window: u64,
    iter: u64,
    epoch: u64,
    k: u64,
    agents: &[usize],
    actor: &Actor,
    step: f64,
    cfg: &VerificationConfig,
) -> Result<(), VerificationError> {
    let row = disagreement_row(&actor.d, agents, cfg.denom_guard);
    let d_json: BTreeMap<String, f64> =
        actor.d.iter().map(|(m, v)| (m.to_string(), *v)).collect();
    let row_json: Vec<f64> = row.iter().copied().collect();
    ledger.lock().rc_put_detection_row(
        admin,
        window,
        iter,
        json!({
            "epoch": epoch,
            "k": k,
            "agents": agents,
            "d": d_json,
            "row": row_json,
            "step": step,
        }),
    )?;
    Ok(())
}

/// Reads every agent's detection row for `iter` and reassembles the shared
/// view: raw scores per region plus step norms, in `agents` order.
fn read_detection_rows(
    ledger: &SharedLedger,
    admin: &str,
    window: u64,
    iter: u64,
    agents: &[usize],
    region: usize,
    deadline: Option<Instant>,
) -> Result<(BTreeMap<usize, BTreeMap<usize, f64>>, Vec<f64>), VerificationError> {
    let mut d_full = BTreeMap::new();
    let mut steps = Vec::with_capacity(agents.len());
    for n in agents {
        let key = detection_row_key(window, iter, *n);
        let value = wait_for(ledger, admin, &key, deadline).ok_or_else(|| {
            VerificationError::MissingRecord { region, key: key.clone(), iter }
        })?;
        let d_map: BTreeMap<String, f64> = serde_json::from_value(value["d"].clone())
            .map_err(|_| VerificationError::MissingRecord { region, key: key.clone(), iter })?;
        let row: BTreeMap<usize, f64> = d_map
            .into_iter()
            .map(|(m, v)| m.parse::<usize>().map(|m| (m, v)))
            .collect::<Result<_, _>>()
            .map_err(|_| VerificationError::MissingRecord { region, key, iter })?;
        let step = value["step"].as_f64().unwrap_or(f64::INFINITY);
        d_full.insert(*n, row);
        steps.push(step);
    }
    Ok((d_full, steps))
}

/// The decision a region reaches at the end of an iteration: assemble the
/// stochastic matrix from everyone's rows, rank, and check termination.
fn decide(
    d_full: &BTreeMap<usize, BTreeMap<usize, f64>>,
    steps: &[f64],
    agents: &[usize],
    actor: &mut Actor,
    cfg: &VerificationConfig,
) -> Result<Termination, VerificationError> {
    let mut b = DMatrix::zeros(agents.len(), agents.len());
    for (i, n) in agents.iter().enumerate() {
        let row = disagreement_row(&d_full[n], agents, cfg.denom_guard);
        b.row_mut(i).copy_from(&row.transpose());
    }
    let pi = match trust_scores(&b, cfg.eig_tol, cfg.eig_max_iters) {
        Ok(pi) => pi,
        // An unrankable matrix this round is not a verdict either way; keep
        // iterating and let the scores move.
        Err(VerificationError::NoConvergence { .. }) => return Ok(Termination::Continue),
        Err(other) => return Err(other),
    };
    let decision = check_termination(steps, &pi, &actor.pi_prev, agents, cfg);
    actor.pi_prev = pi;
    Ok(decision)
}

#[allow(clippy::too_many_arguments)]
fn run_epoch_deterministic(
    ledger: &SharedLedger,
    admins: &[String],
    window: u64,
    inputs: &[RegionInputs],
    alive: &BTreeSet<usize>,
    cfg: &VerificationConfig,
    saboteur: &dyn Saboteur,
    epoch: u64,
    base: u64,
    steps_before: u64,
) -> Result<EpochEnd, VerificationError> {
    let agents: Vec<usize> = alive.iter().copied().collect();
    let horizon = inputs[agents[0]].p_star.ncols();

    // Exchange starting slices, then assemble the initial states.
    let mut prepared = BTreeMap::new();
    for &n in &agents {
        let (matrices, factor, x0) = Actor::prepare(&inputs[n], alive, cfg, horizon)?;
        post_slices(ledger, &admins[n], window, base, n, &matrices, &x0, saboteur)?;
        prepared.insert(n, (matrices, factor));
    }
    let mut actors: BTreeMap<usize, Actor> = BTreeMap::new();
    for &n in &agents {
        let (matrices, factor) = prepared.remove(&n).expect("prepared above");
        let mut stale = SliceMap::new();
        let init_slices = read_slices(
            ledger, &admins[n], window, base, n, &matrices, horizon, &mut stale, None,
        )?;
        let actor =
            Actor::finish_init(&inputs[n], matrices, factor, init_slices, agents.len(), cfg)?;
        actors.insert(n, actor);
    }

    let mut k: u64 = 0;
    loop {
        k += 1;
        if steps_before + k > cfg.max_iters {
            return Err(VerificationError::IterationLimit { iterations: cfg.max_iters });
        }
        let iter = base + k;
        // Phase 1: every region solves and posts its outbound slices.
        let mut pending: BTreeMap<usize, (DMatrix<f64>, f64)> = BTreeMap::new();
        for &n in &agents {
            let actor = &actors[&n];
            let (x_new, step) = actor.local_step(cfg);
            post_slices(
                ledger, &admins[n], window, iter, n, &actor.state.matrices, &x_new, saboteur,
            )?;
            pending.insert(n, (x_new, step));
        }
        // Phase 2: every region folds in what it received and posts its
        // detection row.
        for &n in &agents {
            let actor = actors.get_mut(&n).expect("actor exists");
            let (x_new, step) = pending.remove(&n).expect("pending step");
            let received = read_slices(
                ledger,
                &admins[n],
                window,
                iter,
                n,
                &actor.state.matrices,
                horizon,
                &mut actor.stale,
                None,
            )?;
            actor.absorb(x_new, &received, k, cfg);
            post_detection_row(
                ledger, &admins[n], window, iter, epoch, k, &agents, actor, step, cfg,
            )?;
        }
        // Phase 3: every region assembles the same matrix and decides.
        let mut decision = Termination::Continue;
        for (idx, &n) in agents.iter().enumerate() {
            let (d_full, steps) =
                read_detection_rows(ledger, &admins[n], window, iter, &agents, n, None)?;
            let actor = actors.get_mut(&n).expect("actor exists");
            let own_decision = decide(&d_full, &steps, &agents, actor, cfg)?;
            debug_assert!(
                idx == 0 || own_decision == decision,
                "regions reading identical rows must agree"
            );
            decision = own_decision;
        }
        match decision {
            Termination::Continue => {}
            Termination::Converged => {
                let states = actors.into_iter().map(|(n, a)| (n, a.state)).collect();
                return Ok(EpochEnd::Converged { states, iters: k });
            }
            Termination::AttackerIdentified(attacker) => {
                return Ok(EpochEnd::Removed { attacker, iters: k });
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epoch_threaded(
    ledger: &SharedLedger,
    admins: &[String],
    window: u64,
    inputs: &[RegionInputs],
    alive: &BTreeSet<usize>,
    cfg: &VerificationConfig,
    saboteur: &dyn Saboteur,
    epoch: u64,
    base: u64,
    steps_before: u64,
) -> Result<EpochEnd, VerificationError> {
    let agents: Vec<usize> = alive.iter().copied().collect();
    let horizon = inputs[agents[0]].p_star.ncols();
    let deadline = Instant::now() + Duration::from_secs_f64(cfg.poll_timeout);

    let results: Vec<Result<(usize, WorkerEnd), VerificationError>> =
        std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(agents.len());
            for &n in &agents {
                let agents = agents.clone();
                let admin = &admins[n];
                let inp = &inputs[n];
                handles.push(scope.spawn(move || {
                    let (matrices, factor, x0) = Actor::prepare(inp, alive, cfg, horizon)?;
                    post_slices(ledger, admin, window, base, n, &matrices, &x0, saboteur)?;
                    let mut stale = SliceMap::new();
                    let init_slices = read_slices(
                        ledger,
                        admin,
                        window,
                        base,
                        n,
                        &matrices,
                        horizon,
                        &mut stale,
                        Some(deadline),
                    )?;
                    let mut actor = Actor::finish_init(
                        inp,
                        matrices,
                        factor,
                        init_slices,
                        agents.len(),
                        cfg,
                    )?;

                    let mut k: u64 = 0;
                    loop {
                        k += 1;
                        if steps_before + k > cfg.max_iters {
                            return Err(VerificationError::IterationLimit {
                                iterations: cfg.max_iters,
                            });
                        }
                        let iter = base + k;
                        let (x_new, step) = actor.local_step(cfg);
                        post_slices(
                            ledger,
                            admin,
                            window,
                            iter,
                            n,
                            &actor.state.matrices,
                            &x_new,
                            saboteur,
                        )?;
                        let received = read_slices(
                            ledger,
                            admin,
                            window,
                            iter,
                            n,
                            &actor.state.matrices,
                            horizon,
                            &mut actor.stale,
                            Some(deadline),
                        )?;
                        actor.absorb(x_new, &received, k, cfg);
                        post_detection_row(
                            ledger, admin, window, iter, epoch, k, &agents, &actor, step, cfg,
                        )?;
                        let (d_full, steps) = read_detection_rows(
                            ledger,
                            admin,
                            window,
                            iter,
                            &agents,
                            n,
                            Some(deadline),
                        )?;
                        match decide(&d_full, &steps, &agents, &mut actor, cfg)? {
                            Termination::Continue => {}
                            Termination::Converged => {
                                return Ok((n, WorkerEnd::Converged(Box::new(actor.state), k)));
                            }
                            Termination::AttackerIdentified(a) => {
                                return Ok((n, WorkerEnd::Removed(a, k)));
                            }
                        }
                    }
                }));
            }
            handles.into_iter().map(|h| h.join().expect("verification worker panicked")).collect()
        });

    let mut states = BTreeMap::new();
    let mut verdicts: Vec<(usize, u64)> = Vec::new();
    let mut iters = 0;
    for result in results {
        let (n, end) = result?;
        match end {
            WorkerEnd::Converged(state, k) => {
                iters = k;
                states.insert(n, *state);
            }
            WorkerEnd::Removed(a, k) => {
                iters = k;
                verdicts.push((a, k));
            }
        }
    }
    if let Some((attacker, k)) = verdicts.first().copied() {
        debug_assert!(verdicts.iter().all(|(a, j)| (*a, *j) == (attacker, k)));
        debug_assert!(states.is_empty(), "all workers reach the same decision");
        return Ok(EpochEnd::Removed { attacker, iters: k });
    }
    Ok(EpochEnd::Converged { states, iters })
}

/// Rebuilds the per-iteration trust and step traces from the posted
/// detection rows, one shared code path for both execution modes.
fn build_traces(
    ledger: &SharedLedger,
    admin: &str,
    window: u64,
    epoch_marks: &[(u64, Vec<usize>)],
    cfg: &VerificationConfig,
) -> Result<(Vec<PiSample>, Vec<f64>), VerificationError> {
    let mut pi_trace = Vec::new();
    let mut step_trace = Vec::new();
    let net = ledger.lock();
    for (e, (base, agents)) in epoch_marks.iter().enumerate() {
        let mut k = 0u64;
        loop {
            k += 1;
            let iter = base + k;
            let mut d_full = BTreeMap::new();
            let mut steps = Vec::new();
            let mut complete = true;
            for n in agents {
                match net.query_key(admin, COMMON_CHANNEL, &detection_row_key(window, iter, *n)) {
                    Ok(rec) => {
                        let d_map: BTreeMap<String, f64> =
                            serde_json::from_value(rec.value["d"].clone()).unwrap_or_default();
                        let row: BTreeMap<usize, f64> = d_map
                            .into_iter()
                            .filter_map(|(m, v)| m.parse::<usize>().ok().map(|m| (m, v)))
                            .collect();
                        d_full.insert(*n, row);
                        steps.push(rec.value["step"].as_f64().unwrap_or(f64::NAN));
                    }
                    Err(_) => {
                        complete = false;
                        break;
                    }
                }
            }
            if !complete {
                break;
            }
            let mut b = DMatrix::zeros(agents.len(), agents.len());
            for (i, n) in agents.iter().enumerate() {
                let row = disagreement_row(&d_full[n], agents, cfg.denom_guard);
                b.row_mut(i).copy_from(&row.transpose());
            }
            let max_step = steps.iter().copied().fold(0.0_f64, f64::max);
            // Iterations whose matrix would not rank carry no trust sample,
            // matching the live decision.
            if let Ok(pi) = trust_scores(&b, cfg.eig_tol, cfg.eig_max_iters) {
                pi_trace.push(PiSample {
                    iter,
                    epoch: e as u64,
                    agents: agents.clone(),
                    pi: pi.iter().copied().collect(),
                    max_step,
                });
            }
            step_trace.push(max_step);
        }
    }
    Ok((pi_trace, step_trace))
}
