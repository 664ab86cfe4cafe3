//! The clearing loop: subproblem rounds, dual price walk, settlement.
//!
//! Aggregators never talk to each other directly. Each round an aggregator
//! reads the current price from the common channel, clears its own
//! prosumers, posts its aggregate profile, and waits for the next price
//! record. One coordinating aggregator (region 0) collects the round's
//! aggregates behind the same ledger barrier, advances the price, and
//! publishes it together with loop control: keep running, settle at a given
//! round, or abort. The deterministic scheduler and the threaded actors
//! execute the identical protocol, so for a fixed scenario they leave the
//! same records and return bit-identical results.

use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ledger::contracts::{lambda_key, pricing_round_key};
use crate::ledger::{SharedLedger, COMMON_CHANNEL};
use crate::resources::{build_asset, AssetParams};

use super::subproblem::{solve_subproblem, ProsumerBid, ScheduleMatrix};
use super::{billing_update, check_convergence, step_size, BillingEntry, MarketError, PriceVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    /// Single thread, regions served round-robin in index order.
    Deterministic,
    /// One OS thread per aggregator, synchronized only through the ledger.
    Threaded,
}

#[derive(Debug, Clone)]
pub struct PricingConfig {
    /// Initial dual step scale α̂; round k uses α̂/(k+1).
    pub alpha_hat: f64,
    /// Dual iteration limit k̄.
    pub max_rounds: u64,
    /// Wall-clock budget τ̄ for the whole loop, seconds.
    pub timeout: f64,
    /// Convergence threshold on the price change, ∞-norm.
    pub epsilon: f64,
    /// Aggregate imbalance tolerated at convergence.
    pub balance_tol: f64,
}

impl Default for PricingConfig {
    fn default() -> Self {
        PricingConfig {
            alpha_hat: 0.05,
            max_rounds: 500,
            timeout: 30.0,
            epsilon: 1e-4,
            balance_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PricingOutcome {
    pub lambda_star: PriceVector,
    pub schedules: BTreeMap<usize, ScheduleMatrix>,
    pub billing: Vec<BillingEntry>,
    pub converged: bool,
    /// True when the loop timed or capped out and the last completed round
    /// was settled instead.
    pub recycled: bool,
    /// Completed dual rounds.
    pub rounds: u64,
    pub lambda_trace: Vec<Vec<f64>>,
    pub balance_trace: Vec<f64>,
    /// Net cleared injection per bus.
    pub bus_dispatch: BTreeMap<usize, Vec<f64>>,
}

/// Price record for one round, including loop control from the coordinator.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LambdaRecord {
    lambda: Vec<f64>,
    alpha: f64,
    status: String,
    #[serde(default)]
    final_round: Option<u64>,
    #[serde(default)]
    lambda_star: Option<Vec<f64>>,
    #[serde(default)]
    converged: bool,
    #[serde(default)]
    recycled: bool,
}

const STATUS_RUN: &str = "run";
const STATUS_FINAL: &str = "final";
const STATUS_ABORT: &str = "abort";

/// How many recent prices the cycle detector remembers.
const CYCLE_WINDOW: usize = 10;

fn read_lambda(
    ledger: &SharedLedger,
    admin: &str,
    window: u64,
    round: u64,
) -> Option<LambdaRecord> {
    let net = ledger.lock();
    match net.query_key(admin, COMMON_CHANNEL, &lambda_key(window, round)) {
        Ok(rec) => serde_json::from_value(rec.value).ok(),
        Err(_) => None,
    }
}

fn write_lambda(
    ledger: &SharedLedger,
    admin: &str,
    window: u64,
    round: u64,
    record: &LambdaRecord,
) -> Result<(), MarketError> {
    let value = serde_json::to_value(record)
        .map_err(|e| MarketError::Dimension(format!("price record serialization: {e}")))?;
    ledger.lock().rc_put_lambda(admin, window, round, value)?;
    Ok(())
}

fn post_round(
    ledger: &SharedLedger,
    admin: &str,
    window: u64,
    round: u64,
    schedule: &ScheduleMatrix,
) -> Result<(), MarketError> {
    let aggregate: Vec<f64> = schedule.aggregate().iter().copied().collect();
    ledger
        .lock()
        .rc_put_pricing_round(admin, window, round, &aggregate)?;
    Ok(())
}

/// Reads all round-`round` aggregates, in region order. `None` when any
/// region has not reported yet.
fn read_round(
    ledger: &SharedLedger,
    admin: &str,
    window: u64,
    round: u64,
    n_regions: usize,
) -> Option<BTreeMap<usize, DVector<f64>>> {
    let net = ledger.lock();
    let mut out = BTreeMap::new();
    for n in 0..n_regions {
        let rec = net
            .query_key(admin, COMMON_CHANNEL, &pricing_round_key(window, round, n))
            .ok()?;
        let agg: Vec<f64> = serde_json::from_value(rec.value["aggregate"].clone()).ok()?;
        out.insert(n, DVector::from_vec(agg));
    }
    Some(out)
}

/// Waits until `f` yields, or until `deadline`.
fn poll<T>(deadline: Instant, mut f: impl FnMut() -> Option<T>) -> Option<T> {
    loop {
        if let Some(v) = f() {
            return Some(v);
        }
        if Instant::now() >= deadline {
            return None;
        }
        std::thread::sleep(Duration::from_micros(100));
    }
}

/// Dual-walk state owned by the coordinating aggregator.
struct Coordinator {
    cfg: PricingConfig,
    start: Instant,
    alpha_hat_eff: f64,
    history: VecDeque<DVector<f64>>,
    /// λ_k by round, starting with the initial price.
    lambdas: Vec<DVector<f64>>,
}

impl Coordinator {
    fn new(cfg: PricingConfig, lambda0: DVector<f64>) -> Self {
        let alpha_hat_eff = cfg.alpha_hat;
        Coordinator {
            cfg,
            start: Instant::now(),
            alpha_hat_eff,
            history: VecDeque::new(),
            lambdas: vec![lambda0],
        }
    }

    fn deadline(&self) -> Instant {
        self.start + Duration::from_secs_f64(self.cfg.timeout)
    }

    /// All round-k aggregates are in: advance the price and decide whether
    /// the loop continues. Returns the record for round k+1.
    fn advance(&mut self, k: u64, aggregates: &BTreeMap<usize, DVector<f64>>) -> LambdaRecord {
        let lambda_k = self.lambdas[k as usize].clone();
        let t = lambda_k.len();
        let mut total = DVector::zeros(t);
        for agg in aggregates.values() {
            total += agg;
        }
        let alpha = step_size(self.alpha_hat_eff, k);
        let next = &lambda_k + alpha * &total;
        self.lambdas.push(next.clone());

        let converged =
            check_convergence(&next, &lambda_k, self.cfg.epsilon) && total.amax() <= self.cfg.balance_tol;
        let timed_out = self.start.elapsed().as_secs_f64() >= self.cfg.timeout;
        let capped = k + 1 >= self.cfg.max_rounds;

        let mut record = LambdaRecord {
            lambda: next.iter().copied().collect(),
            alpha,
            status: STATUS_RUN.into(),
            final_round: None,
            lambda_star: None,
            converged: false,
            recycled: false,
        };
        if converged {
            record.status = STATUS_FINAL.into();
            record.final_round = Some(k);
            record.lambda_star = Some(record.lambda.clone());
            record.converged = true;
        } else if timed_out || capped {
            // Settle the round that just completed at the price it was
            // cleared against.
            record.status = STATUS_FINAL.into();
            record.final_round = Some(k);
            record.lambda_star = Some(lambda_k.iter().copied().collect());
            record.recycled = true;
        } else {
            // The budget rows make the dual walk only subgradient-like; a
            // revisited price means a cycle, so damp the step and go on.
            let scale = 1.0 + next.amax();
            if self
                .history
                .iter()
                .any(|old| (&next - old).amax() < 1e-9 * scale)
            {
                self.alpha_hat_eff *= 0.5;
                self.history.clear();
            } else {
                self.history.push_back(next);
                if self.history.len() > CYCLE_WINDOW {
                    self.history.pop_front();
                }
            }
        }
        record
    }

    /// The round-k barrier broke (missing aggregates at the deadline).
    /// Recycle the previous round if there is one.
    fn barrier_failure(&self, k: u64) -> LambdaRecord {
        let mut record = LambdaRecord {
            lambda: self.lambdas[k as usize].iter().copied().collect(),
            alpha: step_size(self.alpha_hat_eff, k),
            status: STATUS_ABORT.into(),
            final_round: None,
            lambda_star: None,
            converged: false,
            recycled: false,
        };
        if k > 0 {
            record.status = STATUS_FINAL.into();
            record.final_round = Some(k - 1);
            record.lambda_star = Some(self.lambdas[(k - 1) as usize].iter().copied().collect());
            record.recycled = true;
        }
        record
    }
}

/// Reads the standing bids for every region and builds their asset models.
fn collect_bids(
    ledger: &SharedLedger,
    admins: &[String],
    window: u64,
    horizon: usize,
) -> Result<Vec<Vec<ProsumerBid>>, MarketError> {
    let net = ledger.lock();
    let mut regions = Vec::with_capacity(admins.len());
    for (n, admin) in admins.iter().enumerate() {
        let mut bids = Vec::new();
        for rec in net.bids_for_window(admin, n, window)? {
            let id = rec
                .key
                .rsplit('/')
                .next()
                .unwrap_or(rec.key.as_str())
                .to_string();
            let params: AssetParams =
                serde_json::from_value(rec.value["params"].clone()).map_err(|e| {
                    MarketError::BadBid {
                        prosumer: id.clone(),
                        message: format!("unreadable resource description: {e}"),
                    }
                })?;
            let budget = rec.value["budget"].as_f64().ok_or_else(|| MarketError::BadBid {
                prosumer: id.clone(),
                message: "missing budget".into(),
            })?;
            let bus = rec.value["bus"].as_u64().ok_or_else(|| MarketError::BadBid {
                prosumer: id.clone(),
                message: "missing bus".into(),
            })? as usize;
            let model = build_asset(params, horizon)?;
            bids.push(ProsumerBid { id, bus, model, budget });
        }
        bids.sort_by(|a, b| a.id.cmp(&b.id));
        regions.push(bids);
    }
    Ok(regions)
}

/// Runs the full clearing for one window: reads bids from the local
/// channels, iterates the dual walk over the common channel, then writes
/// dispatches, budget updates, per-bus totals, and the round result.
pub fn run_pricing(
    ledger: &SharedLedger,
    admins: &[String],
    window: u64,
    horizon: usize,
    lambda_init: Option<DVector<f64>>,
    config: &PricingConfig,
    mode: ExecutionMode,
) -> Result<PricingOutcome, MarketError> {
    let lambda0 = match lambda_init {
        Some(l) => {
            if l.len() != horizon {
                return Err(MarketError::Dimension(format!(
                    "initial price has length {}, horizon is {horizon}",
                    l.len()
                )));
            }
            l
        }
        None => DVector::zeros(horizon),
    };
    let bids = collect_bids(ledger, admins, window, horizon)?;

    let mut coordinator = Coordinator::new(config.clone(), lambda0.clone());
    write_lambda(
        ledger,
        &admins[0],
        window,
        0,
        &LambdaRecord {
            lambda: lambda0.iter().copied().collect(),
            alpha: config.alpha_hat,
            status: STATUS_RUN.into(),
            final_round: None,
            lambda_star: None,
            converged: false,
            recycled: false,
        },
    )?;

    let (settle, schedules) = match mode {
        ExecutionMode::Deterministic => {
            run_deterministic(ledger, admins, window, &bids, &mut coordinator)?
        }
        ExecutionMode::Threaded => run_threaded(ledger, admins, window, &bids, coordinator)?,
    };

    finalize(ledger, admins, window, &bids, settle, schedules)
}

/// The coordinator's terminal decision.
struct Settlement {
    final_round: u64,
    lambda_star: DVector<f64>,
    converged: bool,
    recycled: bool,
    lambda_trace: Vec<Vec<f64>>,
    balance_trace: Vec<f64>,
}

fn run_deterministic(
    ledger: &SharedLedger,
    admins: &[String],
    window: u64,
    bids: &[Vec<ProsumerBid>],
    coordinator: &mut Coordinator,
) -> Result<(Settlement, BTreeMap<usize, ScheduleMatrix>), MarketError> {
    let n_regions = admins.len();
    let mut prev: Option<BTreeMap<usize, ScheduleMatrix>> = None;
    let mut balance_trace = Vec::new();
    let mut k = 0u64;
    loop {
        if coordinator.start.elapsed().as_secs_f64() >= coordinator.cfg.timeout || k >= coordinator.cfg.max_rounds
        {
            // Out of budget before this round could run.
            let record = coordinator.barrier_failure(k);
            write_lambda(ledger, &admins[0], window, k + 1, &record)?;
            if record.status == STATUS_ABORT {
                return Err(MarketError::NoPriorSolution);
            }
            let prev = prev.expect("final_round = k-1 implies round k-1 ran");
            return Ok((
                settlement_from(coordinator, &record, balance_trace),
                prev,
            ));
        }

        let lambda_k = coordinator.lambdas[k as usize].clone();
        let mut curr = BTreeMap::new();
        for n in 0..n_regions {
            let schedule = solve_subproblem(&bids[n], &lambda_k)?;
            post_round(ledger, &admins[n], window, k, &schedule)?;
            curr.insert(n, schedule);
        }
        let aggregates = read_round(ledger, &admins[0], window, k, n_regions)
            .ok_or(MarketError::MissingAggregator { region: 0, round: k })?;
        balance_trace.push(total_imbalance(&aggregates));
        let record = coordinator.advance(k, &aggregates);
        write_lambda(ledger, &admins[0], window, k + 1, &record)?;
        if record.status == STATUS_FINAL {
            return Ok((settlement_from(coordinator, &record, balance_trace), curr));
        }
        prev = Some(curr);
        k += 1;
    }
}

fn total_imbalance(aggregates: &BTreeMap<usize, DVector<f64>>) -> f64 {
    let t = aggregates.values().next().map_or(0, |v| v.len());
    let mut total = DVector::zeros(t);
    for agg in aggregates.values() {
        total += agg;
    }
    if t == 0 {
        0.0
    } else {
        total.amax()
    }
}

fn settlement_from(
    coordinator: &Coordinator,
    record: &LambdaRecord,
    balance_trace: Vec<f64>,
) -> Settlement {
    Settlement {
        final_round: record.final_round.expect("final record names its round"),
        lambda_star: DVector::from_vec(record.lambda_star.clone().expect("final record carries λ⋆")),
        converged: record.converged,
        recycled: record.recycled,
        lambda_trace: coordinator.lambdas.iter().map(|l| l.iter().copied().collect()).collect(),
        balance_trace,
    }
}

fn run_threaded(
    ledger: &SharedLedger,
    admins: &[String],
    window: u64,
    bids: &[Vec<ProsumerBid>],
    coordinator: Coordinator,
) -> Result<(Settlement, BTreeMap<usize, ScheduleMatrix>), MarketError> {
    let n_regions = admins.len();
    // Workers poll generously past the coordinator's own deadline; the
    // coordinator always publishes a terminal record before giving up.
    let worker_deadline = coordinator.deadline() + Duration::from_secs(10);
    let mut coordinator = Some(coordinator);

    let results: Vec<Result<Option<(u64, ScheduleMatrix)>, MarketError>> =
        std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(n_regions);
            for n in 0..n_regions {
                let mut coord = if n == 0 { coordinator.take() } else { None };
                let admin = &admins[n];
                let region_bids = &bids[n];
                handles.push(scope.spawn(move || {
                    let mut prev: Option<(u64, ScheduleMatrix)> = None;
                    let mut curr: Option<(u64, ScheduleMatrix)> = None;
                    let mut k = 0u64;
                    loop {
                        let Some(record) =
                            poll(worker_deadline, || read_lambda(ledger, admin, window, k))
                        else {
                            return Err(MarketError::MissingAggregator { region: n, round: k });
                        };
                        match record.status.as_str() {
                            STATUS_ABORT => return Ok(None),
                            STATUS_FINAL => {
                                let j = record.final_round.expect("final record names its round");
                                let chosen = [&curr, &prev]
                                    .into_iter()
                                    .flatten()
                                    .find(|(round, _)| *round == j)
                                    .map(|(round, s)| (*round, s.clone()));
                                return match chosen {
                                    Some(found) => Ok(Some(found)),
                                    None => Err(MarketError::MissingAggregator {
                                        region: n,
                                        round: j,
                                    }),
                                };
                            }
                            _ => {}
                        }
                        let lambda_k = DVector::from_vec(record.lambda.clone());
                        let schedule = solve_subproblem(region_bids, &lambda_k)?;
                        post_round(ledger, admin, window, k, &schedule)?;
                        prev = curr.take();
                        curr = Some((k, schedule));

                        if let Some(coord) = coord.as_mut() {
                            let outcome = poll(coord.deadline(), || {
                                read_round(ledger, admin, window, k, n_regions)
                            });
                            let next = match outcome {
                                Some(aggregates) => coord.advance(k, &aggregates),
                                None => coord.barrier_failure(k),
                            };
                            write_lambda(ledger, admin, window, k + 1, &next)?;
                        }
                        k += 1;
                    }
                }));
            }
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });

    let mut schedules = BTreeMap::new();
    let mut aborted = false;
    for (n, result) in results.into_iter().enumerate() {
        match result? {
            Some((_, schedule)) => {
                schedules.insert(n, schedule);
            }
            None => aborted = true,
        }
    }
    if aborted {
        return Err(MarketError::NoPriorSolution);
    }

    // Reconstruct the terminal decision and traces from the ledger records.
    let mut lambda_trace = Vec::new();
    let mut balance_trace = Vec::new();
    let mut k = 0u64;
    let settle = loop {
        let record = read_lambda(ledger, &admins[0], window, k)
            .ok_or(MarketError::MissingAggregator { region: 0, round: k })?;
        lambda_trace.push(record.lambda.clone());
        if record.status == STATUS_FINAL {
            break Settlement {
                final_round: record.final_round.expect("final record names its round"),
                lambda_star: DVector::from_vec(
                    record.lambda_star.clone().expect("final record carries λ⋆"),
                ),
                converged: record.converged,
                recycled: record.recycled,
                lambda_trace: Vec::new(),
                balance_trace: Vec::new(),
            };
        }
        if k > 0 {
            if let Some(aggs) = read_round(ledger, &admins[0], window, k - 1, admins.len()) {
                balance_trace.push(total_imbalance(&aggs));
            }
        }
        k += 1;
    };
    if balance_trace.len() <= settle.final_round as usize {
        if let Some(aggs) = read_round(ledger, &admins[0], window, settle.final_round, admins.len())
        {
            balance_trace.push(total_imbalance(&aggs));
        }
    }
    let settle = Settlement { lambda_trace, balance_trace, ..settle };
    Ok((settle, schedules))
}

fn finalize(
    ledger: &SharedLedger,
    admins: &[String],
    window: u64,
    bids: &[Vec<ProsumerBid>],
    settle: Settlement,
    schedules: BTreeMap<usize, ScheduleMatrix>,
) -> Result<PricingOutcome, MarketError> {
    let lambda_star = settle.lambda_star.clone();
    let mut billing = Vec::new();
    let mut bus_dispatch: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    let t = lambda_star.len();

    for (n, admin) in admins.iter().enumerate() {
        let Some(schedule) = schedules.get(&n) else { continue };
        let mut budgets: BTreeMap<String, f64> =
            bids[n].iter().map(|b| (b.id.clone(), b.budget)).collect();
        let entries = billing_update(schedule, &lambda_star, &mut budgets);
        let mut region_buses: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
        {
            let mut net = ledger.lock();
            for (i, entry) in entries.iter().enumerate() {
                let profile: Vec<f64> = schedule.row(i).iter().copied().collect();
                net.bc_put_dispatch(admin, window, &entry.prosumer, &profile, entry.charge)?;
                net.bc_put_budget(admin, &entry.prosumer, entry.r_b_after)?;
                region_buses
                    .entry(schedule.buses[i])
                    .or_insert_with(|| DVector::zeros(t))
                    .axpy(1.0, &schedule.row(i), 1.0);
            }
            for (bus, profile) in &region_buses {
                let profile: Vec<f64> = profile.iter().copied().collect();
                net.rc_put_bus_dispatch(admin, window, *bus, &profile)?;
            }
        }
        for (bus, profile) in region_buses {
            bus_dispatch
                .entry(bus)
                .and_modify(|acc| *acc += &profile)
                .or_insert(profile);
        }
        billing.extend(entries);
    }

    let balance = settle.balance_trace.last().copied().unwrap_or(f64::NAN);
    ledger.lock().rc_put_pricing_result(
        &admins[0],
        window,
        json!({
            "lambda": settle.lambda_star.iter().copied().collect::<Vec<f64>>(),
            "converged": settle.converged,
            "recycled": settle.recycled,
            "rounds": settle.final_round + 1,
            "balance": balance,
        }),
    )?;

    Ok(PricingOutcome {
        lambda_star: PriceVector { lambda: lambda_star, k: settle.final_round + 1 },
        schedules,
        billing,
        converged: settle.converged,
        recycled: settle.recycled,
        rounds: settle.final_round + 1,
        lambda_trace: settle.lambda_trace,
        balance_trace: settle.balance_trace,
        bus_dispatch: bus_dispatch
            .into_iter()
            .map(|(b, v)| (b, v.iter().copied().collect()))
            .collect(),
    })
}
