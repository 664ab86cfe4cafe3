//! Contract operations layered over raw appends.
//!
//! Four contracts are served: ACT (account onboarding, common channel),
//! BC (bids, dispatches and budgets on an aggregator channel), RC (round
//! records shared between aggregators: pricing aggregates and prices,
//! verification state slices and trust data, final verdicts), and MC (raw
//! measurement submission on an aggregator channel). Key layouts are fixed
//! here so that producers and consumers agree without further coordination.

use serde_json::{json, Value};

use super::{agg_channel, Contract, LedgerError, LedgerNetwork, Record, Transaction, COMMON_CHANNEL};

pub const TAG_ACCOUNT: &str = "account";
pub const TAG_PRICING: &str = "pricing";
pub const TAG_VERIFICATION: &str = "verification";
pub const TAG_MEASUREMENT: &str = "measurement";

pub fn bid_key(window: u64, prosumer: &str) -> String {
    format!("bid/window{window}/{prosumer}")
}

pub fn dispatch_key(window: u64, prosumer: &str) -> String {
    format!("dispatch/window{window}/{prosumer}")
}

pub fn budget_key(prosumer: &str) -> String {
    format!("budget/{prosumer}")
}

pub fn pricing_round_key(window: u64, round: u64, agg: usize) -> String {
    format!("pricing/window{window}/round{round}/agg{agg}")
}

pub fn lambda_key(window: u64, round: u64) -> String {
    format!("pricing/window{window}/round{round}/lambda")
}

pub fn pricing_result_key(window: u64) -> String {
    format!("pricing/window{window}/result")
}

pub fn bus_dispatch_key(window: u64, bus: usize) -> String {
    format!("dispatch/window{window}/bus{bus}")
}

pub fn edge_state_key(window: u64, iter: u64, a: usize, b: usize, from: usize) -> String {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    format!("edge/{lo}-{hi}/window{window}/iter{iter}/from{from}")
}

pub fn trust_key(window: u64, agg: usize) -> String {
    format!("verification/window{window}/trust/agg{agg}")
}

pub fn detection_row_key(window: u64, iter: u64, agg: usize) -> String {
    format!("verification/window{window}/iter{iter}/row/agg{agg}")
}

pub fn verdict_key(window: u64) -> String {
    format!("verification/window{window}/verdict")
}

pub fn measurement_key(window: u64, bus: usize) -> String {
    format!("meas/window{window}/bus{bus}")
}

impl LedgerNetwork {
    fn region_of(&self, identity: &str) -> Result<usize, LedgerError> {
        let attrs = self
            .attributes(identity)
            .ok_or_else(|| LedgerError::UnknownIdentity(identity.to_string()))?;
        attrs
            .get("aggregator")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| LedgerError::UnknownIdentity(identity.to_string()))
    }

    /// ACT: record an enrolled identity's account on the common channel.
    pub fn act_onboard(&mut self, admin: &str, subject: &str) -> Result<u64, LedgerError> {
        let attrs = self
            .attributes(subject)
            .ok_or_else(|| LedgerError::UnknownIdentity(subject.to_string()))?;
        let value = json!({ "identity": subject, "attributes": attrs });
        self.append(
            admin,
            Transaction {
                channel: COMMON_CHANNEL.into(),
                contract: Contract::Act,
                op: "onboard".into(),
                submitter: String::new(),
                type_tag: TAG_ACCOUNT.into(),
                round: None,
                key: format!("account/{subject}"),
                value,
            },
        )
    }

    pub fn open_bidding(&mut self, window: u64) {
        self.open_windows.insert(window, true);
    }

    pub fn close_bidding(&mut self, window: u64) {
        self.open_windows.insert(window, false);
    }

    pub fn bidding_open(&self, window: u64) -> bool {
        self.open_windows.get(&window).copied().unwrap_or(false)
    }

    /// BC: a prosumer bids its resource description and spending budget for
    /// `window`. Re-submitting overwrites: the last bid before the window
    /// closes is the one cleared.
    pub fn bc_submit_bid(
        &mut self,
        prosumer: &str,
        window: u64,
        params: Value,
        budget: f64,
    ) -> Result<u64, LedgerError> {
        if !self.bidding_open(window) {
            return Err(LedgerError::WindowClosed(window));
        }
        let region = self.region_of(prosumer)?;
        let bus = self
            .attributes(prosumer)
            .and_then(|a| a.get("bus"))
            .and_then(|s| s.parse::<usize>().ok());
        self.append(
            prosumer,
            Transaction {
                channel: agg_channel(region),
                contract: Contract::Bc,
                op: "submit_bid".into(),
                submitter: String::new(),
                type_tag: TAG_PRICING.into(),
                round: Some(window),
                key: bid_key(window, prosumer),
                value: json!({ "params": params, "budget": budget, "bus": bus }),
            },
        )
    }

    /// BC: the aggregator writes a prosumer's cleared profile and charge.
    pub fn bc_put_dispatch(
        &mut self,
        admin: &str,
        window: u64,
        prosumer: &str,
        profile: &[f64],
        charge: f64,
    ) -> Result<u64, LedgerError> {
        let region = self.region_of(admin)?;
        self.append(
            admin,
            Transaction {
                channel: agg_channel(region),
                contract: Contract::Bc,
                op: "put_dispatch".into(),
                submitter: String::new(),
                type_tag: TAG_PRICING.into(),
                round: Some(window),
                key: dispatch_key(window, prosumer),
                value: json!({ "profile": profile, "charge": charge }),
            },
        )
    }

    /// BC: the aggregator updates a prosumer's running balance.
    pub fn bc_put_budget(
        &mut self,
        admin: &str,
        prosumer: &str,
        r_b: f64,
    ) -> Result<u64, LedgerError> {
        let region = self.region_of(admin)?;
        self.append(
            admin,
            Transaction {
                channel: agg_channel(region),
                contract: Contract::Bc,
                op: "put_budget".into(),
                submitter: String::new(),
                type_tag: TAG_ACCOUNT.into(),
                round: None,
                key: budget_key(prosumer),
                value: json!({ "r_b": r_b }),
            },
        )
    }

    /// RC: an aggregator publishes its aggregate profile for a pricing round.
    pub fn rc_put_pricing_round(
        &mut self,
        admin: &str,
        window: u64,
        round: u64,
        aggregate: &[f64],
    ) -> Result<u64, LedgerError> {
        let region = self.region_of(admin)?;
        self.append(
            admin,
            Transaction {
                channel: COMMON_CHANNEL.into(),
                contract: Contract::Rc,
                op: "put_round".into(),
                submitter: String::new(),
                type_tag: TAG_PRICING.into(),
                round: Some(round),
                key: pricing_round_key(window, round, region),
                value: json!({ "window": window, "aggregate": aggregate }),
            },
        )
    }

    /// RC: the coordinating aggregator publishes the price record for a
    /// round. The value carries the vector itself plus whatever loop control
    /// the protocol needs (status, final round).
    pub fn rc_put_lambda(
        &mut self,
        admin: &str,
        window: u64,
        round: u64,
        value: Value,
    ) -> Result<u64, LedgerError> {
        self.append(
            admin,
            Transaction {
                channel: COMMON_CHANNEL.into(),
                contract: Contract::Rc,
                op: "put_lambda".into(),
                submitter: String::new(),
                type_tag: TAG_PRICING.into(),
                round: Some(round),
                key: lambda_key(window, round),
                value,
            },
        )
    }

    /// RC: net cleared injection profile for one bus, shared for later
    /// verification against metered state.
    pub fn rc_put_bus_dispatch(
        &mut self,
        admin: &str,
        window: u64,
        bus: usize,
        profile: &[f64],
    ) -> Result<u64, LedgerError> {
        self.append(
            admin,
            Transaction {
                channel: COMMON_CHANNEL.into(),
                contract: Contract::Rc,
                op: "put_bus_dispatch".into(),
                submitter: String::new(),
                type_tag: TAG_PRICING.into(),
                round: None,
                key: bus_dispatch_key(window, bus),
                value: json!({ "window": window, "profile": profile }),
            },
        )
    }

    /// RC: final pricing outcome for a window.
    pub fn rc_put_pricing_result(
        &mut self,
        admin: &str,
        window: u64,
        value: Value,
    ) -> Result<u64, LedgerError> {
        self.append(
            admin,
            Transaction {
                channel: COMMON_CHANNEL.into(),
                contract: Contract::Rc,
                op: "put_result".into(),
                submitter: String::new(),
                type_tag: TAG_PRICING.into(),
                round: None,
                key: pricing_result_key(window),
                value,
            },
        )
    }

    /// RC: shared-variable slice sent from one aggregator to an edge
    /// neighbor during a verification iteration. Readable only by the two
    /// aggregators on the edge.
    pub fn rc_put_edge_state(
        &mut self,
        admin: &str,
        window: u64,
        iter: u64,
        to_agg: usize,
        slice: &[Vec<f64>],
    ) -> Result<u64, LedgerError> {
        let from = self.region_of(admin)?;
        self.append(
            admin,
            Transaction {
                channel: COMMON_CHANNEL.into(),
                contract: Contract::Rc,
                op: "put_edge_state".into(),
                submitter: String::new(),
                type_tag: TAG_VERIFICATION.into(),
                round: Some(iter),
                key: edge_state_key(window, iter, from, to_agg, from),
                value: json!({ "window": window, "slice": slice }),
            },
        )
    }

    /// RC: an aggregator's per-iteration detection row — its normalized
    /// disagreement row, raw disagreement scores, and local step norm. The
    /// key is iteration-scoped so rounds never overwrite each other and
    /// every aggregator can assemble the same matrix for the same round.
    pub fn rc_put_detection_row(
        &mut self,
        admin: &str,
        window: u64,
        iter: u64,
        value: Value,
    ) -> Result<u64, LedgerError> {
        let region = self.region_of(admin)?;
        self.append(
            admin,
            Transaction {
                channel: COMMON_CHANNEL.into(),
                contract: Contract::Rc,
                op: "put_detection_row".into(),
                submitter: String::new(),
                type_tag: TAG_VERIFICATION.into(),
                round: Some(iter),
                key: detection_row_key(window, iter, region),
                value,
            },
        )
    }

    /// RC: an aggregator's disagreement row and trust estimate for a window.
    pub fn rc_put_trust(
        &mut self,
        admin: &str,
        window: u64,
        value: Value,
    ) -> Result<u64, LedgerError> {
        let region = self.region_of(admin)?;
        self.append(
            admin,
            Transaction {
                channel: COMMON_CHANNEL.into(),
                contract: Contract::Rc,
                op: "put_trust".into(),
                submitter: String::new(),
                type_tag: TAG_VERIFICATION.into(),
                round: None,
                key: trust_key(window, region),
                value,
            },
        )
    }

    /// RC: the verification verdict for a window.
    pub fn rc_put_verdict(
        &mut self,
        admin: &str,
        window: u64,
        value: Value,
    ) -> Result<u64, LedgerError> {
        self.append(
            admin,
            Transaction {
                channel: COMMON_CHANNEL.into(),
                contract: Contract::Rc,
                op: "put_verdict".into(),
                submitter: String::new(),
                type_tag: TAG_VERIFICATION.into(),
                round: None,
                key: verdict_key(window),
                value,
            },
        )
    }

    /// MC: raw sensor readings for one bus over a window, submitted on the
    /// local channel by the metering prosumer or the aggregator itself.
    pub fn mc_submit_measurements(
        &mut self,
        identity: &str,
        window: u64,
        bus: usize,
        values: Value,
    ) -> Result<u64, LedgerError> {
        let region = self.region_of(identity)?;
        self.append(
            identity,
            Transaction {
                channel: agg_channel(region),
                contract: Contract::Mc,
                op: "submit_measurements".into(),
                submitter: String::new(),
                type_tag: TAG_MEASUREMENT.into(),
                round: Some(window),
                key: measurement_key(window, bus),
                value: values,
            },
        )
    }

    /// Every bid standing on aggregator `region`'s channel for `window`.
    pub fn bids_for_window(
        &self,
        admin: &str,
        region: usize,
        window: u64,
    ) -> Result<Vec<Record>, LedgerError> {
        self.query(
            admin,
            &agg_channel(region),
            &super::QueryFilter {
                key_prefix: Some(format!("bid/window{window}/")),
                type_tag: Some(TAG_PRICING.into()),
                ..Default::default()
            },
        )
    }
}
