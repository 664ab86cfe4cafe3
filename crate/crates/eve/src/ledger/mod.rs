//! Simulated two-tier permissioned ledger.
//!
//! One global channel (`commonchannel`) is shared by all aggregator admins;
//! each aggregator `n` additionally runs a local channel (`agg{n}channel`)
//! whose members are that aggregator's admin and its enrolled prosumers.
//! Every channel keeps an ordered log of hash-chained blocks, one
//! transaction per block, plus a world state holding the latest record per
//! key. Access control is deny-by-default: a read or write goes through only
//! if an explicit rule admits the caller's registered attributes.
//!
//! Hashing is SHA-256 over a canonical JSON encoding (keys sorted, no
//! whitespace), so journals written in deterministic mode are byte-stable.

pub mod contracts;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const COMMON_CHANNEL: &str = "commonchannel";

/// Handle shared between concurrently running aggregator actors. Every
/// append goes through the one lock, which is what gives the network its
/// single linearizable sequencer.
pub type SharedLedger = std::sync::Arc<parking_lot::Mutex<LedgerNetwork>>;

/// Name of aggregator `n`'s local channel.
pub fn agg_channel(n: usize) -> String {
    format!("agg{n}channel")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Compact JSON with object keys in sorted order. Serialization goes through
/// `serde_json::Value`, whose map type is key-ordered, so field declaration
/// order never leaks into the hash preimage.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value)
        .expect("ledger payloads are plain data")
        .to_string()
}

pub fn genesis_prev_hash() -> String {
    "0".repeat(64)
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Contract {
    #[serde(rename = "ACT")]
    Act,
    #[serde(rename = "BC")]
    Bc,
    #[serde(rename = "RC")]
    Rc,
    #[serde(rename = "MC")]
    Mc,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Transaction {
    pub channel: String,
    pub contract: Contract,
    pub op: String,
    pub submitter: String,
    pub type_tag: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub round: Option<u64>,
    pub key: String,
    pub value: Value,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct LedgerBlock {
    pub index: u64,
    pub prev_hash: String,
    pub payload_hash: String,
    /// Logical timestamp: position in the network-wide append order.
    pub timestamp: u64,
    pub tx: Transaction,
}

pub fn tx_digest(tx: &Transaction) -> String {
    sha256_hex(canonical_json(tx).as_bytes())
}

pub fn block_digest(block: &LedgerBlock) -> String {
    sha256_hex(canonical_json(block).as_bytes())
}

/// Latest value stored under a key, with enough metadata for selector
/// queries (type tag, submitter, round).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Record {
    pub key: String,
    pub value: Value,
    pub type_tag: String,
    pub submitter: String,
    pub round: Option<u64>,
    pub block_index: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug, Default)]
pub struct QueryFilter {
    pub key_prefix: Option<String>,
    pub type_tag: Option<String>,
    pub submitter: Option<String>,
    pub round: Option<u64>,
}

impl QueryFilter {
    fn matches(&self, rec: &Record) -> bool {
        if let Some(p) = &self.key_prefix {
            if !rec.key.starts_with(p.as_str()) {
                return false;
            }
        }
        if let Some(t) = &self.type_tag {
            if &rec.type_tag != t {
                return false;
            }
        }
        if let Some(s) = &self.submitter {
            if &rec.submitter != s {
                return false;
            }
        }
        if let Some(r) = self.round {
            if rec.round != Some(r) {
                return false;
            }
        }
        true
    }
}

#[derive(Error, Debug)]
pub enum LedgerError {
    #[error("identity {identity} may not {op} on {channel}")]
    AccessDenied {
        identity: String,
        channel: String,
        op: String,
    },
    #[error("contract {contract:?} is not served on channel {channel}")]
    ChannelMismatch { contract: Contract, channel: String },
    #[error("unknown identity {0}")]
    UnknownIdentity(String),
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("no record under key {0}")]
    NotFound(String),
    #[error("bidding window {0} is closed")]
    WindowClosed(u64),
    #[error("journal i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal line {line}: {message}")]
    MalformedJournal { line: usize, message: String },
}

#[derive(Clone, Debug, Default)]
struct ChannelLedger {
    blocks: Vec<LedgerBlock>,
    state: BTreeMap<String, Record>,
}

impl ChannelLedger {
    fn head_digest(&self) -> String {
        match self.blocks.last() {
            Some(b) => block_digest(b),
            None => genesis_prev_hash(),
        }
    }

    fn apply_state(&mut self, block: &LedgerBlock) {
        self.state.insert(
            block.tx.key.clone(),
            Record {
                key: block.tx.key.clone(),
                value: block.tx.value.clone(),
                type_tag: block.tx.type_tag.clone(),
                submitter: block.tx.submitter.clone(),
                round: block.tx.round,
                block_index: block.index,
            },
        );
    }
}

/// Attribute map for a registered identity. Keys in use: `role`
/// (`aggregator-admin` or `prosumer`), `aggregator` (region index), `asset`
/// (resource kind for prosumers), `bus`.
pub type Attributes = BTreeMap<String, String>;

/// The whole simulated ledger network: every channel, the identity registry,
/// the bid-window switchboard, and an optional JSON-lines journal. All
/// appends across all channels are serialized through one logical clock.
pub struct LedgerNetwork {
    n_regions: usize,
    channels: BTreeMap<String, ChannelLedger>,
    identities: BTreeMap<String, Attributes>,
    open_windows: BTreeMap<u64, bool>,
    clock: u64,
    journal: Option<BufWriter<File>>,
}

impl LedgerNetwork {
    pub fn new(n_regions: usize) -> Self {
        let mut channels = BTreeMap::new();
        channels.insert(COMMON_CHANNEL.to_string(), ChannelLedger::default());
        for n in 0..n_regions {
            channels.insert(agg_channel(n), ChannelLedger::default());
        }
        Self {
            n_regions,
            channels,
            identities: BTreeMap::new(),
            open_windows: BTreeMap::new(),
            clock: 0,
            journal: None,
        }
    }

    /// Attach a JSON-lines journal; every appended block is written through
    /// as `{"channel": ..., "block": ...}` in append order.
    pub fn with_journal(n_regions: usize, path: &Path) -> Result<Self, LedgerError> {
        let mut net = Self::new(n_regions);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        net.journal = Some(BufWriter::new(file));
        Ok(net)
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }

    /// Enroll aggregator `n`'s admin; returns its identity token.
    pub fn register_aggregator(&mut self, n: usize) -> String {
        let token = format!("agg{n}:admin");
        let mut attrs = Attributes::new();
        attrs.insert("role".into(), "aggregator-admin".into());
        attrs.insert("aggregator".into(), n.to_string());
        self.identities.insert(token.clone(), attrs);
        token
    }

    /// Enroll a prosumer under aggregator `region`; returns its identity
    /// token (`prosumer:{id}`).
    pub fn register_prosumer(&mut self, region: usize, id: &str, asset: &str, bus: usize) -> String {
        let token = format!("prosumer:{id}");
        let mut attrs = Attributes::new();
        attrs.insert("role".into(), "prosumer".into());
        attrs.insert("aggregator".into(), region.to_string());
        attrs.insert("asset".into(), asset.to_string());
        attrs.insert("bus".into(), bus.to_string());
        self.identities.insert(token.clone(), attrs);
        token
    }

    pub fn attributes(&self, identity: &str) -> Option<&Attributes> {
        self.identities.get(identity)
    }

    fn admin_region(attrs: &Attributes) -> Option<usize> {
        if attrs.get("role").map(String::as_str) == Some("aggregator-admin") {
            attrs.get("aggregator")?.parse().ok()
        } else {
            None
        }
    }

    fn prosumer_region(attrs: &Attributes) -> Option<usize> {
        if attrs.get("role").map(String::as_str) == Some("prosumer") {
            attrs.get("aggregator")?.parse().ok()
        } else {
            None
        }
    }

    fn is_member(&self, channel: &str, attrs: &Attributes) -> bool {
        if channel == COMMON_CHANNEL {
            return Self::admin_region(attrs).is_some();
        }
        for n in 0..self.n_regions {
            if channel == agg_channel(n) {
                return Self::admin_region(attrs) == Some(n)
                    || Self::prosumer_region(attrs) == Some(n);
            }
        }
        false
    }

    /// Edge-scoped record keys look like `edge/{lo}-{hi}/...`; only the two
    /// named aggregators may read them.
    fn edge_of_key(key: &str) -> Option<(usize, usize)> {
        let rest = key.strip_prefix("edge/")?;
        let seg = rest.split('/').next()?;
        let (lo, hi) = seg.split_once('-')?;
        Some((lo.parse().ok()?, hi.parse().ok()?))
    }

    fn read_allowed(&self, channel: &str, key: &str, attrs: &Attributes) -> bool {
        if !self.is_member(channel, attrs) {
            return false;
        }
        if channel == COMMON_CHANNEL {
            if let Some((lo, hi)) = Self::edge_of_key(key) {
                return Self::admin_region(attrs).is_some_and(|n| n == lo || n == hi);
            }
        }
        true
    }

    fn expected_channel_kind(contract: Contract) -> &'static str {
        match contract {
            Contract::Act | Contract::Rc => "common",
            Contract::Bc | Contract::Mc => "agg",
        }
    }

    fn write_allowed(&self, tx: &Transaction, attrs: &Attributes) -> bool {
        let admin = Self::admin_region(attrs);
        let prosumer = Self::prosumer_region(attrs);
        match (tx.contract, tx.op.as_str()) {
            (Contract::Act, "onboard") => admin.is_some(),
            (Contract::Rc, "put_edge_state") => {
                let Some(n) = admin else { return false };
                let Some((lo, hi)) = Self::edge_of_key(&tx.key) else {
                    return false;
                };
                lo < hi && hi < self.n_regions && (n == lo || n == hi)
            }
            (Contract::Rc, op) if op.starts_with("put_") => admin.is_some(),
            (Contract::Bc, "submit_bid") => {
                prosumer.is_some() && self.is_member(&tx.channel, attrs)
            }
            (Contract::Bc, op) if op.starts_with("put_") => {
                admin.is_some() && self.is_member(&tx.channel, attrs)
            }
            (Contract::Mc, "submit_measurements") => {
                self.is_member(&tx.channel, attrs)
            }
            _ => false,
        }
    }

    /// Append a transaction on behalf of `identity`. The stored submitter is
    /// forced to the authenticated identity. Returns the block index on the
    /// transaction's channel once the block is durably recorded.
    pub fn append(&mut self, identity: &str, mut tx: Transaction) -> Result<u64, LedgerError> {
        let attrs = self
            .identities
            .get(identity)
            .ok_or_else(|| LedgerError::UnknownIdentity(identity.to_string()))?
            .clone();
        if !self.channels.contains_key(&tx.channel) {
            return Err(LedgerError::UnknownChannel(tx.channel.clone()));
        }
        let kind = Self::expected_channel_kind(tx.contract);
        let on_common = tx.channel == COMMON_CHANNEL;
        if (kind == "common") != on_common {
            return Err(LedgerError::ChannelMismatch {
                contract: tx.contract,
                channel: tx.channel.clone(),
            });
        }
        tx.submitter = identity.to_string();
        if !self.is_member(&tx.channel, &attrs) || !self.write_allowed(&tx, &attrs) {
            return Err(LedgerError::AccessDenied {
                identity: identity.to_string(),
                channel: tx.channel.clone(),
                op: tx.op.clone(),
            });
        }
        let channel = self.channels.get_mut(&tx.channel).expect("checked above");
        let block = LedgerBlock {
            index: channel.blocks.len() as u64,
            prev_hash: channel.head_digest(),
            payload_hash: tx_digest(&tx),
            timestamp: self.clock,
            tx,
        };
        self.clock += 1;
        channel.apply_state(&block);
        let index = block.index;
        let line = journal_line(&block);
        channel.blocks.push(block);
        if let Some(journal) = &mut self.journal {
            journal.write_all(line.as_bytes())?;
            journal.write_all(b"\n")?;
            journal.flush()?;
        }
        Ok(index)
    }

    /// Read the latest record under `key`, subject to read rules.
    pub fn query_key(
        &self,
        identity: &str,
        channel: &str,
        key: &str,
    ) -> Result<Record, LedgerError> {
        let attrs = self
            .identities
            .get(identity)
            .ok_or_else(|| LedgerError::UnknownIdentity(identity.to_string()))?;
        let ch = self
            .channels
            .get(channel)
            .ok_or_else(|| LedgerError::UnknownChannel(channel.to_string()))?;
        if !self.read_allowed(channel, key, attrs) {
            return Err(LedgerError::AccessDenied {
                identity: identity.to_string(),
                channel: channel.to_string(),
                op: format!("read {key}"),
            });
        }
        ch.state
            .get(key)
            .cloned()
            .ok_or_else(|| LedgerError::NotFound(key.to_string()))
    }

    /// Scan the world state with equality selectors. Records the caller may
    /// not read (edge-scoped slices on the common channel) are omitted
    /// rather than failing the whole scan.
    pub fn query(
        &self,
        identity: &str,
        channel: &str,
        filter: &QueryFilter,
    ) -> Result<Vec<Record>, LedgerError> {
        let attrs = self
            .identities
            .get(identity)
            .ok_or_else(|| LedgerError::UnknownIdentity(identity.to_string()))?;
        let ch = self
            .channels
            .get(channel)
            .ok_or_else(|| LedgerError::UnknownChannel(channel.to_string()))?;
        if !self.is_member(channel, attrs) {
            return Err(LedgerError::AccessDenied {
                identity: identity.to_string(),
                channel: channel.to_string(),
                op: "query".into(),
            });
        }
        Ok(ch
            .state
            .values()
            .filter(|rec| filter.matches(rec) && self.read_allowed(channel, &rec.key, attrs))
            .cloned()
            .collect())
    }

    pub fn blocks(&self, channel: &str) -> Result<&[LedgerBlock], LedgerError> {
        self.channels
            .get(channel)
            .map(|c| c.blocks.as_slice())
            .ok_or_else(|| LedgerError::UnknownChannel(channel.to_string()))
    }

    /// Recompute every hash on `channel` from scratch. `Ok(len)` if the
    /// whole chain checks out; `Err(i)` names the first corrupted block.
    /// Truncation of a valid suffix is invisible here by construction; the
    /// orchestrator audits chain length against its own append counter.
    pub fn verify_chain(&self, channel: &str) -> Result<Result<u64, u64>, LedgerError> {
        let ch = self
            .channels
            .get(channel)
            .ok_or_else(|| LedgerError::UnknownChannel(channel.to_string()))?;
        let mut prev = genesis_prev_hash();
        for (i, block) in ch.blocks.iter().enumerate() {
            if block.index != i as u64
                || block.prev_hash != prev
                || block.payload_hash != tx_digest(&block.tx)
            {
                return Ok(Err(i as u64));
            }
            prev = block_digest(block);
        }
        Ok(Ok(ch.blocks.len() as u64))
    }

    /// Mutable access to the raw block log, for adversarial tamper trials.
    /// Bypasses every integrity mechanism on purpose.
    pub fn blocks_mut_unchecked(&mut self, channel: &str) -> Option<&mut Vec<LedgerBlock>> {
        self.channels.get_mut(channel).map(|c| &mut c.blocks)
    }

    /// All blocks across all channels in network append order.
    pub fn journal_string(&self) -> String {
        let mut entries: Vec<(&str, &LedgerBlock)> = Vec::new();
        for (name, ch) in &self.channels {
            for block in &ch.blocks {
                entries.push((name, block));
            }
        }
        entries.sort_by_key(|(_, b)| b.timestamp);
        let mut out = String::new();
        for (_, block) in entries {
            out.push_str(&journal_line(block));
            out.push('\n');
        }
        out
    }

    /// Rebuild a network from a JSON-lines journal, verbatim: hashes are not
    /// recomputed on load, so later `verify_chain` calls still see whatever
    /// corruption the file carries.
    pub fn from_journal(path: &Path, n_regions: usize) -> Result<Self, LedgerError> {
        let mut net = Self::new(n_regions);
        let reader = BufReader::new(File::open(path)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: JournalEntry =
                serde_json::from_str(&line).map_err(|e| LedgerError::MalformedJournal {
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            let ch = net.channels.entry(entry.channel).or_default();
            ch.apply_state(&entry.block);
            net.clock = net.clock.max(entry.block.timestamp + 1);
            ch.blocks.push(entry.block);
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct JournalEntry {
    channel: String,
    block: LedgerBlock,
}

fn journal_line(block: &LedgerBlock) -> String {
    canonical_json(&JournalEntry {
        channel: block.tx.channel.clone(),
        block: block.clone(),
    })
}
