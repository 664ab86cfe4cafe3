//! Importer for MATPOWER-format case files (the `.m` text form).
//!
//! Only the fields this simulator needs are read: base MVA, bus ids and
//! loads, and in-service branches with their series impedance. Shunts,
//! transformer ratios, and limits are ignored.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::{GridTopology, Line, SensorGrant};

#[derive(Debug, Error)]
pub enum MatpowerError {
    #[error("io error reading case file: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing matrix `{0}` in case file")]
    MissingMatrix(&'static str),
    #[error("malformed row in `{matrix}`: {row}")]
    MalformedRow { matrix: &'static str, row: String },
    #[error("missing or malformed baseMVA")]
    BadBaseMva,
    #[error("no slack bus (type 3) found")]
    NoSlackBus,
}

#[derive(Debug, Clone)]
pub struct MatpowerBus {
    pub id: usize,
    pub bus_type: u8,
    /// Real load, MW.
    pub pd: f64,
    /// Reactive load, MVAr.
    pub qd: f64,
}

#[derive(Debug, Clone)]
pub struct MatpowerBranch {
    pub from: usize,
    pub to: usize,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone)]
pub struct MatpowerCase {
    pub base_mva: f64,
    pub buses: Vec<MatpowerBus>,
    pub branches: Vec<MatpowerBranch>,
}

impl MatpowerCase {
    pub fn slack_bus(&self) -> Result<usize, MatpowerError> {
        self.buses
            .iter()
            .find(|b| b.bus_type == 3)
            .map(|b| b.id)
            .ok_or(MatpowerError::NoSlackBus)
    }

    /// Bus id → (Pd, Qd) in MW/MVAr.
    pub fn loads(&self) -> BTreeMap<usize, (f64, f64)> {
        self.buses.iter().map(|b| (b.id, (b.pd, b.qd))).collect()
    }

    /// Converts to a raw topology, attaching a region assignment and grants.
    pub fn to_topology(
        &self,
        region_of: BTreeMap<usize, usize>,
        sensor_grants: Vec<SensorGrant>,
    ) -> Result<GridTopology, MatpowerError> {
        let root = self.slack_bus()?;
        let buses = self.buses.iter().map(|b| b.id).collect();
        let lines = self
            .branches
            .iter()
            .filter(|br| br.in_service)
            .map(|br| Line { from: br.from, to: br.to, r: br.r, x: br.x })
            .collect();
        Ok(GridTopology {
            buses,
            lines,
            root,
            region_of,
            sensor_grants,
            base_mva: self.base_mva,
        })
    }
}

/// Extracts the numeric rows of `mpc.<name> = [ ... ];`.
fn matrix_rows(text: &str, name: &'static str) -> Result<Vec<Vec<f64>>, MatpowerError> {
    let needle = format!("mpc.{name}");
    let start = text.find(&needle).ok_or(MatpowerError::MissingMatrix(name))?;
    let after = &text[start..];
    let open = after.find('[').ok_or(MatpowerError::MissingMatrix(name))?;
    let close = after[open..].find(']').ok_or(MatpowerError::MissingMatrix(name))?;
    let body: String = after[open + 1..open + close]
        .lines()
        .map(|l| l.split('%').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n");
    let mut rows = Vec::new();
    for raw in body.split(';') {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> =
            line.split_whitespace().map(|tok| tok.parse::<f64>()).collect();
        match vals {
            Ok(v) if !v.is_empty() => rows.push(v),
            _ => {
                return Err(MatpowerError::MalformedRow { matrix: name, row: line.to_string() })
            }
        }
    }
    Ok(rows)
}

/// Parses MATPOWER case text.
pub fn parse_matpower(text: &str) -> Result<MatpowerCase, MatpowerError> {
    let base_mva = text
        .lines()
        .map(|l| l.split('%').next().unwrap_or(""))
        .find_map(|l| {
            let l = l.trim();
            l.strip_prefix("mpc.baseMVA")
                .and_then(|rest| rest.trim().strip_prefix('='))
                .and_then(|rest| rest.trim().trim_end_matches(';').trim().parse::<f64>().ok())
        })
        .ok_or(MatpowerError::BadBaseMva)?;
    let bus_rows = matrix_rows(text, "bus")?;
    let mut buses = Vec::with_capacity(bus_rows.len());
    for row in bus_rows {
        if row.len() < 4 {
            return Err(MatpowerError::MalformedRow {
                matrix: "bus",
                row: format!("{row:?}"),
            });
        }
        buses.push(MatpowerBus {
            id: row[0] as usize,
            bus_type: row[1] as u8,
            pd: row[2],
            qd: row[3],
        });
    }
    let branch_rows = matrix_rows(text, "branch")?;
    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in branch_rows {
        if row.len() < 4 {
            return Err(MatpowerError::MalformedRow {
                matrix: "branch",
                row: format!("{row:?}"),
            });
        }
        branches.push(MatpowerBranch {
            from: row[0] as usize,
            to: row[1] as usize,
            r: row[2],
            x: row[3],
            // Column 11 is the branch status when present.
            in_service: row.get(10).map(|&s| s != 0.0).unwrap_or(true),
        });
    }
    Ok(MatpowerCase { base_mva, buses, branches })
}

/// Reads and parses a MATPOWER case file from disk.
pub fn import_matpower(path: &Path) -> Result<MatpowerCase, MatpowerError> {
    let text = std::fs::read_to_string(path)?;
    parse_matpower(&text)
}
