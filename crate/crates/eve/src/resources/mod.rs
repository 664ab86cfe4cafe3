//! Prosumer resource models.
//!
//! Every asset is reduced to one uniform convex description
//!
//! ```text
//!   p = A u + ℓ,   u ∈ [u_lower, u_upper],   p(t) ∈ [p_lower(t), p_upper(t)]
//! ```
//!
//! plus a cost built from a small set of components (linear in p, linear in
//! the control, quadratic in the control, piecewise-linear around an anchor,
//! and the electric-vehicle deadline credit). Integer constraints from the
//! physical models (on/off charging, discrete start times) are relaxed to
//! their convex hulls. The market module consumes this description directly.

mod build;

pub use build::build_asset;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("invalid asset parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssetKind {
    Ev,
    DeferrableAppliance,
    Tcl,
    Storage,
    Renewable,
    Slack,
    InflexibleLoad,
}

/// Kind-specific parameters; this enum is the asset block of the scenario
/// JSON schema (tagged by `kind`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssetParams {
    /// Charger with arrival/departure window, state-of-charge target, and a
    /// time-decreasing willingness-to-pay curve plus a deferral credit.
    Ev {
        arrival: usize,
        departure: usize,
        initial_charge: f64,
        target_charge: f64,
        rate: f64,
        price_curve: Vec<f64>,
        deadline_credit: f64,
    },
    /// Fixed consumption cycle that may start in any interval; delay is
    /// penalized linearly.
    DeferrableAppliance { cycle: Vec<f64>, delay_cost: f64, base_cost: f64 },
    /// First-order thermal model; the control is the temperature deviation
    /// from the reference expressed in power units.
    Tcl {
        thermal_resistance: f64,
        thermal_capacitance: f64,
        efficiency: f64,
        reference_temp: f64,
        outdoor_forecast: Vec<f64>,
        #[serde(default)]
        perturbation: Vec<f64>,
        initial_deviation: f64,
        deviation_min: f64,
        deviation_max: f64,
        rate: f64,
        comfort_cost: f64,
        base_value: f64,
    },
    /// Battery with symmetric rate limit; positive profile entries are
    /// charge, negative are discharge.
    Storage {
        initial_charge: f64,
        capacity: f64,
        rate: f64,
        charge_cost: Vec<f64>,
        discharge_cost: Vec<f64>,
    },
    /// Must-run injection at the posted forecast, zero marginal cost.
    Renewable { forecast: Vec<f64> },
    /// Transmission interface at the substation: deviations from the
    /// wholesale schedule are priced per direction, optionally with a
    /// quadratic smoothing term.
    Slack {
        schedule: Vec<f64>,
        sell_cost: Vec<f64>,
        buy_cost: Vec<f64>,
        #[serde(default)]
        quadratic: f64,
        #[serde(default = "default_slack_limit")]
        power_limit: f64,
    },
    /// Demand that must be served at any price.
    InflexibleLoad { demand: Vec<f64> },
}

fn default_slack_limit() -> f64 {
    1e3
}

impl AssetParams {
    pub fn kind(&self) -> AssetKind {
        match self {
            AssetParams::Ev { .. } => AssetKind::Ev,
            AssetParams::DeferrableAppliance { .. } => AssetKind::DeferrableAppliance,
            AssetParams::Tcl { .. } => AssetKind::Tcl,
            AssetParams::Storage { .. } => AssetKind::Storage,
            AssetParams::Renewable { .. } => AssetKind::Renewable,
            AssetParams::Slack { .. } => AssetKind::Slack,
            AssetParams::InflexibleLoad { .. } => AssetKind::InflexibleLoad,
        }
    }
}

/// Piecewise-linear charges per direction around an anchor profile:
/// (p − anchor)₊ᵀ c_pos + (anchor − p)₊ᵀ c_neg.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    pub anchor: DVector<f64>,
    pub c_pos: DVector<f64>,
    pub c_neg: DVector<f64>,
}

/// Deferral credit −c_d · min(target + 1ᵀp, cap): rewards charge left for
/// after the horizon, capped by what the charger can still deliver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeadlineCredit {
    pub c_d: f64,
    pub target: f64,
    pub cap: f64,
}

/// Cost of a profile, assembled from independent components. All components
/// are convex in p over the asset's feasible set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CostSpec {
    /// Coefficient on ‖u‖² (thermal discomfort).
    pub quad_u: f64,
    /// c₁ᵀ p over the market horizon.
    pub linear_p: Option<DVector<f64>>,
    /// c̃₁ᵀ u in control space (start-time delay pricing).
    pub linear_u: Option<DVector<f64>>,
    /// Directional charges around an anchor.
    pub piecewise: Option<PiecewiseLinear>,
    /// q · ‖p − anchor‖² on the same anchor as `piecewise`.
    pub quad_p_anchor: f64,
    /// Constant offset.
    pub constant: f64,
    /// Deferral credit (electric vehicles).
    pub deadline: Option<DeadlineCredit>,
}

/// Uniform convex description of one asset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssetModel {
    pub kind: AssetKind,
    /// Market horizon T.
    pub horizon: usize,
    /// Profile map; square and lower-triangular for EV/TCL/storage/slack,
    /// (T+d)×T for deferrable appliances, T×0 for fixed profiles.
    pub a: DMatrix<f64>,
    /// Offset ℓ; same row count as `a`.
    pub ell: DVector<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    /// Power bounds over the market horizon (length T).
    pub p_lower: DVector<f64>,
    pub p_upper: DVector<f64>,
    pub cost: CostSpec,
    pub params: AssetParams,
}

impl AssetModel {
    pub fn n_controls(&self) -> usize {
        self.a.ncols()
    }

    /// Profile over the market horizon for a given control.
    pub fn profile(&self, u: &DVector<f64>) -> DVector<f64> {
        let t = self.horizon;
        let mut p = self.ell.rows(0, t).clone_owned();
        if self.a.ncols() > 0 {
            p += self.a.rows(0, t) * u;
        }
        p
    }

    /// Recovers the control from a market-horizon profile. The upper T×n_u
    /// block of A is lower-triangular with nonzero diagonal for every asset
    /// kind that has controls, so the recovery is a forward substitution.
    pub fn recover_control(&self, p: &DVector<f64>) -> Result<DVector<f64>, ResourceError> {
        let t = self.horizon;
        if p.len() != t {
            return Err(ResourceError::DimensionMismatch(format!(
                "profile has {} intervals, asset horizon is {}",
                p.len(),
                t
            )));
        }
        let nu = self.n_controls();
        if nu == 0 {
            return Ok(DVector::zeros(0));
        }
        let rhs = p.rows(0, nu) - self.ell.rows(0, nu);
        let block = self.a.view((0, 0), (nu, nu));
        let mut u = DVector::zeros(nu);
        for i in 0..nu {
            let mut acc = rhs[i];
            for j in 0..i {
                acc -= block[(i, j)] * u[j];
            }
            let d = block[(i, i)];
            if d == 0.0 {
                return Err(ResourceError::InvalidParams(
                    "profile map has a zero diagonal; control not recoverable".into(),
                ));
            }
            u[i] = acc / d;
        }
        Ok(u)
    }
}

/// Prosumer spending allowance for one window.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Budget {
    pub owner: String,
    pub r_b: f64,
}

impl Budget {
    pub fn new(owner: impl Into<String>, r_b: f64) -> Self {
        Budget { owner: owner.into(), r_b }
    }
}

/// Evaluates an asset's cost at a market-horizon profile.
pub fn eval_cost(asset: &AssetModel, p: &DVector<f64>) -> Result<f64, ResourceError> {
    let t = asset.horizon;
    if p.len() != t {
        return Err(ResourceError::DimensionMismatch(format!(
            "profile has {} intervals, asset horizon is {}",
            p.len(),
            t
        )));
    }
    let c = &asset.cost;
    let mut total = c.constant;
    if let Some(c1) = &c.linear_p {
        total += c1.dot(p);
    }
    if c.quad_u != 0.0 || c.linear_u.is_some() {
        let u = asset.recover_control(p)?;
        if c.quad_u != 0.0 {
            total += c.quad_u * u.norm_squared();
        }
        if let Some(cu) = &c.linear_u {
            total += cu.dot(&u);
        }
    }
    if let Some(pw) = &c.piecewise {
        for i in 0..t {
            let dev = p[i] - pw.anchor[i];
            total += dev.max(0.0) * pw.c_pos[i] + (-dev).max(0.0) * pw.c_neg[i];
        }
    }
    if c.quad_p_anchor != 0.0 {
        let anchor = c
            .piecewise
            .as_ref()
            .map(|pw| pw.anchor.clone())
            .unwrap_or_else(|| DVector::zeros(t));
        total += c.quad_p_anchor * (p - anchor).norm_squared();
    }
    if let Some(dl) = &c.deadline {
        total -= dl.c_d * (dl.target + p.sum()).min(dl.cap);
    }
    Ok(total)
}

/// Violations of an asset's feasible set at a profile, by constraint family.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Worst control-bound violation after recovering u = A†(p − ℓ).
    pub control: f64,
    /// Worst power-bound violation over the market horizon.
    pub power: f64,
    /// Budget excess max(0, pᵀλ − r_b).
    pub budget: f64,
}

impl FeasibilityReport {
    pub fn worst(&self) -> f64 {
        self.control.max(self.power).max(self.budget)
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

/// Checks profile membership in the asset's feasible set, including the
/// affordability constraint pᵀλ ≤ r_b.
pub fn feasibility_check(
    asset: &AssetModel,
    p: &DVector<f64>,
    lambda: &DVector<f64>,
    budget: &Budget,
) -> Result<FeasibilityReport, ResourceError> {
    let t = asset.horizon;
    if p.len() != t || lambda.len() != t {
        return Err(ResourceError::DimensionMismatch(format!(
            "profile/price have {}/{} intervals, asset horizon is {}",
            p.len(),
            lambda.len(),
            t
        )));
    }
    let mut report = FeasibilityReport::default();
    if asset.n_controls() > 0 {
        let u = asset.recover_control(p)?;
        for i in 0..u.len() {
            report.control = report
                .control
                .max(asset.u_lower[i] - u[i])
                .max(u[i] - asset.u_upper[i]);
        }
    }
    for i in 0..t {
        report.power =
            report.power.max(asset.p_lower[i] - p[i]).max(p[i] - asset.p_upper[i]);
    }
    report.budget = (p.dot(lambda) - budget.r_b).max(0.0);
    Ok(report)
}
