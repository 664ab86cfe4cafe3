//! Constructs the uniform convex description for each asset kind.

use nalgebra::{DMatrix, DVector};

use super::{
    AssetKind, AssetModel, AssetParams, CostSpec, DeadlineCredit, PiecewiseLinear, ResourceError,
};

fn require(cond: bool, msg: &str) -> Result<(), ResourceError> {
    if cond {
        Ok(())
    } else {
        Err(ResourceError::InvalidParams(msg.to_string()))
    }
}

fn require_len(v: &[f64], t: usize, name: &str) -> Result<(), ResourceError> {
    if v.len() == t {
        Ok(())
    } else {
        Err(ResourceError::InvalidParams(format!(
            "{name} has {} entries, expected horizon length {t}",
            v.len()
        )))
    }
}

/// Lower shift matrix J: (Ju)(t) = u(t−1), zero in the first row.
fn shift(t: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(t, t);
    for i in 1..t {
        j[(i, i - 1)] = 1.0;
    }
    j
}

/// Builds an asset's profile map, offset, bounds, and cost from its physical
/// parameters, relaxing integer constraints to their convex hulls.
pub fn build_asset(params: AssetParams, t: usize) -> Result<AssetModel, ResourceError> {
    require(t > 0, "horizon must be positive")?;
    match params {
        AssetParams::Ev {
            arrival,
            departure,
            initial_charge,
            target_charge,
            rate,
            ref price_curve,
            deadline_credit,
        } => {
            require(rate > 0.0, "charge rate must be positive")?;
            require(target_charge > 0.0, "target charge must be positive")?;
            require(arrival < t, "arrival must fall inside the horizon")?;
            require(departure >= arrival, "deadline before arrival")?;
            require(
                (0.0..=target_charge).contains(&initial_charge),
                "initial charge must lie in [0, target]",
            )?;
            require_len(price_curve, t, "price curve")?;
            if departure < t {
                // Deadline inside the horizon: the charger must be able to
                // reach the target in the slots up to departure.
                let chargeable = rate * (departure - arrival + 1) as f64;
                require(
                    chargeable + 1e-12 >= target_charge - initial_charge,
                    "deadline unreachable at the rated charging power",
                )?;
            }
            // p = (J − I) u + ℓ: p(t) is the negated state-of-charge increment.
            let a = shift(t) - DMatrix::identity(t, t);
            let mut ell = DVector::zeros(t);
            ell[0] = initial_charge;
            let mut u_lower = DVector::zeros(t);
            let mut u_upper = DVector::from_element(t, target_charge);
            let mut p_lower = DVector::from_element(t, -rate);
            let p_upper = DVector::zeros(t);
            for i in 0..t {
                if i < arrival {
                    // Not plugged in yet: state frozen at the initial charge.
                    u_lower[i] = initial_charge;
                    u_upper[i] = initial_charge;
                    p_lower[i] = 0.0;
                } else if i > departure {
                    // Departed: state frozen at the target, no power flows.
                    u_lower[i] = target_charge;
                    u_upper[i] = target_charge;
                    p_lower[i] = 0.0;
                } else if i == departure {
                    u_lower[i] = target_charge;
                }
            }
            // Credit for charge deferred past the horizon, capped by what the
            // remaining connection time can deliver.
            let cap = rate * ((departure as f64 - arrival as f64) - t as f64).max(0.0);
            let cost = CostSpec {
                linear_p: Some(DVector::from_column_slice(price_curve)),
                deadline: Some(DeadlineCredit { c_d: deadline_credit, target: target_charge, cap }),
                ..CostSpec::default()
            };
            Ok(AssetModel {
                kind: AssetKind::Ev,
                horizon: t,
                a,
                ell,
                u_lower,
                u_upper,
                p_lower,
                p_upper,
                cost,
                params,
            })
        }
        AssetParams::DeferrableAppliance { ref cycle, delay_cost, base_cost } => {
            require(!cycle.is_empty(), "zero-length cycle")?;
            require(cycle[0] > 0.0, "cycle must start with positive draw")?;
            require(cycle.iter().all(|&h| h >= 0.0), "cycle draws must be non-negative")?;
            require(delay_cost >= 0.0, "delay cost must be non-negative")?;
            let d = cycle.len() - 1;
            // Column j is the cycle started at interval j, negated.
            let mut a = DMatrix::zeros(t + d, t);
            for j in 0..t {
                for (k, &h) in cycle.iter().enumerate() {
                    a[(j + k, j)] = -h;
                }
            }
            let ell = DVector::zeros(t + d);
            // Start-time weights relaxed to the probability simplex; the
            // simplex equality itself is added by the subproblem builder.
            let u_lower = DVector::zeros(t);
            let u_upper = DVector::from_element(t, 1.0);
            let peak = cycle.iter().cloned().fold(0.0_f64, f64::max);
            let p_lower = DVector::from_element(t, -peak);
            let p_upper = DVector::zeros(t);
            // Delay penalty grows linearly with the start time: weight
            // (T−1−j) rewards early starts.
            let linear_u =
                DVector::from_fn(t, |j, _| delay_cost * (t - 1 - j) as f64);
            let cost = CostSpec {
                linear_u: Some(linear_u),
                constant: base_cost,
                ..CostSpec::default()
            };
            Ok(AssetModel {
                kind: AssetKind::DeferrableAppliance,
                horizon: t,
                a,
                ell,
                u_lower,
                u_upper,
                p_lower,
                p_upper,
                cost,
                params,
            })
        }
        AssetParams::Tcl {
            thermal_resistance,
            thermal_capacitance,
            efficiency,
            reference_temp,
            ref outdoor_forecast,
            ref perturbation,
            initial_deviation,
            deviation_min,
            deviation_max,
            rate,
            comfort_cost,
            base_value,
        } => {
            require(thermal_resistance > 0.0, "thermal resistance must be positive")?;
            require(thermal_capacitance > 0.0, "thermal capacitance must be positive")?;
            require(efficiency != 0.0, "efficiency must be nonzero")?;
            require(rate > 0.0, "power rating must be positive")?;
            require(deviation_min <= deviation_max, "deviation band is empty")?;
            require(comfort_cost >= 0.0, "comfort cost must be non-negative")?;
            require_len(outdoor_forecast, t, "outdoor forecast")?;
            if !perturbation.is_empty() {
                require_len(perturbation, t, "perturbation")?;
            }
            let tau = thermal_resistance * thermal_capacitance;
            // A = τ_h(I − J) + I.
            let a = (DMatrix::identity(t, t) - shift(t)) * tau + DMatrix::identity(t, t);
            let re = thermal_resistance * efficiency;
            let mut ell = DVector::from_fn(t, |i, _| {
                let eps = perturbation.get(i).copied().unwrap_or(0.0);
                (reference_temp - outdoor_forecast[i]) / re + eps / re
            });
            ell[0] -= tau * initial_deviation;
            let u_lower = DVector::from_element(t, deviation_min);
            let u_upper = DVector::from_element(t, deviation_max);
            let p_lower = DVector::from_element(t, -rate);
            let p_upper = DVector::zeros(t);
            // Discomfort grows with the squared deviation; the constant is
            // the value of nominal comfort.
            let cost = CostSpec {
                quad_u: comfort_cost,
                constant: -base_value,
                ..CostSpec::default()
            };
            Ok(AssetModel {
                kind: AssetKind::Tcl,
                horizon: t,
                a,
                ell,
                u_lower,
                u_upper,
                p_lower,
                p_upper,
                cost,
                params,
            })
        }
        AssetParams::Storage { initial_charge, capacity, rate, ref charge_cost, ref discharge_cost } => {
            require(capacity > 0.0, "capacity must be positive")?;
            require(rate > 0.0, "rate must be positive")?;
            require(
                (0.0..=capacity).contains(&initial_charge),
                "initial charge must lie in [0, capacity]",
            )?;
            require_len(charge_cost, t, "charge cost")?;
            require_len(discharge_cost, t, "discharge cost")?;
            require(
                charge_cost.iter().chain(discharge_cost.iter()).all(|&c| c >= 0.0),
                "cost vectors must be non-negative",
            )?;
            // p = (I − J) u − [u_init, 0, …]: the state-of-charge increment.
            let a = DMatrix::identity(t, t) - shift(t);
            let mut ell = DVector::zeros(t);
            ell[0] = -initial_charge;
            let u_lower = DVector::zeros(t);
            let u_upper = DVector::from_element(t, capacity);
            let p_lower = DVector::from_element(t, -rate);
            let p_upper = DVector::from_element(t, rate);
            let cost = CostSpec {
                piecewise: Some(PiecewiseLinear {
                    anchor: DVector::zeros(t),
                    c_pos: DVector::from_column_slice(charge_cost),
                    c_neg: DVector::from_column_slice(discharge_cost),
                }),
                ..CostSpec::default()
            };
            Ok(AssetModel {
                kind: AssetKind::Storage,
                horizon: t,
                a,
                ell,
                u_lower,
                u_upper,
                p_lower,
                p_upper,
                cost,
                params,
            })
        }
        AssetParams::Renewable { ref forecast } => {
            require_len(forecast, t, "forecast")?;
            let p = DVector::from_column_slice(forecast);
            Ok(AssetModel {
                kind: AssetKind::Renewable,
                horizon: t,
                a: DMatrix::zeros(t, 0),
                ell: p.clone(),
                u_lower: DVector::zeros(0),
                u_upper: DVector::zeros(0),
                p_lower: p.clone(),
                p_upper: p,
                cost: CostSpec::default(),
                params,
            })
        }
        AssetParams::Slack { ref schedule, ref sell_cost, ref buy_cost, quadratic, power_limit } => {
            require_len(schedule, t, "schedule")?;
            require_len(sell_cost, t, "sell cost")?;
            require_len(buy_cost, t, "buy cost")?;
            require(power_limit > 0.0, "power limit must be positive")?;
            require(quadratic >= 0.0, "quadratic coefficient must be non-negative")?;
            require(
                sell_cost.iter().chain(buy_cost.iter()).all(|&c| c >= 0.0),
                "cost vectors must be non-negative",
            )?;
            let anchor = DVector::from_column_slice(schedule);
            let cost = CostSpec {
                piecewise: Some(PiecewiseLinear {
                    anchor: anchor.clone(),
                    c_pos: DVector::from_column_slice(sell_cost),
                    c_neg: DVector::from_column_slice(buy_cost),
                }),
                quad_p_anchor: quadratic,
                ..CostSpec::default()
            };
            Ok(AssetModel {
                kind: AssetKind::Slack,
                horizon: t,
                a: DMatrix::identity(t, t),
                ell: DVector::zeros(t),
                u_lower: DVector::from_element(t, -power_limit),
                u_upper: DVector::from_element(t, power_limit),
                p_lower: DVector::from_element(t, -power_limit),
                p_upper: DVector::from_element(t, power_limit),
                cost,
                params,
            })
        }
        AssetParams::InflexibleLoad { ref demand } => {
            require_len(demand, t, "demand")?;
            require(demand.iter().all(|&d| d >= 0.0), "demand must be non-negative")?;
            let p = DVector::from_fn(t, |i, _| -demand[i]);
            Ok(AssetModel {
                kind: AssetKind::InflexibleLoad,
                horizon: t,
                a: DMatrix::zeros(t, 0),
                ell: p.clone(),
                u_lower: DVector::zeros(0),
                u_upper: DVector::zeros(0),
                p_lower: p.clone(),
                p_upper: p,
                cost: CostSpec::default(),
                params,
            })
        }
    }
}
