//! Perception utility: the saturating accuracy curve, effective-density
//! fusion at cluster leaders, and the per-vehicle / system objectives.

use crate::channel::Schedule;
use crate::coalition::Partition;
use crate::world::{nonpositive, DensityField, GridId, VehicleId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Detection accuracy as a function of point density:
/// `f(rho) = f_max * (1 - exp(-lambda * rho))`.
///
/// `lambda` is calibrated so that `f(rho_th) = (1 - epsilon) * f_max`, i.e.
/// a grid sensed at the threshold density is within `epsilon` of the curve's
/// ceiling and counts as saturated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityCurve {
    pub f_max: f64,
    pub lambda: f64,
    pub rho_th: f64,
    pub epsilon: f64,
}

impl UtilityCurve {
    pub fn from_saturation(f_max: f64, rho_th: f64, epsilon: f64) -> Self {
        assert!(f_max > 0.0 && rho_th > 0.0 && epsilon > 0.0 && epsilon < 1.0);
        UtilityCurve {
            f_max,
            lambda: (1.0 / epsilon).ln() / rho_th,
            rho_th,
            epsilon,
        }
    }

    pub fn value(&self, rho: f64) -> f64 {
        assert!(rho >= 0.0, "negative density {rho}");
        self.f_max * (1.0 - (-self.lambda * rho).exp())
    }

    /// A grid at or above this density is saturated: observing it better
    /// gains less than `epsilon * f_max`.
    pub fn saturated(&self, rho: f64) -> bool {
        rho >= self.rho_th
    }
}

impl Default for UtilityCurve {
    fn default() -> Self {
        UtilityCurve::from_saturation(1.0, 2.0, 0.05)
    }
}

/// Curve calibration as written in a config file. `lambda` is always derived
/// from the saturation pair, so only the three free parameters appear.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub f_max: f64,
    pub rho_th: f64,
    pub epsilon: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            f_max: 1.0,
            rho_th: 2.0,
            epsilon: 0.05,
        }
    }
}

impl CurveConfig {
    pub fn validate(&self) -> Result<(), String> {
        if nonpositive(self.f_max) {
            return Err(format!("f_max must be positive, got {}", self.f_max));
        }
        if nonpositive(self.rho_th) {
            return Err(format!("rho_th must be positive, got {}", self.rho_th));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        Ok(())
    }

    pub fn to_curve(&self) -> UtilityCurve {
        UtilityCurve::from_saturation(self.f_max, self.rho_th, self.epsilon)
    }
}

/// Post-upload effective densities. Leaders accumulate member uploads on top
/// of their own sensing; everyone else keeps raw density.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusedDensity {
    pub by_vehicle: BTreeMap<VehicleId, BTreeMap<GridId, f64>>,
}

impl FusedDensity {
    pub fn rho(&self, i: VehicleId, g: GridId) -> f64 {
        self.by_vehicle
            .get(&i)
            .and_then(|m| m.get(&g))
            .copied()
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("upload {from}->{to} but {to} leads no coalition")]
    ReceiverNotLeader { from: VehicleId, to: VehicleId },
    #[error("upload {from}->{to} but {from} is not in {to}'s coalition")]
    SenderNotMember { from: VehicleId, to: VehicleId },
    #[error("upload {from}->{from} is self-directed")]
    SelfUpload { from: VehicleId },
}

/// Applies every scheduled upload: each leader's density gains the sender's
/// raw density on the scheduled grids, summed over senders and subchannels.
/// Rejects uploads that break the cluster structure (receiver not a leader,
/// sender outside the receiver's coalition).
pub fn fuse_effective_density(
    schedule: &Schedule,
    densities: &DensityField,
    partition: &Partition,
) -> Result<FusedDensity, FusionError> {
    let mut fused = FusedDensity {
        by_vehicle: densities.by_vehicle.clone(),
    };
    for up in schedule.entries() {
        if up.from == up.to {
            return Err(FusionError::SelfUpload { from: up.from });
        }
        let Some(coalition) = partition.led_by(up.to) else {
            return Err(FusionError::ReceiverNotLeader {
                from: up.from,
                to: up.to,
            });
        };
        if !coalition.members.contains(&up.from) {
            return Err(FusionError::SenderNotMember {
                from: up.from,
                to: up.to,
            });
        }
        let add = densities.rho(up.from, up.grid);
        if add > 0.0 {
            *fused
                .by_vehicle
                .entry(up.to)
                .or_default()
                .entry(up.grid)
                .or_insert(0.0) += add;
        }
    }
    Ok(fused)
}

/// Best detection available for a grid: max over vehicles of f(rho_hat).
/// Vehicles not observing the grid contribute f(0) = 0, so the max over all
/// vehicles equals the max over observers.
pub fn late_fusion_utility(g: GridId, fused: &FusedDensity, curve: &UtilityCurve) -> f64 {
    let best = fused
        .by_vehicle
        .values()
        .map(|m| m.get(&g).copied().unwrap_or(0.0))
        .fold(0.0, f64::max);
    curve.value(best)
}

/// Per-grid best utility for a set of grids, computed in one pass over the
/// fused field.
pub fn peak_utilities(
    grids: &BTreeSet<GridId>,
    fused: &FusedDensity,
    curve: &UtilityCurve,
) -> BTreeMap<GridId, f64> {
    let mut best: BTreeMap<GridId, f64> = grids.iter().map(|&g| (g, 0.0)).collect();
    for m in fused.by_vehicle.values() {
        for (g, &rho) in m {
            if let Some(b) = best.get_mut(g) {
                if rho > 0.0 {
                    let u = curve.value(rho);
                    if u > *b {
                        *b = u;
                    }
                }
            }
        }
    }
    best
}

/// Utility of one vehicle: summed best detection over its requirement region.
pub fn vehicle_utility(
    req_region: &BTreeSet<GridId>,
    fused: &FusedDensity,
    curve: &UtilityCurve,
) -> f64 {
    peak_utilities(req_region, fused, curve).values().sum()
}

/// Aggregate objective: sum of vehicle utilities over the given CAVs.
pub fn system_utility(
    req_regions: &BTreeMap<VehicleId, BTreeSet<GridId>>,
    fused: &FusedDensity,
    curve: &UtilityCurve,
) -> f64 {
    req_regions
        .values()
        .map(|req| vehicle_utility(req, fused, curve))
        .sum()
}

/// Utility a vehicle achieves from its own sensing alone (no sharing at all):
/// sum of f(own rho) over its requirement region.
pub fn isolated_utility(
    i: VehicleId,
    req_region: &BTreeSet<GridId>,
    densities: &DensityField,
    curve: &UtilityCurve,
) -> f64 {
    req_region
        .iter()
        .map(|&g| curve.value(densities.rho(i, g)))
        .sum()
}
