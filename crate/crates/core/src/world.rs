//! Scenario configuration, grid discretization, synthetic mobility, and raw
//! per-vehicle sensing densities.
//!
//! The world is a square scene tiled by non-overlapping square grids. Vehicles
//! move in straight lines along a two-road orthogonal intersection; a fixed
//! subset are connected vehicles that sense a density field around themselves.
//! Everything downstream (fusion, coalitions, scheduling) reads the immutable
//! per-cycle [`WorldState`] snapshot produced here.

use crate::geom::Vec2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Row-major cell index into a [`GridWorld`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridId(pub u32);

impl fmt::Display for GridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Side length of the square scene in meters.
    pub scene_extent: f64,
    /// Side length of one grid cell in meters; must divide `scene_extent`.
    pub grid_size: f64,
    pub n_vehicles: usize,
    /// How many vehicles (the lowest ids) are connected and sense/communicate.
    pub n_cavs: usize,
    /// Sensing radius in meters.
    pub r_sens: f64,
    /// Requirement radius in meters; at least `r_sens`.
    pub r_req: f64,
    /// Communication radius in meters.
    pub r_comm: f64,
    /// Length of one perception-communication cycle in seconds.
    pub cycle_duration: f64,
    /// Sensor points emitted per frame (one frame per cycle).
    pub points_per_frame: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// When set, grids hidden behind another vehicle's cell are masked out of
    /// the sensed density.
    pub occlusion: bool,
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scene_extent: 400.0,
            grid_size: 10.0,
            n_vehicles: 100,
            n_cavs: 20,
            r_sens: 50.0,
            r_req: 75.0,
            r_comm: 100.0,
            cycle_duration: 0.1,
            points_per_frame: 5600.0,
            speed_min: 0.0,
            speed_max: 16.67,
            occlusion: false,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("scene_extent must be positive, got {0}")]
    BadExtent(f64),
    #[error("grid_size must be positive, got {0}")]
    BadGridSize(f64),
    #[error("scene_extent {extent} is not a whole multiple of grid_size {grid}")]
    ExtentNotDivisible { extent: f64, grid: f64 },
    #[error("need r_req >= r_sens > 0, got r_sens {r_sens}, r_req {r_req}")]
    BadRadii { r_sens: f64, r_req: f64 },
    #[error("r_comm must be positive, got {0}")]
    BadCommRadius(f64),
    #[error("n_cavs {n_cavs} exceeds n_vehicles {n_vehicles}")]
    TooManyCavs { n_cavs: usize, n_vehicles: usize },
    #[error("cycle_duration must be positive, got {0}")]
    BadCycleDuration(f64),
    #[error("points_per_frame must be positive, got {0}")]
    BadPointBudget(f64),
    #[error("need 0 <= speed_min <= speed_max, got [{0}, {1}]")]
    BadSpeedRange(f64, f64),
}

/// True unless `x` is a finite positive number; rejects NaN and infinities.
pub(crate) fn nonpositive(x: f64) -> bool {
    !x.is_finite() || x <= 0.0
}

/// True unless `x` is finite and at least zero.
pub(crate) fn negative(x: f64) -> bool {
    !x.is_finite() || x < 0.0
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if nonpositive(self.scene_extent) {
            return Err(ScenarioError::BadExtent(self.scene_extent));
        }
        if nonpositive(self.grid_size) {
            return Err(ScenarioError::BadGridSize(self.grid_size));
        }
        let cells = self.scene_extent / self.grid_size;
        if (cells - cells.round()).abs() > 1e-9 || cells.round() < 1.0 {
            return Err(ScenarioError::ExtentNotDivisible {
                extent: self.scene_extent,
                grid: self.grid_size,
            });
        }
        if nonpositive(self.r_sens) || self.r_req < self.r_sens {
            return Err(ScenarioError::BadRadii {
                r_sens: self.r_sens,
                r_req: self.r_req,
            });
        }
        if nonpositive(self.r_comm) {
            return Err(ScenarioError::BadCommRadius(self.r_comm));
        }
        if self.n_cavs > self.n_vehicles {
            return Err(ScenarioError::TooManyCavs {
                n_cavs: self.n_cavs,
                n_vehicles: self.n_vehicles,
            });
        }
        if nonpositive(self.cycle_duration) {
            return Err(ScenarioError::BadCycleDuration(self.cycle_duration));
        }
        if nonpositive(self.points_per_frame) {
            return Err(ScenarioError::BadPointBudget(self.points_per_frame));
        }
        if negative(self.speed_min) || !self.speed_max.is_finite() || self.speed_max < self.speed_min {
            return Err(ScenarioError::BadSpeedRange(self.speed_min, self.speed_max));
        }
        Ok(())
    }

    pub fn grid_world(&self) -> GridWorld {
        GridWorld::new(self.scene_extent, self.grid_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub position: Vec2,
    pub velocity: Vec2,
    pub is_cav: bool,
    pub tx_power_dbm: f64,
    /// Compute capacity in floating-point ops per second.
    pub compute_capacity: f64,
}

pub const DEFAULT_TX_POWER_DBM: f64 = 23.0;
pub const DEFAULT_COMPUTE_CAPACITY: f64 = 1e12;

impl VehicleState {
    pub fn new(id: u32, position: Vec2, velocity: Vec2, is_cav: bool) -> Self {
        VehicleState {
            id: VehicleId(id),
            position,
            velocity,
            is_cav,
            tx_power_dbm: DEFAULT_TX_POWER_DBM,
            compute_capacity: DEFAULT_COMPUTE_CAPACITY,
        }
    }
}

/// Square scene tiled exactly by square cells; cell (row, col) has center
/// ((col + 0.5), (row + 0.5)) * grid_size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    extent: f64,
    grid_size: f64,
    per_side: u32,
}

impl GridWorld {
    pub fn new(extent: f64, grid_size: f64) -> Self {
        let cells = extent / grid_size;
        assert!(
            cells > 0.0 && (cells - cells.round()).abs() < 1e-9,
            "extent {extent} not tiled by grid_size {grid_size}"
        );
        GridWorld {
            extent,
            grid_size,
            per_side: cells.round() as u32,
        }
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn grid_size(&self) -> f64 {
        self.grid_size
    }

    pub fn cell_area(&self) -> f64 {
        self.grid_size * self.grid_size
    }

    pub fn per_side(&self) -> u32 {
        self.per_side
    }

    pub fn n_grids(&self) -> u32 {
        self.per_side * self.per_side
    }

    pub fn id(&self, row: u32, col: u32) -> GridId {
        debug_assert!(row < self.per_side && col < self.per_side);
        GridId(row * self.per_side + col)
    }

    pub fn center(&self, g: GridId) -> Vec2 {
        let row = g.0 / self.per_side;
        let col = g.0 % self.per_side;
        Vec2::new(
            (col as f64 + 0.5) * self.grid_size,
            (row as f64 + 0.5) * self.grid_size,
        )
    }

    /// Cell containing a point, or `None` outside the scene.
    pub fn grid_at(&self, p: Vec2) -> Option<GridId> {
        if p.x < 0.0 || p.y < 0.0 || p.x >= self.extent || p.y >= self.extent {
            return None;
        }
        let col = (p.x / self.grid_size) as u32;
        let row = (p.y / self.grid_size) as u32;
        Some(self.id(row.min(self.per_side - 1), col.min(self.per_side - 1)))
    }

    pub fn all(&self) -> impl Iterator<Item = GridId> {
        (0..self.n_grids()).map(GridId)
    }

    /// Cells whose center lies within `radius` of `p`. Scans only the bounding
    /// box of the disk; membership is the exact center-distance test.
    pub fn disk(&self, p: Vec2, radius: f64) -> BTreeSet<GridId> {
        let mut out = BTreeSet::new();
        if radius <= 0.0 {
            return out;
        }
        let lo = |v: f64| (((v - radius) / self.grid_size).floor() - 1.0).max(0.0) as u32;
        let hi = |v: f64| {
            ((((v + radius) / self.grid_size).ceil() + 1.0).max(0.0) as u32)
                .min(self.per_side.saturating_sub(1))
        };
        if self.per_side == 0 {
            return out;
        }
        for row in lo(p.y)..=hi(p.y) {
            for col in lo(p.x)..=hi(p.x) {
                let g = self.id(row, col);
                if self.center(g).dist(p) <= radius {
                    out.insert(g);
                }
            }
        }
        out
    }
}

/// Grids a vehicle observes: centers within `radius` of its position.
pub fn sensing_region(vehicle: &VehicleState, grids: &GridWorld, radius: f64) -> BTreeSet<GridId> {
    debug_assert!(radius > 0.0);
    grids.disk(vehicle.position, radius)
}

/// Union of the members' individual requirement regions.
pub fn cluster_requirement_region<'a>(
    members: impl IntoIterator<Item = &'a VehicleState>,
    grids: &GridWorld,
    r_req: f64,
) -> BTreeSet<GridId> {
    let mut out = BTreeSet::new();
    for m in members {
        out.append(&mut grids.disk(m.position, r_req));
    }
    out
}

/// Raw sensed densities, points/m², per connected vehicle per observed grid.
/// Grids absent from a vehicle's map have density zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub by_vehicle: BTreeMap<VehicleId, BTreeMap<GridId, f64>>,
}

impl DensityField {
    pub fn rho(&self, i: VehicleId, g: GridId) -> f64 {
        self.by_vehicle
            .get(&i)
            .and_then(|m| m.get(&g))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn grids_of(&self, i: VehicleId) -> Option<&BTreeMap<GridId, f64>> {
        self.by_vehicle.get(&i)
    }

    /// Sensed densities for every connected vehicle in the fleet.
    pub fn generate(vehicles: &[VehicleState], grids: &GridWorld, cfg: &ScenarioConfig) -> Self {
        let occupied: BTreeMap<GridId, Vec<VehicleId>> = {
            let mut m: BTreeMap<GridId, Vec<VehicleId>> = BTreeMap::new();
            for v in vehicles {
                if let Some(g) = grids.grid_at(v.position) {
                    m.entry(g).or_default().push(v.id);
                }
            }
            m
        };
        let mut field = DensityField::default();
        for v in vehicles.iter().filter(|v| v.is_cav) {
            field
                .by_vehicle
                .insert(v.id, generate_density(v, grids, cfg, &occupied));
        }
        field
    }
}

/// Sensed density of one vehicle: inverse-square falloff from the vehicle,
/// floored at half a cell, normalized so the points integrate to the per-frame
/// sensor budget over the (possibly occlusion-masked) support.
///
/// `occupied` maps each cell to the vehicles standing in it; only cells
/// holding some *other* vehicle block, and the endpoints of a sight line (the
/// sensing vehicle's own cell and the target cell) never block.
pub fn generate_density(
    vehicle: &VehicleState,
    grids: &GridWorld,
    cfg: &ScenarioConfig,
    occupied: &BTreeMap<GridId, Vec<VehicleId>>,
) -> BTreeMap<GridId, f64> {
    debug_assert!(vehicle.is_cav);
    let support = sensing_region(vehicle, grids, cfg.r_sens);
    let own_grid = grids.grid_at(vehicle.position);
    let floor = grids.grid_size() / 2.0;

    let mut weights: BTreeMap<GridId, f64> = BTreeMap::new();
    for &g in &support {
        if cfg.occlusion && blocked(vehicle, g, grids, occupied, own_grid) {
            continue;
        }
        let d = grids.center(g).dist(vehicle.position).max(floor);
        weights.insert(g, 1.0 / (d * d));
    }
    let total: f64 = weights.values().sum::<f64>() * grids.cell_area();
    if total <= 0.0 {
        return BTreeMap::new();
    }
    let kappa = cfg.points_per_frame / total;
    weights.values_mut().for_each(|w| *w *= kappa);
    weights
}

fn blocked(
    vehicle: &VehicleState,
    target: GridId,
    grids: &GridWorld,
    occupied: &BTreeMap<GridId, Vec<VehicleId>>,
    own_grid: Option<GridId>,
) -> bool {
    let from = vehicle.position;
    let to = grids.center(target);
    let len = from.dist(to);
    if len == 0.0 {
        return false;
    }
    let steps = (len / (grids.grid_size() / 4.0)).ceil() as u32;
    for k in 1..steps {
        let t = k as f64 / steps as f64;
        let p = from + (to - from) * t;
        let Some(g) = grids.grid_at(p) else { continue };
        if g == target || Some(g) == own_grid {
            continue;
        }
        if let Some(ids) = occupied.get(&g) {
            if ids.iter().any(|&id| id != vehicle.id) {
                return true;
            }
        }
    }
    false
}

const LANE_HALF_GAP: f64 = 1.75;

struct Lane {
    horizontal: bool,
    dir: f64,
    cross: f64,
}

/// Two orthogonal roads through the scene center, one lane per direction.
/// The lane is a pure function of the vehicle id so respawns after leaving
/// the scene stay on the vehicle's original road.
fn lane_for(id: VehicleId, cfg: &ScenarioConfig) -> Lane {
    let mid = cfg.scene_extent / 2.0;
    match id.0 % 4 {
        0 => Lane { horizontal: true, dir: 1.0, cross: mid - LANE_HALF_GAP },
        1 => Lane { horizontal: true, dir: -1.0, cross: mid + LANE_HALF_GAP },
        2 => Lane { horizontal: false, dir: 1.0, cross: mid + LANE_HALF_GAP },
        _ => Lane { horizontal: false, dir: -1.0, cross: mid - LANE_HALF_GAP },
    }
}

fn draw_speed(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> f64 {
    cfg.speed_min + rng.random::<f64>() * (cfg.speed_max - cfg.speed_min)
}

/// Initial fleet: vehicles round-robin across the four lanes, uniformly placed
/// along their road, speeds uniform in the configured range. Ids `0..n_cavs`
/// are the connected vehicles.
pub fn spawn_fleet(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<VehicleState> {
    (0..cfg.n_vehicles as u32)
        .map(|raw| {
            let id = VehicleId(raw);
            let lane = lane_for(id, cfg);
            let along = rng.random::<f64>() * cfg.scene_extent;
            let speed = draw_speed(cfg, rng);
            let (position, velocity) = if lane.horizontal {
                (Vec2::new(along, lane.cross), Vec2::new(lane.dir * speed, 0.0))
            } else {
                (Vec2::new(lane.cross, along), Vec2::new(0.0, lane.dir * speed))
            };
            let mut v = VehicleState::new(raw, position, velocity, (raw as usize) < cfg.n_cavs);
            v.tx_power_dbm = DEFAULT_TX_POWER_DBM;
            v
        })
        .collect()
}

/// Advances every vehicle by `v * dt`; a vehicle crossing the downstream scene
/// boundary re-enters at the upstream end of its lane with a freshly drawn
/// speed.
pub fn step_mobility(
    vehicles: &mut [VehicleState],
    dt: f64,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) {
    debug_assert!(dt > 0.0);
    for v in vehicles.iter_mut() {
        v.position += v.velocity * dt;
        let lane = lane_for(v.id, cfg);
        let along = if lane.horizontal { v.position.x } else { v.position.y };
        let wrapped = if lane.dir > 0.0 && along > cfg.scene_extent {
            Some(0.0)
        } else if lane.dir < 0.0 && along < 0.0 {
            Some(cfg.scene_extent)
        } else {
            None
        };
        if let Some(start) = wrapped {
            let speed = draw_speed(cfg, rng);
            if lane.horizontal {
                v.position = Vec2::new(start, lane.cross);
                v.velocity = Vec2::new(lane.dir * speed, 0.0);
            } else {
                v.position = Vec2::new(lane.cross, start);
                v.velocity = Vec2::new(0.0, lane.dir * speed);
            }
        }
    }
}

/// Immutable per-cycle snapshot: fleet, sensed densities, and the cached
/// sensing/requirement regions of every connected vehicle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldState {
    pub cycle: u64,
    pub time: f64,
    pub vehicles: Vec<VehicleState>,
    pub densities: DensityField,
    pub sens_regions: BTreeMap<VehicleId, BTreeSet<GridId>>,
    pub req_regions: BTreeMap<VehicleId, BTreeSet<GridId>>,
}

impl WorldState {
    pub fn capture(
        cycle: u64,
        time: f64,
        vehicles: &[VehicleState],
        grids: &GridWorld,
        cfg: &ScenarioConfig,
    ) -> Self {
        let densities = DensityField::generate(vehicles, grids, cfg);
        let mut sens_regions = BTreeMap::new();
        let mut req_regions = BTreeMap::new();
        for v in vehicles.iter().filter(|v| v.is_cav) {
            sens_regions.insert(v.id, sensing_region(v, grids, cfg.r_sens));
            req_regions.insert(v.id, sensing_region(v, grids, cfg.r_req));
        }
        WorldState {
            cycle,
            time,
            vehicles: vehicles.to_vec(),
            densities,
            sens_regions,
            req_regions,
        }
    }

    pub fn vehicle(&self, id: VehicleId) -> &VehicleState {
        self.vehicles
            .iter()
            .find(|v| v.id == id)
            .unwrap_or_else(|| panic!("unknown vehicle {id}"))
    }

    pub fn cavs(&self) -> impl Iterator<Item = &VehicleState> {
        self.vehicles.iter().filter(|v| v.is_cav)
    }

    pub fn cav_ids(&self) -> Vec<VehicleId> {
        self.cavs().map(|v| v.id).collect()
    }
}
