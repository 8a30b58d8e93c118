//! Coalition formation: the coalition value function, stability-discounted
//! marginal contributions, leader election, and hedonic-shift dynamics.
//!
//! Vehicles start as singletons and repeatedly migrate to the neighboring
//! coalition offering the largest strictly positive marginal contribution,
//! where the contribution is the immediate fusion gain discounted by a
//! stability coefficient that predicts whether the vehicle's sensing will
//! still overlap the coalition's requirement region after `t_stab` seconds.

use crate::geom::Vec2;
use crate::perception::UtilityCurve;
use crate::world::{
    negative, nonpositive, DensityField, GridId, GridWorld, ScenarioConfig, VehicleId,
    VehicleState, WorldState,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoalitionConfig {
    /// Hard cap on coalition size.
    pub n_max: usize,
    /// Stability horizon in seconds: membership should stay useful this long.
    pub t_stab: f64,
    /// Leader election weight between geometric centrality and motion
    /// consistency.
    pub alpha: f64,
    /// A coalition is joinable only if its centroid is strictly closer than
    /// this, and membership drift beyond it triggers re-formation.
    pub neighbor_radius: f64,
    /// Formation sweep cap; hitting it returns the current partition
    /// unconverged.
    pub max_rounds: u32,
    /// Speed deviation from the coalition mean that triggers re-formation,
    /// m/s.
    pub speed_dev_threshold: f64,
}

impl Default for CoalitionConfig {
    fn default() -> Self {
        CoalitionConfig {
            n_max: 4,
            t_stab: 0.5,
            alpha: 0.7,
            neighbor_radius: 100.0,
            max_rounds: 50,
            speed_dev_threshold: 5.0,
        }
    }
}

impl CoalitionConfig {
    pub fn validate(&self) -> Result<(), CoalitionConfigError> {
        if self.n_max < 1 {
            return Err(CoalitionConfigError::BadNMax(self.n_max));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoalitionConfigError::BadAlpha(self.alpha));
        }
        if negative(self.t_stab) || nonpositive(self.neighbor_radius) {
            return Err(CoalitionConfigError::BadHorizon {
                t_stab: self.t_stab,
                neighbor_radius: self.neighbor_radius,
            });
        }
        if self.max_rounds < 1 {
            return Err(CoalitionConfigError::BadMaxRounds(self.max_rounds));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CoalitionConfigError {
    #[error("n_max must be at least 1, got {0}")]
    BadNMax(usize),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("need t_stab >= 0 and neighbor_radius > 0, got {t_stab} / {neighbor_radius}")]
    BadHorizon { t_stab: f64, neighbor_radius: f64 },
    #[error("max_rounds must be at least 1, got {0}")]
    BadMaxRounds(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coalition {
    pub members: BTreeSet<VehicleId>,
    pub leader: VehicleId,
}

/// Disjoint coalitions covering all connected vehicles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub coalitions: Vec<Coalition>,
    pub formed_at_cycle: u64,
    /// Sweeps the formation ran (0 for hand-built partitions).
    pub rounds: u32,
    /// False when formation hit its sweep cap before a clean sweep.
    pub converged: bool,
}

impl Partition {
    /// Coalitions are kept sorted by their smallest member id.
    pub fn new(mut coalitions: Vec<Coalition>, formed_at_cycle: u64) -> Self {
        coalitions.sort_by_key(|c| c.members.first().copied());
        Partition {
            coalitions,
            formed_at_cycle,
            rounds: 0,
            converged: true,
        }
    }

    pub fn singletons(ids: impl IntoIterator<Item = VehicleId>, formed_at_cycle: u64) -> Self {
        Partition::new(
            ids.into_iter()
                .map(|id| Coalition {
                    members: BTreeSet::from([id]),
                    leader: id,
                })
                .collect(),
            formed_at_cycle,
        )
    }

    pub fn coalition_of(&self, id: VehicleId) -> Option<&Coalition> {
        self.coalitions.iter().find(|c| c.members.contains(&id))
    }

    pub fn led_by(&self, id: VehicleId) -> Option<&Coalition> {
        self.coalitions.iter().find(|c| c.leader == id)
    }

    pub fn leaders(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.coalitions.iter().map(|c| c.leader)
    }

    pub fn all_members(&self) -> BTreeSet<VehicleId> {
        self.coalitions
            .iter()
            .flat_map(|c| c.members.iter().copied())
            .collect()
    }

    pub fn validate(
        &self,
        cavs: &BTreeSet<VehicleId>,
        n_max: usize,
    ) -> Result<(), PartitionError> {
        let mut seen = BTreeSet::new();
        for c in &self.coalitions {
            if c.members.is_empty() {
                return Err(PartitionError::EmptyCoalition);
            }
            if c.members.len() > n_max {
                return Err(PartitionError::TooLarge {
                    size: c.members.len(),
                    n_max,
                });
            }
            if !c.members.contains(&c.leader) {
                return Err(PartitionError::LeaderNotMember { leader: c.leader });
            }
            for &m in &c.members {
                if !seen.insert(m) {
                    return Err(PartitionError::Overlap(m));
                }
                if !cavs.contains(&m) {
                    return Err(PartitionError::Unknown(m));
                }
            }
        }
        if let Some(&missing) = cavs.difference(&seen).next() {
            return Err(PartitionError::Missing(missing));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("vehicle {0} appears in more than one coalition")]
    Overlap(VehicleId),
    #[error("vehicle {0} is in no coalition")]
    Missing(VehicleId),
    #[error("coalition member {0} is not a known connected vehicle")]
    Unknown(VehicleId),
    #[error("leader {leader} is not a member of its coalition")]
    LeaderNotMember { leader: VehicleId },
    #[error("coalition of size {size} exceeds n_max {n_max}")]
    TooLarge { size: usize, n_max: usize },
    #[error("empty coalition")]
    EmptyCoalition,
}

/// Everything the formation dynamics read.
pub struct CoalitionContext<'a> {
    pub world: &'a WorldState,
    pub grids: &'a GridWorld,
    pub curve: &'a UtilityCurve,
    pub scenario: &'a ScenarioConfig,
    pub cfg: &'a CoalitionConfig,
}

/// Net fusion gain of pooling the members' sensing: per grid, utility of the
/// summed density minus the best single member. Never negative, since the sum
/// dominates the max and the curve is monotone.
pub fn coalition_value(
    members: &BTreeSet<VehicleId>,
    densities: &DensityField,
    curve: &UtilityCurve,
) -> f64 {
    let mut acc: BTreeMap<GridId, (f64, f64)> = BTreeMap::new();
    for &m in members {
        if let Some(map) = densities.grids_of(m) {
            for (&g, &rho) in map {
                let e = acc.entry(g).or_insert((0.0, 0.0));
                e.0 += rho;
                if rho > e.1 {
                    e.1 = rho;
                }
            }
        }
    }
    acc.values()
        .map(|&(sum, max)| curve.value(sum) - curve.value(max))
        .sum()
}

/// Straight-line extrapolation by the vehicle's velocity deviation from the
/// coalition mean: co-moving members are predicted to stay put relative to
/// the coalition.
pub fn predicted_position(v: &VehicleState, coalition_mean_velocity: Vec2, t_stab: f64) -> Vec2 {
    v.position + (v.velocity - coalition_mean_velocity) * t_stab
}

/// Fraction of the vehicle's predicted sensing region that still overlaps the
/// coalition requirement region after the stability horizon. Zero when the
/// predicted region is empty (vehicle extrapolated off the scene).
pub fn stability_coefficient(
    v: &VehicleState,
    coalition_mean_velocity: Vec2,
    req_union: &BTreeSet<GridId>,
    grids: &GridWorld,
    r_sens: f64,
    t_stab: f64,
) -> f64 {
    let predicted = grids.disk(predicted_position(v, coalition_mean_velocity, t_stab), r_sens);
    if predicted.is_empty() {
        return 0.0;
    }
    predicted.intersection(req_union).count() as f64 / predicted.len() as f64
}

/// Stability-discounted utility a vehicle would add by joining `partners`
/// (its prospective coalition, not containing it): the summed f-gain of
/// adding its density on top of the partners' pooled density, over the
/// partners' requirement region, scaled by the stability coefficient.
/// Empty partner set contributes nothing.
pub fn marginal_contribution(
    ctx: &CoalitionContext,
    i: VehicleId,
    partners: &BTreeSet<VehicleId>,
) -> f64 {
    if partners.is_empty() {
        return 0.0;
    }
    debug_assert!(!partners.contains(&i));
    let v = ctx.world.vehicle(i);

    let mut vel_sum = v.velocity;
    for &m in partners {
        vel_sum += ctx.world.vehicle(m).velocity;
    }
    let mean_vel = vel_sum / (partners.len() as f64 + 1.0);

    let mut req_union: BTreeSet<GridId> = BTreeSet::new();
    for &m in partners {
        req_union.extend(ctx.world.req_regions[&m].iter().copied());
    }

    let beta = stability_coefficient(
        v,
        mean_vel,
        &req_union,
        ctx.grids,
        ctx.scenario.r_sens,
        ctx.cfg.t_stab,
    );
    if beta == 0.0 {
        return 0.0;
    }

    let mut pooled: BTreeMap<GridId, f64> = BTreeMap::new();
    for &m in partners {
        if let Some(map) = ctx.world.densities.grids_of(m) {
            for (&g, &rho) in map {
                *pooled.entry(g).or_insert(0.0) += rho;
            }
        }
    }
    let mut gain = 0.0;
    if let Some(own) = ctx.world.densities.grids_of(i) {
        for (&g, &rho) in own {
            if rho > 0.0 && req_union.contains(&g) {
                let base = pooled.get(&g).copied().unwrap_or(0.0);
                gain += ctx.curve.value(base + rho) - ctx.curve.value(base);
            }
        }
    }
    beta * gain
}

/// Member minimizing `alpha * |x - centroid| + (1 - alpha) * |v - mean v|`;
/// ties go to the lowest id.
pub fn elect_leader(members: &BTreeSet<VehicleId>, world: &WorldState, alpha: f64) -> VehicleId {
    assert!(!members.is_empty());
    let n = members.len() as f64;
    let mut pos_sum = Vec2::ZERO;
    let mut vel_sum = Vec2::ZERO;
    for &m in members {
        let v = world.vehicle(m);
        pos_sum += v.position;
        vel_sum += v.velocity;
    }
    let centroid = pos_sum / n;
    let mean_vel = vel_sum / n;

    let mut best = None;
    for &m in members {
        let v = world.vehicle(m);
        let score =
            alpha * v.position.dist(centroid) + (1.0 - alpha) * (v.velocity - mean_vel).norm();
        match best {
            None => best = Some((m, score)),
            Some((_, s)) if score < s => best = Some((m, score)),
            _ => {}
        }
    }
    best.unwrap().0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormationStats {
    pub moves: u32,
    /// Executed migrations whose global value sum went down. The migration
    /// rule maximizes the mover's own discounted gain, which does not account
    /// for the origin coalition's loss, so this can be nonzero; it is
    /// reported, not asserted away.
    pub phi_decreases: u32,
}

fn centroid_of(members: &BTreeSet<VehicleId>, world: &WorldState) -> Vec2 {
    let mut sum = Vec2::ZERO;
    for &m in members {
        sum += world.vehicle(m).position;
    }
    sum / members.len() as f64
}

fn blocks_cover_exactly(blocks: &[BTreeSet<VehicleId>], ids: &[VehicleId], n_max: usize) -> bool {
    let mut seen = BTreeSet::new();
    for b in blocks {
        if b.is_empty() || b.len() > n_max {
            return false;
        }
        for &m in b {
            if !seen.insert(m) {
                return false;
            }
        }
    }
    seen.len() == ids.len() && ids.iter().all(|i| seen.contains(i))
}

/// Hedonic-shift formation. Sweeps vehicles in ascending id; each compares
/// its marginal contribution to its current coalition against every
/// neighboring coalition with spare capacity (centroid strictly within
/// `neighbor_radius`) and migrates to the best strictly positive improvement.
/// Stops at the first clean sweep or at `max_rounds`; then elects leaders.
pub fn form_clusters(ctx: &CoalitionContext, cycle: u64) -> (Partition, FormationStats) {
    let ids = ctx.world.cav_ids();
    let mut blocks: Vec<BTreeSet<VehicleId>> =
        ids.iter().map(|&i| BTreeSet::from([i])).collect();
    let mut stats = FormationStats::default();
    let mut converged = false;
    let mut rounds = 0;

    while rounds < ctx.cfg.max_rounds {
        rounds += 1;
        let mut moved = false;
        for &i in &ids {
            let cur_idx = blocks.iter().position(|b| b.contains(&i)).unwrap();
            let mut partners_cur = blocks[cur_idx].clone();
            partners_cur.remove(&i);
            let dv_cur = marginal_contribution(ctx, i, &partners_cur);

            let pos_i = ctx.world.vehicle(i).position;
            let mut candidates: Vec<usize> = (0..blocks.len())
                .filter(|&b| {
                    b != cur_idx
                        && blocks[b].len() < ctx.cfg.n_max
                        && centroid_of(&blocks[b], ctx.world).dist(pos_i)
                            < ctx.cfg.neighbor_radius
                })
                .collect();
            candidates.sort_by_key(|&b| blocks[b].first().copied());

            let mut best: Option<(usize, f64)> = None;
            for b in candidates {
                let dv = marginal_contribution(ctx, i, &blocks[b]);
                if best.is_none_or(|(_, cur)| dv > cur) {
                    best = Some((b, dv));
                }
            }
            let Some((dest, dv)) = best else { continue };
            if dv <= dv_cur || dv <= 0.0 {
                continue;
            }

            let v_dest_before = coalition_value(&blocks[dest], &ctx.world.densities, ctx.curve);
            let v_orig_before = coalition_value(&blocks[cur_idx], &ctx.world.densities, ctx.curve);
            blocks[dest].insert(i);
            blocks[cur_idx].remove(&i);
            let v_dest_after = coalition_value(&blocks[dest], &ctx.world.densities, ctx.curve);
            let v_orig_after = if blocks[cur_idx].is_empty() {
                0.0
            } else {
                coalition_value(&blocks[cur_idx], &ctx.world.densities, ctx.curve)
            };
            if (v_dest_after - v_dest_before) + (v_orig_after - v_orig_before) < -1e-12 {
                stats.phi_decreases += 1;
            }
            stats.moves += 1;
            moved = true;
            if blocks[cur_idx].is_empty() {
                blocks.remove(cur_idx);
            }
        }
        debug_assert!(blocks_cover_exactly(&blocks, &ids, ctx.cfg.n_max));
        if !moved {
            converged = true;
            break;
        }
    }

    let coalitions = blocks
        .into_iter()
        .map(|members| Coalition {
            leader: elect_leader(&members, ctx.world, ctx.cfg.alpha),
            members,
        })
        .collect();
    let mut partition = Partition::new(coalitions, cycle);
    partition.rounds = rounds;
    partition.converged = converged;
    (partition, stats)
}

/// No vehicle has an admissible migration (neighboring coalition, spare
/// capacity) with a strictly positive contribution strictly better than its
/// current one. Converged formations satisfy this by construction; the check
/// re-derives it independently.
pub fn is_shift_stable(ctx: &CoalitionContext, partition: &Partition) -> bool {
    for (ci, c) in partition.coalitions.iter().enumerate() {
        for &i in &c.members {
            let mut partners = c.members.clone();
            partners.remove(&i);
            let dv_cur = marginal_contribution(ctx, i, &partners);
            let pos_i = ctx.world.vehicle(i).position;
            for (oi, other) in partition.coalitions.iter().enumerate() {
                if oi == ci
                    || other.members.len() >= ctx.cfg.n_max
                    || centroid_of(&other.members, ctx.world).dist(pos_i)
                        >= ctx.cfg.neighbor_radius
                {
                    continue;
                }
                let dv = marginal_contribution(ctx, i, &other.members);
                if dv > dv_cur && dv > 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

/// Re-formation trigger: membership changed, any member drifted beyond the
/// neighbor radius from its coalition centroid, any member's speed deviates
/// from the coalition mean by more than the threshold, or the partition aged
/// past the stability horizon.
pub fn should_reform(
    prev: &Partition,
    world: &WorldState,
    scenario: &ScenarioConfig,
    cfg: &CoalitionConfig,
) -> bool {
    let current: BTreeSet<VehicleId> = world.cav_ids().into_iter().collect();
    if prev.all_members() != current {
        return true;
    }
    let age = (world.cycle.saturating_sub(prev.formed_at_cycle)) as f64 * scenario.cycle_duration;
    if age > cfg.t_stab {
        return true;
    }
    for c in &prev.coalitions {
        let n = c.members.len() as f64;
        let mut pos_sum = Vec2::ZERO;
        let mut vel_sum = Vec2::ZERO;
        for &m in &c.members {
            let v = world.vehicle(m);
            pos_sum += v.position;
            vel_sum += v.velocity;
        }
        let centroid = pos_sum / n;
        let mean_vel = vel_sum / n;
        for &m in &c.members {
            let v = world.vehicle(m);
            if v.position.dist(centroid) > cfg.neighbor_radius {
                return true;
            }
            if (v.velocity - mean_vel).norm() > cfg.speed_dev_threshold {
                return true;
            }
        }
    }
    false
}
