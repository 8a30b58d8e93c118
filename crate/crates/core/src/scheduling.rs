//! Upload scheduling: the leader-level potential game with its
//! perception-priority response rule, an exhaustive best-response oracle for
//! tiny instances, and the no-cooperation / random-selection / greedy
//! baselines.
//!
//! Leaders choose which members upload which grids on which subchannels. A
//! leader's payoff is the summed best-detection utility over its coalition's
//! requirement region; the sum of best-detection utilities over all grids is
//! an exact potential for the game because a leader's strategy only alters
//! its own fused density on grids inside its own requirement region.

use crate::channel::{
    check_deadline, leader_delay, link_sinr_db, validate_schedule, ChannelConfig,
    ChannelRealization, Schedule,
};
use crate::coalition::{Coalition, Partition};
use crate::perception::UtilityCurve;
use crate::world::{GridId, GridWorld, ScenarioConfig, VehicleId, WorldState};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

/// Updates must beat the incumbent by this much to be applied; guards the
/// round-robin against float-noise livelock.
const ACCEPT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerKind {
    /// Coalition formation plus the potential-game scheduler.
    PotentialGame,
    /// No communication at all; every vehicle relies on its own sensing.
    NoCooperation,
    /// Random conflict-free link selection with full sensing uploads.
    RandomSelection,
    /// Greedy max-marginal-utility link selection.
    MaxUtilityGreedy,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::PotentialGame,
        SchedulerKind::NoCooperation,
        SchedulerKind::RandomSelection,
        SchedulerKind::MaxUtilityGreedy,
    ];

    pub fn flag(self) -> &'static str {
        match self {
            SchedulerKind::PotentialGame => "ours",
            SchedulerKind::NoCooperation => "nc",
            SchedulerKind::RandomSelection => "rs",
            SchedulerKind::MaxUtilityGreedy => "mug",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for SchedulerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ours" => Ok(SchedulerKind::PotentialGame),
            "nc" => Ok(SchedulerKind::NoCooperation),
            "rs" => Ok(SchedulerKind::RandomSelection),
            "mug" => Ok(SchedulerKind::MaxUtilityGreedy),
            other => Err(format!(
                "unknown scheduler {other:?}; expected ours, nc, rs, or mug"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Leaders update one at a time against the live profile; the potential
    /// is non-decreasing at every accepted update.
    Sequential,
    /// All leaders respond to the frozen previous round simultaneously; may
    /// oscillate, in which case the iteration cap trips the convergence flag.
    Synchronous,
}

impl FromStr for UpdateMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(UpdateMode::Sequential),
            "synchronous" => Ok(UpdateMode::Synchronous),
            other => Err(format!(
                "unknown update mode {other:?}; expected sequential or synchronous"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub max_game_iterations: u32,
    pub update_mode: UpdateMode,
    /// Acceptance floor for baseline links, dB.
    pub sinr_min_db: f64,
    /// When false, the response rule ignores saturation and schedules whole
    /// requirement regions; exists to measure how much the filter saves.
    pub saturation_filter: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            max_game_iterations: 10,
            update_mode: UpdateMode::Sequential,
            sinr_min_db: 0.0,
            saturation_filter: true,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_game_iterations < 1 {
            return Err(format!(
                "max_game_iterations must be at least 1, got {}",
                self.max_game_iterations
            ));
        }
        Ok(())
    }
}

/// What one member uploads for its leader: a single subchannel, a grid set,
/// and the perception score that earned the slot (used again when deadline
/// pressure forces drops).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberUpload {
    pub subchannel: u16,
    pub grids: BTreeSet<GridId>,
    pub score: f64,
}

/// One leader's strategy: per-member uploads. One subchannel per member.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeaderStrategy {
    pub uploads: BTreeMap<VehicleId, MemberUpload>,
}

pub type Profile = BTreeMap<VehicleId, LeaderStrategy>;

/// Contiguous subchannel range owned by one leader.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubchannelBlock {
    pub start: u16,
    pub len: u16,
}

/// Game trajectory bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameState {
    pub iterations: u32,
    pub converged: bool,
    /// Potential after the initial (empty) profile and after every update
    /// slot, in execution order.
    pub potential_trace: Vec<f64>,
}

/// Result of running any scheduler for one cycle.
#[derive(Clone, Debug)]
pub struct SchedulerOutput {
    pub schedule: Schedule,
    /// The partition utilities are evaluated against: the input partition for
    /// the game scheduler, the link-implied partition for baselines.
    pub partition: Partition,
    pub game: GameState,
    pub starved_members: u32,
    pub deadline_drops: u32,
}

/// Immutable per-cycle inputs shared by every scheduler, with the raw density
/// peaks and requirement-coverage counts precomputed once.
pub struct SchedulingContext<'a> {
    pub world: &'a WorldState,
    pub grids: &'a GridWorld,
    pub curve: &'a UtilityCurve,
    pub scenario: &'a ScenarioConfig,
    pub channel: &'a ChannelConfig,
    pub cfg: &'a SchedulerConfig,
    pub realization: &'a ChannelRealization,
    /// Per grid, the best raw sensed density over all connected vehicles.
    raw_peaks: BTreeMap<GridId, f64>,
    /// Per grid, how many connected vehicles require it.
    req_coverage: BTreeMap<GridId, u32>,
}

impl<'a> SchedulingContext<'a> {
    pub fn new(
        world: &'a WorldState,
        grids: &'a GridWorld,
        curve: &'a UtilityCurve,
        scenario: &'a ScenarioConfig,
        channel: &'a ChannelConfig,
        cfg: &'a SchedulerConfig,
        realization: &'a ChannelRealization,
    ) -> Self {
        let mut raw_peaks: BTreeMap<GridId, f64> = BTreeMap::new();
        for map in world.densities.by_vehicle.values() {
            for (&g, &rho) in map {
                let e = raw_peaks.entry(g).or_insert(0.0);
                if rho > *e {
                    *e = rho;
                }
            }
        }
        let mut req_coverage: BTreeMap<GridId, u32> = BTreeMap::new();
        for req in world.req_regions.values() {
            for &g in req {
                *req_coverage.entry(g).or_insert(0) += 1;
            }
        }
        SchedulingContext {
            world,
            grids,
            curve,
            scenario,
            channel,
            cfg,
            realization,
            raw_peaks,
            req_coverage,
        }
    }

    pub fn raw_peak(&self, g: GridId) -> f64 {
        self.raw_peaks.get(&g).copied().unwrap_or(0.0)
    }

    fn distance(&self, a: VehicleId, b: VehicleId) -> f64 {
        self.world
            .vehicle(a)
            .position
            .dist(self.world.vehicle(b).position)
    }
}

/// Requirement-region union of a coalition, from the per-vehicle cache.
pub fn coalition_req_union(world: &WorldState, c: &Coalition) -> BTreeSet<GridId> {
    let mut out = BTreeSet::new();
    for m in &c.members {
        out.extend(world.req_regions[m].iter().copied());
    }
    out
}

/// Equal split of the subchannels over leaders in ascending id order: the
/// first `K mod |H|` leaders take one extra, and each leader owns a disjoint
/// contiguous block, so the game's own uploads never interfere.
pub fn assign_budgets(
    leaders_ascending: &[VehicleId],
    n_subchannels: u16,
) -> BTreeMap<VehicleId, SubchannelBlock> {
    let mut out = BTreeMap::new();
    if leaders_ascending.is_empty() {
        return out;
    }
    let h = leaders_ascending.len() as u16;
    let base = n_subchannels / h;
    let extra = n_subchannels % h;
    let mut start = 0u16;
    for (rank, &leader) in leaders_ascending.iter().enumerate() {
        let len = base + if (rank as u16) < extra { 1 } else { 0 };
        out.insert(leader, SubchannelBlock { start, len });
        start += len;
    }
    debug_assert!(start <= n_subchannels);
    out
}

/// Flattens a strategy profile into the wire-level schedule.
pub fn schedule_from_profile(profile: &Profile) -> Schedule {
    let mut schedule = Schedule::default();
    for (&leader, strat) in profile {
        for (&member, up) in &strat.uploads {
            for &g in &up.grids {
                schedule.insert(member, leader, g, up.subchannel);
            }
        }
    }
    schedule
}

/// Effective per-grid density peaks under a profile: the best raw density
/// anywhere, improved by each leader's fused (raw + uploaded) density.
/// `exclude` drops one leader's strategy, leaving that leader at raw density.
fn effective_peaks(
    ctx: &SchedulingContext,
    profile: &Profile,
    exclude: Option<VehicleId>,
) -> BTreeMap<GridId, f64> {
    let mut peaks = ctx.raw_peaks.clone();
    for (&leader, strat) in profile {
        if Some(leader) == exclude {
            continue;
        }
        let mut added: BTreeMap<GridId, f64> = BTreeMap::new();
        for (&member, up) in &strat.uploads {
            for &g in &up.grids {
                let rho = ctx.world.densities.rho(member, g);
                if rho > 0.0 {
                    *added.entry(g).or_insert(0.0) += rho;
                }
            }
        }
        for (g, extra) in added {
            let fused = ctx.world.densities.rho(leader, g) + extra;
            let e = peaks.entry(g).or_insert(0.0);
            if fused > *e {
                *e = fused;
            }
        }
    }
    peaks
}

/// Leader payoff: summed best-detection utility over its coalition's
/// requirement region, under the joint profile.
pub fn leader_utility(
    ctx: &SchedulingContext,
    partition: &Partition,
    h: VehicleId,
    profile: &Profile,
) -> f64 {
    let c = partition
        .led_by(h)
        .unwrap_or_else(|| panic!("{h} leads no coalition"));
    let peaks = effective_peaks(ctx, profile, None);
    coalition_req_union(ctx.world, c)
        .iter()
        .map(|g| ctx.curve.value(peaks.get(g).copied().unwrap_or(0.0)))
        .sum()
}

/// Exact potential: summed best-detection utility over every grid. A
/// unilateral strategy change moves this exactly as much as it moves the
/// deviator's own payoff.
pub fn potential(ctx: &SchedulingContext, profile: &Profile) -> f64 {
    effective_peaks(ctx, profile, None)
        .values()
        .map(|&rho| ctx.curve.value(rho))
        .sum()
}

/// Perception-priority response of leader `h` given everyone else's strategy
/// (h's own incumbent strategy is ignored: its fused density reverts to raw
/// while choosing anew).
///
/// Builds the unsaturated candidate grids of the coalition's requirement
/// region, scores each reachable member by the fusion gain its sensing would
/// add on top of the leader's raw density, then walks members best-first,
/// spending one owned subchannel per member on all of that member's candidate
/// grids until the block runs out. Returns the strategy and how many
/// positive-score members the budget starved.
pub fn pps_best_response(
    ctx: &SchedulingContext,
    partition: &Partition,
    h: VehicleId,
    profile: &Profile,
    block: SubchannelBlock,
) -> (LeaderStrategy, u32) {
    let c = partition
        .led_by(h)
        .unwrap_or_else(|| panic!("{h} leads no coalition"));
    let req = coalition_req_union(ctx.world, c);
    let peaks = effective_peaks(ctx, profile, Some(h));

    let candidates: BTreeSet<GridId> = if ctx.cfg.saturation_filter {
        req.iter()
            .copied()
            .filter(|&g| peaks.get(&g).copied().unwrap_or(0.0) < ctx.curve.rho_th)
            .collect()
    } else {
        req
    };
    if candidates.is_empty() {
        return (LeaderStrategy::default(), 0);
    }

    // Score members once, against the leader's raw density.
    let mut scored: Vec<(VehicleId, f64, BTreeSet<GridId>)> = Vec::new();
    for &m in &c.members {
        if m == h || ctx.distance(m, h) > ctx.scenario.r_comm {
            continue;
        }
        let Some(density) = ctx.world.densities.grids_of(m) else {
            continue;
        };
        let mut score = 0.0;
        let mut grids = BTreeSet::new();
        for (&g, &rho) in density {
            if rho > 0.0 && candidates.contains(&g) {
                let base = ctx.world.densities.rho(h, g);
                score += ctx.curve.value(base + rho) - ctx.curve.value(base);
                grids.insert(g);
            }
        }
        if score > 0.0 {
            scored.push((m, score, grids));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut strategy = LeaderStrategy::default();
    let mut starved = 0;
    for (rank, (m, score, grids)) in scored.into_iter().enumerate() {
        if rank as u16 >= block.len {
            starved += 1;
            continue;
        }
        strategy.uploads.insert(
            m,
            MemberUpload {
                subchannel: block.start + rank as u16,
                grids,
                score,
            },
        );
    }
    (strategy, starved)
}

/// Exhaustive best response for tiny instances: enumerates every member
/// subset within the budget (full candidate-grid uploads; partial uploads
/// are dominated because the payoff is monotone in uploaded density) and
/// returns the strict argmax in enumeration order. Test oracle; exponential.
pub fn exact_best_response(
    ctx: &SchedulingContext,
    partition: &Partition,
    h: VehicleId,
    profile: &Profile,
    block: SubchannelBlock,
) -> LeaderStrategy {
    let c = partition
        .led_by(h)
        .unwrap_or_else(|| panic!("{h} leads no coalition"));
    let req = coalition_req_union(ctx.world, c);

    let eligible: Vec<(VehicleId, BTreeSet<GridId>)> = c
        .members
        .iter()
        .filter(|&&m| m != h && ctx.distance(m, h) <= ctx.scenario.r_comm)
        .filter_map(|&m| {
            let grids: BTreeSet<GridId> = ctx
                .world
                .densities
                .grids_of(m)?
                .iter()
                .filter(|&(g, &rho)| rho > 0.0 && req.contains(g))
                .map(|(&g, _)| g)
                .collect();
            (!grids.is_empty()).then_some((m, grids))
        })
        .collect();

    let mut best: Option<(LeaderStrategy, f64)> = None;
    for mask in 0u32..(1 << eligible.len()) {
        if mask.count_ones() > block.len as u32 {
            continue;
        }
        let mut strategy = LeaderStrategy::default();
        let mut slot = 0u16;
        for (bit, (m, grids)) in eligible.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                strategy.uploads.insert(
                    *m,
                    MemberUpload {
                        subchannel: block.start + slot,
                        grids: grids.clone(),
                        score: 0.0,
                    },
                );
                slot += 1;
            }
        }
        let mut tentative = profile.clone();
        tentative.insert(h, strategy.clone());
        let u = leader_utility(ctx, partition, h, &tentative);
        if best.as_ref().is_none_or(|(_, b)| u > *b) {
            best = Some((strategy, u));
        }
    }
    best.map(|(s, _)| s).unwrap_or_default()
}

fn respond_oracle(
    ctx: &SchedulingContext,
    partition: &Partition,
    h: VehicleId,
    profile: &Profile,
    block: SubchannelBlock,
) -> (LeaderStrategy, u32) {
    (exact_best_response(ctx, partition, h, profile, block), 0)
}

/// Round-robin better-response dynamics over the leaders. A response replaces
/// the incumbent strategy only if it strictly improves the leader's payoff,
/// which (by the exact-potential identity) drives the potential monotonically
/// upward in sequential mode until a full round changes nothing.
fn run_dynamics(
    ctx: &SchedulingContext,
    partition: &Partition,
    respond: fn(
        &SchedulingContext,
        &Partition,
        VehicleId,
        &Profile,
        SubchannelBlock,
    ) -> (LeaderStrategy, u32),
) -> (Profile, GameState, BTreeMap<VehicleId, u32>) {
    let mut leaders: Vec<VehicleId> = partition.leaders().collect();
    leaders.sort();
    let blocks = assign_budgets(&leaders, ctx.channel.n_subchannels);

    let mut profile: Profile = leaders
        .iter()
        .map(|&h| (h, LeaderStrategy::default()))
        .collect();
    let mut trace = vec![potential(ctx, &profile)];
    let mut starved: BTreeMap<VehicleId, u32> = BTreeMap::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < ctx.cfg.max_game_iterations {
        iterations += 1;
        let mut changed = false;
        match ctx.cfg.update_mode {
            UpdateMode::Sequential => {
                for &h in &leaders {
                    let (candidate, hungry) = respond(ctx, partition, h, &profile, blocks[&h]);
                    starved.insert(h, hungry);
                    let u_old = leader_utility(ctx, partition, h, &profile);
                    let mut tentative = profile.clone();
                    tentative.insert(h, candidate);
                    let u_new = leader_utility(ctx, partition, h, &tentative);
                    if u_new > u_old + ACCEPT_EPS {
                        profile = tentative;
                        changed = true;
                    }
                    trace.push(potential(ctx, &profile));
                }
            }
            UpdateMode::Synchronous => {
                let frozen = profile.clone();
                for &h in &leaders {
                    let (candidate, hungry) = respond(ctx, partition, h, &frozen, blocks[&h]);
                    starved.insert(h, hungry);
                    let u_old = leader_utility(ctx, partition, h, &frozen);
                    let mut tentative = frozen.clone();
                    tentative.insert(h, candidate.clone());
                    let u_new = leader_utility(ctx, partition, h, &tentative);
                    if u_new > u_old + ACCEPT_EPS {
                        profile.insert(h, candidate);
                        changed = true;
                    }
                }
                trace.push(potential(ctx, &profile));
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }

    debug_assert!(
        validate_schedule(
            &schedule_from_profile(&profile),
            partition,
            ctx.channel.n_subchannels
        )
        .is_empty()
    );
    (
        profile,
        GameState {
            iterations,
            converged,
            potential_trace: trace,
        },
        starved,
    )
}

/// Greedy deadline repair: per leader (ascending id), drop the lowest-score
/// inbound member (ties to the lowest id) until the leader's fusion round
/// fits the cycle. Dropping only removes interference, so one ascending pass
/// settles every leader.
pub fn enforce_deadline_on_schedule(
    ctx: &SchedulingContext,
    schedule: &mut Schedule,
    scores: &BTreeMap<(VehicleId, VehicleId), f64>,
) -> u32 {
    let mut drops = 0;
    let leaders: BTreeSet<VehicleId> = schedule.entries().map(|u| u.to).collect();
    for &leader in &leaders {
        loop {
            let capacity = ctx.world.vehicle(leader).compute_capacity;
            let delay = leader_delay(
                leader,
                schedule,
                &ctx.world.densities,
                ctx.realization,
                ctx.channel,
                capacity,
            );
            if delay <= ctx.scenario.cycle_duration {
                break;
            }
            let victim = schedule
                .inbound_links(leader)
                .into_iter()
                .map(|(m, _)| m)
                .min_by(|a, b| {
                    let sa = scores.get(&(leader, *a)).copied().unwrap_or(0.0);
                    let sb = scores.get(&(leader, *b)).copied().unwrap_or(0.0);
                    sa.total_cmp(&sb).then(a.cmp(b))
                });
            let Some(victim) = victim else { break };
            let doomed: Vec<_> = schedule
                .entries()
                .filter(|u| u.to == leader && u.from == victim)
                .copied()
                .collect();
            for u in doomed {
                schedule.remove(&u);
            }
            drops += 1;
        }
    }
    drops
}

fn scores_of_profile(profile: &Profile) -> BTreeMap<(VehicleId, VehicleId), f64> {
    let mut scores = BTreeMap::new();
    for (&leader, strat) in profile {
        for (&member, up) in &strat.uploads {
            scores.insert((leader, member), up.score);
        }
    }
    scores
}

/// Full game run for one cycle: better-response dynamics with the
/// perception-priority rule, then deadline repair on the merged schedule.
pub fn run_pdpg(ctx: &SchedulingContext, partition: &Partition) -> SchedulerOutput {
    run_game(ctx, partition, pps_best_response)
}

/// Same dynamics with the exhaustive oracle as the response rule. Tiny
/// instances only; termination states are pure Nash equilibria of the
/// restricted game.
pub fn run_pdpg_oracle(ctx: &SchedulingContext, partition: &Partition) -> SchedulerOutput {
    run_game(ctx, partition, respond_oracle)
}

fn run_game(
    ctx: &SchedulingContext,
    partition: &Partition,
    respond: fn(
        &SchedulingContext,
        &Partition,
        VehicleId,
        &Profile,
        SubchannelBlock,
    ) -> (LeaderStrategy, u32),
) -> SchedulerOutput {
    let (profile, game, starved) = run_dynamics(ctx, partition, respond);
    let mut schedule = schedule_from_profile(&profile);
    let deadline_drops =
        enforce_deadline_on_schedule(ctx, &mut schedule, &scores_of_profile(&profile));
    SchedulerOutput {
        schedule,
        partition: partition.clone(),
        game,
        starved_members: starved.values().sum(),
        deadline_drops,
    }
}

/// No cooperation: nobody transmits, everyone is a singleton, and the
/// consumer computes utilities from raw own densities without late fusion.
pub fn baseline_nc(ctx: &SchedulingContext) -> SchedulerOutput {
    let partition = Partition::singletons(ctx.world.cav_ids(), ctx.world.cycle);
    SchedulerOutput {
        schedule: Schedule::default(),
        partition,
        game: GameState {
            iterations: 0,
            converged: true,
            potential_trace: Vec::new(),
        },
        starved_members: 0,
        deadline_drops: 0,
    }
}

/// Coalitions implied by a sender/receiver link structure: each receiver
/// leads itself plus its senders; untouched vehicles stay singletons.
fn implied_partition(
    links: &[(VehicleId, VehicleId)],
    cav_ids: &[VehicleId],
    cycle: u64,
) -> Partition {
    let mut members_of: BTreeMap<VehicleId, BTreeSet<VehicleId>> = BTreeMap::new();
    for &(from, to) in links {
        members_of.entry(to).or_default().insert(from);
    }
    let mut used: BTreeSet<VehicleId> = BTreeSet::new();
    let mut coalitions = Vec::new();
    for (&leader, senders) in &members_of {
        let mut members = senders.clone();
        members.insert(leader);
        used.extend(members.iter().copied());
        coalitions.push(Coalition { members, leader });
    }
    for &id in cav_ids {
        if !used.contains(&id) {
            coalitions.push(Coalition {
                members: BTreeSet::from([id]),
                leader: id,
            });
        }
    }
    Partition::new(coalitions, cycle)
}

/// Random link selection: K·|CAV| draws of (sender, receiver, subchannel);
/// a draw is kept when the pair is in range, sender and receiver roles stay
/// pure (nobody both sends and receives, one link per sender), and every
/// accepted link still clears the SINR floor afterwards. Accepted senders
/// upload their whole sensing support.
pub fn baseline_rs(ctx: &SchedulingContext, rng: &mut ChaCha8Rng) -> SchedulerOutput {
    let cav_ids = ctx.world.cav_ids();
    let mut schedule = Schedule::default();
    let mut senders: BTreeSet<VehicleId> = BTreeSet::new();
    let mut receivers: BTreeSet<VehicleId> = BTreeSet::new();
    let mut links: Vec<(VehicleId, VehicleId, u16)> = Vec::new();
    let mut scores: BTreeMap<(VehicleId, VehicleId), f64> = BTreeMap::new();

    if !cav_ids.is_empty() {
        let attempts = ctx.channel.n_subchannels as usize * cav_ids.len();
        for _ in 0..attempts {
            let from = cav_ids[rng.random_range(0..cav_ids.len())];
            let to = cav_ids[rng.random_range(0..cav_ids.len())];
            let k = rng.random_range(0..ctx.channel.n_subchannels);
            if from == to
                || senders.contains(&from)
                || receivers.contains(&from)
                || senders.contains(&to)
                || ctx.distance(from, to) > ctx.scenario.r_comm
            {
                continue;
            }
            let Some(support) = ctx.world.densities.grids_of(from) else {
                continue;
            };
            if support.is_empty() {
                continue;
            }

            let mut tentative = schedule.clone();
            for (&g, &rho) in support {
                if rho > 0.0 {
                    tentative.insert(from, to, g, k);
                }
            }
            let all_clear = links
                .iter()
                .copied()
                .chain([(from, to, k)])
                .all(|(f, t, kk)| {
                    link_sinr_db(f, t, kk, &tentative, ctx.realization, ctx.channel)
                        >= ctx.cfg.sinr_min_db
                });
            if !all_clear {
                continue;
            }
            let accept_sinr =
                link_sinr_db(from, to, k, &tentative, ctx.realization, ctx.channel);
            schedule = tentative;
            links.push((from, to, k));
            senders.insert(from);
            receivers.insert(to);
            scores.insert((to, from), accept_sinr);
        }
    }

    let partition = implied_partition(
        &links.iter().map(|&(f, t, _)| (f, t)).collect::<Vec<_>>(),
        &cav_ids,
        ctx.world.cycle,
    );
    let deadline_drops = enforce_deadline_on_schedule(ctx, &mut schedule, &scores);
    SchedulerOutput {
        schedule,
        partition,
        game: GameState {
            iterations: 0,
            converged: true,
            potential_trace: Vec::new(),
        },
        starved_members: 0,
        deadline_drops,
    }
}

/// Greedy max-marginal-gain link selection. Each step evaluates every unused
/// sender/receiver pair in range (pure roles, like the random baseline),
/// takes the pair whose upload of currently unsaturated sensed grids adds the
/// most system utility, and places it on the lowest subchannel that keeps
/// every accepted link above the SINR floor. Stops when no pair adds strictly
/// positive utility or none fits a subchannel.
pub fn baseline_mug(ctx: &SchedulingContext) -> SchedulerOutput {
    let cav_ids = ctx.world.cav_ids();

    let mut schedule = Schedule::default();
    let mut links: Vec<(VehicleId, VehicleId, u16)> = Vec::new();
    let mut senders: BTreeSet<VehicleId> = BTreeSet::new();
    let mut receivers: BTreeSet<VehicleId> = BTreeSet::new();
    let mut scores: BTreeMap<(VehicleId, VehicleId), f64> = BTreeMap::new();
    let mut peaks = ctx.raw_peaks.clone();
    // Receivers' fused densities, grown as uploads land.
    let mut fused: BTreeMap<VehicleId, BTreeMap<GridId, f64>> = BTreeMap::new();

    loop {
        // Rank all candidate pairs by marginal utility; gain is independent
        // of the subchannel, so the channel is chosen after the pair.
        let mut ranked: Vec<(f64, VehicleId, VehicleId)> = Vec::new();
        for &from in &cav_ids {
            if senders.contains(&from) || receivers.contains(&from) {
                continue;
            }
            let Some(support) = ctx.world.densities.grids_of(from) else {
                continue;
            };
            for &to in &cav_ids {
                if to == from
                    || senders.contains(&to)
                    || ctx.distance(from, to) > ctx.scenario.r_comm
                {
                    continue;
                }
                let fused_to = fused.get(&to);
                let mut gain = 0.0;
                for (&g, &rho) in support {
                    let peak = peaks.get(&g).copied().unwrap_or(0.0);
                    if rho <= 0.0 || peak >= ctx.curve.rho_th {
                        continue;
                    }
                    let base_to = fused_to
                        .and_then(|m| m.get(&g).copied())
                        .unwrap_or_else(|| ctx.world.densities.rho(to, g));
                    let new_peak = (base_to + rho).max(peak);
                    let coverage = ctx.req_coverage.get(&g).copied().unwrap_or(0);
                    if coverage > 0 && new_peak > peak {
                        gain += (ctx.curve.value(new_peak) - ctx.curve.value(peak))
                            * coverage as f64;
                    }
                }
                if gain > 0.0 {
                    ranked.push((gain, from, to));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));

        let mut accepted = false;
        'pairs: for (gain, from, to) in ranked {
            for k in 0..ctx.channel.n_subchannels {
                let mut tentative = schedule.clone();
                let support = ctx.world.densities.grids_of(from).unwrap();
                for (&g, &rho) in support {
                    let peak = peaks.get(&g).copied().unwrap_or(0.0);
                    if rho > 0.0 && peak < ctx.curve.rho_th {
                        tentative.insert(from, to, g, k);
                    }
                }
                if tentative.len() == schedule.len() {
                    break; // nothing unsaturated to carry
                }
                let all_clear = links
                    .iter()
                    .copied()
                    .chain([(from, to, k)])
                    .all(|(f, t, kk)| {
                        link_sinr_db(f, t, kk, &tentative, ctx.realization, ctx.channel)
                            >= ctx.cfg.sinr_min_db
                    });
                if !all_clear {
                    continue;
                }

                // Accept: fold the upload into the receiver's fused density
                // and the global peaks.
                let entry = fused
                    .entry(to)
                    .or_insert_with(|| {
                        ctx.world
                            .densities
                            .grids_of(to)
                            .cloned()
                            .unwrap_or_default()
                    });
                for (&g, &rho) in support {
                    let peak = peaks.get(&g).copied().unwrap_or(0.0);
                    if rho > 0.0 && peak < ctx.curve.rho_th {
                        let cell = entry.entry(g).or_insert(0.0);
                        *cell += rho;
                        let p = peaks.entry(g).or_insert(0.0);
                        if *cell > *p {
                            *p = *cell;
                        }
                    }
                }
                schedule = tentative;
                links.push((from, to, k));
                senders.insert(from);
                receivers.insert(to);
                scores.insert((to, from), gain);
                accepted = true;
                break 'pairs;
            }
        }
        if !accepted {
            break;
        }
    }

    let partition = implied_partition(
        &links.iter().map(|&(f, t, _)| (f, t)).collect::<Vec<_>>(),
        &cav_ids,
        ctx.world.cycle,
    );
    let deadline_drops = enforce_deadline_on_schedule(ctx, &mut schedule, &scores);
    SchedulerOutput {
        schedule,
        partition,
        game: GameState {
            iterations: 0,
            converged: true,
            potential_trace: Vec::new(),
        },
        starved_members: 0,
        deadline_drops,
    }
}

/// Dispatch for the simulation loop. The random baseline consumes from its
/// dedicated stream even when another scheduler is selected elsewhere, so
/// streams never shift between schedulers.
pub fn run_scheduler(
    kind: SchedulerKind,
    ctx: &SchedulingContext,
    partition: &Partition,
    rs_rng: &mut ChaCha8Rng,
) -> SchedulerOutput {
    match kind {
        SchedulerKind::PotentialGame => run_pdpg(ctx, partition),
        SchedulerKind::NoCooperation => baseline_nc(ctx),
        SchedulerKind::RandomSelection => baseline_rs(ctx, rs_rng),
        SchedulerKind::MaxUtilityGreedy => baseline_mug(ctx),
    }
}

/// Post-run feasibility: structure plus per-leader deadline.
pub fn schedule_is_feasible(
    ctx: &SchedulingContext,
    output: &SchedulerOutput,
) -> (Vec<crate::channel::ScheduleViolation>, bool) {
    let violations = validate_schedule(
        &output.schedule,
        &output.partition,
        ctx.channel.n_subchannels,
    );
    let leaders: BTreeSet<VehicleId> = output.schedule.entries().map(|u| u.to).collect();
    let deadlines_ok = leaders.iter().all(|&h| {
        check_deadline(
            h,
            &output.schedule,
            &ctx.world.densities,
            ctx.realization,
            ctx.channel,
            ctx.world.vehicle(h).compute_capacity,
            ctx.scenario.cycle_duration,
        )
    });
    (violations, deadlines_ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use crate::perception::fuse_effective_density;
    use crate::rng::stream;
    use crate::world::{DensityField, VehicleState};
    use rand::Rng;

    fn scenario(extent: f64, r_comm: f64) -> ScenarioConfig {
        ScenarioConfig {
            scene_extent: extent,
            grid_size: 10.0,
            n_vehicles: 8,
            n_cavs: 8,
            r_sens: 50.0,
            r_req: 75.0,
            r_comm,
            cycle_duration: 1e6,
            ..ScenarioConfig::default()
        }
    }

    fn cav(id: u32, x: f64, y: f64) -> VehicleState {
        VehicleState::new(id, Vec2::new(x, y), Vec2::ZERO, true)
    }

    fn injected(entries: &[(u32, u32, f64)]) -> DensityField {
        let mut f = DensityField::default();
        for &(i, g, rho) in entries {
            f.by_vehicle
                .entry(VehicleId(i))
                .or_default()
                .insert(GridId(g), rho);
        }
        f
    }

    /// Owns everything a SchedulingContext borrows.
    struct Fixture {
        scenario: ScenarioConfig,
        channel: ChannelConfig,
        cfg: SchedulerConfig,
        curve: UtilityCurve,
        grids: GridWorld,
        world: WorldState,
        realization: ChannelRealization,
    }

    impl Fixture {
        fn hand_built(
            vehicles: Vec<VehicleState>,
            densities: DensityField,
            scenario: ScenarioConfig,
        ) -> Self {
            let grids = scenario.grid_world();
            let mut world = WorldState::capture(0, 0.0, &vehicles, &grids, &scenario);
            world.densities = densities;
            let channel = ChannelConfig::default();
            let realization = ChannelRealization::pathloss_only(&vehicles, 0, &channel);
            Fixture {
                scenario,
                channel,
                cfg: SchedulerConfig::default(),
                curve: UtilityCurve::default(),
                grids,
                world,
                realization,
            }
        }

        fn sensed(vehicles: Vec<VehicleState>, scenario: ScenarioConfig) -> Self {
            let grids = scenario.grid_world();
            let world = WorldState::capture(0, 0.0, &vehicles, &grids, &scenario);
            let channel = ChannelConfig::default();
            let realization = ChannelRealization::pathloss_only(&vehicles, 0, &channel);
            Fixture {
                scenario,
                channel,
                cfg: SchedulerConfig::default(),
                curve: UtilityCurve::default(),
                grids,
                world,
                realization,
            }
        }

        fn ctx(&self) -> SchedulingContext<'_> {
            SchedulingContext::new(
                &self.world,
                &self.grids,
                &self.curve,
                &self.scenario,
                &self.channel,
                &self.cfg,
                &self.realization,
            )
        }
    }

    fn pair_partition(members: &[u32], leader: u32) -> Partition {
        Partition::new(
            vec![Coalition {
                members: members.iter().map(|&m| VehicleId(m)).collect(),
                leader: VehicleId(leader),
            }],
            0,
        )
    }

    #[test]
    fn budget_split_matches_hand_counts() {
        let leaders: Vec<VehicleId> = [3u32, 7, 9].iter().map(|&i| VehicleId(i)).collect();
        let blocks = assign_budgets(&leaders, 10);
        assert_eq!(blocks[&VehicleId(3)], SubchannelBlock { start: 0, len: 4 });
        assert_eq!(blocks[&VehicleId(7)], SubchannelBlock { start: 4, len: 3 });
        assert_eq!(blocks[&VehicleId(9)], SubchannelBlock { start: 7, len: 3 });

        let five: Vec<VehicleId> = (0..5).map(VehicleId).collect();
        let blocks = assign_budgets(&five, 2);
        let lens: Vec<u16> = five.iter().map(|h| blocks[h].len).collect();
        assert_eq!(lens, vec![1, 1, 0, 0, 0]);
        let total: u16 = lens.iter().sum();
        assert!(total <= 2);

        assert!(assign_budgets(&[], 10).is_empty());
    }

    /// Random coalition layout over freshly sensed densities.
    fn random_fixture(rng: &mut ChaCha8Rng) -> (Fixture, Partition) {
        let n_clusters = rng.random_range(1..=3usize);
        let mut vehicles = Vec::new();
        let mut coalitions = Vec::new();
        let mut id = 0u32;
        for _ in 0..n_clusters {
            let cx = rng.random_range(40.0..160.0);
            let cy = rng.random_range(40.0..160.0);
            let size = rng.random_range(1..=4usize);
            let mut members = BTreeSet::new();
            for _ in 0..size {
                let x = cx + rng.random_range(-25.0..25.0);
                let y = cy + rng.random_range(-25.0..25.0);
                vehicles.push(cav(id, x, y));
                members.insert(VehicleId(id));
                id += 1;
            }
            let leader = *members.first().unwrap();
            coalitions.push(Coalition { members, leader });
        }
        let partition = Partition::new(coalitions, 0);
        let fixture = Fixture::sensed(vehicles, scenario(200.0, 100.0));
        (fixture, partition)
    }

    /// Random structurally valid profile: members upload subsets of their
    /// sensed support inside the coalition requirement region.
    fn random_profile(
        ctx: &SchedulingContext,
        partition: &Partition,
        rng: &mut ChaCha8Rng,
    ) -> Profile {
        let mut profile = Profile::new();
        for c in &partition.coalitions {
            let req = coalition_req_union(ctx.world, c);
            let mut strat = LeaderStrategy::default();
            let mut k = 0u16;
            for &m in &c.members {
                if m == c.leader || rng.random::<f64>() < 0.4 {
                    continue;
                }
                let Some(support) = ctx.world.densities.grids_of(m) else {
                    continue;
                };
                let grids: BTreeSet<GridId> = support
                    .iter()
                    .filter(|&(g, &rho)| rho > 0.0 && req.contains(g) && rng.random::<f64>() < 0.7)
                    .map(|(&g, _)| g)
                    .collect();
                if grids.is_empty() || k >= ctx.channel.n_subchannels {
                    continue;
                }
                strat.uploads.insert(
                    m,
                    MemberUpload {
                        subchannel: k,
                        grids,
                        score: 0.0,
                    },
                );
                k += 1;
            }
            profile.insert(c.leader, strat);
        }
        profile
    }

    fn naive_leader_utility(
        ctx: &SchedulingContext,
        partition: &Partition,
        h: VehicleId,
        profile: &Profile,
    ) -> f64 {
        let schedule = schedule_from_profile(profile);
        let fused = fuse_effective_density(&schedule, &ctx.world.densities, partition).unwrap();
        let req = coalition_req_union(ctx.world, partition.led_by(h).unwrap());
        req.iter()
            .map(|&g| {
                ctx.world
                    .cav_ids()
                    .iter()
                    .map(|&k| ctx.curve.value(fused.rho(k, g)))
                    .fold(0.0, f64::max)
            })
            .sum()
    }

    #[test]
    fn leader_utility_matches_naive_fusion() {
        let mut rng = stream(11, "sched-naive");
        for _ in 0..40 {
            let (fixture, partition) = random_fixture(&mut rng);
            let ctx = fixture.ctx();
            let profile = random_profile(&ctx, &partition, &mut rng);
            for c in &partition.coalitions {
                let fast = leader_utility(&ctx, &partition, c.leader, &profile);
                let slow = naive_leader_utility(&ctx, &partition, c.leader, &profile);
                assert!(
                    (fast - slow).abs() <= 1e-9,
                    "leader {} fast {fast} naive {slow}",
                    c.leader
                );
            }
        }
    }

    #[test]
    fn unilateral_change_moves_potential_like_payoff() {
        let mut rng = stream(12, "sched-potential");
        for _ in 0..30 {
            let (fixture, partition) = random_fixture(&mut rng);
            let ctx = fixture.ctx();
            let before = random_profile(&ctx, &partition, &mut rng);
            let leaders: Vec<VehicleId> = partition.leaders().collect();
            let h = leaders[rng.random_range(0..leaders.len())];

            let mut after = before.clone();
            after.insert(
                h,
                random_profile(&ctx, &partition, &mut rng)
                    .remove(&h)
                    .unwrap(),
            );

            let du = leader_utility(&ctx, &partition, h, &after)
                - leader_utility(&ctx, &partition, h, &before);
            let dphi = potential(&ctx, &after) - potential(&ctx, &before);
            assert!(
                (du - dphi).abs() <= 1e-9,
                "payoff change {du} potential change {dphi}"
            );
        }
    }

    #[test]
    fn pps_returns_empty_when_all_grids_saturated() {
        let mut entries = vec![(0u32, 0u32, 0.3), (1, 0, 0.4)];
        // A third vehicle's raw sensing saturates every grid either member
        // could serve.
        let scn = scenario(200.0, 100.0);
        let grids = scn.grid_world();
        for g in 0..grids.n_grids() {
            entries.push((2, g, 5.0));
        }
        let fixture = Fixture::hand_built(
            vec![cav(0, 100.0, 100.0), cav(1, 110.0, 100.0), cav(2, 30.0, 30.0)],
            injected(&entries),
            scn,
        );
        let ctx = fixture.ctx();
        let partition = pair_partition(&[0, 1], 0);
        let (strategy, starved) = pps_best_response(
            &ctx,
            &partition,
            VehicleId(0),
            &Profile::new(),
            SubchannelBlock { start: 0, len: 4 },
        );
        assert!(strategy.uploads.is_empty());
        assert_eq!(starved, 0);
    }

    #[test]
    fn pps_orders_members_by_score_and_respects_budget() {
        // Grid 0 holds member 1's mass, grid 1 member 2's; both inside the
        // requirement region around (100, 100).
        let scn = scenario(200.0, 100.0);
        let grids = scn.grid_world();
        let ga = grids.grid_at(Vec2::new(95.0, 95.0)).unwrap();
        let gb = grids.grid_at(Vec2::new(105.0, 95.0)).unwrap();
        let fixture = Fixture::hand_built(
            vec![cav(0, 100.0, 100.0), cav(1, 105.0, 100.0), cav(2, 95.0, 100.0)],
            injected(&[(1, ga.0, 1.0), (2, gb.0, 0.5)]),
            scn,
        );
        let ctx = fixture.ctx();
        let partition = pair_partition(&[0, 1, 2], 0);

        let (strategy, starved) = pps_best_response(
            &ctx,
            &partition,
            VehicleId(0),
            &Profile::new(),
            SubchannelBlock { start: 3, len: 1 },
        );
        assert_eq!(starved, 1, "second member should starve on a 1-slot block");
        assert_eq!(strategy.uploads.len(), 1);
        let up = &strategy.uploads[&VehicleId(1)];
        assert_eq!(up.subchannel, 3);
        assert_eq!(up.grids, BTreeSet::from([ga]));
        let expect = ctx.curve.value(1.0) - ctx.curve.value(0.0);
        assert!((up.score - expect).abs() < 1e-12);

        let (strategy, starved) = pps_best_response(
            &ctx,
            &partition,
            VehicleId(0),
            &Profile::new(),
            SubchannelBlock { start: 0, len: 4 },
        );
        assert_eq!(starved, 0);
        assert_eq!(strategy.uploads.len(), 2);
        assert_eq!(strategy.uploads[&VehicleId(1)].subchannel, 0);
        assert_eq!(strategy.uploads[&VehicleId(2)].subchannel, 1);
    }

    #[test]
    fn pps_skips_members_out_of_comm_range() {
        let scn = scenario(400.0, 100.0);
        let grids = scn.grid_world();
        let ga = grids.grid_at(Vec2::new(95.0, 95.0)).unwrap();
        let fixture = Fixture::hand_built(
            vec![cav(0, 100.0, 100.0), cav(1, 300.0, 100.0)],
            injected(&[(1, ga.0, 1.5)]),
            scn,
        );
        let ctx = fixture.ctx();
        let partition = pair_partition(&[0, 1], 0);
        let (strategy, starved) = pps_best_response(
            &ctx,
            &partition,
            VehicleId(0),
            &Profile::new(),
            SubchannelBlock { start: 0, len: 4 },
        );
        assert!(strategy.uploads.is_empty());
        assert_eq!(starved, 0, "unreachable members are skipped, not starved");
    }

    #[test]
    fn single_leader_converges_in_two_rounds() {
        let mut rng = stream(13, "sched-single");
        let mut saw_uploads = false;
        for _ in 0..10 {
            let vehicles: Vec<VehicleState> = (0..3)
                .map(|i| {
                    cav(
                        i,
                        100.0 + rng.random_range(-20.0..20.0),
                        100.0 + rng.random_range(-20.0..20.0),
                    )
                })
                .collect();
            let fixture = Fixture::sensed(vehicles, scenario(200.0, 100.0));
            let ctx = fixture.ctx();
            let partition = pair_partition(&[0, 1, 2], 0);
            let out = run_pdpg(&ctx, &partition);
            assert!(out.game.converged);
            assert!(out.game.iterations <= 2);
            assert_eq!(out.deadline_drops, 0);
            for w in out.game.potential_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
            if !out.schedule.is_empty() {
                saw_uploads = true;
                assert!(
                    validate_schedule(&out.schedule, &partition, ctx.channel.n_subchannels)
                        .is_empty()
                );
            }
        }
        assert!(saw_uploads, "no instance produced any upload");
    }

    #[test]
    fn sequential_runs_are_monotone_and_converge() {
        let mut rng = stream(14, "sched-seq");
        for _ in 0..30 {
            let (fixture, partition) = random_fixture(&mut rng);
            let ctx = fixture.ctx();
            let out = run_pdpg(&ctx, &partition);
            assert!(out.game.converged, "no convergence within the cap");
            for w in out.game.potential_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "potential fell: {:?}", w);
            }
            let (violations, deadline_ok) = schedule_is_feasible(&ctx, &out);
            assert!(violations.is_empty());
            assert!(deadline_ok);
        }
    }

    #[test]
    fn disjoint_clusters_do_not_couple() {
        // Two coalitions far apart: each leader's payoff is unchanged when
        // the other coalition's strategy is wiped.
        let vehicles = vec![
            cav(0, 50.0, 50.0),
            cav(1, 60.0, 50.0),
            cav(2, 330.0, 330.0),
            cav(3, 340.0, 330.0),
        ];
        let fixture = Fixture::sensed(vehicles, scenario(400.0, 100.0));
        let ctx = fixture.ctx();
        let partition = Partition::new(
            vec![
                Coalition {
                    members: BTreeSet::from([VehicleId(0), VehicleId(1)]),
                    leader: VehicleId(0),
                },
                Coalition {
                    members: BTreeSet::from([VehicleId(2), VehicleId(3)]),
                    leader: VehicleId(2),
                },
            ],
            0,
        );
        let out = run_pdpg(&ctx, &partition);
        assert!(out.game.converged && out.game.iterations <= 2);

        let profile: Profile = {
            let mut p = Profile::new();
            for c in &partition.coalitions {
                let mut strat = LeaderStrategy::default();
                for u in out.schedule.entries().filter(|u| u.to == c.leader) {
                    strat
                        .uploads
                        .entry(u.from)
                        .or_insert_with(|| MemberUpload {
                            subchannel: u.subchannel,
                            grids: BTreeSet::new(),
                            score: 0.0,
                        })
                        .grids
                        .insert(u.grid);
                }
                p.insert(c.leader, strat);
            }
            p
        };
        for &(h, other) in &[(VehicleId(0), VehicleId(2)), (VehicleId(2), VehicleId(0))] {
            let mut wiped = profile.clone();
            wiped.insert(other, LeaderStrategy::default());
            let u_full = leader_utility(&ctx, &partition, h, &profile);
            let u_wiped = leader_utility(&ctx, &partition, h, &wiped);
            assert!((u_full - u_wiped).abs() <= 1e-12);
        }
    }

    #[test]
    fn oracle_never_below_pps() {
        let mut rng = stream(15, "sched-oracle");
        for _ in 0..40 {
            let (fixture, partition) = random_fixture(&mut rng);
            let ctx = fixture.ctx();
            let leaders: Vec<VehicleId> = partition.leaders().collect();
            let blocks = assign_budgets(
                &{
                    let mut l = leaders.clone();
                    l.sort();
                    l
                },
                ctx.channel.n_subchannels,
            );
            let profile = random_profile(&ctx, &partition, &mut rng);
            for &h in &leaders {
                let (pps, _) = pps_best_response(&ctx, &partition, h, &profile, blocks[&h]);
                let oracle = exact_best_response(&ctx, &partition, h, &profile, blocks[&h]);
                let mut with_pps = profile.clone();
                with_pps.insert(h, pps);
                let mut with_oracle = profile.clone();
                with_oracle.insert(h, oracle);
                let u_pps = leader_utility(&ctx, &partition, h, &with_pps);
                let u_oracle = leader_utility(&ctx, &partition, h, &with_oracle);
                assert!(
                    u_oracle >= u_pps - 1e-9,
                    "oracle {u_oracle} below pps {u_pps}"
                );
            }
        }
    }

    #[test]
    fn nc_is_empty_and_singleton() {
        let mut rng = stream(16, "sched-nc");
        let (fixture, _) = random_fixture(&mut rng);
        let ctx = fixture.ctx();
        let out = baseline_nc(&ctx);
        assert!(out.schedule.is_empty());
        assert_eq!(out.partition.coalitions.len(), ctx.world.cav_ids().len());
        assert!(out.partition.coalitions.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn rs_is_deterministic_and_respects_constraints() {
        let vehicles: Vec<VehicleState> = (0..6)
            .map(|i| cav(i, 60.0 + 15.0 * i as f64, 100.0))
            .collect();
        let fixture = Fixture::sensed(vehicles, scenario(200.0, 100.0));
        let ctx = fixture.ctx();

        let out_a = baseline_rs(&ctx, &mut stream(99, "rs"));
        let out_b = baseline_rs(&ctx, &mut stream(99, "rs"));
        assert_eq!(out_a.schedule, out_b.schedule);

        let out = out_a;
        assert!(
            validate_schedule(&out.schedule, &out.partition, ctx.channel.n_subchannels)
                .is_empty()
        );
        let links = out.schedule.links();
        assert!(!links.is_empty(), "co-located line of six found no link");
        let senders: BTreeSet<VehicleId> = links.iter().map(|&(f, _, _)| f).collect();
        let receivers: BTreeSet<VehicleId> = links.iter().map(|&(_, t, _)| t).collect();
        assert!(senders.is_disjoint(&receivers));
        for &(f, t, k) in &links {
            assert!(ctx.distance(f, t) <= ctx.scenario.r_comm);
            assert!(
                link_sinr_db(f, t, k, &out.schedule, ctx.realization, ctx.channel)
                    >= ctx.cfg.sinr_min_db
            );
            // Full sensing support rides along.
            let support = ctx.world.densities.grids_of(f).unwrap();
            let uploaded = out.schedule.grids_on_link(f, t, k);
            let positive: BTreeSet<GridId> = support
                .iter()
                .filter(|&(_, &rho)| rho > 0.0)
                .map(|(&g, _)| g)
                .collect();
            assert_eq!(uploaded, positive);
        }
    }

    #[test]
    fn mug_picks_the_obvious_single_link() {
        let scn = scenario(200.0, 100.0);
        let grids = scn.grid_world();
        let ga = grids.grid_at(Vec2::new(95.0, 95.0)).unwrap();
        let fixture = Fixture::hand_built(
            vec![cav(0, 100.0, 100.0), cav(1, 110.0, 100.0)],
            injected(&[(0, ga.0, 1.0), (1, ga.0, 1.0)]),
            scn,
        );
        let ctx = fixture.ctx();
        let out = baseline_mug(&ctx);
        let links = out.schedule.links();
        assert_eq!(links, BTreeSet::from([(VehicleId(0), VehicleId(1), 0)]));
        assert_eq!(
            out.schedule.grids_on_link(VehicleId(0), VehicleId(1), 0),
            BTreeSet::from([ga])
        );
        assert_eq!(out.partition.coalitions.len(), 1);
        assert_eq!(out.partition.coalitions[0].leader, VehicleId(1));
    }

    #[test]
    fn mug_respects_structure_and_saturation() {
        let mut rng = stream(17, "sched-mug");
        for _ in 0..10 {
            let (fixture, _) = random_fixture(&mut rng);
            let ctx = fixture.ctx();
            let out = baseline_mug(&ctx);
            assert_eq!(out.schedule, baseline_mug(&ctx).schedule);
            assert!(
                validate_schedule(&out.schedule, &out.partition, ctx.channel.n_subchannels)
                    .is_empty()
            );
            let links = out.schedule.links();
            let senders: BTreeSet<VehicleId> = links.iter().map(|&(f, _, _)| f).collect();
            let receivers: BTreeSet<VehicleId> = links.iter().map(|&(_, t, _)| t).collect();
            assert!(senders.is_disjoint(&receivers));
            for u in out.schedule.entries() {
                assert!(
                    ctx.raw_peak(u.grid) < ctx.curve.rho_th,
                    "uploaded an already saturated grid"
                );
            }
            for &(f, t, k) in &links {
                assert!(ctx.distance(f, t) <= ctx.scenario.r_comm);
                assert!(
                    link_sinr_db(f, t, k, &out.schedule, ctx.realization, ctx.channel)
                        >= ctx.cfg.sinr_min_db
                );
            }
        }
    }

    #[test]
    fn deadline_repair_drops_lowest_score_first() {
        let scn = scenario(200.0, 100.0);
        let vehicles = vec![cav(0, 100.0, 100.0), cav(1, 130.0, 100.0), cav(2, 100.0, 130.0)];
        let grids = scn.grid_world();
        let mut entries = Vec::new();
        // Member 1 carries one grid; member 2 carries a heavy region.
        let ga = grids.grid_at(Vec2::new(95.0, 95.0)).unwrap();
        entries.push((1u32, ga.0, 1.0));
        for (n, g) in grids.disk(Vec2::new(100.0, 130.0), 40.0).iter().enumerate() {
            entries.push((2, g.0, 0.4 + (n % 3) as f64 * 0.1));
        }
        let fixture = Fixture::hand_built(vehicles.clone(), injected(&entries), scn);

        let mut schedule = Schedule::default();
        for (&v, map) in &fixture.world.densities.by_vehicle {
            let k = if v == VehicleId(1) { 0 } else { 1 };
            for &g in map.keys() {
                schedule.insert(v, VehicleId(0), g, k);
            }
        }
        let scores = BTreeMap::from([
            ((VehicleId(0), VehicleId(1)), 5.0),
            ((VehicleId(0), VehicleId(2)), 1.0),
        ]);

        // Measure the delay with and without the low-score member, then pick
        // a deadline between the two.
        let ctx_loose = fixture.ctx();
        let full = leader_delay(
            VehicleId(0),
            &schedule,
            &fixture.world.densities,
            &fixture.realization,
            &fixture.channel,
            fixture.world.vehicle(VehicleId(0)).compute_capacity,
        );
        let mut light = schedule.clone();
        let doomed: Vec<_> = light
            .entries()
            .filter(|u| u.from == VehicleId(2))
            .copied()
            .collect();
        for u in doomed {
            light.remove(&u);
        }
        let reduced = leader_delay(
            VehicleId(0),
            &light,
            &fixture.world.densities,
            &fixture.realization,
            &fixture.channel,
            fixture.world.vehicle(VehicleId(0)).compute_capacity,
        );
        assert!(reduced < full);
        drop(ctx_loose);

        let mut strict = Fixture::hand_built(
            vehicles,
            fixture.world.densities.clone(),
            fixture.scenario.clone(),
        );
        strict.scenario.cycle_duration = 0.5 * (reduced + full);
        let ctx = strict.ctx();
        let mut repaired = schedule.clone();
        let drops = enforce_deadline_on_schedule(&ctx, &mut repaired, &scores);
        assert_eq!(drops, 1);
        assert!(repaired.entries().all(|u| u.from != VehicleId(2)));
        assert!(repaired.entries().any(|u| u.from == VehicleId(1)));
    }

    #[test]
    fn scheduler_kind_round_trips() {
        for kind in SchedulerKind::ALL {
            assert_eq!(kind.flag().parse::<SchedulerKind>().unwrap(), kind);
        }
        assert!("bogus".parse::<SchedulerKind>().is_err());
        assert_eq!(
            "sequential".parse::<UpdateMode>().unwrap(),
            UpdateMode::Sequential
        );
        assert_eq!(
            "synchronous".parse::<UpdateMode>().unwrap(),
            UpdateMode::Synchronous
        );
    }
}
