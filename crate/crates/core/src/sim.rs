//! Run engine: the four-phase cycle loop, seeded single runs, and multi-seed
//! batches with on-disk CSV/JSON artifacts.
//!
//! A cycle executes fixed phases: re-cluster if the standing partition went
//! stale, schedule uploads, fuse and check delays, then score utilities and
//! assemble the report. Mobility advances only after the report is taken, so
//! a cycle never sees next-cycle positions.

use crate::channel::{leader_delay, ChannelRealization};
use crate::coalition::{form_clusters, should_reform, CoalitionContext, Partition};
use crate::config::SimConfig;
use crate::metrics::{
    aggregate_run, comm_overhead, reports_to_csv, summary_to_json, CycleReport, RunSummary,
};
use crate::perception::{
    fuse_effective_density, isolated_utility, peak_utilities, vehicle_utility, UtilityCurve,
};
use crate::rng::stream;
use crate::scheduling::{
    run_scheduler, schedule_is_feasible, SchedulerKind, SchedulerOutput, SchedulingContext,
};
use crate::world::{spawn_fleet, step_mobility, GridWorld, VehicleId, VehicleState, WorldState};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// A whole batch: which schedulers over which seeds, for how many cycles,
/// and where the artifacts land.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub config: SimConfig,
    pub schedulers: Vec<SchedulerKind>,
    pub cycles: u32,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.cycles == 0 {
            return Err("cycles must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return Err("at least one seed required".into());
        }
        if self.schedulers.is_empty() {
            return Err("at least one scheduler required".into());
        }
        let mut seen = BTreeSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(format!("duplicate seed {s}"));
            }
        }
        Ok(())
    }
}

/// One cycle's full result, for callers that want more than the report.
pub struct CycleOutcome {
    pub report: CycleReport,
    pub output: SchedulerOutput,
}

/// One seeded run in progress: the fleet, the standing partition for the
/// game scheduler, and the named RNG substreams.
pub struct Simulation {
    cfg: SimConfig,
    scheduler: SchedulerKind,
    seed: u64,
    grids: GridWorld,
    curve: UtilityCurve,
    vehicles: Vec<VehicleState>,
    partition: Option<Partition>,
    mobility_rng: ChaCha8Rng,
    rs_rng: ChaCha8Rng,
    cycle: u64,
}

impl Simulation {
    /// Spawns the fleet from the `mobility` substream of `seed`. The random
    /// baseline draws from its own `rs` substream, so runs with different
    /// schedulers see identical worlds.
    pub fn new(cfg: &SimConfig, scheduler: SchedulerKind, seed: u64) -> Simulation {
        let grids = GridWorld::new(cfg.scenario.scene_extent, cfg.scenario.grid_size);
        let curve = cfg.curve.to_curve();
        let mut mobility_rng = stream(seed, "mobility");
        let vehicles = spawn_fleet(&cfg.scenario, &mut mobility_rng);
        Simulation {
            cfg: cfg.clone(),
            scheduler,
            seed,
            grids,
            curve,
            vehicles,
            partition: None,
            mobility_rng,
            rs_rng: stream(seed, "rs"),
            cycle: 0,
        }
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn grids(&self) -> &GridWorld {
        &self.grids
    }

    pub fn curve(&self) -> &UtilityCurve {
        &self.curve
    }

    pub fn step(&mut self) -> CycleReport {
        self.step_full().report
    }

    /// Runs one collaboration cycle and advances mobility for the next.
    pub fn step_full(&mut self) -> CycleOutcome {
        let scenario = &self.cfg.scenario;
        let world = WorldState::capture(
            self.cycle,
            self.cycle as f64 * scenario.cycle_duration,
            &self.vehicles,
            &self.grids,
            scenario,
        );
        let realization =
            ChannelRealization::generate(&self.vehicles, self.cycle, self.seed, &self.cfg.channel);

        // Phase 1: cluster formation. Baselines derive their grouping from
        // the links they end up scheduling, so only the game scheduler keeps
        // a standing partition.
        let mut reformed = false;
        let partition_in = if self.scheduler == SchedulerKind::PotentialGame {
            let stale = match &self.partition {
                None => true,
                Some(p) => should_reform(p, &world, scenario, &self.cfg.coalition),
            };
            if stale {
                let ctx = CoalitionContext {
                    world: &world,
                    grids: &self.grids,
                    curve: &self.curve,
                    scenario,
                    cfg: &self.cfg.coalition,
                };
                let (p, _stats) = form_clusters(&ctx, self.cycle);
                self.partition = Some(p);
                reformed = true;
            }
            self.partition.clone().unwrap()
        } else {
            Partition::singletons(world.cav_ids(), self.cycle)
        };

        // Phase 2: upload scheduling.
        let sched_ctx = SchedulingContext::new(
            &world,
            &self.grids,
            &self.curve,
            scenario,
            &self.cfg.channel,
            &self.cfg.scheduler,
            &realization,
        );
        let output = run_scheduler(self.scheduler, &sched_ctx, &partition_in, &mut self.rs_rng);

        // Phase 3: fusion and feasibility.
        let fused = fuse_effective_density(&output.schedule, &world.densities, &output.partition)
            .expect("scheduler emitted structurally invalid links");
        let (violations, deadline_ok) = schedule_is_feasible(&sched_ctx, &output);
        let receivers: BTreeSet<VehicleId> = output.schedule.entries().map(|u| u.to).collect();
        let max_leader_delay_s = receivers
            .iter()
            .map(|&h| {
                leader_delay(
                    h,
                    &output.schedule,
                    &world.densities,
                    &realization,
                    &self.cfg.channel,
                    world.vehicle(h).compute_capacity,
                )
            })
            .fold(0.0, f64::max);

        // Phase 4: utilities, overhead, report.
        let vehicle_utilities: BTreeMap<VehicleId, f64> = world
            .req_regions
            .iter()
            .map(|(&i, req)| {
                let u = if self.scheduler == SchedulerKind::NoCooperation {
                    isolated_utility(i, req, &world.densities, &self.curve)
                } else {
                    vehicle_utility(req, &fused, &self.curve)
                };
                (i, u)
            })
            .collect();
        // `+ 0.0` maps the -0.0 an empty f64 sum yields back to +0.0.
        let system_utility: f64 = vehicle_utilities.values().sum::<f64>() + 0.0;

        let broadcasters: Vec<VehicleId> = match self.scheduler {
            SchedulerKind::NoCooperation => Vec::new(),
            _ => world.cav_ids(),
        };
        let overhead = comm_overhead(
            &output.schedule,
            &world.densities,
            &fused,
            &broadcasters,
            &self.cfg.channel,
            &self.cfg.metrics,
        );

        let support: BTreeSet<_> = fused
            .by_vehicle
            .values()
            .flat_map(|m| m.keys().copied())
            .collect();
        let potential: f64 = peak_utilities(&support, &fused, &self.curve).values().sum::<f64>() + 0.0;

        let report = CycleReport {
            cycle: self.cycle,
            scheduler: self.scheduler,
            system_utility,
            early_bits: overhead.early_bits,
            late_bits: overhead.late_bits,
            overhead_mbps: overhead.mbps(scenario.cycle_duration),
            max_leader_delay_s,
            n_coalitions: output.partition.coalitions.len(),
            coalition_sizes: output
                .partition
                .coalitions
                .iter()
                .map(|c| c.members.len())
                .collect(),
            reformed,
            formation_rounds: output.partition.rounds,
            formation_converged: output.partition.converged,
            game_rounds: output.game.iterations,
            game_converged: output.game.converged,
            potential,
            potential_trace: output.game.potential_trace.clone(),
            starved_members: output.starved_members,
            deadline_drops: output.deadline_drops,
            schedule_links: output.schedule.links().len(),
            schedule_entries: output.schedule.len(),
            violations: violations.len(),
            deadline_ok,
            vehicle_utilities,
        };

        step_mobility(
            &mut self.vehicles,
            scenario.cycle_duration,
            scenario,
            &mut self.mobility_rng,
        );
        self.cycle += 1;
        CycleOutcome { report, output }
    }
}

/// All cycles of one seeded run.
pub fn run_sim(
    cfg: &SimConfig,
    scheduler: SchedulerKind,
    cycles: u32,
    seed: u64,
) -> Vec<CycleReport> {
    let mut sim = Simulation::new(cfg, scheduler, seed);
    (0..cycles).map(|_| sim.step()).collect()
}

/// Runs one (scheduler, seed) pair and writes `cycles.csv` plus
/// `summary.json` into `dir`.
pub fn run_to_dir(
    cfg: &SimConfig,
    scheduler: SchedulerKind,
    cycles: u32,
    seed: u64,
    dir: &Path,
) -> io::Result<RunSummary> {
    let reports = run_sim(cfg, scheduler, cycles, seed);
    let summary = aggregate_run(&reports, seed);
    fs::create_dir_all(dir)?;
    fs::write(dir.join("cycles.csv"), reports_to_csv(&reports))?;
    fs::write(dir.join("summary.json"), summary_to_json(&summary))?;
    Ok(summary)
}

/// What a batch leaves behind besides files, for turning into an exit status.
#[derive(Clone, Debug, Default)]
pub struct BatchOutcome {
    pub summaries: Vec<RunSummary>,
    /// Any structural schedule violation or missed fusion deadline.
    pub any_violation: bool,
    /// Any cycle whose game or formation hit its iteration cap.
    pub any_nonconvergence: bool,
}

impl BatchOutcome {
    pub fn clean(&self) -> bool {
        !self.any_violation && !self.any_nonconvergence
    }
}

/// Runs every (scheduler, seed) pair sequentially in spec order, one
/// directory per pair, plus a flat comparison table across pairs. Rerunning
/// the same spec rewrites byte-identical files.
pub fn run_batch(spec: &RunSpec) -> io::Result<BatchOutcome> {
    spec.validate()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let mut out = BatchOutcome::default();
    for &scheduler in &spec.schedulers {
        for &seed in &spec.seeds {
            let dir = spec
                .out_dir
                .join(format!("{}-seed{seed:04}", scheduler.flag()));
            let summary = run_to_dir(&spec.config, scheduler, spec.cycles, seed, &dir)?;
            out.any_violation |=
                summary.total_violations > 0 || summary.deadline_failures > 0;
            out.any_nonconvergence |= summary.game_nonconverged_cycles > 0
                || summary.formation_nonconverged_cycles > 0;
            out.summaries.push(summary);
        }
    }
    fs::write(
        spec.out_dir.join("comparison.csv"),
        comparison_csv(&out.summaries),
    )?;
    Ok(out)
}

/// One row per run: headline means and dispersion next to the convergence
/// and feasibility counters.
pub fn comparison_csv(summaries: &[RunSummary]) -> String {
    let mut s = String::from(
        "scheduler,seed,cycles,utility_mean,utility_std,overhead_mbps_mean,overhead_mbps_std,\
         early_bits_mean,late_bits_mean,potential_mean,game_rounds_mean,\
         game_nonconverged_cycles,formation_nonconverged_cycles,starved_members,\
         deadline_drops,violations,deadline_failures\n",
    );
    for m in summaries {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.scheduler.flag(),
            m.seed,
            m.cycles,
            m.system_utility.mean,
            m.system_utility.std,
            m.overhead_mbps.mean,
            m.overhead_mbps.std,
            m.early_bits.mean,
            m.late_bits.mean,
            m.potential.mean,
            m.game_rounds.mean,
            m.game_nonconverged_cycles,
            m.formation_nonconverged_cycles,
            m.total_starved_members,
            m.total_deadline_drops,
            m.total_violations,
            m.deadline_failures,
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldState;

    /// Small fleet so every test stays in the millisecond range.
    fn small_config() -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.scenario.scene_extent = 200.0;
        cfg.scenario.n_vehicles = 16;
        cfg.scenario.n_cavs = 6;
        cfg.resolve();
        cfg
    }

    #[test]
    fn run_emits_one_report_per_cycle() {
        let cfg = small_config();
        let reports = run_sim(&cfg, SchedulerKind::PotentialGame, 10, 3);
        assert_eq!(reports.len(), 10);
        for (c, r) in reports.iter().enumerate() {
            assert_eq!(r.cycle, c as u64);
            assert_eq!(r.scheduler, SchedulerKind::PotentialGame);
            assert_eq!(r.vehicle_utilities.len(), 6);
        }
        let csv = reports_to_csv(&reports);
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.ends_with('\n'));
    }

    #[test]
    fn identical_seeds_reproduce_identical_artifacts() {
        let cfg = small_config();
        for kind in SchedulerKind::ALL {
            let a = run_sim(&cfg, kind, 5, 42);
            let b = run_sim(&cfg, kind, 5, 42);
            assert_eq!(reports_to_csv(&a), reports_to_csv(&b), "{kind:?}");
            assert_eq!(
                summary_to_json(&aggregate_run(&a, 42)),
                summary_to_json(&aggregate_run(&b, 42)),
                "{kind:?}"
            );
        }
    }

    #[test]
    fn no_cooperation_matches_isolated_oracle() {
        let cfg = small_config();
        let mut sim = Simulation::new(&cfg, SchedulerKind::NoCooperation, 9);
        // Recompute the world this cycle will see, before stepping.
        let world = WorldState::capture(
            0,
            0.0,
            sim.vehicles(),
            sim.grids(),
            &cfg.scenario,
        );
        let report = sim.step();
        for (&i, req) in &world.req_regions {
            let expect = isolated_utility(i, req, &world.densities, sim.curve());
            assert_eq!(report.vehicle_utilities[&i], expect);
        }
        assert_eq!(report.early_bits + report.late_bits, 0.0);
        assert_eq!(report.overhead_mbps, 0.0);
        assert_eq!(report.schedule_entries, 0);
        assert_eq!(report.n_coalitions, 6);
        assert!(report.coalition_sizes.iter().all(|&s| s == 1));
        assert_eq!(report.violations, 0);
        assert!(report.deadline_ok);
    }

    #[test]
    fn cooperation_never_scores_below_isolation() {
        let cfg = small_config();
        let nc = run_sim(&cfg, SchedulerKind::NoCooperation, 5, 7);
        let ours = run_sim(&cfg, SchedulerKind::PotentialGame, 5, 7);
        // Same seed means the same world every cycle; late fusion alone
        // already dominates own-view utility.
        for (a, b) in nc.iter().zip(&ours) {
            assert!(
                a.system_utility <= b.system_utility + 1e-9,
                "cycle {}: {} > {}",
                a.cycle,
                a.system_utility,
                b.system_utility
            );
        }
    }

    #[test]
    fn stable_fleet_reuses_partition_until_horizon() {
        let mut cfg = small_config();
        cfg.scenario.speed_min = 0.0;
        cfg.scenario.speed_max = 0.0;
        // cycle_duration 0.1, t_stab 0.5: ages 0.1..=0.5 reuse, 0.6 reforms.
        let reports = run_sim(&cfg, SchedulerKind::PotentialGame, 8, 5);
        let reformed: Vec<bool> = reports.iter().map(|r| r.reformed).collect();
        assert_eq!(
            reformed,
            [true, false, false, false, false, false, true, false]
        );
    }

    #[test]
    fn fleet_without_cavs_yields_zero_reports() {
        let mut cfg = small_config();
        cfg.scenario.n_cavs = 0;
        for kind in SchedulerKind::ALL {
            let reports = run_sim(&cfg, kind, 2, 1);
            for r in &reports {
                assert_eq!(r.system_utility, 0.0, "{kind:?}");
                assert_eq!(r.overhead_mbps, 0.0);
                assert_eq!(r.n_coalitions, 0);
                assert_eq!(r.schedule_entries, 0);
                assert_eq!(r.potential, 0.0);
                assert!(r.deadline_ok);
                assert_eq!(r.violations, 0);
                assert!(r.vehicle_utilities.is_empty());
            }
        }
    }

    #[test]
    fn game_trace_ends_at_reported_potential() {
        let cfg = small_config();
        let reports = run_sim(&cfg, SchedulerKind::PotentialGame, 5, 11);
        for r in reports {
            let last = *r.potential_trace.last().expect("trace recorded");
            assert!(
                (last - r.potential).abs() <= 1e-9,
                "cycle {}: trace ends {last}, schedule potential {}",
                r.cycle,
                r.potential
            );
        }
    }

    #[test]
    fn batch_layout_and_flags() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = RunSpec {
            config: small_config(),
            schedulers: vec![SchedulerKind::NoCooperation, SchedulerKind::PotentialGame],
            cycles: 3,
            seeds: vec![1, 2],
            out_dir: tmp.path().to_path_buf(),
        };
        let out = run_batch(&spec).unwrap();
        assert_eq!(out.summaries.len(), 4);
        for name in ["nc-seed0001", "nc-seed0002", "ours-seed0001", "ours-seed0002"] {
            assert!(tmp.path().join(name).join("cycles.csv").is_file(), "{name}");
            assert!(tmp.path().join(name).join("summary.json").is_file(), "{name}");
        }
        let table = fs::read_to_string(tmp.path().join("comparison.csv")).unwrap();
        assert_eq!(table.lines().count(), 5);

        let viol = out
            .summaries
            .iter()
            .any(|s| s.total_violations > 0 || s.deadline_failures > 0);
        let noncon = out.summaries.iter().any(|s| {
            s.game_nonconverged_cycles > 0 || s.formation_nonconverged_cycles > 0
        });
        assert_eq!(out.any_violation, viol);
        assert_eq!(out.any_nonconvergence, noncon);
    }

    #[test]
    fn repeated_batches_write_identical_bytes() {
        let (t1, t2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut spec = RunSpec {
            config: small_config(),
            schedulers: vec![SchedulerKind::RandomSelection],
            cycles: 4,
            seeds: vec![9],
            out_dir: t1.path().to_path_buf(),
        };
        run_batch(&spec).unwrap();
        spec.out_dir = t2.path().to_path_buf();
        run_batch(&spec).unwrap();
        for rel in ["rs-seed0009/cycles.csv", "rs-seed0009/summary.json", "comparison.csv"] {
            let a = fs::read(t1.path().join(rel)).unwrap();
            let b = fs::read(t2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn spec_validation_rejects_degenerate_batches() {
        let base = RunSpec {
            config: SimConfig::default(),
            schedulers: vec![SchedulerKind::PotentialGame],
            cycles: 1,
            seeds: vec![0],
            out_dir: PathBuf::from("unused"),
        };
        assert!(base.validate().is_ok());
        let mut s = base.clone();
        s.cycles = 0;
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.seeds.clear();
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.seeds = vec![3, 3];
        assert!(s.validate().is_err());
        let mut s = base;
        s.schedulers.clear();
        assert!(s.validate().is_err());
    }
}
