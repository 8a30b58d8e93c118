//! Per-cycle evaluation quantities and run-level aggregation: system
//! utility, communication overhead split into early and late fusion parts,
//! delay and convergence counters, plus the CSV/JSON emission used by the
//! batch runner.

use crate::channel::{scheduled_bits, ChannelConfig, Schedule};
use crate::perception::FusedDensity;
use crate::scheduling::SchedulerKind;
use crate::world::{negative, nonpositive, DensityField, VehicleId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Density at which a grid counts as a detected object for late-fusion
    /// message sizing, points/m².
    pub rho_det: f64,
    /// Per-detection broadcast payload, bytes.
    pub b_det_bytes: u32,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            rho_det: 0.5,
            b_det_bytes: 1024,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if negative(self.rho_det) {
            return Err(format!("rho_det must be non-negative, got {}", self.rho_det));
        }
        Ok(())
    }
}

/// Bits on the air in one cycle, split by fusion stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadBreakdown {
    pub early_bits: f64,
    pub late_bits: f64,
}

impl OverheadBreakdown {
    pub fn total_bits(&self) -> f64 {
        self.early_bits + self.late_bits
    }

    pub fn mbps(&self, cycle_duration: f64) -> f64 {
        assert!(!nonpositive(cycle_duration), "cycle duration {cycle_duration}");
        self.total_bits() / cycle_duration / 1e6
    }
}

/// Early fusion: every scheduled upload contributes its payload exactly once.
/// Late fusion: each broadcaster sends one detection message per grid whose
/// fused density clears the detection proxy.
pub fn comm_overhead(
    schedule: &Schedule,
    densities: &DensityField,
    fused: &FusedDensity,
    broadcasters: &[VehicleId],
    channel: &ChannelConfig,
    cfg: &MetricsConfig,
) -> OverheadBreakdown {
    // `+ 0.0` maps the -0.0 an empty f64 sum yields back to +0.0 for output.
    let early_bits: f64 = schedule
        .links()
        .into_iter()
        .map(|(from, to, k)| scheduled_bits(from, to, k, schedule, densities, channel))
        .sum::<f64>()
        + 0.0;
    let per_detection = f64::from(cfg.b_det_bytes) * 8.0;
    let late_bits: f64 = broadcasters
        .iter()
        .map(|&i| {
            let detections = fused
                .by_vehicle
                .get(&i)
                .map(|m| m.values().filter(|&&rho| rho >= cfg.rho_det).count())
                .unwrap_or(0);
            detections as f64 * per_detection
        })
        .sum::<f64>()
        + 0.0;
    OverheadBreakdown {
        early_bits,
        late_bits,
    }
}

/// Everything recorded about one cycle. Serialized as one CSV row; the
/// column order is fixed by `csv_header`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: u64,
    pub scheduler: SchedulerKind,
    pub system_utility: f64,
    pub early_bits: f64,
    pub late_bits: f64,
    pub overhead_mbps: f64,
    pub max_leader_delay_s: f64,
    pub n_coalitions: usize,
    /// Member counts in partition order.
    pub coalition_sizes: Vec<usize>,
    pub reformed: bool,
    pub formation_rounds: u32,
    pub formation_converged: bool,
    pub game_rounds: u32,
    pub game_converged: bool,
    /// Potential of the final emitted schedule.
    pub potential: f64,
    /// In-game trace, one value per update slot; empty for baselines.
    pub potential_trace: Vec<f64>,
    pub starved_members: u32,
    pub deadline_drops: u32,
    pub schedule_links: usize,
    pub schedule_entries: usize,
    pub violations: usize,
    pub deadline_ok: bool,
    pub vehicle_utilities: BTreeMap<VehicleId, f64>,
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: char) -> String {
    let mut out = String::new();
    for (n, item) in items.into_iter().enumerate() {
        if n > 0 {
            out.push(sep);
        }
        out.push_str(&item.to_string());
    }
    out
}

impl CycleReport {
    /// Column names, in emission order. Per-vehicle utility columns come
    /// last, named by CAV id.
    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "cycle".into(),
            "scheduler".into(),
            "system_utility".into(),
            "early_bits".into(),
            "late_bits".into(),
            "overhead_mbps".into(),
            "max_leader_delay_s".into(),
            "n_coalitions".into(),
            "coalition_sizes".into(),
            "reformed".into(),
            "formation_rounds".into(),
            "formation_converged".into(),
            "game_rounds".into(),
            "game_converged".into(),
            "potential".into(),
            "potential_trace".into(),
            "starved_members".into(),
            "deadline_drops".into(),
            "schedule_links".into(),
            "schedule_entries".into(),
            "violations".into(),
            "deadline_ok".into(),
        ];
        for id in self.vehicle_utilities.keys() {
            cols.push(format!("u_{id}"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut row = String::new();
        let _ = write!(
            row,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cycle,
            self.scheduler,
            self.system_utility,
            self.early_bits,
            self.late_bits,
            self.overhead_mbps,
            self.max_leader_delay_s,
            self.n_coalitions,
            join(self.coalition_sizes.iter(), '|'),
            self.reformed,
            self.formation_rounds,
            self.formation_converged,
            self.game_rounds,
            self.game_converged,
            self.potential,
            join(self.potential_trace.iter(), ';'),
            self.starved_members,
            self.deadline_drops,
            self.schedule_links,
            self.schedule_entries,
            self.violations,
            self.deadline_ok,
        );
        for u in self.vehicle_utilities.values() {
            let _ = write!(row, ",{u}");
        }
        row
    }
}

/// Mean, population standard deviation, and range of one scalar over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn over(values: impl IntoIterator<Item = f64>) -> Stat {
        let values: Vec<f64> = values.into_iter().collect();
        if values.is_empty() {
            return Stat::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Stat {
            mean,
            std: var.sqrt(),
            min,
            max,
        }
    }
}

/// Run-level aggregate written as summary.json.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scheduler: SchedulerKind,
    pub seed: u64,
    pub cycles: usize,
    pub system_utility: Stat,
    pub early_bits: Stat,
    pub late_bits: Stat,
    pub overhead_mbps: Stat,
    pub max_leader_delay_s: Stat,
    pub n_coalitions: Stat,
    pub formation_rounds: Stat,
    pub game_rounds: Stat,
    pub potential: Stat,
    pub game_nonconverged_cycles: usize,
    pub formation_nonconverged_cycles: usize,
    pub total_starved_members: u64,
    pub total_deadline_drops: u64,
    pub total_violations: u64,
    pub deadline_failures: usize,
}

pub fn aggregate_run(reports: &[CycleReport], seed: u64) -> RunSummary {
    assert!(!reports.is_empty(), "cannot aggregate an empty run");
    let scheduler = reports[0].scheduler;
    debug_assert!(reports.iter().all(|r| r.scheduler == scheduler));
    let of = |f: fn(&CycleReport) -> f64| Stat::over(reports.iter().map(f));
    RunSummary {
        scheduler,
        seed,
        cycles: reports.len(),
        system_utility: of(|r| r.system_utility),
        early_bits: of(|r| r.early_bits),
        late_bits: of(|r| r.late_bits),
        overhead_mbps: of(|r| r.overhead_mbps),
        max_leader_delay_s: of(|r| r.max_leader_delay_s),
        n_coalitions: of(|r| r.n_coalitions as f64),
        formation_rounds: of(|r| f64::from(r.formation_rounds)),
        game_rounds: of(|r| f64::from(r.game_rounds)),
        potential: of(|r| r.potential),
        game_nonconverged_cycles: reports.iter().filter(|r| !r.game_converged).count(),
        formation_nonconverged_cycles: reports.iter().filter(|r| !r.formation_converged).count(),
        total_starved_members: reports.iter().map(|r| u64::from(r.starved_members)).sum(),
        total_deadline_drops: reports.iter().map(|r| u64::from(r.deadline_drops)).sum(),
        total_violations: reports.iter().map(|r| r.violations as u64).sum(),
        deadline_failures: reports.iter().filter(|r| !r.deadline_ok).count(),
    }
}

/// One CSV document for a whole run: header plus one row per cycle,
/// terminated by a newline. Byte-stable for identical inputs.
pub fn reports_to_csv(reports: &[CycleReport]) -> String {
    assert!(!reports.is_empty());
    let header = reports[0].csv_header();
    let mut out = String::with_capacity(reports.len() * 256);
    out.push_str(&header);
    out.push('\n');
    for r in reports {
        debug_assert_eq!(r.csv_header(), header, "per-CAV columns shifted mid-run");
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn summary_to_json(summary: &RunSummary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}
