//! Command-line front end. `run` executes one scheduler for one seed, `batch`
//! sweeps a scheduler-by-seed grid, `curve` and `rate-table` dump the utility
//! curve and the no-fading channel fixture as CSV for inspection.
//!
//! Exit status: 0 for a clean run, 1 when any schedule violation, missed
//! fusion deadline, or iteration-cap hit occurred (the outputs still record
//! it), 2 for unusable input.

use clap::{Args, Parser, Subcommand};
use coopsim::channel::{link_rate, pathloss_db, ChannelRealization, Schedule};
use coopsim::config::SimConfig;
use coopsim::geom::Vec2;
use coopsim::metrics::RunSummary;
use coopsim::scheduling::{SchedulerKind, UpdateMode};
use coopsim::sim::{run_batch, run_to_dir, RunSpec};
use coopsim::world::{GridId, VehicleId, VehicleState};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "coopsim", version, about = "Cooperative-perception fleet simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scheduler for one seed; writes cycles.csv and summary.json.
    Run(RunArgs),
    /// Run every scheduler-seed pair; adds a cross-run comparison.csv.
    Batch(BatchArgs),
    /// Print the utility curve as rho,utility CSV rows.
    Curve(CurveArgs),
    /// Print a no-fading rate-vs-distance CSV table for fixture checks.
    RateTable(RateTableArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; library defaults apply when omitted.
    config: Option<PathBuf>,
    /// One of ours, nc, rs, mug.
    #[arg(long, default_value = "ours")]
    scheduler: SchedulerKind,
    #[arg(long, default_value_t = 100)]
    cycles: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the config's update mode (sequential or synchronous).
    #[arg(long)]
    update_mode: Option<UpdateMode>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BatchArgs {
    /// TOML config file; library defaults apply when omitted.
    config: Option<PathBuf>,
    /// Comma-separated subset of ours,nc,rs,mug.
    #[arg(long, default_value = "ours,nc,rs,mug", value_delimiter = ',')]
    schedulers: Vec<SchedulerKind>,
    #[arg(long, default_value_t = 100)]
    cycles: u32,
    /// Comma-separated seeds; each item is a number or an end-exclusive a..b range.
    #[arg(long, default_value = "0..20", value_delimiter = ',')]
    seeds: Vec<String>,
    /// Override the config's update mode (sequential or synchronous).
    #[arg(long)]
    update_mode: Option<UpdateMode>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CurveArgs {
    /// TOML config file supplying the curve parameters.
    config: Option<PathBuf>,
    /// Largest density to tabulate; defaults to three saturation thresholds.
    #[arg(long)]
    max_rho: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
}

#[derive(Args)]
struct RateTableArgs {
    /// TOML config file supplying the channel parameters.
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 300.0)]
    max_distance: f64,
    #[arg(long, default_value_t = 10.0)]
    step: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Batch(a) => cmd_batch(a),
        Cmd::Curve(a) => cmd_curve(a),
        Cmd::RateTable(a) => cmd_rate_table(a),
    };
    match out {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<SimConfig, String> {
    match path {
        Some(p) => SimConfig::load(p).map_err(|e| e.to_string()),
        None => Ok(SimConfig::default()),
    }
}

fn flags_dirty(s: &RunSummary) -> bool {
    s.total_violations > 0
        || s.deadline_failures > 0
        || s.game_nonconverged_cycles > 0
        || s.formation_nonconverged_cycles > 0
}

fn print_summary(s: &RunSummary, dir: &Path) {
    println!(
        "{} seed {:>4}: utility {:>9.2}  overhead {:>7.2} Mbit/s  max delay {:.4} s  \
         coalitions {:.1}  game rounds {:.2}",
        s.scheduler,
        s.seed,
        s.system_utility.mean,
        s.overhead_mbps.mean,
        s.max_leader_delay_s.mean,
        s.n_coalitions.mean,
        s.game_rounds.mean,
    );
    if flags_dirty(s) {
        println!(
            "  flags: {} violations, {} deadline failures, {} game / {} formation \
             cycles at the iteration cap",
            s.total_violations,
            s.deadline_failures,
            s.game_nonconverged_cycles,
            s.formation_nonconverged_cycles,
        );
    }
    println!("  wrote {}", dir.display());
}

fn cmd_run(a: RunArgs) -> Result<ExitCode, String> {
    let mut cfg = load_config(&a.config)?;
    if let Some(mode) = a.update_mode {
        cfg.scheduler.update_mode = mode;
    }
    let dir = a
        .out_dir
        .join(format!("{}-seed{:04}", a.scheduler.flag(), a.seed));
    let summary = run_to_dir(&cfg, a.scheduler, a.cycles, a.seed, &dir)
        .map_err(|e| format!("writing {}: {e}", dir.display()))?;
    print_summary(&summary, &dir);
    Ok(if flags_dirty(&summary) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

/// Expands "7" to [7] and "a..b" to a..b end-exclusive.
fn parse_seeds(items: &[String]) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for item in items {
        let item = item.trim();
        if let Some((lo, hi)) = item.split_once("..") {
            let lo: u64 = lo.parse().map_err(|_| format!("bad seed range {item:?}"))?;
            let hi: u64 = hi.parse().map_err(|_| format!("bad seed range {item:?}"))?;
            if lo >= hi {
                return Err(format!("empty seed range {item:?}"));
            }
            out.extend(lo..hi);
        } else {
            out.push(item.parse().map_err(|_| format!("bad seed {item:?}"))?);
        }
    }
    Ok(out)
}

fn cmd_batch(a: BatchArgs) -> Result<ExitCode, String> {
    let mut cfg = load_config(&a.config)?;
    if let Some(mode) = a.update_mode {
        cfg.scheduler.update_mode = mode;
    }
    let spec = RunSpec {
        config: cfg,
        schedulers: a.schedulers,
        cycles: a.cycles,
        seeds: parse_seeds(&a.seeds)?,
        out_dir: a.out_dir.clone(),
    };
    spec.validate()?;
    let outcome = run_batch(&spec).map_err(|e| format!("writing {}: {e}", a.out_dir.display()))?;
    for s in &outcome.summaries {
        let dir = a.out_dir.join(format!("{}-seed{:04}", s.scheduler.flag(), s.seed));
        print_summary(s, &dir);
    }
    println!("  wrote {}", a.out_dir.join("comparison.csv").display());
    Ok(if outcome.clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// A closed pipe on a CSV dump (`coopsim curve | head`) is a normal way to
/// stop reading, not an error.
fn dump(body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<ExitCode, String> {
    let stdout = io::stdout();
    let mut w = io::BufWriter::new(stdout.lock());
    match body(&mut w).and_then(|()| w.flush()) {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(ExitCode::SUCCESS),
        Err(e) => Err(e.to_string()),
    }
}

fn cmd_curve(a: CurveArgs) -> Result<ExitCode, String> {
    if a.step <= 0.0 {
        return Err(format!("step must be positive, got {}", a.step));
    }
    let cfg = load_config(&a.config)?;
    let curve = cfg.curve.to_curve();
    let max_rho = a.max_rho.unwrap_or(3.0 * curve.rho_th);
    dump(move |w| {
        writeln!(w, "rho,utility")?;
        let mut rho = 0.0;
        while rho <= max_rho + 1e-12 {
            writeln!(w, "{rho:.4},{:.6}", curve.value(rho))?;
            rho += a.step;
        }
        Ok(())
    })
}

fn cmd_rate_table(a: RateTableArgs) -> Result<ExitCode, String> {
    if a.step <= 0.0 || a.max_distance < a.step {
        return Err(format!(
            "need 0 < step <= max-distance, got {} / {}",
            a.step, a.max_distance
        ));
    }
    let cfg = load_config(&a.config)?;
    let mut schedule = Schedule::default();
    schedule.insert(VehicleId(0), VehicleId(1), GridId(0), 0);
    dump(move |w| {
        writeln!(w, "distance_m,pathloss_db,rate_mbps")?;
        let mut d = a.step;
        while d <= a.max_distance + 1e-9 {
            let vehicles = vec![
                VehicleState::new(0, Vec2::new(0.0, 0.0), Vec2::ZERO, true),
                VehicleState::new(1, Vec2::new(d, 0.0), Vec2::ZERO, true),
            ];
            let realization = ChannelRealization::pathloss_only(&vehicles, 0, &cfg.channel);
            let rate = link_rate(
                VehicleId(0),
                VehicleId(1),
                0,
                &schedule,
                &realization,
                &cfg.channel,
            );
            writeln!(
                w,
                "{d:.1},{:.3},{:.3}",
                pathloss_db(d, cfg.channel.carrier_ghz),
                rate / 1e6
            )?;
            d += a.step;
        }
        Ok(())
    })
}
