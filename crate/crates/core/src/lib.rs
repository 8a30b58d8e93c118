//! Deterministic cooperative-perception simulator.
//!
//! Models a fleet of vehicles that sense a gridded plane, form collaboration
//! clusters through a hedonic coalition game, and schedule point-cloud uploads
//! to cluster leaders by playing an exact potential game over shared
//! subchannels. Ships with three reference schedulers (no cooperation, random
//! links, greedy utility gain), an SINR channel model with per-cycle delay
//! deadlines, and byte-reproducible CSV/JSON reporting.
//!
//! The crate is organized along the simulation pipeline:
//!
//! * [`world`] — scenario config, grid geometry, mobility, sensed densities.
//! * [`perception`] — saturating utility curve, density fusion, utilities.
//! * [`channel`] — pathloss/shadowing/fading, rates, delays, schedule checks.
//! * [`coalition`] — coalition values, leader election, cluster formation.
//! * [`scheduling`] — the potential game, its best responses, and baselines.
//! * [`metrics`] — per-cycle reports and run aggregation.
//! * [`sim`] — the per-cycle loop, single runs, and batches.
//!
//! Everything stochastic draws from named substreams of one run seed, so a
//! run is a pure function of its [`config::SimConfig`] and produces identical
//! output files on every invocation.

pub mod channel;
pub mod coalition;
pub mod config;
pub mod geom;
pub mod metrics;
pub mod perception;
pub mod rng;
pub mod scheduling;
pub mod sim;
pub mod world;
