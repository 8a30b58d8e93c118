//! Sidelink channel: per-cycle gain realizations, SINR rates, schedule
//! feasibility checks, and the per-cluster delay/deadline accounting.

use crate::coalition::Partition;
use crate::rng::{indexed_stream, normal, unit_exponential};
use crate::world::{negative, nonpositive, DensityField, GridId, VehicleId, VehicleState};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub carrier_ghz: f64,
    pub bandwidth_mhz: f64,
    pub n_subchannels: u16,
    pub noise_psd_dbm_hz: f64,
    pub shadowing_sigma_db: f64,
    /// Rayleigh small-scale fading on top of pathloss and shadowing.
    pub fading: bool,
    /// Bits transmitted per unit point density per grid.
    pub c0_bits: f64,
    /// Fusion compute cost, floating-point ops per input bit.
    pub n_bit: f64,
}

impl ChannelConfig {
    /// Upload volume scale for a given cell size: each point carries four
    /// 32-bit values, eight of those words per square meter of cell area.
    pub fn default_c0(grid_size: f64) -> f64 {
        8.0 * grid_size * grid_size * 32.0 * 4.0
    }

    pub fn subchannel_bandwidth_hz(&self) -> f64 {
        self.bandwidth_mhz * 1e6 / self.n_subchannels as f64
    }

    pub fn noise_power_dbm(&self) -> f64 {
        self.noise_psd_dbm_hz + 10.0 * self.subchannel_bandwidth_hz().log10()
    }

    pub fn validate(&self) -> Result<(), ChannelConfigError> {
        if self.n_subchannels < 1 {
            return Err(ChannelConfigError::NoSubchannels);
        }
        if nonpositive(self.bandwidth_mhz) || nonpositive(self.carrier_ghz) {
            return Err(ChannelConfigError::BadRadio {
                bandwidth_mhz: self.bandwidth_mhz,
                carrier_ghz: self.carrier_ghz,
            });
        }
        if nonpositive(self.c0_bits) || negative(self.n_bit) || negative(self.shadowing_sigma_db) {
            return Err(ChannelConfigError::BadScale {
                c0_bits: self.c0_bits,
                n_bit: self.n_bit,
                shadowing_sigma_db: self.shadowing_sigma_db,
            });
        }
        Ok(())
    }
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            carrier_ghz: 5.9,
            bandwidth_mhz: 40.0,
            n_subchannels: 10,
            noise_psd_dbm_hz: -174.0,
            shadowing_sigma_db: 4.0,
            fading: true,
            c0_bits: ChannelConfig::default_c0(10.0),
            n_bit: 100.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ChannelConfigError {
    #[error("need at least one subchannel")]
    NoSubchannels,
    #[error("bandwidth {bandwidth_mhz} MHz / carrier {carrier_ghz} GHz must be positive")]
    BadRadio { bandwidth_mhz: f64, carrier_ghz: f64 },
    #[error("bad scales: c0 {c0_bits}, n_bit {n_bit}, shadowing sigma {shadowing_sigma_db}")]
    BadScale {
        c0_bits: f64,
        n_bit: f64,
        shadowing_sigma_db: f64,
    },
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Urban V2X pathloss, distance floored at 1 m:
/// `32.4 + 21 log10(d) + 20 log10(f_c)` with `f_c` in GHz.
pub fn pathloss_db(distance: f64, carrier_ghz: f64) -> f64 {
    32.4 + 21.0 * distance.max(1.0).log10() + 20.0 * carrier_ghz.log10()
}

#[derive(Clone, Debug)]
struct PairGain {
    /// Pathloss plus shadowing, dB.
    loss_db: f64,
    /// Small-scale power multiplier per subchannel; all ones when fading is off.
    fading: Vec<f64>,
}

/// One cycle's link gains between every pair of connected vehicles.
///
/// Gains are reciprocal: pathloss and shadowing are drawn per unordered pair,
/// fading per unordered pair and subchannel. The draw for a pair depends only
/// on (seed, cycle, lower id, higher id), so a single link can be reproduced
/// without generating the rest.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    pub cycle: u64,
    n_subchannels: u16,
    gains: BTreeMap<(VehicleId, VehicleId), PairGain>,
    tx_power_dbm: BTreeMap<VehicleId, f64>,
}

fn pair_key(a: VehicleId, b: VehicleId) -> (VehicleId, VehicleId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl ChannelRealization {
    pub fn generate(
        vehicles: &[VehicleState],
        cycle: u64,
        seed: u64,
        cfg: &ChannelConfig,
    ) -> Self {
        let cavs: Vec<&VehicleState> = vehicles.iter().filter(|v| v.is_cav).collect();
        let mut gains = BTreeMap::new();
        for (ai, a) in cavs.iter().enumerate() {
            for b in cavs.iter().skip(ai + 1) {
                let (lo, hi) = pair_key(a.id, b.id);
                let mut rng =
                    indexed_stream(seed, "channel", &[cycle, lo.0 as u64, hi.0 as u64]);
                let shadow_db = cfg.shadowing_sigma_db * normal(&mut rng);
                let fading: Vec<f64> = (0..cfg.n_subchannels)
                    .map(|_| {
                        if cfg.fading {
                            unit_exponential(&mut rng)
                        } else {
                            1.0
                        }
                    })
                    .collect();
                let d = a.position.dist(b.position);
                gains.insert(
                    (lo, hi),
                    PairGain {
                        loss_db: pathloss_db(d, cfg.carrier_ghz) + shadow_db,
                        fading,
                    },
                );
            }
        }
        ChannelRealization {
            cycle,
            n_subchannels: cfg.n_subchannels,
            gains,
            tx_power_dbm: cavs.iter().map(|v| (v.id, v.tx_power_dbm)).collect(),
        }
    }

    /// Deterministic large-scale-only realization: pathloss, no shadowing,
    /// no fading. Used for fixtures and analytic checks.
    pub fn pathloss_only(vehicles: &[VehicleState], cycle: u64, cfg: &ChannelConfig) -> Self {
        let cavs: Vec<&VehicleState> = vehicles.iter().filter(|v| v.is_cav).collect();
        let mut gains = BTreeMap::new();
        for (ai, a) in cavs.iter().enumerate() {
            for b in cavs.iter().skip(ai + 1) {
                let d = a.position.dist(b.position);
                gains.insert(
                    pair_key(a.id, b.id),
                    PairGain {
                        loss_db: pathloss_db(d, cfg.carrier_ghz),
                        fading: vec![1.0; cfg.n_subchannels as usize],
                    },
                );
            }
        }
        ChannelRealization {
            cycle,
            n_subchannels: cfg.n_subchannels,
            gains,
            tx_power_dbm: cavs.iter().map(|v| (v.id, v.tx_power_dbm)).collect(),
        }
    }

    /// Linear power gain between two vehicles on a subchannel.
    pub fn gain(&self, a: VehicleId, b: VehicleId, k: u16) -> f64 {
        assert!(k < self.n_subchannels, "subchannel {k} out of range");
        let pg = self
            .gains
            .get(&pair_key(a, b))
            .unwrap_or_else(|| panic!("no gain drawn for pair {a}-{b}"));
        db_to_linear(-pg.loss_db) * pg.fading[k as usize]
    }

    pub fn tx_power_dbm(&self, i: VehicleId) -> f64 {
        self.tx_power_dbm
            .get(&i)
            .copied()
            .unwrap_or_else(|| panic!("no tx power recorded for {i}"))
    }
}

/// One scheduled upload: `from` sends its sensed density of `grid` to the
/// leader `to` on `subchannel`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Upload {
    pub from: VehicleId,
    pub to: VehicleId,
    pub subchannel: u16,
    pub grid: GridId,
}

/// Sparse upload decision set. A link (from, to, k) is active iff it carries
/// at least one grid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    entries: BTreeSet<Upload>,
}

impl Schedule {
    pub fn insert(&mut self, from: VehicleId, to: VehicleId, grid: GridId, subchannel: u16) {
        self.entries.insert(Upload {
            from,
            to,
            subchannel,
            grid,
        });
    }

    pub fn remove(&mut self, up: &Upload) -> bool {
        self.entries.remove(up)
    }

    pub fn contains(&self, from: VehicleId, to: VehicleId, grid: GridId, subchannel: u16) -> bool {
        self.entries.contains(&Upload {
            from,
            to,
            subchannel,
            grid,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Upload> {
        self.entries.iter()
    }

    pub fn extend(&mut self, other: &Schedule) {
        self.entries.extend(other.entries.iter().copied());
    }

    /// Distinct active links as (from, to, subchannel).
    pub fn links(&self) -> BTreeSet<(VehicleId, VehicleId, u16)> {
        self.entries
            .iter()
            .map(|u| (u.from, u.to, u.subchannel))
            .collect()
    }

    /// Vehicles with any active transmission on a subchannel.
    pub fn transmitters_on(&self, k: u16) -> BTreeSet<VehicleId> {
        self.entries
            .iter()
            .filter(|u| u.subchannel == k)
            .map(|u| u.from)
            .collect()
    }

    /// Grids carried by one link.
    pub fn grids_on_link(&self, from: VehicleId, to: VehicleId, k: u16) -> BTreeSet<GridId> {
        self.entries
            .iter()
            .filter(|u| u.from == from && u.to == to && u.subchannel == k)
            .map(|u| u.grid)
            .collect()
    }

    /// Links received by one vehicle.
    pub fn inbound_links(&self, to: VehicleId) -> BTreeSet<(VehicleId, u16)> {
        self.entries
            .iter()
            .filter(|u| u.to == to)
            .map(|u| (u.from, u.subchannel))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleViolation {
    /// Both directions of a pair active on one subchannel.
    HalfDuplex { a: VehicleId, b: VehicleId, subchannel: u16 },
    /// One ordered link spread over several subchannels.
    MultiSubchannel { from: VehicleId, to: VehicleId },
    /// Upload to a vehicle that leads no coalition.
    ReceiverNotLeader { from: VehicleId, to: VehicleId },
    /// Sender outside the receiving leader's coalition.
    SenderNotMember { from: VehicleId, to: VehicleId },
    SelfDirected { id: VehicleId },
    SubchannelOutOfRange { from: VehicleId, to: VehicleId, subchannel: u16 },
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleViolation::HalfDuplex { a, b, subchannel } => {
                write!(f, "half-duplex: {a}<->{b} both transmit on subchannel {subchannel}")
            }
            ScheduleViolation::MultiSubchannel { from, to } => {
                write!(f, "link {from}->{to} uses more than one subchannel")
            }
            ScheduleViolation::ReceiverNotLeader { from, to } => {
                write!(f, "upload {from}->{to} but {to} leads no coalition")
            }
            ScheduleViolation::SenderNotMember { from, to } => {
                write!(f, "upload {from}->{to} from outside the coalition")
            }
            ScheduleViolation::SelfDirected { id } => write!(f, "self-directed upload at {id}"),
            ScheduleViolation::SubchannelOutOfRange { from, to, subchannel } => {
                write!(f, "link {from}->{to} on nonexistent subchannel {subchannel}")
            }
        }
    }
}

/// Checks every structural constraint; returns all violations rather than
/// stopping at the first.
pub fn validate_schedule(
    schedule: &Schedule,
    partition: &Partition,
    n_subchannels: u16,
) -> Vec<ScheduleViolation> {
    let mut out = Vec::new();
    let links = schedule.links();

    let mut seen_pairs: BTreeSet<(VehicleId, VehicleId)> = BTreeSet::new();
    for &(from, to, k) in &links {
        if from == to {
            out.push(ScheduleViolation::SelfDirected { id: from });
            continue;
        }
        if k >= n_subchannels {
            out.push(ScheduleViolation::SubchannelOutOfRange { from, to, subchannel: k });
        }
        if links.contains(&(to, from, k)) && from < to {
            out.push(ScheduleViolation::HalfDuplex { a: from, b: to, subchannel: k });
        }
        if seen_pairs.contains(&(from, to)) {
            out.push(ScheduleViolation::MultiSubchannel { from, to });
        }
        seen_pairs.insert((from, to));
        match partition.led_by(to) {
            None => out.push(ScheduleViolation::ReceiverNotLeader { from, to }),
            Some(c) if !c.members.contains(&from) => {
                out.push(ScheduleViolation::SenderNotMember { from, to })
            }
            Some(_) => {}
        }
    }
    out
}

/// Shannon rate of an active link under the schedule's co-channel
/// interference. Every other vehicle transmitting anything on the same
/// subchannel interferes at the receiver; a transmitter's power counts once
/// regardless of how many grids it uploads.
pub fn link_rate(
    from: VehicleId,
    to: VehicleId,
    k: u16,
    schedule: &Schedule,
    realization: &ChannelRealization,
    cfg: &ChannelConfig,
) -> f64 {
    let b = cfg.subchannel_bandwidth_hz();
    let signal = db_to_linear(realization.tx_power_dbm(from)) * realization.gain(from, to, k);
    let noise = db_to_linear(cfg.noise_power_dbm());
    let interference: f64 = schedule
        .transmitters_on(k)
        .iter()
        .filter(|&&t| t != from && t != to)
        .map(|&t| db_to_linear(realization.tx_power_dbm(t)) * realization.gain(t, to, k))
        .sum();
    b * (1.0 + signal / (interference + noise)).log2()
}

/// Post-hoc SINR of a link in dB, same interference model as [`link_rate`].
pub fn link_sinr_db(
    from: VehicleId,
    to: VehicleId,
    k: u16,
    schedule: &Schedule,
    realization: &ChannelRealization,
    cfg: &ChannelConfig,
) -> f64 {
    let signal = db_to_linear(realization.tx_power_dbm(from)) * realization.gain(from, to, k);
    let noise = db_to_linear(cfg.noise_power_dbm());
    let interference: f64 = schedule
        .transmitters_on(k)
        .iter()
        .filter(|&&t| t != from && t != to)
        .map(|&t| db_to_linear(realization.tx_power_dbm(t)) * realization.gain(t, to, k))
        .sum();
    linear_to_db(signal / (interference + noise))
}

/// Upload volume of one link in bits: scheduled grid densities times c0.
pub fn scheduled_bits(
    from: VehicleId,
    to: VehicleId,
    k: u16,
    schedule: &Schedule,
    densities: &DensityField,
    cfg: &ChannelConfig,
) -> f64 {
    schedule
        .grids_on_link(from, to, k)
        .iter()
        .map(|&g| densities.rho(from, g) * cfg.c0_bits)
        .sum()
}

/// Airtime of one link: volume over rate. Zero volume takes zero time even on
/// a dead link.
pub fn transmission_delay(
    from: VehicleId,
    to: VehicleId,
    k: u16,
    schedule: &Schedule,
    densities: &DensityField,
    realization: &ChannelRealization,
    cfg: &ChannelConfig,
) -> f64 {
    let bits = scheduled_bits(from, to, k, schedule, densities, cfg);
    if bits == 0.0 {
        return 0.0;
    }
    let rate = link_rate(from, to, k, schedule, realization, cfg);
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    bits / rate
}

/// Fusion compute time at a leader: inbound bits times per-bit op cost over
/// the leader's compute capacity.
pub fn computation_delay(
    leader: VehicleId,
    schedule: &Schedule,
    densities: &DensityField,
    cfg: &ChannelConfig,
    compute_capacity: f64,
) -> f64 {
    let inbound_bits: f64 = schedule
        .inbound_links(leader)
        .iter()
        .map(|&(from, k)| scheduled_bits(from, leader, k, schedule, densities, cfg))
        .sum();
    inbound_bits * cfg.n_bit / compute_capacity
}

/// Wall-clock cost of a leader's fusion round: slowest inbound upload plus
/// the fusion compute time. Uploads run in parallel, compute starts after the
/// last one lands.
pub fn leader_delay(
    leader: VehicleId,
    schedule: &Schedule,
    densities: &DensityField,
    realization: &ChannelRealization,
    cfg: &ChannelConfig,
    compute_capacity: f64,
) -> f64 {
    let max_tx = schedule
        .inbound_links(leader)
        .iter()
        .map(|&(from, k)| transmission_delay(from, leader, k, schedule, densities, realization, cfg))
        .fold(0.0, f64::max);
    max_tx + computation_delay(leader, schedule, densities, cfg, compute_capacity)
}

/// Whether a leader's fusion round finishes inside the cycle.
pub fn check_deadline(
    leader: VehicleId,
    schedule: &Schedule,
    densities: &DensityField,
    realization: &ChannelRealization,
    cfg: &ChannelConfig,
    compute_capacity: f64,
    cycle_duration: f64,
) -> bool {
    leader_delay(leader, schedule, densities, realization, cfg, compute_capacity)
        <= cycle_duration
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coalition::{Coalition, Partition};
    use crate::geom::Vec2;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use rand::Rng;

    const PL_1M: f64 = 47.817040232842886;
    const PL_100M: f64 = 89.81704023284289;
    const NOISE_4MHZ: f64 = -107.97940008672038;

    fn cav_at(id: u32, x: f64, y: f64) -> VehicleState {
        VehicleState::new(id, Vec2::new(x, y), Vec2::ZERO, true)
    }

    fn leader_partition(leader: u32, members: &[u32]) -> Partition {
        Partition::new(
            vec![Coalition {
                members: members.iter().map(|&m| VehicleId(m)).collect(),
                leader: VehicleId(leader),
            }],
            0,
        )
    }

    #[test]
    fn pathloss_fixtures() {
        assert_relative_eq!(pathloss_db(1.0, 5.9), PL_1M, epsilon = 1e-9);
        assert!((pathloss_db(100.0, 5.9) - 89.817).abs() < 0.01);
        assert_relative_eq!(pathloss_db(100.0, 5.9), PL_100M, epsilon = 1e-9);
        // 21 dB per decade.
        assert_relative_eq!(
            pathloss_db(100.0, 5.9) - pathloss_db(10.0, 5.9),
            21.0,
            epsilon = 1e-12
        );
        // Sub-meter distances floor at the 1 m reference.
        assert_eq!(pathloss_db(0.2, 5.9), pathloss_db(1.0, 5.9));
        assert_eq!(pathloss_db(0.0, 5.9), pathloss_db(1.0, 5.9));
    }

    #[test]
    fn noise_power_fixture() {
        let cfg = ChannelConfig::default();
        assert_eq!(cfg.subchannel_bandwidth_hz(), 4e6);
        assert!((cfg.noise_power_dbm() - NOISE_4MHZ).abs() < 1e-9);
        assert!((cfg.noise_power_dbm() - -107.98).abs() < 0.01);
    }

    #[test]
    fn clean_link_rate_fixture() {
        let cfg = ChannelConfig::default();
        let vehicles = vec![cav_at(0, 0.0, 0.0), cav_at(1, 100.0, 0.0)];
        let real = ChannelRealization::pathloss_only(&vehicles, 0, &cfg);
        let mut schedule = Schedule::default();
        schedule.insert(VehicleId(0), VehicleId(1), GridId(0), 0);

        // Independent formula chain.
        let snr_db = 23.0 - PL_100M - NOISE_4MHZ;
        assert_relative_eq!(snr_db, 41.16235985387749, epsilon = 1e-9);
        let expect = 4e6 * (1.0 + db_to_linear(snr_db)).log2();

        let rate = link_rate(VehicleId(0), VehicleId(1), 0, &schedule, &real, &cfg);
        assert_relative_eq!(rate, expect, max_relative = 1e-12);
        assert!(
            (rate - 54.7e6).abs() / 54.7e6 < 0.01,
            "rate {:.4} Mbit/s off the 54.7 fixture",
            rate / 1e6
        );
    }

    #[test]
    fn rate_monotone_in_interference_and_gain() {
        let cfg = ChannelConfig::default();
        let vehicles = vec![
            cav_at(0, 0.0, 0.0),
            cav_at(1, 100.0, 0.0),
            cav_at(2, 150.0, 50.0),
            cav_at(3, 300.0, 300.0),
        ];
        let real = ChannelRealization::pathloss_only(&vehicles, 0, &cfg);
        let mut clean = Schedule::default();
        clean.insert(VehicleId(0), VehicleId(1), GridId(0), 3);
        let r_clean = link_rate(VehicleId(0), VehicleId(1), 3, &clean, &real, &cfg);

        // Co-channel interferer strictly lowers the rate.
        let mut interfered = clean.clone();
        interfered.insert(VehicleId(2), VehicleId(3), GridId(1), 3);
        let r_int = link_rate(VehicleId(0), VehicleId(1), 3, &interfered, &real, &cfg);
        assert!(r_int < r_clean);

        // Same transmitter on another subchannel does not interfere.
        let mut other_k = clean.clone();
        other_k.insert(VehicleId(2), VehicleId(3), GridId(1), 4);
        let r_other = link_rate(VehicleId(0), VehicleId(1), 3, &other_k, &real, &cfg);
        assert_eq!(r_other, r_clean);

        // Shorter link: higher gain, higher rate.
        let near = vec![cav_at(0, 0.0, 0.0), cav_at(1, 40.0, 0.0)];
        let real_near = ChannelRealization::pathloss_only(&near, 0, &cfg);
        let r_near = link_rate(VehicleId(0), VehicleId(1), 3, &clean, &real_near, &cfg);
        assert!(r_near > r_clean);

        // Vanishing gain: rate towards zero.
        let far = vec![cav_at(0, 0.0, 0.0), cav_at(1, 1e9, 0.0)];
        let real_far = ChannelRealization::pathloss_only(&far, 0, &cfg);
        let r_far = link_rate(VehicleId(0), VehicleId(1), 3, &clean, &real_far, &cfg);
        assert!(r_far < 1.0, "rate {r_far} should be ~0");
    }

    #[test]
    fn realization_reproducible_and_reciprocal() {
        let cfg = ChannelConfig::default();
        let vehicles: Vec<VehicleState> = (0..6)
            .map(|i| cav_at(i, 37.0 * i as f64, 11.0 * (i % 3) as f64))
            .collect();
        let a = ChannelRealization::generate(&vehicles, 5, 99, &cfg);
        let b = ChannelRealization::generate(&vehicles, 5, 99, &cfg);
        let c = ChannelRealization::generate(&vehicles, 6, 99, &cfg);
        let d = ChannelRealization::generate(&vehicles, 5, 100, &cfg);

        let mut saw_cycle_diff = false;
        let mut saw_seed_diff = false;
        for i in 0..6u32 {
            for j in 0..6u32 {
                if i == j {
                    continue;
                }
                let (vi, vj) = (VehicleId(i), VehicleId(j));
                for k in 0..cfg.n_subchannels {
                    let g = a.gain(vi, vj, k);
                    assert!(g > 0.0);
                    assert_eq!(g, b.gain(vi, vj, k), "same seed+cycle must agree");
                    assert_eq!(g, a.gain(vj, vi, k), "reciprocity");
                    saw_cycle_diff |= g != c.gain(vi, vj, k);
                    saw_seed_diff |= g != d.gain(vi, vj, k);
                }
            }
        }
        assert!(saw_cycle_diff && saw_seed_diff);

        // Fading varies across subchannels; shadowing is shared within a pair.
        let g0 = a.gain(VehicleId(0), VehicleId(1), 0);
        let g1 = a.gain(VehicleId(0), VehicleId(1), 1);
        assert_ne!(g0, g1);
    }

    #[test]
    fn validate_flags_each_constraint() {
        let partition = leader_partition(0, &[0, 1, 2]);
        let k_max = 10;

        assert!(validate_schedule(&Schedule::default(), &partition, k_max).is_empty());

        let mut ok = Schedule::default();
        ok.insert(VehicleId(1), VehicleId(0), GridId(3), 2);
        ok.insert(VehicleId(2), VehicleId(0), GridId(4), 5);
        assert!(validate_schedule(&ok, &partition, k_max).is_empty());

        let mut half = Schedule::default();
        half.insert(VehicleId(1), VehicleId(0), GridId(3), 2);
        half.insert(VehicleId(0), VehicleId(1), GridId(4), 2);
        let v = validate_schedule(&half, &partition, k_max);
        assert!(v.iter().any(|x| matches!(x, ScheduleViolation::HalfDuplex { .. })), "{v:?}");

        let mut multi = Schedule::default();
        multi.insert(VehicleId(1), VehicleId(0), GridId(3), 2);
        multi.insert(VehicleId(1), VehicleId(0), GridId(4), 3);
        let v = validate_schedule(&multi, &partition, k_max);
        assert!(v.iter().any(|x| matches!(x, ScheduleViolation::MultiSubchannel { .. })), "{v:?}");

        let mut outsider = Schedule::default();
        outsider.insert(VehicleId(7), VehicleId(0), GridId(3), 2);
        let v = validate_schedule(&outsider, &partition, k_max);
        assert!(v.iter().any(|x| matches!(x, ScheduleViolation::SenderNotMember { .. })), "{v:?}");

        let mut wrong_leader = Schedule::default();
        wrong_leader.insert(VehicleId(2), VehicleId(1), GridId(3), 2);
        let v = validate_schedule(&wrong_leader, &partition, k_max);
        assert!(v.iter().any(|x| matches!(x, ScheduleViolation::ReceiverNotLeader { .. })), "{v:?}");

        let mut bad_k = Schedule::default();
        bad_k.insert(VehicleId(1), VehicleId(0), GridId(3), 10);
        let v = validate_schedule(&bad_k, &partition, k_max);
        assert!(v.iter().any(|x| matches!(x, ScheduleViolation::SubchannelOutOfRange { .. })), "{v:?}");
    }

    #[test]
    fn transmission_delay_fixture() {
        let cfg = ChannelConfig::default();
        let vehicles = vec![cav_at(0, 0.0, 0.0), cav_at(1, 100.0, 0.0)];
        let real = ChannelRealization::pathloss_only(&vehicles, 0, &cfg);

        let empty = Schedule::default();
        assert_eq!(
            transmission_delay(VehicleId(0), VehicleId(1), 0, &empty, &DensityField::default(), &real, &cfg),
            0.0
        );

        // One grid carrying exactly 5.47 Mbit.
        let rho = 5.47e6 / cfg.c0_bits;
        let mut densities = DensityField::default();
        densities
            .by_vehicle
            .entry(VehicleId(0))
            .or_default()
            .insert(GridId(0), rho);
        let mut schedule = Schedule::default();
        schedule.insert(VehicleId(0), VehicleId(1), GridId(0), 0);
        let t = transmission_delay(VehicleId(0), VehicleId(1), 0, &schedule, &densities, &real, &cfg);
        assert!((t - 0.1).abs() / 0.1 < 0.01, "delay {t}");

        // Linear in volume.
        densities
            .by_vehicle
            .get_mut(&VehicleId(0))
            .unwrap()
            .insert(GridId(0), 2.0 * rho);
        let t2 = transmission_delay(VehicleId(0), VehicleId(1), 0, &schedule, &densities, &real, &cfg);
        assert_relative_eq!(t2, 2.0 * t, max_relative = 1e-12);
    }

    #[test]
    fn computation_delay_fixture() {
        let cfg = ChannelConfig::default();
        let mut densities = DensityField::default();
        // Inbound volume 10 Mbit = rho * c0.
        densities
            .by_vehicle
            .entry(VehicleId(1))
            .or_default()
            .insert(GridId(0), 1e7 / cfg.c0_bits);
        let mut schedule = Schedule::default();
        schedule.insert(VehicleId(1), VehicleId(0), GridId(0), 0);

        assert_eq!(
            computation_delay(VehicleId(0), &Schedule::default(), &densities, &cfg, 1e12),
            0.0
        );
        let t = computation_delay(VehicleId(0), &schedule, &densities, &cfg, 1e12);
        assert_relative_eq!(t, 1e-3, max_relative = 1e-12);
        assert_relative_eq!(
            computation_delay(VehicleId(0), &schedule, &densities, &cfg, 2e12),
            t / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn deadline_fixture_and_monotonicity() {
        let cfg = ChannelConfig::default();
        let vehicles = vec![cav_at(0, 0.0, 0.0), cav_at(1, 100.0, 0.0)];
        let real = ChannelRealization::pathloss_only(&vehicles, 0, &cfg);
        let densities = {
            let mut d = DensityField::default();
            d.by_vehicle
                .entry(VehicleId(0))
                .or_default()
                .insert(GridId(0), 5.47e6 / cfg.c0_bits);
            d
        };

        assert!(check_deadline(
            VehicleId(1), &Schedule::default(), &densities, &real, &cfg, 1e12, 0.1
        ));

        // ~0.1 s of airtime plus any compute misses a 0.1 s cycle.
        let mut schedule = Schedule::default();
        schedule.insert(VehicleId(0), VehicleId(1), GridId(0), 0);
        assert!(!check_deadline(
            VehicleId(1), &schedule, &densities, &real, &cfg, 1e12, 0.1
        ));

        // Removing uploads never flips a passing deadline to failing.
        let mut rng = stream(23, "deadline-mono");
        let fleet: Vec<VehicleState> = (0..5)
            .map(|i| {
                cav_at(
                    i,
                    rng.random::<f64>() * 120.0,
                    rng.random::<f64>() * 120.0,
                )
            })
            .collect();
        for trial in 0..50 {
            let real = ChannelRealization::generate(&fleet, trial, 7, &cfg);
            let mut densities = DensityField::default();
            for i in 0..5u32 {
                for g in 0..6u32 {
                    densities
                        .by_vehicle
                        .entry(VehicleId(i))
                        .or_default()
                        .insert(GridId(g), rng.random::<f64>() * 3.0);
                }
            }
            let mut schedule = Schedule::default();
            for i in 1..5u32 {
                let k = rng.random_range(0..cfg.n_subchannels);
                for g in 0..6u32 {
                    if rng.random::<f64>() < 0.5 {
                        schedule.insert(VehicleId(i), VehicleId(0), GridId(g), k);
                    }
                }
            }
            let before = check_deadline(VehicleId(0), &schedule, &densities, &real, &cfg, 1e12, 0.1);
            let victim = match schedule.entries().next() {
                Some(v) => *v,
                None => continue,
            };
            let mut smaller = schedule.clone();
            smaller.remove(&victim);
            let after = check_deadline(VehicleId(0), &smaller, &densities, &real, &cfg, 1e12, 0.1);
            assert!(!(before && !after), "removal broke a met deadline");
        }
    }
}
