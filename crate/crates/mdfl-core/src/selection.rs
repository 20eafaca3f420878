//! Device utilities and round selection strategies.
//!
//! Every device reporting in carries three utilities whose product ranks it:
//!
//! - statistical: `|X| * sqrt(mean of squared per-sample losses)` of the
//!   global model it last received -- high-loss data promises stronger
//!   gradients;
//! - system: `ln(threshold / drain)` while the energy budget lasts, zero
//!   once it is spent -- devices burning their budget fall out of favor;
//! - time: 1 while the device finishes rounds within `t_max`, else
//!   `alpha * t_max / t_prev` -- slow devices are penalized, harder for
//!   smaller `alpha`.
//!
//! The user-centered strategy picks the top `C` devices by unified utility,
//! greedily, subject to spreading them over at most `ceil(C / rho)` users
//! with at most `rho` devices each. Sampling whole groups of time-aligned
//! devices per user is what lets a round trade device heterogeneity against
//! user heterogeneity.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::device_key;
use crate::error::{Error, Result};
use crate::fx;
use crate::profiles::DeviceRuntimeState;
use crate::rng;

/// Utility components of one device for one round. `unified` is always the
/// product of the three components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilityReport {
    pub device: String,
    pub stat: f64,
    pub system: f64,
    pub time: f64,
    pub unified: f64,
    pub round_computed: u32,
}

impl UtilityReport {
    pub fn new(device: String, stat: f64, system: f64, time: f64, round_computed: u32) -> Self {
        Self {
            device,
            stat,
            system,
            time,
            unified: unified_utility(stat, system, time),
            round_computed,
        }
    }
}

/// Statistical utility: `|X| * sqrt((1/|X|) * sum L(k)^2)`.
pub fn stat_utility(per_sample_losses: &[f64]) -> Result<f64> {
    if per_sample_losses.is_empty() {
        return Err(Error::Domain("stat_utility requires at least one loss".into()));
    }
    if per_sample_losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::Domain("losses must be finite and non-negative".into()));
    }
    let n = per_sample_losses.len() as f64;
    let mean_sq = per_sample_losses.iter().map(|l| l * l).sum::<f64>() / n;
    Ok(n * fx::sqrt(mean_sq))
}

/// System utility: 0 once `drain >= threshold`, otherwise
/// `ln(threshold / max(drain, floor_fraction * threshold))`. The floor keeps
/// a never-trained device's utility finite (natural log throughout).
pub fn system_utility(drain: f64, drain_threshold: f64, drain_floor_fraction: f64) -> f64 {
    if drain >= drain_threshold {
        return 0.0;
    }
    let floor = drain_floor_fraction * drain_threshold;
    fx::ln(drain_threshold / drain.max(floor))
}

/// Time utility: 1 for devices with no history or a previous round within
/// `t_max`; otherwise `alpha * t_max / t_prev`.
pub fn time_utility(t_prev: Option<f64>, t_max: f64, alpha: f64) -> f64 {
    match t_prev {
        Some(t) if t > t_max => alpha * t_max / t,
        _ => 1.0,
    }
}

/// Unified utility: the product of the three components.
pub fn unified_utility(stat: f64, system: f64, time: f64) -> f64 {
    stat * system * time
}

/// Knobs of the user-centered strategy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionConfig {
    /// Devices selected per round (`C`).
    pub devices_per_round: usize,
    /// Devices taken per selected user (`rho`), trading user heterogeneity
    /// against device heterogeneity.
    pub rho: usize,
    pub t_max: f64,
    pub alpha: f64,
    /// Utility granted to devices that never reported; the round loop sets
    /// it to the current maximum unified utility so unseen devices are
    /// eventually tried.
    pub exploration_utility: f64,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices_per_round == 0 {
            return Err(Error::Config("devices_per_round must be >= 1".into()));
        }
        if self.rho == 0 {
            return Err(Error::Config("rho must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        if self.t_max <= 0.0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        Ok(())
    }

    /// Users opened per round: `ceil(C / rho)`; when `C % rho != 0` the last
    /// opened user contributes only the remainder.
    pub fn max_users(&self) -> usize {
        self.devices_per_round.div_ceil(self.rho)
    }
}

/// A round's pick. `shortfall` flags that fewer than the requested `C`
/// devices were available under the constraints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub devices: Vec<String>,
    pub shortfall: bool,
}

mod streams {
    pub const BOOTSTRAP: u64 = 0x4d44_464c_4001;
    pub const RANDOM: u64 = 0x4d44_464c_4002;
}

/// User-centered utility-driven selection.
///
/// Round 0 has no reports, so `C` devices are drawn uniformly, spread over
/// `ceil(C / rho)` users. Later rounds walk devices in descending unified
/// utility (ties broken by ascending key) and accept one when its user is
/// already open with fewer than `rho` accepted devices, or fewer than
/// `ceil(C / rho)` users are open. Devices with zero utility are never
/// selected; devices without a report score `cfg.exploration_utility`.
///
/// `topology` must contain only devices that are still valid.
pub fn select_flame(
    reports: &BTreeMap<String, UtilityReport>,
    topology: &[(String, Vec<String>)],
    cfg: &SelectionConfig,
    round: u32,
    seed: u64,
) -> Result<Selection> {
    cfg.validate()?;
    if topology.is_empty() {
        return Ok(Selection {
            devices: Vec::new(),
            shortfall: true,
        });
    }
    if round == 0 {
        return Ok(bootstrap_round(topology, cfg, seed));
    }

    let mut scored: Vec<(f64, String, &str)> = Vec::new();
    for (user, devices) in topology {
        for device in devices {
            let key = device_key(user, device);
            let utility = reports
                .get(&key)
                .map(|r| r.unified)
                .unwrap_or(cfg.exploration_utility);
            if utility > 0.0 {
                scored.push((utility, key, user.as_str()));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

    let max_users = cfg.max_users();
    let mut per_user: BTreeMap<&str, usize> = BTreeMap::new();
    let mut picked = Vec::with_capacity(cfg.devices_per_round);
    for (_, key, user) in &scored {
        if picked.len() == cfg.devices_per_round {
            break;
        }
        match per_user.get_mut(user) {
            Some(count) => {
                if *count < cfg.rho {
                    *count += 1;
                    picked.push(key.clone());
                }
            }
            None => {
                if per_user.len() < max_users {
                    per_user.insert(user, 1);
                    picked.push(key.clone());
                }
            }
        }
    }
    let shortfall = picked.len() < cfg.devices_per_round;
    Ok(Selection {
        devices: picked,
        shortfall,
    })
}

fn bootstrap_round(
    topology: &[(String, Vec<String>)],
    cfg: &SelectionConfig,
    seed: u64,
) -> Selection {
    let mut r = rng::rng_from(rng::mix(seed, &[streams::BOOTSTRAP]));
    let mut users: Vec<&(String, Vec<String>)> = topology.iter().collect();
    users.sort_by(|a, b| a.0.cmp(&b.0));
    users.shuffle(&mut r);
    let max_users = cfg.max_users();
    let mut picked = Vec::with_capacity(cfg.devices_per_round);
    for (i, (user, devices)) in users.iter().take(max_users).enumerate() {
        let remainder = cfg.devices_per_round - (i * cfg.rho).min(cfg.devices_per_round);
        let quota = cfg.rho.min(remainder);
        let mut devs: Vec<&String> = devices.iter().collect();
        devs.sort();
        devs.shuffle(&mut r);
        for device in devs.into_iter().take(quota) {
            picked.push(device_key(user, device));
        }
    }
    let shortfall = picked.len() < cfg.devices_per_round;
    Selection {
        devices: picked,
        shortfall,
    }
}

/// Uniform sampling of `count` devices without replacement, ignoring user
/// structure. `topology` must contain only valid devices.
pub fn select_random(topology: &[(String, Vec<String>)], count: usize, seed: u64) -> Selection {
    let mut keys: Vec<String> = topology
        .iter()
        .flat_map(|(u, devs)| devs.iter().map(|d| device_key(u, d)))
        .collect();
    keys.sort();
    let mut r = rng::rng_from(rng::mix(seed, &[streams::RANDOM]));
    keys.shuffle(&mut r);
    keys.truncate(count);
    let shortfall = keys.len() < count;
    Selection {
        devices: keys,
        shortfall,
    }
}

/// Simplified utility-and-latency baseline: rank by
/// `stat * (t_max / t_prev)^alpha` (penalty active only when the previous
/// round exceeded `t_max`), take the top `count`. No user constraint and no
/// energy term; an approximation of statistical-plus-latency selection, not
/// a faithful reproduction of any published scheduler. Devices without loss
/// history score at the current maximum statistical utility so they get
/// tried. `states` must contain only valid devices.
pub fn select_oort_like(
    states: &BTreeMap<String, DeviceRuntimeState>,
    count: usize,
    t_max: f64,
    alpha: f64,
) -> Result<Selection> {
    if alpha < 0.0 {
        return Err(Error::Config("alpha must be non-negative".into()));
    }
    let mut best_stat = 0.0_f64;
    let mut scored: Vec<(f64, &String)> = Vec::with_capacity(states.len());
    let mut unseen: Vec<&String> = Vec::new();
    for (key, state) in states {
        match &state.last_per_sample_losses {
            Some(losses) => {
                let stat = stat_utility(losses)?;
                best_stat = best_stat.max(stat);
                let penalty = match state.last_round_time {
                    Some(t) if t > t_max => fx::pow(t_max / t, alpha),
                    _ => 1.0,
                };
                scored.push((stat * penalty, key));
            }
            None => unseen.push(key),
        }
    }
    let bootstrap = if best_stat > 0.0 { best_stat } else { 1.0 };
    for key in unseen {
        scored.push((bootstrap, key));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let devices: Vec<String> = scored.iter().take(count).map(|(_, k)| (*k).clone()).collect();
    let shortfall = devices.len() < count;
    Ok(Selection {
        devices,
        shortfall,
    })
}
