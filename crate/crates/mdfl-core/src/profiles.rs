//! Hardware energy/latency profiles, network bandwidth assignment, and
//! per-device runtime accounting.
//!
//! Hardware profiles carry a measured reference round (training time and
//! energy at `ref_epochs` epochs over `ref_samples` samples); actual rounds
//! scale both linearly in `epochs * samples`. Network profiles are per-user:
//! all devices of a user share the same link. A device whose accumulated
//! training drain reaches its threshold is invalid and never trains again --
//! no recharge is modeled.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::device_key;
use crate::error::{Error, Result};
use crate::rng;

/// Default energy budget in Joules: 10% of a 3000 mAh battery at a nominal
/// 3.7 V (3000 mAh x 3.7 V x 3.6 J/mWh x 0.10).
pub const DEFAULT_DRAIN_THRESHOLD_J: f64 = 3996.0;

/// Joule budget from battery capacity, nominal voltage, and budget fraction.
pub fn drain_threshold_joules(battery_mah: f64, voltage: f64, fraction: f64) -> f64 {
    battery_mah * voltage * 3.6 * fraction
}

/// An embedded processor's measured reference round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    /// Seconds per reference round.
    pub train_time_ref: f64,
    /// Joules per reference round.
    pub energy_ref: f64,
    /// Local epochs of the reference round.
    pub ref_epochs: u32,
    /// Training samples of the reference round.
    pub ref_samples: u32,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        if self.train_time_ref <= 0.0
            || self.energy_ref <= 0.0
            || self.ref_epochs == 0
            || self.ref_samples == 0
        {
            return Err(Error::Config(format!(
                "hardware profile {} must have positive reference values",
                self.name
            )));
        }
        Ok(())
    }
}

/// Per-user link speeds in Mbps; shared by all devices of the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub download_mbps: f64,
    pub upload_mbps: f64,
}

impl NetworkProfile {
    pub fn validate(&self) -> Result<()> {
        if self.download_mbps <= 0.0 || self.upload_mbps <= 0.0 {
            return Err(Error::Config("network speeds must be positive".into()));
        }
        Ok(())
    }
}

/// The nine bundled embedded-processor profiles. Reference rounds are 20
/// local epochs over 130 samples.
pub fn default_hardware_table() -> Vec<HardwareProfile> {
    let rows: [(&str, f64, f64); 9] = [
        ("Raspberry Pi 4 Model B (CPU)", 38.18, 69.87),
        ("Jetson Nano (CPU)", 50.31, 27.3),
        ("Jetson Nano (GPU)", 33.10, 22.5),
        ("Jetson Xavier NX (CPU)", 23.12, 15.5),
        ("Jetson Xavier NX (GPU)", 16.11, 13.7),
        ("Jetson AGX Xavier (CPU)", 16.0, 8.85),
        ("Jetson AGX Xavier (GPU)", 11.11, 7.36),
        ("Jetson TX2 (CPU)", 42.79, 128.9),
        ("Jetson TX2 (GPU)", 28.73, 87.3),
    ];
    rows.iter()
        .map(|&(name, train_time_ref, energy_ref)| HardwareProfile {
            name: name.into(),
            train_time_ref,
            energy_ref,
            ref_epochs: 20,
            ref_samples: 130,
        })
        .collect()
}

/// Bundled table of 20 download/upload pairs spanning roughly 4-120 Mbps,
/// standing in for measured per-country mobile bandwidths. Override via the
/// profile files when real measurements are available.
pub fn default_network_table() -> Vec<NetworkProfile> {
    let rows: [(f64, f64); 20] = [
        (120.0, 45.0),
        (105.0, 38.0),
        (96.0, 35.0),
        (88.0, 30.0),
        (75.0, 28.0),
        (68.0, 25.0),
        (60.0, 22.0),
        (54.0, 18.0),
        (47.0, 15.0),
        (40.0, 14.0),
        (35.0, 12.0),
        (30.0, 10.0),
        (25.0, 8.0),
        (21.0, 7.0),
        (17.0, 6.0),
        (14.0, 5.5),
        (11.0, 5.0),
        (8.5, 4.5),
        (6.0, 4.2),
        (4.2, 4.0),
    ];
    rows.iter()
        .map(|&(download_mbps, upload_mbps)| NetworkProfile {
            download_mbps,
            upload_mbps,
        })
        .collect()
}

/// Accumulated energy and latency bookkeeping for one device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceRuntimeState {
    pub user_id: String,
    pub device_id: String,
    /// Joules drained by federated training so far; never decreases.
    pub accumulated_drain: f64,
    pub drain_threshold: f64,
    /// Total duration of the device's most recent round, if it ever trained.
    pub last_round_time: Option<f64>,
    /// Per-sample losses of the global model the device last received.
    pub last_per_sample_losses: Option<Vec<f64>>,
    pub rounds_participated: u32,
}

impl DeviceRuntimeState {
    pub fn new(user_id: &str, device_id: &str, drain_threshold: f64) -> Self {
        Self {
            user_id: user_id.into(),
            device_id: device_id.into(),
            accumulated_drain: 0.0,
            drain_threshold,
            last_round_time: None,
            last_per_sample_losses: None,
            rounds_participated: 0,
        }
    }

    /// A device is invalid once its drain reaches the threshold (the
    /// boundary counts: the system-utility indicator requires
    /// `drain < threshold`). Invalidity is absorbing; drain never decreases.
    pub fn is_invalid(&self) -> bool {
        self.accumulated_drain >= self.drain_threshold
    }

    /// Account one participated round: energy scaled from the hardware
    /// reference, round time as download + upload + training.
    pub fn accrue_round(
        &mut self,
        hw: &HardwareProfile,
        net: &NetworkProfile,
        epochs: u32,
        n_samples: usize,
        model_bytes: usize,
    ) {
        let t_train = round_train_time(hw, epochs, n_samples);
        let (t_dl, t_ul) = transfer_time(model_bytes, net);
        self.accumulated_drain += round_energy(hw, epochs, n_samples);
        self.last_round_time = Some(t_dl + t_ul + t_train);
        self.rounds_participated += 1;
    }
}

fn reference_scale(hw: &HardwareProfile, epochs: u32, n_samples: usize) -> f64 {
    (epochs as f64 * n_samples as f64) / (hw.ref_epochs as f64 * hw.ref_samples as f64)
}

/// Seconds of local training: linear compute scaling from the reference
/// round, `train_time_ref * (E * n) / (ref_epochs * ref_samples)`.
pub fn round_train_time(hw: &HardwareProfile, epochs: u32, n_samples: usize) -> f64 {
    hw.train_time_ref * reference_scale(hw, epochs, n_samples)
}

/// Joules of local training, scaled like the training time.
pub fn round_energy(hw: &HardwareProfile, epochs: u32, n_samples: usize) -> f64 {
    hw.energy_ref * reference_scale(hw, epochs, n_samples)
}

/// `(download, upload)` seconds for `model_bytes` over the link:
/// `8 * bytes / (mbps * 1e6)` per direction. Only communication time is
/// modeled; the energy profiles cover training only.
pub fn transfer_time(model_bytes: usize, net: &NetworkProfile) -> (f64, f64) {
    let bits = 8.0 * model_bytes as f64;
    (
        bits / (net.download_mbps * 1e6),
        bits / (net.upload_mbps * 1e6),
    )
}

/// Assign a hardware profile to every device (uniform per device) and a
/// network profile to every user (uniform per user, shared by the user's
/// devices). Deterministic given the seed: users and devices are visited in
/// sorted order.
pub fn assign_profiles(
    topology: &[(String, Vec<String>)],
    hardware: &[HardwareProfile],
    network: &[NetworkProfile],
    seed: u64,
) -> Result<BTreeMap<String, (HardwareProfile, NetworkProfile)>> {
    if hardware.is_empty() || network.is_empty() {
        return Err(Error::Config("profile tables must be non-empty".into()));
    }
    for hw in hardware {
        hw.validate()?;
    }
    for net in network {
        net.validate()?;
    }
    let mut sorted: Vec<(&String, Vec<&String>)> = topology
        .iter()
        .map(|(u, devs)| {
            let mut ds: Vec<&String> = devs.iter().collect();
            ds.sort();
            (u, ds)
        })
        .collect();
    sorted.sort_by_key(|(u, _)| *u);

    let mut rng = rng::rng_from(rng::mix(seed, &[streams::ASSIGN]));
    let mut out = BTreeMap::new();
    for (user, devices) in sorted {
        let net = network[rng.gen_range(0..network.len())].clone();
        for device in devices {
            let hw = hardware[rng.gen_range(0..hardware.len())].clone();
            out.insert(device_key(user, device), (hw, net.clone()));
        }
    }
    Ok(out)
}

mod streams {
    pub const ASSIGN: u64 = 0x4d44_464c_3001;
}
