//! Multi-device dataset representation, windowing, and train/test splitting.
//!
//! A dataset holds `N` users, each owning `K` devices that observed the same
//! activity stream simultaneously. Time alignment is the structural invariant
//! everything else leans on: all devices of a user carry the same multiset of
//! `timestamp_index` values, window for window, so per-user operations
//! (splitting, partitioning, shared batch ordering) can act on one timestamp
//! stream and apply to every device identically.

mod partition;
mod synth;

pub use partition::{partition, PartitionConfig};
pub use synth::{synthesize, SynthConfig};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fx;

/// One windowed sample: `window_len` frames of `channels` values, flattened
/// frame-major, i.e. `features[t * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub features: Vec<f64>,
    pub label: usize,
    /// Position in the user's time-aligned stream. After partitioning,
    /// windows donated by different source users may share a value; ordering
    /// stays deterministic because `(timestamp_index, label)` is unique
    /// within a device.
    pub timestamp_index: usize,
}

/// All windows one device holds, ordered by `(timestamp_index, label)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    pub user_id: String,
    pub device_id: String,
    /// Body position or similar tag; informational.
    pub position_tag: String,
    pub windows: Vec<SampleWindow>,
}

impl DeviceDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    fn order_keys(&self) -> Vec<(usize, usize)> {
        self.windows
            .iter()
            .map(|w| (w.timestamp_index, w.label))
            .collect()
    }
}

/// A user and their devices, devices sorted by `device_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserDevices {
    pub user_id: String,
    pub devices: Vec<DeviceDataset>,
}

/// The full population, users sorted by `user_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDeviceDataset {
    pub users: Vec<UserDevices>,
    pub num_classes: usize,
    pub channels: usize,
    pub window_len: usize,
}

/// Globally unique device key: `"user_id/device_id"`. Device ids only need
/// to be unique within a user; every map in the simulator is keyed by this.
pub fn device_key(user_id: &str, device_id: &str) -> String {
    format!("{user_id}/{device_id}")
}

impl MultiDeviceDataset {
    pub fn feature_dim(&self) -> usize {
        self.channels * self.window_len
    }

    pub fn device_count(&self) -> usize {
        self.users.iter().map(|u| u.devices.len()).sum()
    }

    pub fn total_windows(&self) -> usize {
        self.users
            .iter()
            .flat_map(|u| &u.devices)
            .map(|d| d.windows.len())
            .sum()
    }

    pub fn iter_devices(&self) -> impl Iterator<Item = &DeviceDataset> {
        self.users.iter().flat_map(|u| u.devices.iter())
    }

    /// `(user_id, device ids)` pairs in sorted order.
    pub fn topology(&self) -> Vec<(String, Vec<String>)> {
        self.users
            .iter()
            .map(|u| {
                (
                    u.user_id.clone(),
                    u.devices.iter().map(|d| d.device_id.clone()).collect(),
                )
            })
            .collect()
    }

    /// Check every structural invariant: sorted users/devices/windows,
    /// uniform feature dimensionality, labels in range, and identical
    /// timestamp streams across each user's devices.
    pub fn validate(&self) -> Result<()> {
        let dim = self.feature_dim();
        if dim == 0 {
            return Err(Error::Config("channels and window_len must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if !self.users.windows(2).all(|w| w[0].user_id < w[1].user_id) {
            return Err(Error::Config("users must be sorted by unique user_id".into()));
        }
        for user in &self.users {
            if !user
                .devices
                .windows(2)
                .all(|w| w[0].device_id < w[1].device_id)
            {
                return Err(Error::Config(format!(
                    "devices of user {} must be sorted by unique device_id",
                    user.user_id
                )));
            }
            let mut reference: Option<Vec<(usize, usize)>> = None;
            for dev in &user.devices {
                if dev.user_id != user.user_id {
                    return Err(Error::Config(format!(
                        "device {} carries user_id {} inside user {}",
                        dev.device_id, dev.user_id, user.user_id
                    )));
                }
                let keys = dev.order_keys();
                if !keys.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::Config(format!(
                        "windows of {} are not sorted by (timestamp_index, label)",
                        device_key(&dev.user_id, &dev.device_id)
                    )));
                }
                for w in &dev.windows {
                    if w.features.len() != dim {
                        return Err(Error::Shape(format!(
                            "window on {} has {} features, dataset expects {dim}",
                            device_key(&dev.user_id, &dev.device_id),
                            w.features.len()
                        )));
                    }
                    if w.label >= self.num_classes {
                        return Err(Error::Domain(format!(
                            "label {} out of range for {} classes on {}",
                            w.label,
                            self.num_classes,
                            device_key(&dev.user_id, &dev.device_id)
                        )));
                    }
                }
                match &reference {
                    None => reference = Some(keys),
                    Some(r) => {
                        if *r != keys {
                            return Err(Error::Alignment(format!(
                                "devices of user {} have differing timestamp streams",
                                user.user_id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-class window counts for one user (identical for every device of
    /// the user, by alignment).
    pub fn class_counts(user: &UserDevices) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        if let Some(dev) = user.devices.first() {
            for w in &dev.windows {
                *counts.entry(w.label).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Split every device into train/test along the time axis.
///
/// The first `floor(n * train_fraction)` windows (clamped so both sides are
/// non-empty) of each user's shared stream go to train, the rest to test.
/// The cut happens at the same stream position for all devices of a user, so
/// time alignment is preserved on both sides. The split has no randomness:
/// it is a pure function of the dataset and the fraction.
pub fn train_test_split(
    ds: &MultiDeviceDataset,
    train_fraction: f64,
) -> Result<(MultiDeviceDataset, MultiDeviceDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut train_users = Vec::with_capacity(ds.users.len());
    let mut test_users = Vec::with_capacity(ds.users.len());
    for user in &ds.users {
        let n = user.devices.first().map(|d| d.windows.len()).unwrap_or(0);
        if n < 2 {
            return Err(Error::Split(format!(
                "user {} has {n} windows per device; need at least 2 to split",
                user.user_id
            )));
        }
        let n_train = (fx::floor(n as f64 * train_fraction) as usize).clamp(1, n - 1);
        let mut train_devs = Vec::with_capacity(user.devices.len());
        let mut test_devs = Vec::with_capacity(user.devices.len());
        for dev in &user.devices {
            let (head, tail) = dev.windows.split_at(n_train);
            train_devs.push(DeviceDataset {
                user_id: dev.user_id.clone(),
                device_id: dev.device_id.clone(),
                position_tag: dev.position_tag.clone(),
                windows: head.to_vec(),
            });
            test_devs.push(DeviceDataset {
                user_id: dev.user_id.clone(),
                device_id: dev.device_id.clone(),
                position_tag: dev.position_tag.clone(),
                windows: tail.to_vec(),
            });
        }
        train_users.push(UserDevices {
            user_id: user.user_id.clone(),
            devices: train_devs,
        });
        test_users.push(UserDevices {
            user_id: user.user_id.clone(),
            devices: test_devs,
        });
    }
    let train = MultiDeviceDataset {
        users: train_users,
        num_classes: ds.num_classes,
        channels: ds.channels,
        window_len: ds.window_len,
    };
    let test = MultiDeviceDataset {
        users: test_users,
        num_classes: ds.num_classes,
        channels: ds.channels,
        window_len: ds.window_len,
    };
    Ok((train, test))
}
