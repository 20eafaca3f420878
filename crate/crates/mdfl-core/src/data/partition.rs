//! Class-based partitioning: grow a population of `N` users into `N'` by
//! redistributing per-class chunks of the originals' data.
//!
//! Each original user's windows of each class are cut into contiguous chunks
//! along the time axis. Originals keep chunk 0. New users are created in
//! rotation blocks of `N`: the new user at (slot `j`, base `o`) receives, for
//! class `c`, chunk `j` from original `(o + c) mod N`. Rotating the
//! contributor by class gives every new user a distinct class-provenance
//! combination while keeping the contributing user's full device set for
//! each class, so the multi-device structure survives partitioning.
//!
//! When `N'` is not a multiple of `N`, `floor(N'/N) - 1` full blocks are
//! created plus one partial block for the remaining users; chunks that no
//! slot consumes stay with their original owner. Every window appears in
//! exactly one output user.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DeviceDataset, MultiDeviceDataset, SampleWindow, UserDevices};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    /// Total number of users after partitioning (`N'`), at least the current
    /// user count.
    pub target_users: usize,
    /// Reserved for schemes with randomized chunk assignment; the rotation
    /// rule implemented here is fully deterministic and does not consume it.
    #[serde(default)]
    pub seed: u64,
}

/// Per-class window slices of one user, one entry per device (position).
struct UserClassIndex<'a> {
    /// `by_class[class]` -> per device, windows of that class in time order.
    by_class: BTreeMap<usize, Vec<Vec<&'a SampleWindow>>>,
}

fn index_user(user: &UserDevices) -> UserClassIndex<'_> {
    let mut by_class: BTreeMap<usize, Vec<Vec<&SampleWindow>>> = BTreeMap::new();
    for (k, dev) in user.devices.iter().enumerate() {
        for w in &dev.windows {
            let slots = by_class
                .entry(w.label)
                .or_insert_with(|| (0..user.devices.len()).map(|_| Vec::new()).collect());
            slots[k].push(w);
        }
    }
    UserClassIndex { by_class }
}

/// Chunk boundary for chunk `j` of `n` items cut into `chunks` pieces:
/// chunk 0 absorbs the remainder, later chunks are equal-sized.
fn chunk_range(n: usize, chunks: usize, j: usize) -> core::ops::Range<usize> {
    let base = n / chunks;
    let rem = n % chunks;
    if j == 0 {
        0..base + rem
    } else {
        let start = base + rem + (j - 1) * base;
        start..start + base
    }
}

pub fn partition(ds: &MultiDeviceDataset, cfg: &PartitionConfig) -> Result<MultiDeviceDataset> {
    ds.validate()?;
    let n = ds.users.len();
    if n == 0 {
        return Err(Error::Domain("cannot partition an empty dataset".into()));
    }
    if cfg.target_users < n {
        return Err(Error::Config(format!(
            "target_users {} is below the current user count {n}",
            cfg.target_users
        )));
    }
    if cfg.target_users == n {
        return Ok(ds.clone());
    }
    let devices_per_user = ds.users[0].devices.len();
    if ds.users.iter().any(|u| u.devices.len() != devices_per_user) {
        return Err(Error::Partition(
            "users own differing device counts; positions cannot be matched across users".into(),
        ));
    }

    let m_full = cfg.target_users / n;
    let extra = cfg.target_users % n;
    let chunk_count = m_full + usize::from(extra > 0);

    // Validate per-class counts up front so the error names the culprit.
    for user in &ds.users {
        for (class, count) in MultiDeviceDataset::class_counts(user) {
            if count < chunk_count {
                return Err(Error::Partition(format!(
                    "user {} has {count} windows of class {class}, need at least {chunk_count}",
                    user.user_id
                )));
            }
        }
    }

    let indexes: Vec<UserClassIndex<'_>> = ds.users.iter().map(index_user).collect();
    let all_classes: BTreeSet<usize> = indexes
        .iter()
        .flat_map(|ix| ix.by_class.keys().copied())
        .collect();

    // consumed[u] = set of (class, chunk j) handed to new users.
    let mut consumed: Vec<BTreeSet<(usize, usize)>> = (0..n).map(|_| BTreeSet::new()).collect();

    let existing_ids: BTreeSet<&str> = ds.users.iter().map(|u| u.user_id.as_str()).collect();
    let fresh_user_id = |index: usize| -> String {
        let mut id = format!("gen{index:04}");
        while existing_ids.contains(id.as_str()) {
            id.push('_');
        }
        id
    };

    let mut out_users: Vec<UserDevices> = Vec::with_capacity(cfg.target_users);

    // New users: full blocks j in 1..m_full, then the partial block j = m_full
    // covering base indices 0..extra.
    let mut new_index = n;
    for j in 1..=m_full {
        let bases: usize = if j < m_full {
            n
        } else if extra > 0 {
            extra
        } else {
            0
        };
        for o in 0..bases {
            let user_id = fresh_user_id(new_index);
            new_index += 1;
            let mut device_windows: Vec<Vec<SampleWindow>> =
                (0..devices_per_user).map(|_| Vec::new()).collect();
            let mut tag_sources: Vec<BTreeSet<&str>> =
                (0..devices_per_user).map(|_| BTreeSet::new()).collect();
            for &class in &all_classes {
                let contributor = (o + class) % n;
                let Some(slices) = indexes[contributor].by_class.get(&class) else {
                    continue;
                };
                let count = slices[0].len();
                let range = chunk_range(count, chunk_count, j);
                consumed[contributor].insert((class, j));
                for (k, dev_slice) in slices.iter().enumerate() {
                    for w in &dev_slice[range.clone()] {
                        device_windows[k].push((*w).clone());
                    }
                    tag_sources[k]
                        .insert(ds.users[contributor].devices[k].position_tag.as_str());
                }
            }
            let devices = device_windows
                .into_iter()
                .zip(tag_sources)
                .enumerate()
                .map(|(k, (mut windows, tags))| {
                    windows.sort_by_key(|w| (w.timestamp_index, w.label));
                    let position_tag = if tags.len() == 1 {
                        String::from(*tags.iter().next().unwrap())
                    } else {
                        format!("mixed{k:02}")
                    };
                    DeviceDataset {
                        user_id: user_id.clone(),
                        device_id: format!("d{k:02}"),
                        position_tag,
                        windows,
                    }
                })
                .collect();
            out_users.push(UserDevices { user_id, devices });
        }
    }

    // Originals keep chunk 0 of every class plus any chunk nobody consumed.
    for (u, user) in ds.users.iter().enumerate() {
        let mut devices = Vec::with_capacity(user.devices.len());
        for (k, dev) in user.devices.iter().enumerate() {
            let mut windows: Vec<SampleWindow> = Vec::new();
            for (&class, slices) in &indexes[u].by_class {
                let count = slices[0].len();
                for j in 0..chunk_count {
                    if j > 0 && consumed[u].contains(&(class, j)) {
                        continue;
                    }
                    for w in &slices[k][chunk_range(count, chunk_count, j)] {
                        windows.push((*w).clone());
                    }
                }
            }
            windows.sort_by_key(|w| (w.timestamp_index, w.label));
            devices.push(DeviceDataset {
                user_id: dev.user_id.clone(),
                device_id: dev.device_id.clone(),
                position_tag: dev.position_tag.clone(),
                windows,
            });
        }
        out_users.push(UserDevices {
            user_id: user.user_id.clone(),
            devices,
        });
    }

    out_users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let out = MultiDeviceDataset {
        users: out_users,
        num_classes: ds.num_classes,
        channels: ds.channels,
        window_len: ds.window_len,
    };
    out.validate()?;
    if out.users.len() != cfg.target_users {
        return Err(Error::Partition(format!(
            "produced {} users, expected {}",
            out.users.len(),
            cfg.target_users
        )));
    }
    Ok(out)
}
