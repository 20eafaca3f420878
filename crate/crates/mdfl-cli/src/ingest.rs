//! Raw sensor CSV ingestion.
//!
//! Input: one row per (user, device, timestamp) with one value per channel
//! column, in any row order. Rows are grouped by (user, device); each user's
//! devices are restricted to their common timestamps (dropped rows produce a
//! warning, an empty intersection is an alignment error naming the user);
//! the surviving frames are cut into non-overlapping windows of
//! `window_len`, dropping a trailing partial window.
//!
//! Labels may be arbitrary strings; they are mapped to dense ids in sorted
//! order and the mapping is returned. A window's label is the majority label
//! over all of the user's devices' rows inside the window (ties go to the
//! smallest mapped id), which keeps labels identical across a user's devices
//! even for mildly inconsistent files.

use std::collections::BTreeMap;
use std::path::Path;

use mdfl_core::data::{DeviceDataset, MultiDeviceDataset, SampleWindow, UserDevices};
use mdfl_core::Error as CoreError;

use crate::spec::CsvDatasetSpec;
use crate::{CliError, Result};

/// Outcome of an ingestion: the dataset, the label string -> id map, and
/// human-readable warnings (dropped rows, duplicate timestamps).
#[derive(Debug)]
pub struct Ingested {
    pub dataset: MultiDeviceDataset,
    pub label_map: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

struct RawRow {
    ts_bits: u64,
    ts: f64,
    label: String,
    channels: Vec<f64>,
}

pub fn ingest_csv(spec: &CsvDatasetSpec) -> Result<Ingested> {
    let path: &Path = &spec.path;
    let mut reader = csv::Reader::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let headers = reader
        .headers()
        .map_err(|source| CliError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Schema(format!("column {name:?} not found in {path:?}")))
    };
    let user_col = col(&spec.user_col)?;
    let device_col = col(&spec.device_col)?;
    let ts_col = col(&spec.timestamp_col)?;
    let label_col = col(&spec.label_col)?;
    let channel_cols: Vec<usize> = spec
        .channel_cols
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;

    let mut rows: BTreeMap<(String, String), Vec<RawRow>> = BTreeMap::new();
    let mut labels_seen: BTreeMap<String, ()> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|source| CliError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or_else(|| {
                CliError::Schema(format!("record {} is missing column index {idx}", line + 2))
            })
        };
        let ts: f64 = field(ts_col)?.trim().parse().map_err(|_| {
            CliError::Schema(format!(
                "record {}: timestamp {:?} is not numeric",
                line + 2,
                field(ts_col).unwrap_or("?")
            ))
        })?;
        if !ts.is_finite() {
            return Err(CliError::Schema(format!(
                "record {}: non-finite timestamp",
                line + 2
            )));
        }
        let mut channels = Vec::with_capacity(channel_cols.len());
        for &c in &channel_cols {
            let v: f64 = field(c)?.trim().parse().map_err(|_| {
                CliError::Schema(format!(
                    "record {}: channel value {:?} is not numeric",
                    line + 2,
                    field(c).unwrap_or("?")
                ))
            })?;
            channels.push(v);
        }
        let label = field(label_col)?.trim().to_string();
        labels_seen.insert(label.clone(), ());
        let ts = if ts == 0.0 { 0.0 } else { ts }; // collapse -0.0
        rows.entry((
            field(user_col)?.trim().to_string(),
            field(device_col)?.trim().to_string(),
        ))
        .or_default()
        .push(RawRow {
            ts_bits: ts.to_bits(),
            ts,
            label,
            channels,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Schema(format!("{path:?} contains no data rows")));
    }

    let label_map: BTreeMap<String, usize> = labels_seen
        .keys()
        .enumerate()
        .map(|(i, l)| (l.clone(), i))
        .collect();
    if label_map.len() < 2 {
        return Err(CliError::Schema(format!(
            "need at least 2 distinct labels, found {}",
            label_map.len()
        )));
    }

    let mut warnings = Vec::new();

    // Group devices by user, sort each device's rows by timestamp, dedupe.
    let mut by_user: BTreeMap<String, BTreeMap<String, Vec<RawRow>>> = BTreeMap::new();
    for ((user, device), mut dev_rows) in rows {
        dev_rows.sort_by(|a, b| a.ts.total_cmp(&b.ts));
        let before = dev_rows.len();
        dev_rows.dedup_by_key(|r| r.ts_bits);
        if dev_rows.len() != before {
            warnings.push(format!(
                "{user}/{device}: dropped {} duplicate-timestamp rows",
                before - dev_rows.len()
            ));
        }
        by_user.entry(user).or_default().insert(device, dev_rows);
    }

    let mut users = Vec::with_capacity(by_user.len());
    for (user_id, devices) in &by_user {
        // Common timestamps across the user's devices.
        let mut common: Option<Vec<u64>> = None;
        for dev_rows in devices.values() {
            let set: Vec<u64> = dev_rows.iter().map(|r| r.ts_bits).collect();
            common = Some(match common {
                None => set,
                Some(prev) => intersect_sorted_by_ts(&prev, &set, devices),
            });
        }
        let common = common.unwrap_or_default();
        if common.is_empty() {
            return Err(CoreError::Alignment(format!(
                "devices of user {user_id} share no common timestamps"
            ))
            .into());
        }
        for (device_id, dev_rows) in devices {
            let dropped = dev_rows.len() - common.len();
            if dropped > 0 {
                warnings.push(format!(
                    "{user_id}/{device_id}: dropped {dropped} rows outside the user's common timestamp range"
                ));
            }
        }

        let n_windows = common.len() / spec.window_len;
        if common.len() % spec.window_len != 0 {
            warnings.push(format!(
                "{user_id}: dropped {} trailing rows short of a full window",
                common.len() % spec.window_len
            ));
        }

        // Majority label per window over all devices' rows.
        let mut window_labels = Vec::with_capacity(n_windows);
        for w in 0..n_windows {
            let slice = &common[w * spec.window_len..(w + 1) * spec.window_len];
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for dev_rows in devices.values() {
                let lookup: BTreeMap<u64, &RawRow> =
                    dev_rows.iter().map(|r| (r.ts_bits, r)).collect();
                for bits in slice {
                    let row = lookup[bits];
                    *counts.entry(label_map[&row.label]).or_insert(0) += 1;
                }
            }
            // Max count, ties to the smallest id (BTreeMap iteration order).
            let (&label, _) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .expect("non-empty window");
            window_labels.push(label);
        }

        let mut out_devices = Vec::with_capacity(devices.len());
        for (device_id, dev_rows) in devices {
            let lookup: BTreeMap<u64, &RawRow> =
                dev_rows.iter().map(|r| (r.ts_bits, r)).collect();
            let mut windows = Vec::with_capacity(n_windows);
            for (w, &label) in window_labels.iter().enumerate() {
                let slice = &common[w * spec.window_len..(w + 1) * spec.window_len];
                let mut features = Vec::with_capacity(spec.window_len * channel_cols.len());
                for bits in slice {
                    features.extend_from_slice(&lookup[bits].channels);
                }
                windows.push(SampleWindow {
                    features,
                    label,
                    timestamp_index: w,
                });
            }
            out_devices.push(DeviceDataset {
                user_id: user_id.clone(),
                device_id: device_id.clone(),
                position_tag: device_id.clone(),
                windows,
            });
        }
        users.push(UserDevices {
            user_id: user_id.clone(),
            devices: out_devices,
        });
    }

    let dataset = MultiDeviceDataset {
        users,
        num_classes: label_map.len(),
        channels: spec.channel_cols.len(),
        window_len: spec.window_len,
    };
    dataset.validate()?;
    Ok(Ingested {
        dataset,
        label_map,
        warnings,
    })
}

/// Intersection of two timestamp lists, preserving ascending time order.
fn intersect_sorted_by_ts(
    a: &[u64],
    b: &[u64],
    _devices: &BTreeMap<String, Vec<RawRow>>,
) -> Vec<u64> {
    let set: std::collections::BTreeSet<u64> = b.iter().copied().collect();
    a.iter().copied().filter(|bits| set.contains(bits)).collect()
}
