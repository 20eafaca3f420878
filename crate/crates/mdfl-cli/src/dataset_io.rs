//! Dataset directory format: a JSON manifest plus one CSV of windows per
//! device.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/dev_0000.csv      # timestamp_index,label,f0,...,f{D-1}
//! ```
//!
//! Files are numbered in (user, device) order; the manifest carries the ids,
//! position tags, dataset shape, and the label map when one exists (CSV
//! ingestion produces one, synthesis does not).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mdfl_core::data::{DeviceDataset, MultiDeviceDataset, SampleWindow, UserDevices};

use crate::{io_err, CliError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    channels: usize,
    window_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_map: Option<BTreeMap<String, usize>>,
    users: Vec<ManifestUser>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestUser {
    user_id: String,
    devices: Vec<ManifestDevice>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDevice {
    device_id: String,
    position_tag: String,
    file: String,
}

pub fn export_dataset(
    ds: &MultiDeviceDataset,
    dir: &Path,
    label_map: Option<&BTreeMap<String, usize>>,
) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut users = Vec::with_capacity(ds.users.len());
    let mut file_index = 0usize;
    for user in &ds.users {
        let mut devices = Vec::with_capacity(user.devices.len());
        for dev in &user.devices {
            let file = format!("dev_{file_index:04}.csv");
            file_index += 1;
            write_device_csv(dev, &dir.join(&file), ds.feature_dim())?;
            devices.push(ManifestDevice {
                device_id: dev.device_id.clone(),
                position_tag: dev.position_tag.clone(),
                file,
            });
        }
        users.push(ManifestUser {
            user_id: user.user_id.clone(),
            devices,
        });
    }
    let manifest = Manifest {
        num_classes: ds.num_classes,
        channels: ds.channels,
        window_len: ds.window_len,
        label_map: label_map.cloned(),
        users,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| CliError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(io_err(path))?;
    Ok(())
}

fn write_device_csv(dev: &DeviceDataset, path: &Path, feature_dim: usize) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let mut header = vec!["timestamp_index".to_string(), "label".to_string()];
    header.extend((0..feature_dim).map(|i| format!("f{i}")));
    let wrap = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    writer.write_record(&header).map_err(wrap)?;
    for w in &dev.windows {
        let mut record = Vec::with_capacity(feature_dim + 2);
        record.push(w.timestamp_index.to_string());
        record.push(w.label.to_string());
        record.extend(w.features.iter().map(|f| format_f64(*f)));
        writer.write_record(&record).map_err(wrap)?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

/// Shortest representation that parses back to the same bits.
fn format_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if s.parse::<f64>() != Ok(v) {
        s = format!("{v:e}");
    }
    s
}

pub struct ImportedDataset {
    pub dataset: MultiDeviceDataset,
    pub label_map: Option<BTreeMap<String, usize>>,
}

pub fn import_dataset(dir: &Path) -> Result<ImportedDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: manifest_path.clone(),
            source,
        })?;
    let feature_dim = manifest.channels * manifest.window_len;
    let mut users = Vec::with_capacity(manifest.users.len());
    for m_user in &manifest.users {
        let mut devices = Vec::with_capacity(m_user.devices.len());
        for m_dev in &m_user.devices {
            let path = dir.join(&m_dev.file);
            let windows = read_device_csv(&path, feature_dim)?;
            devices.push(DeviceDataset {
                user_id: m_user.user_id.clone(),
                device_id: m_dev.device_id.clone(),
                position_tag: m_dev.position_tag.clone(),
                windows,
            });
        }
        users.push(UserDevices {
            user_id: m_user.user_id.clone(),
            devices,
        });
    }
    let dataset = MultiDeviceDataset {
        users,
        num_classes: manifest.num_classes,
        channels: manifest.channels,
        window_len: manifest.window_len,
    };
    dataset.validate()?;
    Ok(ImportedDataset {
        dataset,
        label_map: manifest.label_map,
    })
}

fn read_device_csv(path: &Path, feature_dim: usize) -> Result<Vec<SampleWindow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let mut windows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|source| CliError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        if record.len() != feature_dim + 2 {
            return Err(CliError::Schema(format!(
                "{path:?} record {}: expected {} fields, found {}",
                line + 2,
                feature_dim + 2,
                record.len()
            )));
        }
        let parse_err = |what: &str| {
            CliError::Schema(format!("{path:?} record {}: bad {what}", line + 2))
        };
        let timestamp_index: usize =
            record[0].trim().parse().map_err(|_| parse_err("timestamp_index"))?;
        let label: usize = record[1].trim().parse().map_err(|_| parse_err("label"))?;
        let mut features = Vec::with_capacity(feature_dim);
        for i in 0..feature_dim {
            let v: f64 = record[i + 2].trim().parse().map_err(|_| parse_err("feature"))?;
            features.push(v);
        }
        windows.push(SampleWindow {
            features,
            label,
            timestamp_index,
        });
    }
    Ok(windows)
}
