//! Loading hardware and network profile tables from JSON.
//!
//! Formats:
//! - hardware: `[{"name", "train_time_ref", "energy_ref", "ref_epochs",
//!   "ref_samples"}, ...]`
//! - network: `[{"download_mbps", "upload_mbps"}, ...]`
//!
//! Missing paths fall back to the bundled tables. Relative paths resolve
//! against the `MDFL_PROFILE_DIR` environment variable when it is set.

use std::fs;
use std::path::{Path, PathBuf};

use mdfl_core::profiles::{
    default_hardware_table, default_network_table, HardwareProfile, NetworkProfile,
};

use crate::spec::ProfilesSpec;
use crate::{io_err, CliError, Result};

pub const PROFILE_DIR_ENV: &str = "MDFL_PROFILE_DIR";

fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(base) = std::env::var(PROFILE_DIR_ENV) {
            return Path::new(&base).join(path);
        }
    }
    path.to_path_buf()
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let resolved = resolve(path);
    let text = fs::read_to_string(&resolved).map_err(io_err(&resolved))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: resolved,
        source,
    })
}

pub fn load_tables(
    spec: &ProfilesSpec,
) -> Result<(Vec<HardwareProfile>, Vec<NetworkProfile>)> {
    let hardware: Vec<HardwareProfile> = match &spec.hardware {
        Some(path) => load_json(path)?,
        None => default_hardware_table(),
    };
    let network: Vec<NetworkProfile> = match &spec.network {
        Some(path) => load_json(path)?,
        None => default_network_table(),
    };
    if hardware.is_empty() || network.is_empty() {
        return Err(CliError::Validation("profile tables must be non-empty".into()));
    }
    for hw in &hardware {
        hw.validate()?;
    }
    for net in &network {
        net.validate()?;
    }
    Ok((hardware, network))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_load_when_paths_absent() {
        let (hw, net) = load_tables(&ProfilesSpec::default()).unwrap();
        assert_eq!(hw.len(), 9);
        assert_eq!(net.len(), 20);
    }

    #[test]
    fn relative_paths_resolve_against_env_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("net.json"),
            r#"[{"download_mbps": 42.0, "upload_mbps": 21.0}]"#,
        )
        .unwrap();
        std::env::set_var(PROFILE_DIR_ENV, dir.path());
        let spec = ProfilesSpec {
            hardware: None,
            network: Some(PathBuf::from("net.json")),
        };
        let result = load_tables(&spec);
        std::env::remove_var(PROFILE_DIR_ENV);
        let (_, net) = result.unwrap();
        assert_eq!(net.len(), 1);
        assert_eq!(net[0].download_mbps, 42.0);
    }

    #[test]
    fn explicit_tables_override_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            r#"[{{"name":"bench","train_time_ref":1.5,"energy_ref":2.5,"ref_epochs":10,"ref_samples":100}}]"#
        )
        .unwrap();
        f.flush().unwrap();
        let spec = ProfilesSpec {
            hardware: Some(f.path().to_path_buf()),
            network: None,
        };
        let (hw, net) = load_tables(&spec).unwrap();
        assert_eq!(hw.len(), 1);
        assert_eq!(hw[0].name, "bench");
        assert_eq!(net.len(), 20);
    }
}
