//! The run config file: `[train]`, `[degrade]` and `[data]` sections in TOML,
//! or the same structure in JSON when the file ends in `.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tfrestore_core::degrade::DegradeConfig;
use tfrestore_core::trainer::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub clean_dir: Option<PathBuf>,
    pub rir_dir: Option<PathBuf>,
    pub noise_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub degrade: DegradeConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Reads a config file. Relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.manifest, &mut cfg.data.clean_dir, &mut cfg.data.rir_dir, &mut cfg.data.noise_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Fails with a data error unless `dir` is an existing directory.
pub fn require_dir(dir: &Path, what: &str) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} directory {} does not exist", dir.display())))
    }
}
