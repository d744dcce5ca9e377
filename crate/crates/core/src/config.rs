//! Run configuration files and reproducibility manifests.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{NetworkSizes, TrainHyperparams};
use crate::env::{DriverSource, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::guidance::Rulebook;
use crate::network::{build_topology, NetworkTopology, TopologySpec};
use crate::scenario::{load_timeseries, DriverTable, Scenario};

/// Everything one run needs. Relative paths resolve against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub topology: PathBuf,
    /// Observed drivers; synthetic drivers are generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeseries: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rulebook: Option<PathBuf>,
    pub seed: u64,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub hyper: TrainHyperparams,
    #[serde(default)]
    pub sizes: NetworkSizes,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_cv_window")]
    pub cv_window: usize,
    /// Episode length when no scenario file is given.
    #[serde(default = "default_horizon")]
    pub horizon: u64,
}

fn default_episodes() -> usize {
    100
}

fn default_cv_window() -> usize {
    100
}

fn default_horizon() -> u64 {
    48
}

/// A config with its referenced files loaded.
pub struct LoadedRun {
    pub config: RunConfig,
    pub topology: Arc<NetworkTopology>,
    pub scenario: Scenario,
    pub rulebook: Rulebook,
    pub drivers: DriverSource,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        require(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.topology = resolve(base, &cfg.topology);
        for p in [&mut cfg.timeseries, &mut cfg.scenario, &mut cfg.rulebook].into_iter().flatten() {
            *p = resolve(base, p);
        }
        Ok(cfg)
    }

    /// Load every referenced file; a missing one is reported by path.
    pub fn load(self) -> Result<LoadedRun> {
        require(&self.topology)?;
        let topology = Arc::new(build_topology(&TopologySpec::from_path(&self.topology)?)?);
        let mut scenario = match &self.scenario {
            Some(p) => {
                require(p)?;
                Scenario::from_path(p)?
            }
            None => Scenario::quiet(self.horizon, self.seed),
        };
        scenario.seed = self.seed;
        let rulebook = match &self.rulebook {
            Some(p) => {
                require(p)?;
                Rulebook::from_path(p)?
            }
            None => Rulebook::default(),
        };
        let drivers = match &self.timeseries {
            Some(p) => {
                require(p)?;
                let series = load_timeseries(p, Some(&topology))?;
                let steps = scenario.horizon as usize + self.sizes.horizon + 1;
                DriverSource::Table(Arc::new(DriverTable::from_timeseries(&series, &topology, 0, steps, self.env.synthetic.humidity)?))
            }
            None => DriverSource::Synthetic,
        };
        Ok(LoadedRun {
            config: self,
            topology,
            scenario,
            rulebook,
            drivers,
        })
    }

    /// SHA-256 over the canonical JSON of the config and the bytes of every
    /// referenced file.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        let files = [Some(&self.topology), self.timeseries.as_ref(), self.scenario.as_ref(), self.rulebook.as_ref()];
        for p in files.into_iter().flatten() {
            h.update(std::fs::read(p).map_err(|e| Error::io(p, e))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

impl LoadedRun {
    pub fn environment(&self) -> Result<Environment> {
        Environment::new(
            Arc::clone(&self.topology),
            self.config.env.clone(),
            self.rulebook.clone(),
            self.scenario.clone(),
            self.drivers.clone(),
            self.config.sizes.window,
            self.config.sizes.horizon,
        )
    }
}

/// Written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// The resolved config, enough to rerun.
    pub config: RunConfig,
    #[serde(default)]
    pub args: serde_json::Value,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        require(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
