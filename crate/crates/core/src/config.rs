//! Run configuration shared by every command, read from TOML.
//!
//! The root `seed` drives every random substream: it is copied into each
//! section by [`RunConfig::resolved`], so per-section seeds in a file are
//! ignored.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::data::{generate_sysid_dataset, DataConfig, Dataset};
use crate::dpc::PolicyTrainConfig;
use crate::error::{Error, Result};
use crate::joint::{AdaptConfig, JointTrainConfig};
use crate::plant::{build_default_plant, PlantModel, SurrogateDesign, UncertaintyMode, UncertaintySpec};
use crate::sysid::SysIdConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DLMPC_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    #[default]
    Dlmpc,
    Joint,
    Lqr,
    Lqi,
    Mpc,
    Zero,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Dlmpc => "dlmpc",
            ControllerKind::Joint => "joint",
            ControllerKind::Lqr => "lqr",
            ControllerKind::Lqi => "lqi",
            ControllerKind::Mpc => "mpc",
            ControllerKind::Zero => "zero",
        }
    }

    /// Whether the controller needs a trained artifact.
    pub fn learned(self) -> bool {
        matches!(self, ControllerKind::Dlmpc | ControllerKind::Joint)
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dlmpc" => Ok(ControllerKind::Dlmpc),
            "joint" => Ok(ControllerKind::Joint),
            "lqr" => Ok(ControllerKind::Lqr),
            "lqi" => Ok(ControllerKind::Lqi),
            "mpc" | "impc" => Ok(ControllerKind::Mpc),
            "zero" => Ok(ControllerKind::Zero),
            other => Err(Error::Config(format!("unknown controller '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub controller: ControllerKind,
    pub modes: Vec<UncertaintyMode>,
    /// Runs per uncertain mode; the nominal mode is deterministic and runs once.
    pub runs: usize,
    pub workers: usize,
    /// Policy file for `dlmpc`, bundle directory for `joint`.
    pub artifact: Option<PathBuf>,
    /// Learned model predicting alongside a `dlmpc` policy, for MSE mod.
    pub model: Option<PathBuf>,
    /// Online adaptation for `joint`.
    pub adapt: bool,
    pub mpc_horizon: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            controller: ControllerKind::Dlmpc,
            modes: UncertaintyMode::ALL.to_vec(),
            runs: 20,
            workers: 1,
            artifact: None,
            model: None,
            adapt: false,
            mpc_horizon: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Surrogate plant design file; the bundled building when unset.
    pub plant: Option<PathBuf>,
    /// Dataset CSV; generated from `data` when unset.
    pub dataset: Option<PathBuf>,
    pub data: DataConfig,
    pub uncertainty: UncertaintySpec,
    pub sysid: SysIdConfig,
    pub policy: PolicyTrainConfig,
    pub joint: JointTrainConfig,
    pub adapt: AdaptConfig,
    pub simulate: SimulateConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            plant: None,
            dataset: None,
            data: DataConfig::default(),
            uncertainty: UncertaintySpec::default(),
            sysid: SysIdConfig::default(),
            policy: PolicyTrainConfig::default(),
            joint: JointTrainConfig::default(),
            adapt: AdaptConfig::default(),
            simulate: SimulateConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Copy of the config with the root seed and bounds pushed into every section.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.sysid.seed = c.seed;
        c.policy.seed = c.seed;
        c.joint.seed = c.seed;
        c.bench.seed = c.seed;
        c.policy.bounds = c.data.bounds;
        c.joint.bounds = c.data.bounds;
        c.bench.train.bounds = c.data.bounds;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.simulate.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.simulate.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.simulate.modes.is_empty() {
            return Err(Error::Config("at least one uncertainty mode is required".into()));
        }
        for p in [&self.plant, &self.dataset, &self.simulate.artifact, &self.simulate.model].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        self.data.bounds.validate()?;
        self.uncertainty.validate()?;
        self.sysid.validate()?;
        self.policy.validate()?;
        self.joint.validate()?;
        self.bench.validate()
    }

    pub fn plant_model(&self) -> Result<PlantModel> {
        match &self.plant {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                SurrogateDesign::from_toml(&text)?.build()
            }
            None => Ok(build_default_plant()),
        }
    }

    /// The configured dataset: loaded from `dataset`, else generated.
    pub fn dataset(&self, plant: &PlantModel) -> Result<Dataset> {
        match &self.dataset {
            Some(p) => Dataset::load_csv(p, &self.data.bounds),
            None => generate_sysid_dataset(plant, &self.data, self.seed),
        }
    }
}
