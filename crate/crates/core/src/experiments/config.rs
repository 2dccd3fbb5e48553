use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{db_to_linear, dbm_to_watts, PathLossModel, SystemParams, DEFAULT_ALPHA1, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::joint::JointOptions;
use crate::schemes::{Scheme, TimeDivisionOptions};

/// Swept quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    PowerDbm,
    Devices,
}

impl SweepParam {
    pub fn id(self) -> &'static str {
        match self {
            SweepParam::PowerDbm => "power_dbm",
            SweepParam::Devices => "devices",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// One common distance or one distance per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Distances {
    Common(f64),
    PerDevice(Vec<f64>),
}

impl Distances {
    pub fn for_devices(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            Distances::Common(d) => Ok(vec![*d; k]),
            Distances::PerDevice(v) if v.len() == k => Ok(v.clone()),
            Distances::PerDevice(v) => Err(Error::Config(format!("{} distances given for {k} devices", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossConfig {
    pub k0_db: f64,
    pub d0_m: f64,
    pub exponent: f64,
}

impl Default for PathLossConfig {
    fn default() -> Self {
        Self {
            k0_db: -30.0,
            d0_m: 1.0,
            exponent: 3.0,
        }
    }
}

impl PathLossConfig {
    pub fn model(&self) -> PathLossModel {
        PathLossModel {
            k0: db_to_linear(self.k0_db),
            d0_m: self.d0_m,
            alpha0: self.exponent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub mse_tol: f64,
    pub max_outer: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = JointOptions::default();
        Self {
            mse_tol: d.mse_tol,
            max_outer: d.max_outer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    /// Seeded instances audited by `validate`.
    pub instances: usize,
    pub empirical_trials: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            empirical_trials: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Stem of the output files.
    pub name: String,
    pub sweep: Sweep,
    pub antennas: usize,
    pub devices: usize,
    pub power_dbm: f64,
    pub noise_dbm: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    pub distance_m: Distances,
    #[serde(default = "default_kappa")]
    pub rician_kappa: f64,
    #[serde(default)]
    pub path_loss: PathLossConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub time_division: TimeDivisionOptions,
    #[serde(default)]
    pub validate: ValidateConfig,
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

fn default_alpha1() -> f64 {
    DEFAULT_ALPHA1
}

fn default_kappa() -> f64 {
    5.0
}

fn default_trials() -> usize {
    200
}

fn default_schemes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}

impl Default for ExperimentConfig {
    /// Equal distances of 10 m, M = K = 4, transmit power 10 to 30 dBm.
    fn default() -> Self {
        Self {
            name: "power_sweep".into(),
            sweep: Sweep {
                param: SweepParam::PowerDbm,
                values: vec![10.0, 15.0, 20.0, 25.0, 30.0],
            },
            antennas: 4,
            devices: 4,
            power_dbm: 20.0,
            noise_dbm: -100.0,
            eta: default_eta(),
            alpha1: default_alpha1(),
            distance_m: Distances::Common(10.0),
            rician_kappa: default_kappa(),
            path_loss: PathLossConfig::default(),
            trials: default_trials(),
            seed: 0,
            schemes: default_schemes(),
            solver: SolverConfig::default(),
            time_division: TimeDivisionOptions::default(),
            validate: ValidateConfig::default(),
        }
    }
}

/// Everything needed to draw and solve one instance at a sweep point.
#[derive(Debug, Clone)]
pub struct PointSetup {
    pub params: SystemParams,
    pub distances_m: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn joint_options(&self) -> JointOptions {
        JointOptions {
            mse_tol: self.solver.mse_tol,
            max_outer: self.solver.max_outer,
            ..Default::default()
        }
    }

    pub fn model(&self) -> PathLossModel {
        self.path_loss.model()
    }

    /// Validates every sweep point up front so a bad config fails before any work.
    pub fn check(&self) -> Result<()> {
        if self.sweep.values.is_empty() {
            return Err(Error::Config("sweep.values is empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("schemes is empty".into()));
        }
        if !(self.solver.mse_tol > 0.0) || self.solver.max_outer == 0 {
            return Err(Error::Config("solver needs mse_tol > 0 and max_outer >= 1".into()));
        }
        self.path_loss.model().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.rician_kappa >= 0.0) {
            return Err(Error::Config("rician_kappa must be >= 0".into()));
        }
        for i in 0..self.sweep.values.len() {
            let setup = self.point(i)?;
            if setup.distances_m.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
                return Err(Error::Config("distances must be positive and finite".into()));
            }
        }
        Ok(())
    }

    /// System parameters and distances at sweep point `index`.
    pub fn point(&self, index: usize) -> Result<PointSetup> {
        let value = *self
            .sweep
            .values
            .get(index)
            .ok_or_else(|| Error::Config(format!("no sweep point {index}")))?;
        let (power_dbm, devices) = match self.sweep.param {
            SweepParam::PowerDbm => (value, self.devices),
            SweepParam::Devices => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!("device count {value} is not a positive integer")));
                }
                (self.power_dbm, value as usize)
            }
        };
        let params = SystemParams::new(
            self.antennas,
            devices,
            dbm_to_watts(power_dbm),
            dbm_to_watts(self.noise_dbm),
            self.eta,
            self.alpha1,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        Ok(PointSetup {
            params,
            distances_m: self.distance_m.for_devices(devices)?,
        })
    }
}
