use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mgbrnn::filters::{Baseline, InitialBelief, UkfParams};
use mgbrnn::gated::{GateDims, GateMask};
use mgbrnn::numerics::CovMat;
use mgbrnn::ssm::{
    linear_benchmark, lorenz_benchmark, radar_benchmark, LorenzSetup, NominalModel, RadarSetup,
    Scenario,
};
use mgbrnn::training::TrainConfig;

use crate::error::{CliError, Result};
use crate::manifest::Manifest;

/// Everything one experiment needs. Unset optional fields are filled by
/// [`ExperimentConfig::resolve`], and the resolved form is what manifests
/// record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "full_mask")]
    pub mask: GateMask,
    /// Classical filters to report; a per-scenario set when absent.
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
    #[serde(default = "default_particles")]
    pub pf_particles: usize,
    #[serde(default)]
    pub ukf: UkfParams,
    /// Diagonal of the initial covariance shared by every filter.
    #[serde(default = "one")]
    pub initial_variance: f64,
    /// Master seed; data, initial beliefs, weights and shuffling each get
    /// their own stream derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn full_mask() -> GateMask {
    GateMask::FULL
}

fn default_particles() -> usize {
    100
}

fn one() -> f64 {
    1.0
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ScenarioSpec {
    Linear(LinearSetup),
    Lorenz(LorenzSetup),
    Radar(RadarSetup),
}

/// Rotated 2x2 linear benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSetup {
    pub theta_deg: f64,
    pub q: f64,
    pub r: f64,
    pub horizon: usize,
}

impl Default for LinearSetup {
    fn default() -> Self {
        Self {
            theta_deg: 10.0,
            q: 0.1,
            r: 1.0,
            horizon: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Trajectories to simulate; ignored when `csv` is given.
    pub count: usize,
    /// Train, validation and test shares.
    pub fractions: [f64; 3],
    /// Read trajectories from this file instead of simulating.
    pub csv: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 800,
            fractions: [0.625, 0.125, 0.25],
            csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Memory length; twice the state size when absent.
    pub d_c: Option<usize>,
    pub hidden: usize,
    pub state_scaling: ScalingSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_c: None,
            hidden: 32,
            state_scaling: ScalingSpec::Fitted,
        }
    }
}

/// How network inputs are scaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingSpec {
    /// Componentwise largest |x| over the training states.
    Fitted,
    /// Each vector divided by its own largest entry.
    PerVector,
    Fixed { scale: Vec<f64> },
}

/// A classical filter, optionally run with the true model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    KfAccurate,
    EkfAccurate,
    Kf,
    Ekf,
    Ukf,
    Pf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::KfAccurate => "kf_accurate",
            Method::EkfAccurate => "ekf_accurate",
            Method::Kf => "kf",
            Method::Ekf => "ekf",
            Method::Ukf => "ukf",
            Method::Pf => "pf",
        }
    }

    pub fn uses_true_model(self) -> bool {
        matches!(self, Method::KfAccurate | Method::EkfAccurate)
    }
}

const STREAM_BELIEF: u64 = 1;
const STREAM_WEIGHTS: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

fn stream(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl ExperimentConfig {
    /// Reads a config file, or the config recorded in a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let is_manifest = value.get("command").is_some() && value.get("config").is_some();
        let config = if is_manifest {
            serde_json::from_value::<Manifest>(value).map(|m| m.config)
        } else {
            serde_json::from_value::<ExperimentConfig>(value)
        };
        config.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fills defaults that depend on the scenario or the master seed, then
    /// checks the result.
    pub fn resolve(mut self) -> Result<Self> {
        let (scenario, _) = self.benchmark();
        if self.methods.is_none() {
            self.methods = Some(match self.scenario {
                ScenarioSpec::Linear(_) => vec![Method::KfAccurate, Method::Kf],
                ScenarioSpec::Lorenz(_) | ScenarioSpec::Radar(_) => {
                    vec![Method::Ekf, Method::Ukf, Method::Pf]
                }
            });
        }
        if self.model.d_c.is_none() {
            self.model.d_c = Some(2 * scenario.d_x());
        }
        self.train.seed = stream(self.seed, STREAM_SHUFFLE);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let f = self.dataset.fractions;
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "split fractions {f:?} must be nonnegative and sum to 1"
            )));
        }
        if let Some(csv) = &self.dataset.csv {
            if !csv.is_file() {
                return Err(CliError::Config(format!(
                    "dataset csv {} does not exist",
                    csv.display()
                )));
            }
        } else if self.dataset.count == 0 {
            return Err(CliError::Config("dataset count must be positive".into()));
        }
        if self.pf_particles < 2 {
            return Err(CliError::Config(format!(
                "pf_particles must be at least 2, got {}",
                self.pf_particles
            )));
        }
        if !(self.initial_variance > 0.0) || !self.initial_variance.is_finite() {
            return Err(CliError::Config(format!(
                "initial_variance must be positive, got {}",
                self.initial_variance
            )));
        }
        if self.model.hidden == 0 || self.model.d_c == Some(0) {
            return Err(CliError::Config("model sizes must be positive".into()));
        }
        let (scenario, _) = self.benchmark();
        if scenario.horizon == 0 {
            return Err(CliError::Config("horizon must be positive".into()));
        }
        if let ScalingSpec::Fixed { scale } = &self.model.state_scaling {
            if scale.len() != scenario.d_x() {
                return Err(CliError::Config(format!(
                    "fixed scaling has {} entries, state has {}",
                    scale.len(),
                    scenario.d_x()
                )));
            }
        }
        Ok(())
    }

    /// Data-generating scenario and the nominal model the filters are given.
    pub fn benchmark(&self) -> (Scenario, NominalModel) {
        match &self.scenario {
            ScenarioSpec::Linear(s) => linear_benchmark(s.theta_deg, s.q, s.r, s.horizon),
            ScenarioSpec::Lorenz(s) => lorenz_benchmark(s),
            ScenarioSpec::Radar(s) => radar_benchmark(s),
        }
    }

    /// State components scored as position.
    pub fn position(&self) -> Vec<usize> {
        match self.scenario {
            ScenarioSpec::Linear(_) => vec![0],
            ScenarioSpec::Lorenz(_) => vec![0, 1, 2],
            ScenarioSpec::Radar(_) => vec![0, 1],
        }
    }

    pub fn methods(&self) -> &[Method] {
        self.methods.as_deref().unwrap_or(&[])
    }

    pub fn baseline(&self, method: Method) -> Baseline {
        match method {
            Method::KfAccurate | Method::Kf => Baseline::Kf,
            Method::EkfAccurate | Method::Ekf => Baseline::Ekf,
            Method::Ukf => Baseline::Ukf(self.ukf),
            Method::Pf => Baseline::Pf {
                particles: self.pf_particles,
            },
        }
    }

    pub fn gate_dims(&self) -> GateDims {
        let (scenario, _) = self.benchmark();
        let d_x = scenario.d_x();
        GateDims {
            d_x,
            d_z: scenario.d_z(),
            d_c: self.model.d_c.unwrap_or(2 * d_x),
            hidden: self.model.hidden,
        }
    }

    pub fn initial_belief(&self) -> InitialBelief {
        let (scenario, _) = self.benchmark();
        InitialBelief {
            p0: CovMat::scaled_identity(scenario.d_x(), self.initial_variance),
            seed: stream(self.seed, STREAM_BELIEF),
        }
    }

    pub fn weights_seed(&self) -> u64 {
        stream(self.seed, STREAM_WEIGHTS)
    }
}
