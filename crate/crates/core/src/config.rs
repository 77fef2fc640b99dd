//! TOML run configuration. A config file fully determines an experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{ProbabilityMatrix, ORGAN_COUNT};
use crate::hmm::{estimate_emissions_smoothed, EntryPolicy, GiHmm, DEFAULT_INITIAL, DEFAULT_MEAN_DWELL};
use crate::io::{read_confusion, read_text};
use crate::simulator::{
    diagonal_emissions, DwellModel, EnergyModel, FrameRatePolicy, SensorModel,
};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub initial: [f64; ORGAN_COUNT],
    pub mean_dwell_frames: [f64; ORGAN_COUNT],
    /// Diagonal of the synthetic emission matrix when no confusion file is given.
    pub emission_diagonal: f64,
    /// True-row / predicted-column confusion counts; overrides `emission_diagonal`.
    pub confusion: Option<PathBuf>,
    pub smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            initial: DEFAULT_INITIAL,
            mean_dwell_frames: DEFAULT_MEAN_DWELL,
            emission_diagonal: 0.85,
            confusion: None,
            smoothing: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub anomaly_rate_in_si: f64,
    pub anomaly_sensitivity: f64,
    pub anomaly_false_positive: f64,
    pub frame_period_ms: u64,
    pub dwell_model: DwellModel,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            anomaly_rate_in_si: 0.07,
            anomaly_sensitivity: 0.55,
            anomaly_false_positive: 0.05,
            frame_period_ms: 500,
            dwell_model: DwellModel::Geometric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub patients: usize,
    pub model: ModelConfig,
    pub policy: EntryPolicy,
    pub energy: EnergyModel,
    pub simulation: SimulationConfig,
    pub frame_rate: FrameRatePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            patients: 100,
            model: ModelConfig::default(),
            policy: EntryPolicy::default(),
            energy: EnergyModel::default(),
            simulation: SimulationConfig::default(),
            frame_rate: FrameRatePolicy::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; a relative confusion path resolves against `base_dir`.
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self, Error> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let (Some(path), Some(base)) = (config.model.confusion.as_mut(), base_dir) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_toml(&read_text(path)?, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section against its owning module's rules.
    pub fn validate(&self) -> Result<(), Error> {
        self.model()?;
        self.policy.validate()?;
        self.energy.validate()?;
        self.frame_rate.validate()?;
        self.sensor()?;
        Ok(())
    }

    pub fn emissions(&self) -> Result<ProbabilityMatrix, Error> {
        match &self.model.confusion {
            Some(path) => Ok(estimate_emissions_smoothed(
                &read_confusion(path)?,
                self.model.smoothing,
            )?),
            None => Ok(diagonal_emissions(self.model.emission_diagonal)?),
        }
    }

    pub fn model(&self) -> Result<GiHmm, Error> {
        Ok(GiHmm::from_dwell(
            self.model.initial,
            self.model.mean_dwell_frames,
            self.emissions()?,
        )?)
    }

    pub fn sensor(&self) -> Result<SensorModel, Error> {
        let s = &self.simulation;
        for (name, p) in [
            ("anomaly_rate_in_si", s.anomaly_rate_in_si),
            ("anomaly_sensitivity", s.anomaly_sensitivity),
            ("anomaly_false_positive", s.anomaly_false_positive),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(SensorModel {
            emissions: self.emissions()?,
            anomaly_sensitivity: s.anomaly_sensitivity,
            anomaly_false_positive: s.anomaly_false_positive,
            frame_period_ms: s.frame_period_ms,
        })
    }
}
