//! Synthetic capsule traversals, simulated classifier output, and the
//! transmission-gating / frame-rate policies run against them.
//!
//! Every stochastic function takes an explicit seed and uses ChaCha8, so
//! results are a pure function of inputs and seed on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_label_sequence, DomainError, LabelFrame, OrganState, PosteriorFrame,
    ProbabilityMatrix, ORGAN_COUNT,
};
use crate::hmm::{forward_update, EntryDetector, EntryPolicy, FilterState, GiHmm, HmmError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stream has {frames} frames but truth has {truth}")]
    LengthMismatch { frames: usize, truth: usize },
}

/// Derives an independent 64-bit seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwellModel {
    /// Matches the HMM's self-loop semantics.
    #[default]
    Geometric,
    /// Every organ lasts `round(mean)` frames; for robustness experiments.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub mean_dwell_frames: [f64; ORGAN_COUNT],
    pub anomaly_rate_in_si: f64,
    pub seed: u64,
    #[serde(default)]
    pub dwell_model: DwellModel,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.mean_dwell_frames.iter().any(|&d| !(d >= 1.0 && d.is_finite())) {
            return Err(SimError::InvalidConfig(format!(
                "dwell means must be >= 1, got {:?}",
                self.mean_dwell_frames
            )));
        }
        check_probability("anomaly_rate_in_si", self.anomaly_rate_in_si)
    }
}

fn check_probability(name: &str, p: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SimError::InvalidConfig(format!("{name} = {p} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalRecord {
    pub labels: Vec<LabelFrame>,
    /// Index of the first small-intestine frame.
    pub entry_frame: usize,
}

impl TraversalRecord {
    /// Builds a record from labels, locating the small-intestine entry.
    pub fn from_labels(labels: Vec<LabelFrame>) -> Result<Self, SimError> {
        validate_label_sequence(&labels)?;
        let entry_frame = labels
            .iter()
            .position(|l| l.organ == OrganState::SmallIntestine)
            .ok_or_else(|| SimError::InvalidConfig("truth never enters the small intestine".into()))?;
        Ok(TraversalRecord {
            labels,
            entry_frame,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn organs(&self) -> impl Iterator<Item = OrganState> + '_ {
        self.labels.iter().map(|l| l.organ)
    }

    pub fn si_frames(&self) -> usize {
        self.organs()
            .filter(|&o| o == OrganState::SmallIntestine)
            .count()
    }
}

/// Samples one patient: per-organ dwell lengths, then anomaly flags inside the
/// small intestine.
pub fn generate_traversal(profile: &PatientProfile) -> Result<TraversalRecord, SimError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut labels = Vec::new();
    let mut entry_frame = 0;
    for (organ, &mean) in OrganState::ALL.iter().zip(&profile.mean_dwell_frames) {
        let dwell = match profile.dwell_model {
            DwellModel::Geometric => {
                // failures before the first success, so +1 puts the support at 1..
                let geo = Geometric::new(1.0 / mean)
                    .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
                1 + geo.sample(&mut rng) as usize
            }
            DwellModel::Fixed => (mean.round() as usize).max(1),
        };
        if *organ == OrganState::SmallIntestine {
            entry_frame = labels.len();
        }
        for _ in 0..dwell {
            let anomaly = *organ == OrganState::SmallIntestine
                && rng.random_bool(profile.anomaly_rate_in_si);
            labels.push(LabelFrame {
                frame_index: labels.len() as u64,
                organ: *organ,
                anomaly,
            });
        }
    }
    Ok(TraversalRecord {
        labels,
        entry_frame,
    })
}

/// Emission matrix with `accuracy` on the diagonal and the remainder spread
/// evenly over the other four symbols.
pub fn diagonal_emissions(accuracy: f64) -> Result<ProbabilityMatrix, SimError> {
    check_probability("emission accuracy", accuracy)?;
    let off = (1.0 - accuracy) / (ORGAN_COUNT - 1) as f64;
    let mut values = vec![off; ORGAN_COUNT * ORGAN_COUNT];
    for i in 0..ORGAN_COUNT {
        values[i * ORGAN_COUNT + i] = accuracy;
    }
    Ok(ProbabilityMatrix::new(ORGAN_COUNT, ORGAN_COUNT, values)?)
}

/// Stand-in for the per-frame classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub emissions: ProbabilityMatrix,
    pub anomaly_sensitivity: f64,
    pub anomaly_false_positive: f64,
    pub frame_period_ms: u64,
}

/// Turns ground truth into a noisy posterior stream. The observed symbol is
/// drawn from the true organ's emission row and becomes the posterior argmax.
pub fn corrupt_to_posteriors(
    record: &TraversalRecord,
    sensor: &SensorModel,
    seed: u64,
) -> Result<Vec<PosteriorFrame>, SimError> {
    check_probability("anomaly_sensitivity", sensor.anomaly_sensitivity)?;
    check_probability("anomaly_false_positive", sensor.anomaly_false_positive)?;
    if sensor.emissions.rows() != ORGAN_COUNT || sensor.emissions.cols() != ORGAN_COUNT {
        return Err(SimError::InvalidConfig("emissions must be 5x5".into()));
    }
    let rows: Vec<WeightedIndex<f64>> = (0..ORGAN_COUNT)
        .map(|i| WeightedIndex::new(sensor.emissions.row(i)))
        .collect::<Result<_, _>>()
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(record.len());
    for label in &record.labels {
        let observed = rows[label.organ.index()].sample(&mut rng);

        // peak above one half guarantees the argmax
        let peak = rng.random_range(0.55..0.98);
        let noise: [f64; ORGAN_COUNT] = std::array::from_fn(|_| rng.random::<f64>() + 1e-3);
        let noise_total: f64 = noise
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != observed)
            .map(|(_, v)| v)
            .sum();
        let mut posterior = [0.0; ORGAN_COUNT];
        for i in 0..ORGAN_COUNT {
            posterior[i] = if i == observed {
                peak
            } else {
                (1.0 - peak) * noise[i] / noise_total
            };
        }

        let flagged_rate = if label.anomaly {
            sensor.anomaly_sensitivity
        } else {
            sensor.anomaly_false_positive
        };
        let u: f64 = rng.random();
        let anomaly_posterior = if rng.random_bool(flagged_rate) {
            1.0 - 0.5 * u
        } else {
            0.5 * u
        };

        out.push(PosteriorFrame::new(
            label.frame_index,
            label.frame_index * sensor.frame_period_ms,
            &posterior,
            anomaly_posterior,
        )?);
    }
    Ok(out)
}

/// Energy cost per frame in abstract integer units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub cost_capture: u64,
    pub cost_transmit: u64,
    pub battery_budget: u64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            cost_capture: 1,
            cost_transmit: 10,
            battery_budget: 1_000_000,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.cost_capture == 0 || self.cost_transmit == 0 || self.battery_budget == 0 {
            return Err(SimError::InvalidConfig(
                "energy costs and budget must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Cost of capturing and transmitting every frame.
    pub fn transmit_all(&self, frames: usize) -> u64 {
        frames as u64 * (self.cost_capture + self.cost_transmit)
    }
}

/// Gating result without ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub total_frames: usize,
    pub detected_entry: Option<usize>,
    pub frames_suppressed: usize,
    pub frames_transmitted: usize,
    pub energy_spent: u64,
    pub energy_saved_vs_transmit_all: u64,
    /// Frames whose observation was impossible under the running belief.
    pub zero_likelihood_frames: usize,
}

/// Streams frames through the forward filter and entry detector. Frames before
/// the detection frame are captured but not transmitted.
pub fn gate_stream(
    frames: &[PosteriorFrame],
    model: &GiHmm,
    policy: EntryPolicy,
    energy: &EnergyModel,
) -> Result<GateOutcome, SimError> {
    energy.validate()?;
    let mut detector = EntryDetector::new(policy)?;
    let mut state = FilterState::new(model);
    let mut zero_likelihood_frames = 0;
    for frame in frames {
        state = forward_update(&state, model, frame.argmax_organ()).unwrap_or_else(|e| {
            zero_likelihood_frames += 1;
            e.fallback
        });
        if detector.push(&state).is_some() {
            break;
        }
    }
    let total = frames.len();
    let suppressed = detector.detected().unwrap_or(total);
    let transmitted = total - suppressed;
    Ok(GateOutcome {
        total_frames: total,
        detected_entry: detector.detected(),
        frames_suppressed: suppressed,
        frames_transmitted: transmitted,
        energy_spent: total as u64 * energy.cost_capture + transmitted as u64 * energy.cost_transmit,
        energy_saved_vs_transmit_all: suppressed as u64 * energy.cost_transmit,
        zero_likelihood_frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingReport {
    pub true_entry: usize,
    pub detected_entry: Option<usize>,
    pub frames_suppressed: usize,
    pub frames_transmitted: usize,
    pub si_frames_total: usize,
    pub si_frames_missed: usize,
    pub energy_spent: u64,
    pub energy_saved_vs_transmit_all: u64,
}

impl GatingReport {
    pub fn missed_fraction(&self) -> f64 {
        if self.si_frames_total == 0 {
            0.0
        } else {
            self.si_frames_missed as f64 / self.si_frames_total as f64
        }
    }

    pub fn within_budget(&self, energy: &EnergyModel) -> bool {
        self.energy_spent <= energy.battery_budget
    }
}

pub fn run_gating(
    frames: &[PosteriorFrame],
    model: &GiHmm,
    policy: EntryPolicy,
    energy: &EnergyModel,
    truth: &TraversalRecord,
) -> Result<GatingReport, SimError> {
    if frames.len() != truth.len() {
        return Err(SimError::LengthMismatch {
            frames: frames.len(),
            truth: truth.len(),
        });
    }
    let outcome = gate_stream(frames, model, policy, energy)?;
    let si_frames_total = truth.si_frames();
    let si_frames_missed = match outcome.detected_entry {
        Some(d) => d.saturating_sub(truth.entry_frame),
        None => si_frames_total,
    };
    Ok(GatingReport {
        true_entry: truth.entry_frame,
        detected_entry: outcome.detected_entry,
        frames_suppressed: outcome.frames_suppressed,
        frames_transmitted: outcome.frames_transmitted,
        si_frames_total,
        si_frames_missed,
        energy_spent: outcome.energy_spent,
        energy_saved_vs_transmit_all: outcome.energy_saved_vs_transmit_all,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameRatePolicy {
    pub anomaly_threshold: f64,
    pub base_rate: f64,
    pub boosted_rate: f64,
}

impl Default for FrameRatePolicy {
    fn default() -> Self {
        FrameRatePolicy {
            anomaly_threshold: 0.5,
            base_rate: 2.0,
            boosted_rate: 6.0,
        }
    }
}

impl FrameRatePolicy {
    pub fn validate(&self) -> Result<(), SimError> {
        check_probability("anomaly_threshold", self.anomaly_threshold)?;
        if !(self.base_rate > 0.0 && self.boosted_rate >= self.base_rate) {
            return Err(SimError::InvalidConfig(
                "frame rates must be positive with boosted >= base".into(),
            ));
        }
        Ok(())
    }
}

/// Base rate outside the small intestine; inside it, the boosted rate while
/// the anomaly posterior is at or above the threshold.
pub fn adapt_frame_rate(
    frames: &[PosteriorFrame],
    in_si: &[bool],
    policy: &FrameRatePolicy,
) -> Result<Vec<f64>, SimError> {
    policy.validate()?;
    if frames.len() != in_si.len() {
        return Err(SimError::LengthMismatch {
            frames: frames.len(),
            truth: in_si.len(),
        });
    }
    Ok(frames
        .iter()
        .zip(in_si)
        .map(|(f, &si)| {
            if si && f.anomaly_posterior >= policy.anomaly_threshold {
                policy.boosted_rate
            } else {
                policy.base_rate
            }
        })
        .collect())
}
