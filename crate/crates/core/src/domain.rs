//! Value types shared across the crate: organ states, classifier posterior
//! frames, ground-truth label frames and row-stochastic matrices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of gastrointestinal sections tracked by the model.
pub const ORGAN_COUNT: usize = 5;

/// Row-sum tolerance for model matrices built inside the crate.
pub const MODEL_SUM_TOLERANCE: f64 = 1e-9;

/// Row-sum tolerance for posteriors read from external producers.
pub const POSTERIOR_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("organ index {0} out of range (expected 0..5)")]
    OrganIndexOutOfRange(usize),
    #[error("unknown organ name `{0}`")]
    UnknownOrgan(String),
    #[error("posterior vector has {0} entries, expected 5")]
    PosteriorLength(usize),
    #[error("organ posterior is not a distribution (sum {sum}, min {min})")]
    PosteriorNotDistribution { sum: f64, min: f64 },
    #[error("anomaly posterior {0} outside [0, 1]")]
    AnomalyOutOfRange(f64),
    #[error("empty sequence")]
    EmptySequence,
    #[error("organ order violated at frame {frame_index}: {from} -> {to}")]
    MonotonicityViolation {
        frame_index: u64,
        from: OrganState,
        to: OrganState,
    },
    #[error("frame index {0} is not strictly increasing")]
    DuplicateFrameIndex(u64),
    #[error("matrix shape {rows}x{cols} does not match {len} values")]
    MatrixShape { rows: usize, cols: usize, len: usize },
    #[error("matrix entry ({row}, {col}) = {value} outside [0, 1]")]
    MatrixEntry { row: usize, col: usize, value: f64 },
    #[error("matrix row {row} sums to {sum}")]
    MatrixRowSum { row: usize, sum: f64 },
}

/// The five hidden states in anatomical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrganState {
    Mouth,
    Esophagus,
    Stomach,
    SmallIntestine,
    Colon,
}

impl OrganState {
    pub const ALL: [OrganState; ORGAN_COUNT] = [
        OrganState::Mouth,
        OrganState::Esophagus,
        OrganState::Stomach,
        OrganState::SmallIntestine,
        OrganState::Colon,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self, DomainError> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or(DomainError::OrganIndexOutOfRange(index))
    }

    /// Canonical snake_case name used in every file format.
    pub fn name(self) -> &'static str {
        match self {
            OrganState::Mouth => "mouth",
            OrganState::Esophagus => "esophagus",
            OrganState::Stomach => "stomach",
            OrganState::SmallIntestine => "small_intestine",
            OrganState::Colon => "colon",
        }
    }

    /// Whether the capsule has reached the small intestine or beyond.
    pub fn past_stomach(self) -> bool {
        self >= OrganState::SmallIntestine
    }
}

impl fmt::Display for OrganState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrganState {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Self::ALL
            .iter()
            .copied()
            .find(|o| o.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| DomainError::UnknownOrgan(t.to_string()))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One time step of classifier output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFrame {
    pub frame_index: u64,
    pub timestamp_ms: u64,
    pub organ_posterior: [f64; ORGAN_COUNT],
    pub anomaly_posterior: f64,
}

impl PosteriorFrame {
    pub fn new(
        frame_index: u64,
        timestamp_ms: u64,
        organ_posterior: &[f64],
        anomaly_posterior: f64,
    ) -> Result<Self, DomainError> {
        let organ_posterior: [f64; ORGAN_COUNT] = organ_posterior
            .try_into()
            .map_err(|_| DomainError::PosteriorLength(organ_posterior.len()))?;
        let frame = PosteriorFrame {
            frame_index,
            timestamp_ms,
            organ_posterior,
            anomaly_posterior,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let sum: f64 = self.organ_posterior.iter().sum();
        let min = self
            .organ_posterior
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !(min >= 0.0) || !((sum - 1.0).abs() <= POSTERIOR_SUM_TOLERANCE) {
            return Err(DomainError::PosteriorNotDistribution { sum, min });
        }
        if !(0.0..=1.0).contains(&self.anomaly_posterior) {
            return Err(DomainError::AnomalyOutOfRange(self.anomaly_posterior));
        }
        Ok(())
    }

    /// Hard classifier decision for the organ task.
    pub fn argmax_organ(&self) -> OrganState {
        OrganState::ALL[argmax_lowest(&self.organ_posterior)]
    }
}

/// Checks that frame indices strictly increase along a posterior stream.
pub fn validate_posterior_sequence(frames: &[PosteriorFrame]) -> Result<(), DomainError> {
    for pair in frames.windows(2) {
        if pair[1].frame_index <= pair[0].frame_index {
            return Err(DomainError::DuplicateFrameIndex(pair[1].frame_index));
        }
    }
    frames.iter().try_for_each(PosteriorFrame::validate)
}

/// Ground truth for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFrame {
    pub frame_index: u64,
    pub organ: OrganState,
    pub anomaly: bool,
}

/// Accepts a label sequence only if it follows anatomical order with strictly
/// increasing frame indices.
pub fn validate_label_sequence(frames: &[LabelFrame]) -> Result<&[LabelFrame], DomainError> {
    if frames.is_empty() {
        return Err(DomainError::EmptySequence);
    }
    for pair in frames.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        if next.frame_index <= prev.frame_index {
            return Err(DomainError::DuplicateFrameIndex(next.frame_index));
        }
        if next.organ < prev.organ {
            return Err(DomainError::MonotonicityViolation {
                frame_index: next.frame_index,
                from: prev.organ,
                to: next.organ,
            });
        }
    }
    Ok(frames)
}

/// Dense row-major matrix whose rows are probability distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct ProbabilityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TryFrom<RawMatrix> for ProbabilityMatrix {
    type Error = DomainError;

    fn try_from(raw: RawMatrix) -> Result<Self, Self::Error> {
        ProbabilityMatrix::new(raw.rows, raw.cols, raw.values)
    }
}

impl From<ProbabilityMatrix> for RawMatrix {
    fn from(m: ProbabilityMatrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            values: m.values,
        }
    }
}

impl ProbabilityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, DomainError> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(DomainError::MatrixShape {
                rows,
                cols,
                len: values.len(),
            });
        }
        for (i, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(DomainError::MatrixEntry {
                    row: i / cols,
                    col: i % cols,
                    value,
                });
            }
        }
        for (row, chunk) in values.chunks(cols).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if (sum - 1.0).abs() > MODEL_SUM_TOLERANCE {
                return Err(DomainError::MatrixRowSum { row, sum });
            }
        }
        Ok(ProbabilityMatrix { rows, cols, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, DomainError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(DomainError::MatrixShape {
                    rows: rows.len(),
                    cols,
                    len: values.len() + r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        ProbabilityMatrix {
            rows: n,
            cols: n,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
