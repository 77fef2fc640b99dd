//! Left-to-right hidden Markov model over the gastrointestinal sections.
//!
//! Transitions are banded: from state `i` the chain either stays in `i` or
//! advances to `i + 1`, and the last state is absorbing. Emissions are
//! estimated by row-normalizing a classifier confusion matrix, so the model
//! consumes hard classifier decisions rather than soft posteriors.
//!
//! Decoding is exact Viterbi in log space. Zero probabilities become negative
//! infinity, and ties always resolve toward the lower state index (the earlier
//! organ), which delays rather than advances the decoded entry into the small
//! intestine. [`forward_update`] is the online counterpart used for gating.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    argmax_lowest, DomainError, OrganState, PosteriorFrame, ProbabilityMatrix, MODEL_SUM_TOLERANCE,
    ORGAN_COUNT,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HmmError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("initial distribution is invalid (sum {0})")]
    InvalidInitial(f64),
    #[error("model dimensions disagree: {0}")]
    Dimension(String),
    #[error("transition ({row}, {col}) = {value} violates the banded left-to-right structure")]
    NotBanded { row: usize, col: usize, value: f64 },
    #[error("confusion row {0} has no samples")]
    EmptyRow(usize),
    #[error("mean dwell {value} for {organ} is below one frame")]
    DwellTooSmall { organ: OrganState, value: f64 },
    #[error("smoothing constant {0} must be finite and non-negative")]
    InvalidSmoothing(f64),
    #[error("observation sequence is empty")]
    EmptyObservations,
    #[error("observation symbol {0} out of range")]
    SymbolOutOfRange(usize),
    #[error("no state path can emit this observation sequence")]
    InfeasibleSequence,
    #[error("entry policy invalid: threshold must be in (0.5, 1] and hysteresis >= 1")]
    InvalidPolicy,
}

/// Banded HMM with an arbitrary number of states and symbols.
///
/// [`GiHmm`] fixes both to five; this type exists so smaller reductions of the
/// same structure can be decoded and checked by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct LeftRightHmm {
    initial: Vec<f64>,
    trans: ProbabilityMatrix,
    emit: ProbabilityMatrix,
    log_initial: Vec<f64>,
    log_stay: Vec<f64>,
    log_advance: Vec<f64>,
    log_emit: Vec<f64>,
}

impl LeftRightHmm {
    pub fn new(
        initial: Vec<f64>,
        trans: ProbabilityMatrix,
        emit: ProbabilityMatrix,
    ) -> Result<Self, HmmError> {
        let n = initial.len();
        if n == 0 || trans.rows() != n || trans.cols() != n || emit.rows() != n {
            return Err(HmmError::Dimension(format!(
                "initial {n}, transitions {}x{}, emissions {}x{}",
                trans.rows(),
                trans.cols(),
                emit.rows(),
                emit.cols()
            )));
        }
        let sum: f64 = initial.iter().sum();
        if initial.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > MODEL_SUM_TOLERANCE
        {
            return Err(HmmError::InvalidInitial(sum));
        }
        for i in 0..n {
            for j in 0..n {
                let value = trans.get(i, j);
                if value != 0.0 && j != i && j != i + 1 {
                    return Err(HmmError::NotBanded { row: i, col: j, value });
                }
            }
        }

        let log_stay = (0..n).map(|i| trans.get(i, i).ln()).collect();
        let log_advance = (0..n)
            .map(|i| {
                if i + 1 < n {
                    trans.get(i, i + 1).ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Ok(LeftRightHmm {
            log_initial: initial.iter().map(|p| p.ln()).collect(),
            log_stay,
            log_advance,
            log_emit: emit.values().iter().map(|p| p.ln()).collect(),
            initial,
            trans,
            emit,
        })
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.emit.cols()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transitions(&self) -> &ProbabilityMatrix {
        &self.trans
    }

    pub fn emissions(&self) -> &ProbabilityMatrix {
        &self.emit
    }

    fn log_emit(&self, state: usize, symbol: usize) -> f64 {
        self.log_emit[state * self.emit.cols() + symbol]
    }

    /// Most probable state path for `observations` together with its joint
    /// natural-log probability.
    pub fn viterbi(&self, observations: &[usize]) -> Result<(Vec<usize>, f64), HmmError> {
        let n = self.n_states();
        let m = self.n_symbols();
        let (&first, rest) = observations
            .split_first()
            .ok_or(HmmError::EmptyObservations)?;
        if let Some(&bad) = observations.iter().find(|&&o| o >= m) {
            return Err(HmmError::SymbolOutOfRange(bad));
        }

        let mut score: Vec<f64> = (0..n)
            .map(|j| self.log_initial[j] + self.log_emit(j, first))
            .collect();
        let mut next = vec![0.0; n];
        // advanced[t * n + j]: the best path into state j at step t + 1 came from j - 1
        let mut advanced = vec![false; rest.len() * n];

        for (t, &obs) in rest.iter().enumerate() {
            let row = &mut advanced[t * n..(t + 1) * n];
            next[0] = score[0] + self.log_stay[0];
            for j in 1..n {
                let stay = score[j] + self.log_stay[j];
                let advance = score[j - 1] + self.log_advance[j - 1];
                // >= keeps the lower-index predecessor on ties
                if advance >= stay {
                    next[j] = advance;
                    row[j] = true;
                } else {
                    next[j] = stay;
                }
            }
            for (j, value) in next.iter_mut().enumerate() {
                *value += self.log_emit(j, obs);
            }
            std::mem::swap(&mut score, &mut next);
        }

        let last = argmax_lowest(&score);
        let log_prob = score[last];
        if log_prob == f64::NEG_INFINITY || log_prob.is_nan() {
            return Err(HmmError::InfeasibleSequence);
        }

        let mut path = vec![0; observations.len()];
        let mut state = last;
        path[observations.len() - 1] = state;
        for t in (0..rest.len()).rev() {
            if advanced[t * n + state] {
                state -= 1;
            }
            path[t] = state;
        }
        Ok((path, log_prob))
    }

    /// Natural-log joint probability of a given state path and observations.
    pub fn joint_log_prob(&self, states: &[usize], observations: &[usize]) -> f64 {
        assert_eq!(states.len(), observations.len());
        let Some(&s0) = states.first() else {
            return 0.0;
        };
        let mut lp = self.log_initial[s0] + self.log_emit(s0, observations[0]);
        for t in 1..states.len() {
            lp += self.trans.get(states[t - 1], states[t]).ln()
                + self.log_emit(states[t], observations[t]);
        }
        lp
    }

    /// Prior for the next step: `transᵀ · belief`.
    pub fn predict(&self, belief: &[f64]) -> Vec<f64> {
        let n = self.n_states();
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] += belief[i] * self.trans.get(i, i);
            if i + 1 < n {
                out[i + 1] += belief[i] * self.trans.get(i, i + 1);
            }
        }
        out
    }
}

/// The five-state gastrointestinal HMM.
#[derive(Debug, Clone, PartialEq)]
pub struct GiHmm {
    inner: LeftRightHmm,
}

/// Capsule starts in the mouth.
pub const DEFAULT_INITIAL: [f64; ORGAN_COUNT] = [1.0, 0.0, 0.0, 0.0, 0.0];

/// Mean frames per organ per patient, from the held-out test studies
/// (265, 397, 16,510, 175,716, 41,667 frames over 20 patients).
pub const DEFAULT_MEAN_DWELL: [f64; ORGAN_COUNT] = [13.0, 20.0, 826.0, 8786.0, 2083.0];

impl GiHmm {
    pub fn new(
        initial: [f64; ORGAN_COUNT],
        trans: ProbabilityMatrix,
        emit: ProbabilityMatrix,
    ) -> Result<Self, HmmError> {
        if emit.cols() != ORGAN_COUNT {
            return Err(HmmError::Dimension(format!(
                "emissions have {} symbols, expected {ORGAN_COUNT}",
                emit.cols()
            )));
        }
        Ok(GiHmm {
            inner: LeftRightHmm::new(initial.to_vec(), trans, emit)?,
        })
    }

    /// Model with geometric dwell times and the given emissions.
    pub fn from_dwell(
        initial: [f64; ORGAN_COUNT],
        mean_dwell_frames: [f64; ORGAN_COUNT],
        emit: ProbabilityMatrix,
    ) -> Result<Self, HmmError> {
        Self::new(initial, build_transitions(mean_dwell_frames)?, emit)
    }

    pub fn initial(&self) -> [f64; ORGAN_COUNT] {
        self.inner.initial().try_into().expect("five states")
    }

    pub fn transitions(&self) -> &ProbabilityMatrix {
        self.inner.transitions()
    }

    pub fn emissions(&self) -> &ProbabilityMatrix {
        self.inner.emissions()
    }

    pub fn as_left_right(&self) -> &LeftRightHmm {
        &self.inner
    }

    pub fn viterbi(&self, observations: &[OrganState]) -> Result<DecodedPath, HmmError> {
        let symbols: Vec<usize> = observations.iter().map(|o| o.index()).collect();
        let (path, log_prob) = self.inner.viterbi(&symbols)?;
        Ok(DecodedPath {
            states: path.into_iter().map(|s| OrganState::ALL[s]).collect(),
            log_prob,
        })
    }

    /// Decodes the argmax classifier decisions of a posterior stream.
    pub fn viterbi_from_posteriors(
        &self,
        frames: &[PosteriorFrame],
    ) -> Result<DecodedPath, HmmError> {
        let observations: Vec<OrganState> = frames.iter().map(|f| f.argmax_organ()).collect();
        self.viterbi(&observations)
    }

    pub fn joint_log_prob(&self, states: &[OrganState], observations: &[OrganState]) -> f64 {
        let s: Vec<usize> = states.iter().map(|o| o.index()).collect();
        let o: Vec<usize> = observations.iter().map(|o| o.index()).collect();
        self.inner.joint_log_prob(&s, &o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPath {
    pub states: Vec<OrganState>,
    pub log_prob: f64,
}

/// Row-normalizes a true-row / predicted-column confusion matrix into
/// emission probabilities.
pub fn estimate_emissions(
    confusion: &[[u64; ORGAN_COUNT]; ORGAN_COUNT],
) -> Result<ProbabilityMatrix, HmmError> {
    estimate_emissions_smoothed(confusion, 0.0)
}

/// Like [`estimate_emissions`] but adds `smoothing` to every count first.
pub fn estimate_emissions_smoothed(
    confusion: &[[u64; ORGAN_COUNT]; ORGAN_COUNT],
    smoothing: f64,
) -> Result<ProbabilityMatrix, HmmError> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(HmmError::InvalidSmoothing(smoothing));
    }
    let mut values = Vec::with_capacity(ORGAN_COUNT * ORGAN_COUNT);
    for (i, row) in confusion.iter().enumerate() {
        let counts: Vec<f64> = row.iter().map(|&c| c as f64 + smoothing).collect();
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(HmmError::EmptyRow(i));
        }
        values.extend(counts.iter().map(|c| c / total));
    }
    Ok(ProbabilityMatrix::new(ORGAN_COUNT, ORGAN_COUNT, values)?)
}

/// Geometric-dwell transitions: stay with probability `1 - 1/d`, advance with
/// `1/d`. The colon is absorbing regardless of its dwell.
pub fn build_transitions(
    mean_dwell_frames: [f64; ORGAN_COUNT],
) -> Result<ProbabilityMatrix, HmmError> {
    for (organ, &value) in OrganState::ALL.iter().zip(&mean_dwell_frames) {
        if !(value >= 1.0) || !value.is_finite() {
            return Err(HmmError::DwellTooSmall {
                organ: *organ,
                value,
            });
        }
    }
    let mut values = vec![0.0; ORGAN_COUNT * ORGAN_COUNT];
    for (i, &d) in mean_dwell_frames.iter().enumerate() {
        if i + 1 < ORGAN_COUNT {
            let advance = 1.0 / d;
            values[i * ORGAN_COUNT + i] = 1.0 - advance;
            values[i * ORGAN_COUNT + i + 1] = advance;
        } else {
            values[i * ORGAN_COUNT + i] = 1.0;
        }
    }
    Ok(ProbabilityMatrix::new(ORGAN_COUNT, ORGAN_COUNT, values)?)
}

/// Filtered belief `P(X_t | O_1..O_t)` for online use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub belief: [f64; ORGAN_COUNT],
    pub frames_seen: u64,
}

impl FilterState {
    /// Fresh state holding the initial distribution.
    pub fn new(model: &GiHmm) -> Self {
        FilterState {
            belief: model.initial(),
            frames_seen: 0,
        }
    }

    /// Probability mass on the small intestine and colon.
    pub fn past_stomach_mass(&self) -> f64 {
        self.belief[OrganState::SmallIntestine.index()] + self.belief[OrganState::Colon.index()]
    }
}

/// The observation had zero likelihood under the current belief. `fallback`
/// carries the prediction-only update so a stream can continue.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("observation {observation} has zero likelihood at frame {frame}")]
pub struct ZeroLikelihood {
    pub observation: OrganState,
    pub frame: u64,
    pub fallback: FilterState,
}

/// One step of the normalized forward recursion.
///
/// The first observation is weighed against the initial distribution itself;
/// later ones against `transᵀ · belief`.
pub fn forward_update(
    state: &FilterState,
    model: &GiHmm,
    observation: OrganState,
) -> Result<FilterState, ZeroLikelihood> {
    let prior: [f64; ORGAN_COUNT] = if state.frames_seen == 0 {
        state.belief
    } else {
        model
            .as_left_right()
            .predict(&state.belief)
            .try_into()
            .expect("five states")
    };
    let emit = model.emissions();
    let mut belief = [0.0; ORGAN_COUNT];
    for j in 0..ORGAN_COUNT {
        belief[j] = prior[j] * emit.get(j, observation.index());
    }
    let total: f64 = belief.iter().sum();
    if !(total > 0.0) {
        let prior_total: f64 = prior.iter().sum();
        let fallback = FilterState {
            belief: prior.map(|p| p / prior_total),
            frames_seen: state.frames_seen + 1,
        };
        return Err(ZeroLikelihood {
            observation,
            frame: state.frames_seen,
            fallback,
        });
    }
    Ok(FilterState {
        belief: belief.map(|b| b / total),
        frames_seen: state.frames_seen + 1,
    })
}

/// Online rule for declaring small-intestine entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntryPolicy {
    pub threshold: f64,
    pub hysteresis: usize,
}

impl Default for EntryPolicy {
    fn default() -> Self {
        EntryPolicy {
            threshold: 0.95,
            hysteresis: 5,
        }
    }
}

impl EntryPolicy {
    pub fn validate(&self) -> Result<(), HmmError> {
        if self.threshold > 0.5 && self.threshold <= 1.0 && self.hysteresis >= 1 {
            Ok(())
        } else {
            Err(HmmError::InvalidPolicy)
        }
    }
}

/// Streaming form of [`detect_entry`].
#[derive(Debug, Clone)]
pub struct EntryDetector {
    policy: EntryPolicy,
    position: usize,
    run: usize,
    detected: Option<usize>,
}

impl EntryDetector {
    pub fn new(policy: EntryPolicy) -> Result<Self, HmmError> {
        policy.validate()?;
        Ok(EntryDetector {
            policy,
            position: 0,
            run: 0,
            detected: None,
        })
    }

    /// Feeds the next belief; returns the detection frame once it is known.
    pub fn push(&mut self, state: &FilterState) -> Option<usize> {
        if self.detected.is_none() {
            if state.past_stomach_mass() >= self.policy.threshold {
                self.run += 1;
                if self.run >= self.policy.hysteresis {
                    self.detected = Some(self.position);
                }
            } else {
                self.run = 0;
            }
        }
        self.position += 1;
        self.detected
    }

    pub fn detected(&self) -> Option<usize> {
        self.detected
    }
}

/// First stream position at which the past-stomach mass has stayed at or above
/// the threshold for `hysteresis` consecutive frames.
pub fn detect_entry<'a, I>(beliefs: I, policy: EntryPolicy) -> Result<Option<usize>, HmmError>
where
    I: IntoIterator<Item = &'a FilterState>,
{
    let mut detector = EntryDetector::new(policy)?;
    for state in beliefs {
        if let Some(frame) = detector.push(state) {
            return Ok(Some(frame));
        }
    }
    Ok(None)
}
