//! Scalar multi-task loss math: homoscedastic uncertainty weighting, Dynamic
//! Weight Average, focal loss and cross-entropy, each with analytic gradients.
//!
//! The public surface is fixed to two tasks (organ localization and anomaly
//! detection). Internals work on slices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of tasks combined by the multi-task loss.
pub const NUM_TASKS: usize = 2;

/// Probabilities are clamped to this before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MtlError {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("loss values must be positive, got {0}")]
    NonPositiveLoss(f64),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("epoch {epoch} needs {needed} recorded epochs, trace has {available}")]
    TraceTooShort {
        epoch: usize,
        needed: usize,
        available: usize,
    },
    #[error("task histories have different lengths ({0} vs {1})")]
    RaggedTrace(usize, usize),
    #[error("probabilities do not form a distribution")]
    InvalidDistribution,
    #[error("true class {0} out of range")]
    ClassOutOfRange(usize),
    #[error("focal parameters invalid: gamma >= 0 and positive class weights required")]
    InvalidFocalParams,
    #[error("weighting mode `{mode}` cannot use {state} state")]
    ModeStateMismatch {
        mode: &'static str,
        state: &'static str,
    },
}

/// Learned `log σ_i` per task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UwParams {
    pub log_sigma: [f64; NUM_TASKS],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UwOutput {
    pub value: f64,
    pub grad_log_sigma: [f64; NUM_TASKS],
    pub grad_losses: [f64; NUM_TASKS],
}

/// `Σ_i exp(-log σ_i)·L_i + log σ_i` and its partial derivatives.
pub fn uw_loss(losses: [f64; NUM_TASKS], params: &UwParams) -> Result<UwOutput, MtlError> {
    if losses
        .iter()
        .chain(&params.log_sigma)
        .any(|v| !v.is_finite())
    {
        return Err(MtlError::NonFiniteInput);
    }
    if let Some(&bad) = losses.iter().find(|&&l| l <= 0.0) {
        return Err(MtlError::NonPositiveLoss(bad));
    }
    let mut out = UwOutput {
        value: 0.0,
        grad_log_sigma: [0.0; NUM_TASKS],
        grad_losses: [0.0; NUM_TASKS],
    };
    for i in 0..NUM_TASKS {
        let precision = (-params.log_sigma[i]).exp();
        out.value += precision * losses[i] + params.log_sigma[i];
        out.grad_log_sigma[i] = 1.0 - precision * losses[i];
        out.grad_losses[i] = precision;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwaConfig {
    pub temperature: f64,
}

impl DwaConfig {
    pub fn new(temperature: f64) -> Result<Self, MtlError> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(DwaConfig { temperature })
        } else {
            Err(MtlError::InvalidTemperature(temperature))
        }
    }
}

/// Per-task epoch losses `L_i(1..t)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    tasks: [Vec<f64>; NUM_TASKS],
}

impl LossTrace {
    pub fn new(localization: Vec<f64>, anomaly: Vec<f64>) -> Result<Self, MtlError> {
        if localization.len() != anomaly.len() {
            return Err(MtlError::RaggedTrace(localization.len(), anomaly.len()));
        }
        for &l in localization.iter().chain(&anomaly) {
            if !l.is_finite() {
                return Err(MtlError::NonFiniteInput);
            }
            if l <= 0.0 {
                return Err(MtlError::NonPositiveLoss(l));
            }
        }
        Ok(LossTrace {
            tasks: [localization, anomaly],
        })
    }

    /// Appends one epoch of losses.
    pub fn push(&mut self, losses: [f64; NUM_TASKS]) -> Result<(), MtlError> {
        for &l in &losses {
            if !l.is_finite() {
                return Err(MtlError::NonFiniteInput);
            }
            if l <= 0.0 {
                return Err(MtlError::NonPositiveLoss(l));
            }
        }
        for (task, l) in self.tasks.iter_mut().zip(losses) {
            task.push(l);
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.tasks[0].len()
    }

    /// Loss of `task` at 1-based `epoch`.
    pub fn loss(&self, task: usize, epoch: usize) -> f64 {
        self.tasks[task][epoch - 1]
    }
}

/// Softmax of `w / T` scaled so the weights sum to the task count.
fn tempered_softmax(ratios: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = ratios.iter().map(|w| w / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let n = ratios.len() as f64;
    exps.iter().map(|e| n * e / total).collect()
}

/// Task weights `λ_i(t)` for 1-based epoch `t`. Epochs 1 and 2 have no loss
/// ratio yet and use uniform weights.
pub fn dwa_weights(
    trace: &LossTrace,
    config: &DwaConfig,
    epoch: usize,
) -> Result<[f64; NUM_TASKS], MtlError> {
    if !(config.temperature > 0.0 && config.temperature.is_finite()) {
        return Err(MtlError::InvalidTemperature(config.temperature));
    }
    if epoch < 3 {
        return Ok([1.0; NUM_TASKS]);
    }
    if trace.epochs() < epoch - 1 {
        return Err(MtlError::TraceTooShort {
            epoch,
            needed: epoch - 1,
            available: trace.epochs(),
        });
    }
    let ratios: Vec<f64> = (0..NUM_TASKS)
        .map(|i| trace.loss(i, epoch - 1) / trace.loss(i, epoch - 2))
        .collect();
    let weights = tempered_softmax(&ratios, config.temperature);
    Ok([weights[0], weights[1]])
}

/// Weights for every epoch `1..=trace.epochs()`.
pub fn dwa_schedule(
    trace: &LossTrace,
    config: &DwaConfig,
) -> Result<Vec<[f64; NUM_TASKS]>, MtlError> {
    (1..=trace.epochs())
        .map(|t| dwa_weights(trace, config, t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    /// Per-class weights; `None` means 1 for every class.
    pub alpha: Option<Vec<f64>>,
}

impl FocalParams {
    pub fn new(gamma: f64) -> Self {
        FocalParams { gamma, alpha: None }
    }

    fn weight(&self, class: usize) -> f64 {
        self.alpha.as_ref().map_or(1.0, |a| a[class])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient with respect to each class probability.
    pub grad_probabilities: Vec<f64>,
    /// The true-class probability was below [`PROB_FLOOR`] and got clamped.
    pub floored: bool,
}

fn check_distribution(probabilities: &[f64], true_class: usize) -> Result<(), MtlError> {
    if true_class >= probabilities.len() {
        return Err(MtlError::ClassOutOfRange(true_class));
    }
    let sum: f64 = probabilities.iter().sum();
    if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
        return Err(MtlError::InvalidDistribution);
    }
    Ok(())
}

/// `-α_t (1 - p_t)^γ log p_t`.
pub fn focal_loss(
    probabilities: &[f64],
    true_class: usize,
    params: &FocalParams,
) -> Result<LossOutput, MtlError> {
    check_distribution(probabilities, true_class)?;
    let gamma = params.gamma;
    let alpha_ok = params
        .alpha
        .as_ref()
        .is_none_or(|a| a.len() == probabilities.len() && a.iter().all(|&w| w > 0.0));
    if !(gamma >= 0.0 && gamma.is_finite()) || !alpha_ok {
        return Err(MtlError::InvalidFocalParams);
    }

    let alpha = params.weight(true_class);
    let raw = probabilities[true_class];
    let floored = raw < PROB_FLOOR;
    let p = raw.max(PROB_FLOOR);
    let log_p = p.ln();
    let q = 1.0 - p;
    let modulator = q.powf(gamma);
    let value = -alpha * modulator * log_p;

    let mut grad = vec![0.0; probabilities.len()];
    if !floored {
        // d/dp of (1-p)^γ·log p; the first term vanishes at γ = 0 and at p = 1
        let decay = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            -gamma * q.powf(gamma - 1.0) * log_p
        };
        grad[true_class] = -alpha * (decay + modulator / p);
    }
    Ok(LossOutput {
        value,
        grad_probabilities: grad,
        floored,
    })
}

/// `-log p_t` with the same flooring as [`focal_loss`].
pub fn cross_entropy(probabilities: &[f64], true_class: usize) -> Result<LossOutput, MtlError> {
    check_distribution(probabilities, true_class)?;
    let raw = probabilities[true_class];
    let floored = raw < PROB_FLOOR;
    let p = raw.max(PROB_FLOOR);
    let mut grad = vec![0.0; probabilities.len()];
    if !floored {
        grad[true_class] = -1.0 / p;
    }
    Ok(LossOutput {
        value: -p.ln(),
        grad_probabilities: grad,
        floored,
    })
}

/// Which multi-task weighting scheme produced a combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Uw,
    Dwa,
    /// DWA where the anomaly loss came from [`focal_loss`].
    DwaFocal,
}

impl LossMode {
    fn name(self) -> &'static str {
        match self {
            LossMode::Uw => "uw",
            LossMode::Dwa => "dwa",
            LossMode::DwaFocal => "dwa_focal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightingState<'a> {
    Uncertainty(UwParams),
    Dwa {
        trace: &'a LossTrace,
        config: DwaConfig,
        epoch: usize,
    },
}

pub fn combine_mtl_loss(
    task_losses: [f64; NUM_TASKS],
    mode: LossMode,
    state: &WeightingState<'_>,
) -> Result<f64, MtlError> {
    match (mode, state) {
        (LossMode::Uw, WeightingState::Uncertainty(params)) => {
            Ok(uw_loss(task_losses, params)?.value)
        }
        (LossMode::Dwa | LossMode::DwaFocal, WeightingState::Dwa { trace, config, epoch }) => {
            let lambda = dwa_weights(trace, config, *epoch)?;
            Ok(lambda.iter().zip(&task_losses).map(|(w, l)| w * l).sum())
        }
        (mode, WeightingState::Uncertainty(_)) => Err(MtlError::ModeStateMismatch {
            mode: mode.name(),
            state: "uncertainty",
        }),
        (mode, WeightingState::Dwa { .. }) => Err(MtlError::ModeStateMismatch {
            mode: mode.name(),
            state: "dwa",
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uw_fixtures() {
        let out = uw_loss([1.0, 2.0], &UwParams { log_sigma: [0.0, 0.0] }).unwrap();
        assert_eq!(out.value, 3.0);
        assert_eq!(out.grad_log_sigma, [0.0, -1.0]);
        assert_eq!(out.grad_losses, [1.0, 1.0]);

        let out = uw_loss(
            [1.0, 2.0],
            &UwParams {
                log_sigma: [0.0, 2f64.ln()],
            },
        )
        .unwrap();
        assert!((out.value - 2.693147).abs() < 1e-6);

        assert_eq!(
            uw_loss([f64::NAN, 1.0], &UwParams { log_sigma: [0.0; 2] }),
            Err(MtlError::NonFiniteInput)
        );
    }

    #[test]
    fn dwa_fixtures() {
        let trace = LossTrace::new(vec![1.0, 1.0, 1.0], vec![1.0, 2.0, 4.0]).unwrap();
        let cfg = DwaConfig::new(2.0).unwrap();
        // epoch 3 uses ratios from epochs 2 and 1: w = (1, 2)
        let l = dwa_weights(&trace, &cfg, 3).unwrap();
        // 2·e^0.5 / (e^0.5 + e^1), evaluated in 30-digit arithmetic
        assert!((l[0] - 0.755_081_337_596_290_9).abs() < 1e-12);
        assert!((l[1] - 1.244_918_662_403_709_1).abs() < 1e-12);

        assert_eq!(dwa_weights(&trace, &cfg, 1).unwrap(), [1.0, 1.0]);
        assert_eq!(dwa_weights(&trace, &cfg, 2).unwrap(), [1.0, 1.0]);
        assert!(matches!(
            dwa_weights(&trace, &cfg, 6),
            Err(MtlError::TraceTooShort { .. })
        ));

        let equal = LossTrace::new(vec![2.0, 1.0], vec![4.0, 2.0]).unwrap();
        assert_eq!(dwa_weights(&equal, &cfg, 3).unwrap(), [1.0, 1.0]);

        let hot = DwaConfig::new(1e9).unwrap();
        let l = dwa_weights(&trace, &hot, 3).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-8 && (l[1] - 1.0).abs() < 1e-8);

        assert!(DwaConfig::new(0.0).is_err());
        assert!(LossTrace::new(vec![1.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(LossTrace::new(vec![1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn focal_and_ce_fixtures() {
        let p = [0.9, 0.1];
        let fl = focal_loss(&p, 0, &FocalParams::new(2.0)).unwrap();
        assert!((fl.value - 0.00105360).abs() < 1e-8);

        let ce = cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(ce.value, 0.0);
        let e = std::f64::consts::E;
        let ce = cross_entropy(&[1.0 / e, 1.0 - 1.0 / e], 0).unwrap();
        assert!((ce.value - 1.0).abs() < 1e-12);
        let ce = cross_entropy(&[0.2; 5], 3).unwrap();
        assert!((ce.value - 1.609438).abs() < 1e-6);

        let zero = focal_loss(&[0.0, 1.0], 0, &FocalParams::new(2.0)).unwrap();
        assert!(zero.floored);
        assert!((zero.value - (-(1e-12f64).ln()) * (1.0 - 1e-12f64).powi(2)).abs() < 1e-9);
        assert!(cross_entropy(&[0.0, 1.0], 0).unwrap().floored);

        assert_eq!(cross_entropy(&[0.5, 0.5], 2), Err(MtlError::ClassOutOfRange(2)));
        assert_eq!(cross_entropy(&[0.5, 0.6], 0), Err(MtlError::InvalidDistribution));
        assert!(focal_loss(&p, 0, &FocalParams::new(-1.0)).is_err());
        let bad_alpha = FocalParams {
            gamma: 1.0,
            alpha: Some(vec![1.0]),
        };
        assert!(focal_loss(&p, 0, &bad_alpha).is_err());

        // gradient is finite at p_t = 1 for fractional gamma
        let one = focal_loss(&[1.0, 0.0], 0, &FocalParams::new(0.5)).unwrap();
        assert!(one.grad_probabilities[0].is_finite());
    }

    #[test]
    fn combined_loss() {
        let trace = LossTrace::new(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let dwa = WeightingState::Dwa {
            trace: &trace,
            config: DwaConfig::new(2.0).unwrap(),
            epoch: 1,
        };
        let v = combine_mtl_loss([0.5, 0.7], LossMode::Dwa, &dwa).unwrap();
        assert!((v - 1.2).abs() < 1e-15);
        assert_eq!(
            combine_mtl_loss([0.5, 0.7], LossMode::DwaFocal, &dwa).unwrap(),
            v
        );
        let uw = WeightingState::Uncertainty(UwParams { log_sigma: [0.0; 2] });
        let v = combine_mtl_loss([0.5, 0.7], LossMode::Uw, &uw).unwrap();
        assert!((v - 1.2).abs() < 1e-15);

        assert!(matches!(
            combine_mtl_loss([0.5, 0.7], LossMode::Uw, &dwa),
            Err(MtlError::ModeStateMismatch { .. })
        ));
        assert!(matches!(
            combine_mtl_loss([0.5, 0.7], LossMode::DwaFocal, &uw),
            Err(MtlError::ModeStateMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn dwa_weights_sum_to_task_count(
            a in prop::collection::vec(0.01f64..10.0, 3..8),
            b in prop::collection::vec(0.01f64..10.0, 3..8),
            t in 0.05f64..20.0,
            scale in 0.01f64..100.0,
        ) {
            let n = a.len().min(b.len());
            let trace = LossTrace::new(a[..n].to_vec(), b[..n].to_vec()).unwrap();
            let cfg = DwaConfig::new(t).unwrap();
            let scaled = LossTrace::new(
                a[..n].iter().map(|v| v * scale).collect(),
                b[..n].iter().map(|v| v * scale).collect(),
            ).unwrap();
            for epoch in 1..=n {
                let l = dwa_weights(&trace, &cfg, epoch).unwrap();
                prop_assert!((l[0] + l[1] - 2.0).abs() <= 1e-12);
                let s = dwa_weights(&scaled, &cfg, epoch).unwrap();
                prop_assert!((l[0] - s[0]).abs() < 1e-9);
            }
        }

        #[test]
        fn uw_is_stationary_at_log_loss(l in prop::array::uniform2(0.01f64..50.0)) {
            let params = UwParams { log_sigma: [l[0].ln(), l[1].ln()] };
            let g = uw_loss(l, &params).unwrap().grad_log_sigma;
            prop_assert!(g[0].hypot(g[1]) < 1e-8);
        }

        #[test]
        fn focal_never_exceeds_ce(p in 1e-6f64..=1.0, gamma in 0.01f64..5.0) {
            let probs = [p, 1.0 - p];
            let fl = focal_loss(&probs, 0, &FocalParams::new(gamma)).unwrap().value;
            let ce = cross_entropy(&probs, 0).unwrap().value;
            prop_assert!(fl <= ce);
            if p < 1.0 {
                prop_assert!(fl < ce || ce == 0.0);
            }
        }
    }
}
