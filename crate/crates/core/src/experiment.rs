//! Multi-patient simulation study: traverse, corrupt, decode, gate and score
//! each synthetic patient, then aggregate.
//!
//! Patients are independent and run through [`crate::exec`]; each one draws
//! from its own seed derived from `(run seed, patient id)`, so results do not
//! depend on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::domain::{OrganState, PosteriorFrame};
use crate::exec::{map_range, Execution};
use crate::hmm::{DecodedPath, GiHmm};
use crate::io::{format_decoded, format_labels, format_posterior_stream, key_value, write_text, IoError};
use crate::metrics::{summarize, Averaging, ConfusionCounts, MetricSummary, TABLE_HEADER};
use crate::simulator::{
    adapt_frame_rate, corrupt_to_posteriors, derive_seed, generate_traversal, run_gating,
    GatingReport, PatientProfile, SensorModel, TraversalRecord,
};
use crate::Error;

/// Posterior threshold above which a frame counts as anomalous.
pub const ANOMALY_DECISION: f64 = 0.5;

/// Immutable inputs shared by every patient of a study.
#[derive(Debug, Clone)]
pub struct StudyContext {
    pub config: RunConfig,
    pub model: GiHmm,
    pub sensor: SensorModel,
}

impl StudyContext {
    pub fn new(config: RunConfig) -> Result<Self, Error> {
        config.validate()?;
        Ok(StudyContext {
            model: config.model()?,
            sensor: config.sensor()?,
            config,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PatientOutcome {
    pub patient: usize,
    pub record: TraversalRecord,
    pub frames: Vec<PosteriorFrame>,
    pub decoded: DecodedPath,
    pub gating: GatingReport,
    pub rates: Vec<f64>,
    pub raw_counts: ConfusionCounts,
    pub viterbi_counts: ConfusionCounts,
    pub anomaly_counts: ConfusionCounts,
}

pub fn organ_indices<I: IntoIterator<Item = OrganState>>(organs: I) -> Vec<usize> {
    organs.into_iter().map(OrganState::index).collect()
}

pub fn anomaly_decisions(frames: &[PosteriorFrame]) -> Vec<usize> {
    frames
        .iter()
        .map(|f| usize::from(f.anomaly_posterior >= ANOMALY_DECISION))
        .collect()
}

pub fn simulate_patient(ctx: &StudyContext, patient: usize) -> Result<PatientOutcome, Error> {
    let cfg = &ctx.config;
    let patient_seed = derive_seed(cfg.seed, patient as u64);
    let profile = PatientProfile {
        mean_dwell_frames: cfg.model.mean_dwell_frames,
        anomaly_rate_in_si: cfg.simulation.anomaly_rate_in_si,
        seed: derive_seed(patient_seed, 0),
        dwell_model: cfg.simulation.dwell_model,
    };
    let record = generate_traversal(&profile)?;
    let frames = corrupt_to_posteriors(&record, &ctx.sensor, derive_seed(patient_seed, 1))?;
    let decoded = ctx.model.viterbi_from_posteriors(&frames)?;
    let gating = run_gating(&frames, &ctx.model, cfg.policy, &cfg.energy, &record)?;

    let in_si: Vec<bool> = decoded
        .states
        .iter()
        .map(|&s| s == OrganState::SmallIntestine)
        .collect();
    let rates = adapt_frame_rate(&frames, &in_si, &cfg.frame_rate)?;

    let truth = organ_indices(record.organs());
    let raw = organ_indices(frames.iter().map(PosteriorFrame::argmax_organ));
    let smoothed = organ_indices(decoded.states.iter().copied());
    let true_anomaly: Vec<usize> = record.labels.iter().map(|l| usize::from(l.anomaly)).collect();
    Ok(PatientOutcome {
        patient,
        raw_counts: ConfusionCounts::accumulate(&truth, &raw, 5)?,
        viterbi_counts: ConfusionCounts::accumulate(&truth, &smoothed, 5)?,
        anomaly_counts: ConfusionCounts::accumulate(&true_anomaly, &anomaly_decisions(&frames), 2)?,
        record,
        frames,
        decoded,
        gating,
        rates,
    })
}

#[derive(Debug, Clone)]
pub struct PatientSummary {
    pub patient: usize,
    pub frames: usize,
    pub gating: GatingReport,
    pub raw: MetricSummary,
    pub viterbi: MetricSummary,
    pub anomaly: MetricSummary,
    pub boosted_frames: usize,
    pub raw_counts: ConfusionCounts,
    pub viterbi_counts: ConfusionCounts,
    pub anomaly_counts: ConfusionCounts,
}

impl PatientOutcome {
    pub fn summary(&self, boosted_rate: f64) -> Result<PatientSummary, Error> {
        Ok(PatientSummary {
            patient: self.patient,
            frames: self.frames.len(),
            gating: self.gating,
            raw: summarize(&self.raw_counts, Averaging::Macro)?,
            viterbi: summarize(&self.viterbi_counts, Averaging::Macro)?,
            anomaly: summarize(&self.anomaly_counts, Averaging::BinaryPositive)?,
            boosted_frames: self.rates.iter().filter(|&&r| r == boosted_rate).count(),
            raw_counts: self.raw_counts.clone(),
            viterbi_counts: self.viterbi_counts.clone(),
            anomaly_counts: self.anomaly_counts.clone(),
        })
    }

    /// Writes the per-patient artifacts into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let indices: Vec<u64> = self.frames.iter().map(|f| f.frame_index).collect();
        write_text(&dir.join("truth.csv"), &format_labels(&self.record.labels))?;
        write_text(&dir.join("posteriors.csv"), &format_posterior_stream(&self.frames))?;
        write_text(&dir.join("decoded.csv"), &format_decoded(&indices, &self.decoded))?;
        write_text(&dir.join("gating.txt"), &format_gating_report(&self.gating))?;
        let viterbi = summarize(&self.viterbi_counts, Averaging::Macro)?;
        write_text(&dir.join("localization_metrics.txt"), &viterbi.to_key_value())?;
        let anomaly = summarize(&self.anomaly_counts, Averaging::BinaryPositive)?;
        write_text(&dir.join("anomaly_metrics.txt"), &anomaly.to_key_value())?;
        Ok(())
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

pub fn format_gating_report(r: &GatingReport) -> String {
    key_value(&[
        ("true_entry", r.true_entry.to_string()),
        ("detected_entry", opt(r.detected_entry)),
        ("frames_suppressed", r.frames_suppressed.to_string()),
        ("frames_transmitted", r.frames_transmitted.to_string()),
        ("si_frames_total", r.si_frames_total.to_string()),
        ("si_frames_missed", r.si_frames_missed.to_string()),
        ("energy_spent", r.energy_spent.to_string()),
        ("energy_saved_vs_transmit_all", r.energy_saved_vs_transmit_all.to_string()),
    ])
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub patients: Vec<PatientSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 { 0.0 } else { sum / n as f64 }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

impl StudyResult {
    pub fn mean_raw_accuracy(&self) -> f64 {
        mean(self.patients.iter().map(|p| p.raw.accuracy))
    }

    pub fn mean_viterbi_accuracy(&self) -> f64 {
        mean(self.patients.iter().map(|p| p.viterbi.accuracy))
    }

    pub fn patients_improved(&self) -> usize {
        self.patients
            .iter()
            .filter(|p| p.viterbi.accuracy > p.raw.accuracy)
            .count()
    }

    pub fn median_missed_fraction(&self) -> f64 {
        let mut v: Vec<f64> = self.patients.iter().map(|p| p.gating.missed_fraction()).collect();
        median(&mut v)
    }

    fn pooled(&self, pick: impl Fn(&PatientSummary) -> &ConfusionCounts, k: usize) -> ConfusionCounts {
        let mut total = ConfusionCounts::zeros(k);
        for p in &self.patients {
            total.merge(pick(p)).expect("same class count");
        }
        total
    }

    /// Pooled metrics in results-table layout.
    pub fn results_table(&self) -> Result<String, Error> {
        let mut out = format!("{TABLE_HEADER}\n");
        let rows = [
            ("localization_argmax", self.pooled(|p| &p.raw_counts, 5), Averaging::Macro),
            ("localization_viterbi", self.pooled(|p| &p.viterbi_counts, 5), Averaging::Macro),
            ("anomaly", self.pooled(|p| &p.anomaly_counts, 2), Averaging::BinaryPositive),
        ];
        for (label, counts, avg) in rows {
            let _ = writeln!(out, "{}", summarize(&counts, avg)?.table_row(label));
        }
        Ok(out)
    }

    pub fn patient_table(&self) -> String {
        let mut out = String::from(
            "patient,frames,true_entry,detected_entry,si_frames_missed,energy_spent,energy_saved,\
             raw_accuracy,viterbi_accuracy,viterbi_f1,anomaly_f1,boosted_frames\n",
        );
        for p in &self.patients {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                p.patient,
                p.frames,
                p.gating.true_entry,
                opt(p.gating.detected_entry),
                p.gating.si_frames_missed,
                p.gating.energy_spent,
                p.gating.energy_saved_vs_transmit_all,
                p.raw.accuracy,
                p.viterbi.accuracy,
                p.viterbi.f1,
                p.anomaly.f1,
                p.boosted_frames
            );
        }
        out
    }

    pub fn summary_record(&self) -> String {
        let spent: u64 = self.patients.iter().map(|p| p.gating.energy_spent).sum();
        let saved: u64 = self.patients.iter().map(|p| p.gating.energy_saved_vs_transmit_all).sum();
        let saved_pct = if spent + saved == 0 {
            0.0
        } else {
            100.0 * saved as f64 / (spent + saved) as f64
        };
        let raw = self.mean_raw_accuracy();
        let vit = self.mean_viterbi_accuracy();
        key_value(&[
            ("patients", self.patients.len().to_string()),
            ("mean_raw_accuracy", format!("{raw:.6}")),
            ("mean_viterbi_accuracy", format!("{vit:.6}")),
            ("accuracy_gain_pp", format!("{:.4}", 100.0 * (vit - raw))),
            ("patients_improved", self.patients_improved().to_string()),
            ("median_missed_si_fraction", format!("{:.6}", self.median_missed_fraction())),
            ("energy_saved_percent", format!("{saved_pct:.4}")),
        ])
    }
}

/// Runs the study in memory.
pub fn run_study(config: &RunConfig, exec: Execution) -> Result<StudyResult, Error> {
    let ctx = StudyContext::new(config.clone())?;
    let boosted = config.frame_rate.boosted_rate;
    let patients = map_range(config.patients, exec, |id| {
        simulate_patient(&ctx, id)?.summary(boosted)
    })
    .into_iter()
    .collect::<Result<Vec<_>, Error>>()?;
    Ok(StudyResult { patients })
}

/// Runs the study and writes every artifact under `out_dir`.
pub fn write_study(config: &RunConfig, out_dir: &Path, exec: Execution) -> Result<StudyResult, Error> {
    let ctx = StudyContext::new(config.clone())?;
    fs::create_dir_all(out_dir).map_err(|source| IoError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    write_text(&out_dir.join("config.toml"), &config.to_toml())?;
    let boosted = config.frame_rate.boosted_rate;
    let patients = map_range(config.patients, exec, |id| {
        let outcome = simulate_patient(&ctx, id)?;
        outcome.write(&out_dir.join("patients").join(format!("patient_{id:04}")))?;
        outcome.summary(boosted)
    })
    .into_iter()
    .collect::<Result<Vec<_>, Error>>()?;
    let study = StudyResult { patients };
    write_text(&out_dir.join("patients.csv"), &study.patient_table())?;
    write_text(&out_dir.join("results.csv"), &study.results_table()?)?;
    write_text(&out_dir.join("summary.txt"), &study.summary_record())?;
    Ok(study)
}
