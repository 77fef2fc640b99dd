use vcekit::hmm::{detect_entry, forward_update, EntryPolicy, DEFAULT_INITIAL, DEFAULT_MEAN_DWELL};
use vcekit::simulator::{
    adapt_frame_rate, corrupt_to_posteriors, derive_seed, diagonal_emissions, generate_traversal,
    DwellModel, FrameRatePolicy, PatientProfile, SensorModel,
};
use vcekit::{FilterState, GiHmm, OrganState};

fn profile(seed: u64) -> PatientProfile {
    PatientProfile {
        mean_dwell_frames: DEFAULT_MEAN_DWELL,
        anomaly_rate_in_si: 0.07,
        seed,
        dwell_model: DwellModel::Geometric,
    }
}

fn sensor() -> SensorModel {
    SensorModel {
        emissions: diagonal_emissions(0.85).unwrap(),
        anomaly_sensitivity: 0.55,
        anomaly_false_positive: 0.05,
        frame_period_ms: 500,
    }
}

fn dwell_means(run_seed: u64, patients: u64) -> [f64; 5] {
    let mut totals = [0u64; 5];
    for p in 0..patients {
        let record = generate_traversal(&profile(derive_seed(run_seed, p))).unwrap();
        for organ in record.organs() {
            totals[organ.index()] += 1;
        }
    }
    totals.map(|t| t as f64 / patients as f64)
}

fn assert_within_five_percent(means: [f64; 5]) {
    for (organ, (&mean, &target)) in OrganState::ALL.iter().zip(means.iter().zip(&DEFAULT_MEAN_DWELL)) {
        assert!(
            (mean - target).abs() <= 0.05 * target,
            "{organ}: mean dwell {mean} vs {target}"
        );
    }
}

#[test]
fn empirical_dwell_means_track_targets() {
    assert_within_five_percent(dwell_means(2024, 1000));
}

#[test]
fn empirical_dwell_means_track_targets_large_sample() {
    assert_within_five_percent(dwell_means(2024, 10_000));
}

#[test]
fn frame_accuracy_matches_emission_diagonal() {
    let sensor = sensor();
    let mut frames = 0usize;
    let mut correct = 0usize;
    let mut p = 0;
    while frames < 100_000 {
        let record = generate_traversal(&profile(derive_seed(77, p))).unwrap();
        let stream = corrupt_to_posteriors(&record, &sensor, derive_seed(78, p)).unwrap();
        for (label, frame) in record.labels.iter().zip(&stream) {
            correct += usize::from(label.organ == frame.argmax_organ());
        }
        frames += stream.len();
        p += 1;
    }
    let accuracy = correct as f64 / frames as f64;
    assert!((accuracy - 0.85).abs() <= 0.01, "accuracy {accuracy} over {frames} frames");
}

#[test]
fn entry_detection_lands_near_true_entry() {
    let sensor = sensor();
    let model = GiHmm::from_dwell(DEFAULT_INITIAL, DEFAULT_MEAN_DWELL, sensor.emissions.clone()).unwrap();
    // 1% of the small-intestine mean dwell
    let tolerance = (0.01 * DEFAULT_MEAN_DWELL[3]).round() as usize;
    let runs = 200;
    let mut hits = 0;
    for run in 0..runs {
        let record = generate_traversal(&profile(derive_seed(5, run))).unwrap();
        let stream = corrupt_to_posteriors(&record, &sensor, derive_seed(6, run)).unwrap();
        let mut state = FilterState::new(&model);
        let beliefs: Vec<FilterState> = stream
            .iter()
            .map(|f| {
                state = forward_update(&state, &model, f.argmax_organ()).unwrap_or_else(|e| e.fallback);
                state
            })
            .collect();
        if let Some(detected) = detect_entry(&beliefs, EntryPolicy::default()).unwrap() {
            if detected.abs_diff(record.entry_frame) <= tolerance {
                hits += 1;
            }
        }
    }
    assert!(hits * 100 >= 95 * runs as usize, "{hits}/{runs} within {tolerance} frames");
}

#[test]
fn frame_rate_schedule_matches_per_frame_reevaluation() {
    let sensor = sensor();
    let policy = FrameRatePolicy::default();
    for p in 0..5 {
        let record = generate_traversal(&PatientProfile {
            mean_dwell_frames: [5.0, 5.0, 40.0, 300.0, 50.0],
            anomaly_rate_in_si: 0.2,
            seed: p,
            dwell_model: DwellModel::Geometric,
        })
        .unwrap();
        let stream = corrupt_to_posteriors(&record, &sensor, p + 50).unwrap();
        let in_si: Vec<bool> = record.organs().map(|o| o == OrganState::SmallIntestine).collect();
        let schedule = adapt_frame_rate(&stream, &in_si, &policy).unwrap();
        assert_eq!(schedule.len(), stream.len());
        for t in 0..stream.len() {
            let boosted = in_si[t] && stream[t].anomaly_posterior >= policy.anomaly_threshold;
            let want = if boosted { policy.boosted_rate } else { policy.base_rate };
            assert_eq!(schedule[t], want, "patient {p} frame {t}");
        }
        assert!(schedule.iter().any(|&r| r == policy.boosted_rate));
    }
}
