mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcekit::metrics::{summarize, Averaging, ConfusionCounts};

#[test]
fn summarize_matches_hand_computed_fixtures() {
    let fixtures = common::metric_fixtures();
    assert_eq!(fixtures.len(), 20);
    for f in &fixtures {
        let counts = ConfusionCounts::from_rows(&f.rows).unwrap();
        let averaging = if f.binary { Averaging::BinaryPositive } else { Averaging::Macro };
        let s = summarize(&counts, averaging).unwrap();
        for (what, got, want) in [
            ("accuracy", s.accuracy, f.accuracy),
            ("precision", s.precision, f.precision),
            ("recall", s.recall, f.recall),
            ("f1", s.f1, f.f1),
        ] {
            assert!((got - want).abs() <= 1e-12, "{}: {what} {got} vs {want}", f.name);
            assert_eq!(format!("{got:.6}"), format!("{want:.6}"), "{}: {what}", f.name);
        }
        assert_eq!(s.undefined_classes, f.undefined, "{}", f.name);
    }
}

#[test]
fn accumulate_matches_independent_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth: Vec<usize> = (0..1000).map(|_| rng.random_range(0..5)).collect();
    let pred: Vec<usize> = (0..1000).map(|_| rng.random_range(0..5)).collect();
    let counts = ConfusionCounts::accumulate(&truth, &pred, 5).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let recount = truth.iter().zip(&pred).filter(|&(&t, &p)| t == i && p == j).count();
            assert_eq!(counts.get(i, j), recount as u64);
        }
    }
}
