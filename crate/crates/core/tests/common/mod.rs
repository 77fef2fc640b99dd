//! Reference implementations for the integration tests. Everything here is
//! written from the textbook definitions and shares no code with the library.
#![allow(dead_code)]

use rand::Rng;
use vcekit::domain::ProbabilityMatrix;

/// Plain nested-vector form of an HMM.
#[derive(Debug, Clone)]
pub struct DenseHmm {
    pub initial: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub emit: Vec<Vec<f64>>,
}

fn random_distribution<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

impl DenseHmm {
    /// Random banded model with strictly positive emissions and initial mass.
    pub fn random_banded<R: Rng>(rng: &mut R, states: usize, symbols: usize) -> Self {
        let mut trans = vec![vec![0.0; states]; states];
        for (i, row) in trans.iter_mut().enumerate() {
            if i + 1 < states {
                let stay = rng.random_range(0.05..0.95);
                row[i] = stay;
                row[i + 1] = 1.0 - stay;
            } else {
                row[i] = 1.0;
            }
        }
        DenseHmm {
            initial: random_distribution(rng, states),
            trans,
            emit: (0..states).map(|_| random_distribution(rng, symbols)).collect(),
        }
    }

    pub fn trans_matrix(&self) -> ProbabilityMatrix {
        ProbabilityMatrix::from_rows(&self.trans).unwrap()
    }

    pub fn emit_matrix(&self) -> ProbabilityMatrix {
        ProbabilityMatrix::from_rows(&self.emit).unwrap()
    }

    /// Joint probability of a state path and observations, in linear space.
    pub fn joint(&self, path: &[usize], obs: &[usize]) -> f64 {
        let mut p = self.initial[path[0]] * self.emit[path[0]][obs[0]];
        for t in 1..path.len() {
            p *= self.trans[path[t - 1]][path[t]] * self.emit[path[t]][obs[t]];
        }
        p
    }
}

/// Every path that starts anywhere and then stays or advances by one.
pub fn monotone_paths(states: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack: Vec<Vec<usize>> = (0..states).map(|s| vec![s]).collect();
    while let Some(path) = stack.pop() {
        if path.len() == len {
            out.push(path);
            continue;
        }
        let last = *path.last().unwrap();
        for next in [last, last + 1] {
            if next < states {
                let mut p = path.clone();
                p.push(next);
                stack.push(p);
            }
        }
    }
    out
}

/// Best monotone path by exhaustive enumeration: (path, ln probability).
/// `None` when every path has probability zero.
pub fn enumerate_best(model: &DenseHmm, obs: &[usize]) -> Option<(Vec<usize>, f64)> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for path in monotone_paths(model.initial.len(), obs.len()) {
        let p = model.joint(&path, obs);
        if p > 0.0 && best.as_ref().is_none_or(|(_, b)| p > *b) {
            best = Some((path, p));
        }
    }
    best.map(|(path, p)| (path, p.ln()))
}

/// Straightforward log-space Viterbi over the full transition matrix.
/// Ties resolve to the lowest predecessor index and the lowest final state.
pub fn dense_viterbi(model: &DenseHmm, obs: &[usize]) -> Option<(Vec<usize>, f64)> {
    let n = model.initial.len();
    let mut score: Vec<f64> = (0..n)
        .map(|j| model.initial[j].ln() + model.emit[j][obs[0]].ln())
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(obs.len());
    for &o in &obs[1..] {
        let mut next = vec![f64::NEG_INFINITY; n];
        let mut arg = vec![0; n];
        for j in 0..n {
            for i in 0..n {
                let s = score[i] + model.trans[i][j].ln();
                if s > next[j] {
                    next[j] = s;
                    arg[j] = i;
                }
            }
            next[j] += model.emit[j][o].ln();
        }
        back.push(arg);
        score = next;
    }
    let mut last = 0;
    for j in 1..n {
        if score[j] > score[last] {
            last = j;
        }
    }
    if score[last] == f64::NEG_INFINITY {
        return None;
    }
    let mut path = vec![last];
    for arg in back.iter().rev() {
        let prev = arg[*path.last().unwrap()];
        path.push(prev);
    }
    path.reverse();
    Some((path, score[last]))
}

/// `λ_i = 2·exp(w_i/T) / Σ_k exp(w_k/T)` for two tasks.
pub fn dwa_oracle(w: [f64; 2], temperature: f64) -> [f64; 2] {
    let e0 = (w[0] / temperature).exp();
    let e1 = (w[1] / temperature).exp();
    [2.0 * e0 / (e0 + e1), 2.0 * e1 / (e0 + e1)]
}

pub fn uw_oracle(losses: [f64; 2], log_sigma: [f64; 2]) -> f64 {
    losses[0] / log_sigma[0].exp() + log_sigma[0] + losses[1] / log_sigma[1].exp() + log_sigma[1]
}

pub fn focal_oracle(p_true: f64, gamma: f64, alpha: f64) -> f64 {
    -alpha * (1.0 - p_true).powf(gamma) * p_true.ln()
}

pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - b| <= tol · max(|a|, |b|, 1)`.
pub fn close_relative(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// A confusion-count fixture with its expected metrics worked out by hand.
pub struct MetricFixture {
    pub name: &'static str,
    pub rows: Vec<Vec<u64>>,
    pub binary: bool,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub undefined: Vec<usize>,
}

fn fixture(
    name: &'static str,
    rows: Vec<Vec<u64>>,
    binary: bool,
    [accuracy, precision, recall, f1]: [f64; 4],
    undefined: Vec<usize>,
) -> MetricFixture {
    MetricFixture {
        name,
        rows,
        binary,
        accuracy,
        precision,
        recall,
        f1,
        undefined,
    }
}

/// Binary fixtures are `[[TN, FP], [FN, TP]]` scored on class 1; the others
/// are macro averages over every class.
pub fn metric_fixtures() -> Vec<MetricFixture> {
    vec![
        fixture("binary tp5 fp5 fn5 tn85", vec![vec![85, 5], vec![5, 5]], true, [0.9, 0.5, 0.5, 0.5], vec![]),
        fixture("binary perfect", vec![vec![10, 0], vec![0, 10]], true, [1.0, 1.0, 1.0, 1.0], vec![]),
        fixture("binary all wrong", vec![vec![0, 10], vec![10, 0]], true, [0.0, 0.0, 0.0, 0.0], vec![]),
        fixture("binary never predicts positive", vec![vec![90, 0], vec![10, 0]], true, [0.9, 0.0, 0.0, 0.0], vec![1]),
        fixture("binary no true positives exist", vec![vec![90, 10], vec![0, 0]], true, [0.9, 0.0, 0.0, 0.0], vec![1]),
        fixture("binary 50/10/20/20", vec![vec![50, 10], vec![20, 20]], true, [0.7, 2.0 / 3.0, 0.5, 4.0 / 7.0], vec![]),
        fixture("binary 1/2/3/4", vec![vec![1, 2], vec![3, 4]], true, [0.5, 2.0 / 3.0, 4.0 / 7.0, 8.0 / 13.0], vec![]),
        fixture("macro of tp5 fp5 fn5 tn85", vec![vec![85, 5], vec![5, 5]], false, [0.9, 13.0 / 18.0, 13.0 / 18.0, 13.0 / 18.0], vec![]),
        fixture(
            "five-class identity",
            vec![
                vec![10, 0, 0, 0, 0],
                vec![0, 20, 0, 0, 0],
                vec![0, 0, 30, 0, 0],
                vec![0, 0, 0, 40, 0],
                vec![0, 0, 0, 0, 50],
            ],
            false,
            [1.0, 1.0, 1.0, 1.0],
            vec![],
        ),
        fixture(
            "five-class with an absent class",
            vec![
                vec![5, 0, 0, 0, 0],
                vec![0, 5, 0, 0, 0],
                vec![0, 0, 0, 0, 0],
                vec![0, 0, 0, 5, 0],
                vec![0, 0, 0, 0, 5],
            ],
            false,
            [1.0, 0.8, 0.8, 0.8],
            vec![2],
        ),
        fixture(
            "three-class cyclic errors",
            vec![vec![2, 1, 0], vec![0, 3, 1], vec![1, 0, 4]],
            false,
            [0.75, 133.0 / 180.0, 133.0 / 180.0, 133.0 / 180.0],
            vec![],
        ),
        fixture(
            "three-class never predicts class 2",
            vec![vec![4, 0, 0], vec![2, 2, 0], vec![2, 0, 0]],
            false,
            [0.6, 0.5, 0.5, 4.0 / 9.0],
            vec![2],
        ),
        fixture(
            "five-class mouth only",
            vec![
                vec![10, 0, 0, 0, 0],
                vec![0; 5],
                vec![0; 5],
                vec![0; 5],
                vec![0; 5],
            ],
            false,
            [1.0, 0.2, 0.2, 0.2],
            vec![1, 2, 3, 4],
        ),
        fixture(
            "five-class stomach confused with small intestine",
            vec![
                vec![0; 5],
                vec![0; 5],
                vec![0, 0, 6, 4, 0],
                vec![0; 5],
                vec![0; 5],
            ],
            false,
            [0.6, 0.2, 0.12, 0.15],
            vec![0, 1, 3, 4],
        ),
        fixture(
            "five-class banded errors",
            vec![
                vec![8, 2, 0, 0, 0],
                vec![1, 8, 1, 0, 0],
                vec![0, 1, 8, 1, 0],
                vec![0, 0, 1, 8, 1],
                vec![0, 0, 0, 2, 8],
            ],
            false,
            [
                0.8,
                (2.0 * 8.0 / 9.0 + 2.0 * 8.0 / 11.0 + 0.8) / 5.0,
                0.8,
                (2.0 * 16.0 / 19.0 + 2.0 * 16.0 / 21.0 + 0.8) / 5.0,
            ],
            vec![],
        ),
        fixture("binary large counts", vec![vec![900, 100], vec![50, 950]], true, [0.925, 19.0 / 21.0, 0.95, 38.0 / 41.0], vec![]),
        fixture("binary single positive", vec![vec![0, 0], vec![0, 1]], true, [1.0, 1.0, 1.0, 1.0], vec![]),
        fixture("binary negatives only", vec![vec![7, 0], vec![0, 0]], true, [1.0, 0.0, 0.0, 0.0], vec![1]),
        fixture("macro always positive", vec![vec![0, 3], vec![0, 7]], false, [0.7, 0.35, 0.5, 7.0 / 17.0], vec![0]),
        fixture(
            "four-class mixed",
            vec![vec![3, 1, 0, 0], vec![0, 0, 0, 0], vec![1, 0, 2, 1], vec![0, 0, 0, 4]],
            false,
            [0.75, 0.6375, 0.5625, 83.0 / 144.0],
            vec![1],
        ),
    ]
}

/// Manifest with `negatives[o]` normal frames per organ `o` and
/// `(tag, organ, count)` pathology frames. Frame indices are unique.
pub fn synthetic_manifest(
    negatives: [usize; 5],
    pathologies: &[(&str, vcekit::OrganState, usize)],
) -> vcekit::datasetprep::FrameManifest {
    use vcekit::datasetprep::{FrameManifest, ManifestEntry};
    let mut entries = Vec::new();
    let mut next = 0u64;
    let mut push = |organ, pathology: Option<&str>| {
        entries.push(ManifestEntry {
            patient_id: (next % 20) as u32,
            frame_index: next,
            organ,
            pathology: pathology.map(str::to_string),
        });
        next += 1;
    };
    for (organ, &n) in vcekit::OrganState::ALL.iter().zip(&negatives) {
        for _ in 0..n {
            push(*organ, None);
        }
    }
    for &(tag, organ, n) in pathologies {
        for _ in 0..n {
            push(organ, Some(tag));
        }
    }
    FrameManifest::new(entries).unwrap()
}
