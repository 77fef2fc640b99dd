//! Label-driven rebalancing of frame manifests: collapse pathologies into one
//! anomaly class, downsample to a 1:1 normal:anomaly ratio while keeping every
//! mouth and esophagus frame, then shuffle into train and validation subsets.
//!
//! The split is frame-level, so frames of one patient can land on both sides.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{OrganState, ORGAN_COUNT};

/// Accepted deviation of the negative:positive ratio from 1.
pub const RATIO_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrepError {
    #[error("duplicate frame (patient {patient_id}, frame {frame_index})")]
    DuplicateFrame { patient_id: u32, frame_index: u64 },
    #[error("split ratio ({0}, {1}) must be positive and sum to 1")]
    InvalidRatio(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: u32,
    pub frame_index: u64,
    pub organ: OrganState,
    pub pathology: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameManifest {
    entries: Vec<ManifestEntry>,
}

impl FrameManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, PrepError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert((e.patient_id, e.frame_index)) {
                return Err(PrepError::DuplicateFrame {
                    patient_id: e.patient_id,
                    frame_index: e.frame_index,
                });
            }
        }
        Ok(FrameManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarizedEntry {
    pub entry: ManifestEntry,
    pub anomaly: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BinarizedManifest {
    pub entries: Vec<BinarizedEntry>,
    /// Frames per original pathology tag.
    pub pathology_counts: BTreeMap<String, usize>,
}

impl BinarizedManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.anomaly).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn subset(&self, keep: &[bool]) -> BinarizedManifest {
        let entries: Vec<BinarizedEntry> = self
            .entries
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(e, _)| e.clone())
            .collect();
        let pathology_counts = count_pathologies(&entries);
        BinarizedManifest {
            entries,
            pathology_counts,
        }
    }
}

fn count_pathologies(entries: &[BinarizedEntry]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for tag in entries.iter().filter_map(|e| e.entry.pathology.as_ref()) {
        *counts.entry(tag.clone()).or_insert(0) += 1;
    }
    counts
}

/// Any pathology tag marks the frame anomalous.
pub fn binarize_anomalies(manifest: &FrameManifest) -> BinarizedManifest {
    let entries: Vec<BinarizedEntry> = manifest
        .entries
        .iter()
        .map(|e| BinarizedEntry {
            anomaly: e.pathology.is_some(),
            entry: e.clone(),
        })
        .collect();
    let pathology_counts = count_pathologies(&entries);
    BinarizedManifest {
        entries,
        pathology_counts,
    }
}

fn protected(organ: OrganState) -> bool {
    matches!(organ, OrganState::Mouth | OrganState::Esophagus)
}

/// negatives / positives; infinite when there are no positives.
pub fn class_ratio(negatives: usize, positives: usize) -> f64 {
    if positives == 0 {
        f64::INFINITY
    } else {
        negatives as f64 / positives as f64
    }
}

pub fn ratio_within_tolerance(negatives: usize, positives: usize) -> bool {
    (class_ratio(negatives, positives) - 1.0).abs() <= RATIO_TOLERANCE
}

#[derive(Debug, Clone, PartialEq)]
pub struct RebalanceOutcome {
    pub manifest: BinarizedManifest,
    pub negatives: usize,
    pub positives: usize,
    /// Not even keeping every positive (or every protected negative) reaches
    /// the target ratio; `manifest` holds the closest achievable subset.
    pub insufficient_positives: bool,
}

impl RebalanceOutcome {
    pub fn ratio(&self) -> f64 {
        class_ratio(self.negatives, self.positives)
    }
}

/// Splits `target` over groups proportionally to their sizes, giving every
/// non-empty group at least one slot when the target allows.
fn proportional_quota(sizes: &[usize], target: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if target >= total {
        return sizes.to_vec();
    }
    let mut quota: Vec<usize> = sizes
        .iter()
        .map(|&n| {
            let q = (target as u128 * n as u128 / total as u128) as usize;
            if n > 0 && q == 0 { 1 } else { q }.min(n)
        })
        .collect();
    let mut assigned: usize = quota.iter().sum();
    // largest remainder first, ties to the earlier group
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = (target as u128 * sizes[a] as u128) % total as u128;
        let rb = (target as u128 * sizes[b] as u128) % total as u128;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    while assigned < target {
        let before = assigned;
        for &g in &order {
            if assigned < target && quota[g] < sizes[g] {
                quota[g] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    // minimum-of-one slots can overshoot a small target; trim the largest quotas
    while assigned > target {
        let g = (0..quota.len()).max_by_key(|&g| (quota[g], usize::MAX - g)).unwrap();
        quota[g] -= 1;
        assigned -= 1;
    }
    quota
}

/// Downsamples the majority class to a 1:1 negative:positive ratio.
///
/// Mouth and esophagus frames are always kept. Surplus negatives are drawn
/// uniformly from the remaining organs; surplus positives are drawn per
/// pathology, proportionally to each pathology's frame count.
pub fn rebalance(manifest: &BinarizedManifest, seed: u64) -> RebalanceOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives = manifest.negatives();
    let positives = manifest.positives();
    let mut keep = vec![true; manifest.len()];

    let finish = |keep: &[bool], insufficient: bool| {
        let out = manifest.subset(keep);
        RebalanceOutcome {
            negatives: out.negatives(),
            positives: out.positives(),
            manifest: out,
            insufficient_positives: insufficient,
        }
    };

    if positives == 0 || ratio_within_tolerance(negatives, positives) {
        return finish(&keep, positives == 0 && negatives > 0);
    }

    let is_candidate = |e: &BinarizedEntry, anomalous: bool| {
        e.anomaly == anomalous && !protected(e.entry.organ)
    };

    if negatives > positives {
        let candidates: Vec<usize> = (0..manifest.len())
            .filter(|&i| is_candidate(&manifest.entries[i], false))
            .collect();
        let protected_negatives = negatives - candidates.len();
        let keep_count = positives.saturating_sub(protected_negatives);
        for &i in &candidates {
            keep[i] = false;
        }
        for k in index::sample(&mut rng, candidates.len(), keep_count) {
            keep[candidates[k]] = true;
        }
        return finish(&keep, protected_negatives > positives);
    }

    // more positives than negatives: thin positives pathology by pathology
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if is_candidate(e, true) {
            let tag = e.entry.pathology.as_deref().unwrap_or("");
            groups.entry(tag).or_default().push(i);
        }
    }
    let candidate_total: usize = groups.values().map(Vec::len).sum();
    let protected_positives = positives - candidate_total;
    let target = negatives.saturating_sub(protected_positives);
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let quota = proportional_quota(&sizes, target);
    for (members, q) in groups.values().zip(quota) {
        for &i in members {
            keep[i] = false;
        }
        for k in index::sample(&mut rng, members.len(), q) {
            keep[members[k]] = true;
        }
    }
    finish(&keep, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: BinarizedManifest,
    pub val: BinarizedManifest,
}

/// Seeded frame-level shuffle split; `|train| = round(train_fraction · N)`.
/// Both subsets keep the input order.
pub fn split(
    manifest: &BinarizedManifest,
    ratio: (f64, f64),
    seed: u64,
) -> Result<SplitResult, PrepError> {
    let (train_frac, val_frac) = ratio;
    if !(train_frac > 0.0 && val_frac > 0.0) || ((train_frac + val_frac) - 1.0).abs() > 1e-9 {
        return Err(PrepError::InvalidRatio(train_frac, val_frac));
    }
    let n = manifest.len();
    let n_train = (train_frac * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let in_val: Vec<bool> = in_train.iter().map(|t| !t).collect();
    Ok(SplitResult {
        train: manifest.subset(&in_train),
        val: manifest.subset(&in_val),
    })
}

/// One row of the class-distribution table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub subset: String,
    pub organs: [usize; ORGAN_COUNT],
    pub organ_total: usize,
    pub negative: usize,
    pub positive: usize,
    pub anomaly_total: usize,
}

impl DistributionRow {
    pub fn from_manifest(subset: &str, manifest: &BinarizedManifest) -> Self {
        let mut organs = [0; ORGAN_COUNT];
        for e in &manifest.entries {
            organs[e.entry.organ.index()] += 1;
        }
        let positive = manifest.positives();
        DistributionRow {
            subset: subset.to_string(),
            organ_total: organs.iter().sum(),
            organs,
            negative: manifest.len() - positive,
            positive,
            anomaly_total: manifest.len(),
        }
    }

    /// Organ columns from one task's manifest, anomaly columns from another's.
    pub fn combine(subset: &str, organ_task: &BinarizedManifest, anomaly_task: &BinarizedManifest) -> Self {
        let organs = Self::from_manifest(subset, organ_task);
        let anomaly = Self::from_manifest(subset, anomaly_task);
        DistributionRow {
            negative: anomaly.negative,
            positive: anomaly.positive,
            anomaly_total: anomaly.anomaly_total,
            ..organs
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub rows: Vec<DistributionRow>,
}

pub const DISTRIBUTION_HEADER: &str =
    "subset,mouth,esophagus,stomach,small_intestine,colon,organ_total,negative,positive,anomaly_total";

impl DistributionTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{DISTRIBUTION_HEADER}");
        for r in &self.rows {
            let organs: Vec<String> = r.organs.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.subset,
                organs.join(","),
                r.organ_total,
                r.negative,
                r.positive,
                r.anomaly_total
            );
        }
        out
    }
}

/// Per-subset organ and negative/positive counts.
pub fn distribution_report(result: &SplitResult) -> DistributionTable {
    DistributionTable {
        rows: vec![
            DistributionRow::from_manifest("train", &result.train),
            DistributionRow::from_manifest("val", &result.val),
        ],
    }
}
