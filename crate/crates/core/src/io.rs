//! Delimited-text formats for posterior streams, labels, decoded paths,
//! confusion matrices, frame manifests and loss histories.
//!
//! Probabilities are written with 9 significant digits. Lines starting with
//! `#` are comments everywhere.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use csv::{ReaderBuilder, StringRecord, Trim};
use thiserror::Error;

use crate::datasetprep::{BinarizedEntry, FrameManifest, ManifestEntry, PrepError};
use crate::domain::{DomainError, LabelFrame, OrganState, PosteriorFrame, ORGAN_COUNT};
use crate::hmm::DecodedPath;
use crate::mtl_math::{LossTrace, MtlError};

pub const POSTERIOR_HEADER: &str =
    "frame_index,timestamp_ms,p_mouth,p_esophagus,p_stomach,p_small_intestine,p_colon,p_anomaly";
pub const LABEL_HEADER: &str = "frame_index,organ,anomaly";
pub const DECODED_HEADER: &str = "frame_index,organ";
pub const MANIFEST_HEADER: &str = "patient_id,frame_index,organ,pathology_tag";
pub const LOSS_HEADER: &str = "epoch,loss_localization,loss_anomaly";
pub const CONFUSION_COMMENT: &str =
    "# rows: true organ, columns: predicted organ (mouth, esophagus, stomach, small_intestine, colon)";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: {message}")]
    InvariantViolation { line: u64, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("line {line}: negative count {value}")]
    NegativeCount { line: u64, value: String },
}

impl IoError {
    fn parse(line: u64, message: impl Into<String>) -> Self {
        IoError::Parse {
            line,
            message: message.into(),
        }
    }

    fn invariant(line: u64, err: impl std::fmt::Display) -> Self {
        IoError::InvariantViolation {
            line,
            message: err.to_string(),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Formats a probability-scale value with 9 significant digits.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exponent = x.abs().log10().floor() as i32;
    if !(-6..=9).contains(&exponent) {
        return format!("{x:.8e}");
    }
    let decimals = (8 - exponent).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding can carry into a new digit (0.9999999999 -> 1.000000000)
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" { "0".into() } else { s }
}

struct Records {
    rows: Vec<(u64, StringRecord)>,
}

/// Reads all non-comment records; the first must equal `header`.
fn read_records(text: &str, header: &str) -> Result<Records, IoError> {
    let mut reader = ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut iter = reader.records();
    let expected: Vec<&str> = header.split(',').collect();
    match iter.next() {
        None => return Err(IoError::parse(1, format!("missing header `{header}`"))),
        Some(first) => {
            let first = first.map_err(|e| IoError::parse(1, e.to_string()))?;
            let got: Vec<&str> = first.iter().collect();
            if got != expected {
                let line = first.position().map_or(1, |p| p.line());
                return Err(IoError::parse(
                    line,
                    format!("expected header `{header}`, found `{}`", got.join(",")),
                ));
            }
        }
    }
    for rec in iter {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            IoError::parse(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != expected.len() {
            return Err(IoError::parse(
                line,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        rows.push((line, rec));
    }
    Ok(Records { rows })
}

fn field<T: std::str::FromStr>(rec: &StringRecord, i: usize, line: u64, name: &str) -> Result<T, IoError> {
    rec[i]
        .parse()
        .map_err(|_| IoError::parse(line, format!("invalid {name} `{}`", &rec[i])))
}

fn organ_field(rec: &StringRecord, i: usize, line: u64) -> Result<OrganState, IoError> {
    rec[i].parse().map_err(|e: DomainError| IoError::parse(line, e.to_string()))
}

fn bool_field(rec: &StringRecord, i: usize, line: u64) -> Result<bool, IoError> {
    match &rec[i] {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(IoError::parse(line, format!("invalid flag `{other}`"))),
    }
}

pub fn parse_posterior_stream(text: &str) -> Result<Vec<PosteriorFrame>, IoError> {
    let records = read_records(text, POSTERIOR_HEADER)?;
    let mut frames: Vec<PosteriorFrame> = Vec::with_capacity(records.rows.len());
    for (line, rec) in &records.rows {
        let line = *line;
        let frame_index: u64 = field(rec, 0, line, "frame_index")?;
        let timestamp_ms: u64 = field(rec, 1, line, "timestamp_ms")?;
        let mut posterior = [0.0; ORGAN_COUNT];
        for (k, p) in posterior.iter_mut().enumerate() {
            *p = field(rec, 2 + k, line, "probability")?;
        }
        let anomaly: f64 = field(rec, 7, line, "p_anomaly")?;
        let frame = PosteriorFrame::new(frame_index, timestamp_ms, &posterior, anomaly)
            .map_err(|e| IoError::invariant(line, e))?;
        if let Some(prev) = frames.last() {
            if frame.frame_index <= prev.frame_index {
                return Err(IoError::invariant(
                    line,
                    DomainError::DuplicateFrameIndex(frame.frame_index),
                ));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn read_posterior_stream(path: &Path) -> Result<Vec<PosteriorFrame>, IoError> {
    parse_posterior_stream(&read_text(path)?)
}

pub fn format_posterior_stream(frames: &[PosteriorFrame]) -> String {
    let mut out = String::with_capacity(64 * (frames.len() + 1));
    let _ = writeln!(out, "{POSTERIOR_HEADER}");
    for f in frames {
        let _ = write!(out, "{},{}", f.frame_index, f.timestamp_ms);
        for p in f.organ_posterior {
            let _ = write!(out, ",{}", fmt_sig9(p));
        }
        let _ = writeln!(out, ",{}", fmt_sig9(f.anomaly_posterior));
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelFrame>, IoError> {
    read_records(text, LABEL_HEADER)?
        .rows
        .iter()
        .map(|(line, rec)| {
            Ok(LabelFrame {
                frame_index: field(rec, 0, *line, "frame_index")?,
                organ: organ_field(rec, 1, *line)?,
                anomaly: bool_field(rec, 2, *line)?,
            })
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelFrame>, IoError> {
    parse_labels(&read_text(path)?)
}

pub fn format_labels(labels: &[LabelFrame]) -> String {
    let mut out = String::with_capacity(24 * (labels.len() + 1));
    let _ = writeln!(out, "{LABEL_HEADER}");
    for l in labels {
        let _ = writeln!(out, "{},{},{}", l.frame_index, l.organ, u8::from(l.anomaly));
    }
    out
}

/// Per-frame decoded organs followed by a `# log_prob=` footer.
pub fn format_decoded(frame_indices: &[u64], path: &DecodedPath) -> String {
    let mut out = String::with_capacity(24 * (path.states.len() + 2));
    let _ = writeln!(out, "{DECODED_HEADER}");
    for (i, s) in frame_indices.iter().zip(&path.states) {
        let _ = writeln!(out, "{i},{s}");
    }
    let _ = writeln!(out, "# log_prob={}", path.log_prob);
    out
}

/// Returns `(frame_index, organ)` pairs and the footer log-probability if present.
pub fn parse_decoded(text: &str) -> Result<(Vec<(u64, OrganState)>, Option<f64>), IoError> {
    let rows = read_records(text, DECODED_HEADER)?
        .rows
        .iter()
        .map(|(line, rec)| Ok((field(rec, 0, *line, "frame_index")?, organ_field(rec, 1, *line)?)))
        .collect::<Result<Vec<_>, IoError>>()?;
    let log_prob = text
        .lines()
        .filter_map(|l| l.trim().strip_prefix("# log_prob="))
        .next_back()
        .and_then(|v| v.parse().ok());
    Ok((rows, log_prob))
}

pub fn parse_confusion(text: &str) -> Result<[[u64; ORGAN_COUNT]; ORGAN_COUNT], IoError> {
    let mut reader = ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(Trim::All)
        .from_reader(text.as_bytes());
    let mut out = [[0u64; ORGAN_COUNT]; ORGAN_COUNT];
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| IoError::Shape(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rows >= ORGAN_COUNT {
            return Err(IoError::Shape(format!("more than {ORGAN_COUNT} rows")));
        }
        if rec.len() != ORGAN_COUNT {
            return Err(IoError::Shape(format!(
                "line {line}: {} columns, expected {ORGAN_COUNT}",
                rec.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            if cell.starts_with('-') && cell[1..].parse::<u64>().is_ok() {
                return Err(IoError::NegativeCount {
                    line,
                    value: cell.to_string(),
                });
            }
            out[rows][j] = cell
                .parse()
                .map_err(|_| IoError::parse(line, format!("invalid count `{cell}`")))?;
        }
        rows += 1;
    }
    if rows != ORGAN_COUNT {
        return Err(IoError::Shape(format!("{rows} rows, expected {ORGAN_COUNT}")));
    }
    Ok(out)
}

pub fn read_confusion(path: &Path) -> Result<[[u64; ORGAN_COUNT]; ORGAN_COUNT], IoError> {
    parse_confusion(&read_text(path)?)
}

pub fn format_confusion(counts: &[[u64; ORGAN_COUNT]; ORGAN_COUNT]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CONFUSION_COMMENT}");
    for row in counts {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<FrameManifest, IoError> {
    let entries = read_records(text, MANIFEST_HEADER)?
        .rows
        .iter()
        .map(|(line, rec)| {
            let tag = &rec[3];
            Ok(ManifestEntry {
                patient_id: field(rec, 0, *line, "patient_id")?,
                frame_index: field(rec, 1, *line, "frame_index")?,
                organ: organ_field(rec, 2, *line)?,
                pathology: (!tag.is_empty()).then(|| tag.to_string()),
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    FrameManifest::new(entries).map_err(|e: PrepError| IoError::InvariantViolation {
        line: 0,
        message: e.to_string(),
    })
}

pub fn read_manifest(path: &Path) -> Result<FrameManifest, IoError> {
    parse_manifest(&read_text(path)?)
}

pub fn format_manifest<'a, I>(entries: I) -> String
where
    I: IntoIterator<Item = &'a ManifestEntry>,
{
    let mut out = String::new();
    let _ = writeln!(out, "{MANIFEST_HEADER}");
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            e.patient_id,
            e.frame_index,
            e.organ,
            e.pathology.as_deref().unwrap_or("")
        );
    }
    out
}

pub fn format_binarized(entries: &[BinarizedEntry]) -> String {
    format_manifest(entries.iter().map(|e| &e.entry))
}

pub fn parse_loss_trace(text: &str) -> Result<LossTrace, IoError> {
    let records = read_records(text, LOSS_HEADER)?;
    let mut trace = LossTrace::default();
    for (expected_epoch, (line, rec)) in (1..).zip(&records.rows) {
        let epoch: usize = field(rec, 0, *line, "epoch")?;
        if epoch != expected_epoch {
            return Err(IoError::invariant(
                *line,
                format!("epochs must count up from 1, expected {expected_epoch}, found {epoch}"),
            ));
        }
        let losses = [field(rec, 1, *line, "loss")?, field(rec, 2, *line, "loss")?];
        trace
            .push(losses)
            .map_err(|e: MtlError| IoError::invariant(*line, e))?;
    }
    Ok(trace)
}

pub fn read_loss_trace(path: &Path) -> Result<LossTrace, IoError> {
    parse_loss_trace(&read_text(path)?)
}

/// Renders `key=value` lines.
pub fn key_value<K: AsRef<str>, V: std::fmt::Display>(pairs: &[(K, V)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{}={}", k.as_ref(), v);
    }
    out
}
