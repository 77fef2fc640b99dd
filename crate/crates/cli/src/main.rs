//! `vcekit` command-line interface.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | usage error (bad flags or arguments) |
//! | 3 | malformed input, failed validation, or bad config |
//! | 4 | file could not be read or written |
//! | 5 | model or decoding failure (e.g. no feasible organ path) |

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vcekit::config::RunConfig;
use vcekit::datasetprep::{binarize_anomalies, distribution_report, rebalance, split};
use vcekit::exec::Execution;
use vcekit::experiment::{anomaly_decisions, format_gating_report, organ_indices, write_study};
use vcekit::io::{
    fmt_sig9, format_binarized, format_decoded, key_value, parse_decoded, parse_labels,
    parse_posterior_stream, read_labels, read_loss_trace, read_manifest, read_posterior_stream,
    read_text, write_text, IoError, DECODED_HEADER, LABEL_HEADER, POSTERIOR_HEADER,
};
use vcekit::metrics::{summarize, Averaging, ConfusionCounts, TABLE_HEADER};
use vcekit::mtl_math::{dwa_schedule, DwaConfig};
use vcekit::simulator::{gate_stream, run_gating, SimError, TraversalRecord};
use vcekit::Error;

#[derive(Parser)]
#[command(name = "vcekit", version, about = "Capsule endoscopy organ decoding and gating toolkit")]
#[command(propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Viterbi-decode a posterior stream into an organ sequence.
    Decode {
        /// Run config whose [model] section defines the HMM.
        #[arg(long)]
        model: PathBuf,
        /// Confusion counts for the emissions; overrides the config.
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the online filter and report when transmission would start.
    Gate {
        /// Run config supplying the model, entry policy and energy costs.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth labels; adds missed-frame counts to the report.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Simulate a cohort of patients and score decoding and gating.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Process patients on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Score predictions against ground-truth labels.
    Eval {
        /// Posterior stream, decoded path, or label file.
        #[arg(long)]
        pred: PathBuf,
        /// Label file.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Print the dynamic weight average schedule for a loss history.
    DwaTrace {
        #[arg(long)]
        losses: PathBuf,
        #[arg(long)]
        temperature: f64,
    },
    /// Balance a frame manifest 1:1 and split it 70:30.
    Rebalance {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Localization,
    Anomaly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Kv,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(3, message)
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Io(IoError::Io { .. }) => 4,
            Error::Hmm(_) | Error::Simulation(_) => 5,
            _ => 3,
        };
        Failure::new(code, err.to_string())
    }
}

impl From<IoError> for Failure {
    fn from(err: IoError) -> Self {
        Error::from(err).into()
    }
}

/// Config problems are validation failures whatever module rejected them.
fn load_config(path: &Path, confusion: Option<&Path>) -> Result<RunConfig, Failure> {
    let mut config = RunConfig::load(path).map_err(|e| match e {
        Error::Io(IoError::Io { .. }) => Failure::from(e),
        other => Failure::invalid(format!("{}: {other}", path.display())),
    })?;
    if let Some(c) = confusion {
        config.model.confusion = Some(c.to_path_buf());
        config
            .validate()
            .map_err(|e| match e {
                Error::Io(IoError::Io { .. }) => Failure::from(e),
                other => Failure::invalid(other.to_string()),
            })?;
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|source| {
        IoError::Io {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

fn decode(model: &Path, confusion: Option<&Path>, input: &Path, output: &Path) -> Result<(), Failure> {
    let hmm = load_config(model, confusion)?.model().map_err(Failure::from)?;
    let frames = read_posterior_stream(input)?;
    let decoded = hmm.viterbi_from_posteriors(&frames).map_err(Error::from)?;
    let indices: Vec<u64> = frames.iter().map(|f| f.frame_index).collect();
    write_text(output, &format_decoded(&indices, &decoded))?;
    Ok(())
}

fn gate(
    model: &Path,
    confusion: Option<&Path>,
    input: &Path,
    truth: Option<&Path>,
    report: &Path,
) -> Result<(), Failure> {
    let config = load_config(model, confusion)?;
    let hmm = config.model().map_err(Failure::from)?;
    let frames = read_posterior_stream(input)?;
    let text = match truth {
        Some(path) => {
            let record = TraversalRecord::from_labels(read_labels(path)?)
                .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
            let r = run_gating(&frames, &hmm, config.policy, &config.energy, &record)
                .map_err(|e| match e {
                    SimError::LengthMismatch { .. } => Failure::invalid(e.to_string()),
                    other => Error::from(other).into(),
                })?;
            format_gating_report(&r)
        }
        None => {
            let g = gate_stream(&frames, &hmm, config.policy, &config.energy).map_err(Error::from)?;
            key_value(&[
                ("total_frames", g.total_frames.to_string()),
                ("detected_entry", g.detected_entry.map_or("none".into(), |d| d.to_string())),
                ("frames_suppressed", g.frames_suppressed.to_string()),
                ("frames_transmitted", g.frames_transmitted.to_string()),
                ("energy_spent", g.energy_spent.to_string()),
                ("energy_saved_vs_transmit_all", g.energy_saved_vs_transmit_all.to_string()),
                ("zero_likelihood_frames", g.zero_likelihood_frames.to_string()),
            ])
        }
    };
    write_text(report, &text)?;
    Ok(())
}

fn simulate(
    config: Option<&Path>,
    patients: Option<usize>,
    seed: Option<u64>,
    out_dir: &Path,
    sequential: bool,
) -> Result<(), Failure> {
    let mut run = match config {
        Some(path) => load_config(path, None)?,
        None => RunConfig::default(),
    };
    if let Some(n) = patients {
        run.patients = n;
    }
    if let Some(s) = seed {
        run.seed = s;
    }
    let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
    let study = write_study(&run, out_dir, exec)?;
    print!("{}", study.summary_record());
    Ok(())
}

/// Per-frame (frame_index, organ index, anomaly decision) read from any of
/// the three frame-level formats.
struct Predictions {
    frame_indices: Vec<u64>,
    organs: Vec<usize>,
    anomaly: Option<Vec<usize>>,
}

fn first_data_line(text: &str) -> &str {
    text.lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("")
}

fn read_predictions(path: &Path) -> Result<Predictions, Failure> {
    let text = read_text(path)?;
    let header: String = first_data_line(&text).split(',').map(str::trim).collect::<Vec<_>>().join(",");
    if header == POSTERIOR_HEADER {
        let frames = parse_posterior_stream(&text)?;
        Ok(Predictions {
            frame_indices: frames.iter().map(|f| f.frame_index).collect(),
            organs: organ_indices(frames.iter().map(|f| f.argmax_organ())),
            anomaly: Some(anomaly_decisions(&frames)),
        })
    } else if header == DECODED_HEADER {
        let (rows, _) = parse_decoded(&text)?;
        Ok(Predictions {
            frame_indices: rows.iter().map(|r| r.0).collect(),
            organs: organ_indices(rows.iter().map(|r| r.1)),
            anomaly: None,
        })
    } else if header == LABEL_HEADER {
        let labels = parse_labels(&text)?;
        Ok(Predictions {
            frame_indices: labels.iter().map(|l| l.frame_index).collect(),
            organs: organ_indices(labels.iter().map(|l| l.organ)),
            anomaly: Some(labels.iter().map(|l| usize::from(l.anomaly)).collect()),
        })
    } else {
        Err(Failure::invalid(format!(
            "{}: unrecognized header `{header}`",
            path.display()
        )))
    }
}

fn eval(pred: &Path, truth: &Path, task: Task, format: Format) -> Result<(), Failure> {
    let p = read_predictions(pred)?;
    let t = read_labels(truth)?;
    let truth_indices: Vec<u64> = t.iter().map(|l| l.frame_index).collect();
    if p.frame_indices != truth_indices {
        return Err(Failure::invalid(format!(
            "prediction frames ({}) do not match truth frames ({})",
            p.frame_indices.len(),
            truth_indices.len()
        )));
    }
    let (label, counts, averaging) = match task {
        Task::Localization => (
            "localization",
            ConfusionCounts::accumulate(&organ_indices(t.iter().map(|l| l.organ)), &p.organs, 5),
            Averaging::Macro,
        ),
        Task::Anomaly => {
            let predicted = p.anomaly.ok_or_else(|| {
                Failure::invalid(format!("{} carries no anomaly predictions", pred.display()))
            })?;
            let actual: Vec<usize> = t.iter().map(|l| usize::from(l.anomaly)).collect();
            (
                "anomaly",
                ConfusionCounts::accumulate(&actual, &predicted, 2),
                Averaging::BinaryPositive,
            )
        }
    };
    let counts = counts.map_err(Error::from)?;
    let summary = summarize(&counts, averaging).map_err(Error::from)?;
    match format {
        Format::Table => println!("{TABLE_HEADER}\n{}", summary.table_row(label)),
        Format::Kv => print!("{}", summary.to_key_value()),
    }
    Ok(())
}

fn dwa_trace(losses: &Path, temperature: f64) -> Result<(), Failure> {
    let config = DwaConfig::new(temperature).map_err(Error::from)?;
    let trace = read_loss_trace(losses)?;
    let schedule = dwa_schedule(&trace, &config).map_err(Error::from)?;
    println!("epoch,lambda_localization,lambda_anomaly");
    for (epoch, [a, b]) in (1..).zip(schedule) {
        println!("{epoch},{},{}", fmt_sig9(a), fmt_sig9(b));
    }
    Ok(())
}

fn rebalance_cmd(manifest: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let binarized = binarize_anomalies(&read_manifest(manifest)?);
    let balanced = rebalance(&binarized, seed);
    if balanced.insufficient_positives {
        eprintln!(
            "warning: 1:1 not reachable; kept {} negatives and {} positives",
            balanced.negatives, balanced.positives
        );
    }
    let parts = split(&balanced.manifest, (0.7, 0.3), seed).map_err(Error::from)?;
    create_dir(out)?;
    write_text(&out.join("rebalanced.csv"), &format_binarized(&balanced.manifest.entries))?;
    write_text(&out.join("train.csv"), &format_binarized(&parts.train.entries))?;
    write_text(&out.join("val.csv"), &format_binarized(&parts.val.entries))?;
    let table = distribution_report(&parts).to_csv();
    write_text(&out.join("distribution.csv"), &table)?;
    let summary = key_value(&[
        ("input_negatives", binarized.negatives().to_string()),
        ("input_positives", binarized.positives().to_string()),
        ("negatives", balanced.negatives.to_string()),
        ("positives", balanced.positives.to_string()),
        ("ratio", format!("{:.6}", balanced.ratio())),
        ("insufficient_positives", balanced.insufficient_positives.to_string()),
        ("train", parts.train.len().to_string()),
        ("val", parts.val.len().to_string()),
    ]);
    write_text(&out.join("summary.txt"), &summary)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Decode {
            model,
            confusion,
            input,
            output,
        } => decode(&model, confusion.as_deref(), &input, &output),
        Command::Gate {
            model,
            confusion,
            input,
            truth,
            report,
        } => gate(&model, confusion.as_deref(), &input, truth.as_deref(), &report),
        Command::Simulate {
            config,
            patients,
            seed,
            out_dir,
            sequential,
        } => simulate(config.as_deref(), patients, seed, &out_dir, sequential),
        Command::Eval {
            pred,
            truth,
            task,
            format,
        } => eval(&pred, &truth, task, format),
        Command::DwaTrace {
            losses,
            temperature,
        } => dwa_trace(&losses, temperature),
        Command::Rebalance { manifest, seed, out } => rebalance_cmd(&manifest, seed, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
