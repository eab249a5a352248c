//! Command-line workflow: generate data, train, evaluate, intervene, export.
//!
//! Exit codes: 0 success, 2 usage / validation / I/O, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use disentangled_cbm::config::{dataset_spec_from_file, RunConfig};
use disentangled_cbm::eval::{
    curve_csv, curve_svg, evaluate, export_cluster_embeddings, intervention_curve, true_concept_accuracy,
    InterventionMode, InterventionPolicy, InterventionUnit, MetricsReport, DEFAULT_REFERENCE_SIZE,
    DEFAULT_REPETITIONS,
};
use disentangled_cbm::model::Checkpoint;
use disentangled_cbm::synth::{self, DatasetBundle};
use disentangled_cbm::trainer::{train_with, RunSummary, TrainEvent};
use disentangled_cbm::{Error, Result};

#[derive(Parser)]
#[command(name = "dcbm", version, about = "Concept bottleneck models over grouped CNN filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Unit {
    PerConcept,
    PerConceptGroup,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenData {
        /// Dataset spec JSON (all fields optional).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, logs and the resolved config.
    Train {
        /// Run config JSON (all fields optional).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concept and class accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path; defaults to `metrics_<split>.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Concept-intervention sweep over the test split.
    Intervene {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated rates in [0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
        rates: Vec<f64>,
        /// Comma-separated modes: correct, incorrect.
        #[arg(long, value_delimiter = ',', default_value = "correct,incorrect")]
        modes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also render the curve as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "per-concept")]
        unit: Unit,
    },
    /// Per-filter group ids and reference-batch responses as CSV.
    ExportClusters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_REFERENCE_SIZE)]
        reference_size: usize,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, DatasetBundle)> {
    let ck = Checkpoint::load(checkpoint)?;
    let bundle = synth::load(data)?;
    ck.check_dataset(&bundle.spec)?;
    Ok((ck, bundle))
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let spec = dataset_spec_from_file(spec)?;
    let bundle = synth::generate(&spec)?;
    let manifest = synth::save(&bundle, out)?;
    for s in &manifest.splits {
        println!("{}: {}", s.name, s.count);
    }
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let mut config = RunConfig::from_file(config)?;
    let bundle = synth::load(data)?;
    config.dataset = bundle.spec.clone();
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    write(&out.join("resolved_config.json"), &config.resolved_json()?)?;

    let start = Instant::now();
    let outcome = train_with(&config.train, &bundle, |event| {
        match event {
            TrainEvent::Reclustered(r) => {
                eprintln!("epoch {:>3}: re-clustered into groups of {:?}", r.epoch, r.assignment.sizes())
            }
            TrainEvent::EpochEnd {
                epoch,
                model,
                record,
                checkpoint_due,
            } => {
                eprintln!(
                    "epoch {:>3}: loss {:.4}  val C_acc {:.4}  A_acc {:.4}  ({:.0}s)",
                    epoch,
                    record.mean_l_total,
                    record.val_c_acc,
                    record.val_a_acc,
                    start.elapsed().as_secs_f64()
                );
                if checkpoint_due {
                    Checkpoint {
                        model: model.clone(),
                        dataset: (&bundle.spec).into(),
                        epoch: epoch + 1,
                    }
                    .save(&out.join(format!("checkpoint_epoch{}.json", epoch + 1)))?;
                }
            }
        }
        Ok(())
    })?;
    outcome
        .checkpoint(&bundle, config.train.epochs)
        .save(&out.join("checkpoint.json"))?;
    write(&out.join("train_log.csv"), &outcome.log.to_csv())?;
    write(&out.join("reclusters.json"), &serde_json::to_string_pretty(&outcome.log.reclusters)?)?;
    write(&out.join("epochs.json"), &serde_json::to_string_pretty(&outcome.log.epochs)?)?;
    let summary = RunSummary::from(&outcome);
    write(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "test C_acc {:.4}  A_acc {:.4}  re-clusters {}  gap {:.4}",
        summary.test.c_acc,
        summary.test.a_acc,
        summary.recluster_epochs.len(),
        summary.final_gap
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    split: &'a str,
    #[serde(flatten)]
    report: MetricsReport,
    /// Class accuracy with ground-truth concepts fed to the class head.
    a_acc_true_concepts: f64,
}

fn eval(checkpoint: &Path, data: &Path, split: &str, out: Option<PathBuf>) -> Result<()> {
    let (ck, bundle) = load_pair(checkpoint, data)?;
    let s = bundle.split(split)?;
    let output = EvalOutput {
        split,
        report: evaluate(&ck.model, s, &bundle.spec)?,
        a_acc_true_concepts: true_concept_accuracy(&ck.model.class_head, s)?,
    };
    let text = serde_json::to_string_pretty(&output)? + "\n";
    print!("{text}");
    let path = out.unwrap_or_else(|| checkpoint.with_file_name(format!("metrics_{split}.json")));
    write(&path, &text)
}

#[allow(clippy::too_many_arguments)]
fn intervene(
    checkpoint: &Path,
    data: &Path,
    rates: &[f64],
    modes: &[String],
    out: &Path,
    svg: Option<PathBuf>,
    repetitions: usize,
    seed: u64,
    unit: Unit,
) -> Result<()> {
    let modes = modes.iter().map(|m| m.parse()).collect::<Result<Vec<InterventionMode>>>()?;
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("rate {r} outside [0, 1]")));
    }
    let (ck, bundle) = load_pair(checkpoint, data)?;
    let template = InterventionPolicy {
        unit: match unit {
            Unit::PerConcept => InterventionUnit::PerConcept,
            Unit::PerConceptGroup => InterventionUnit::PerConceptGroup,
        },
        concept_groups: Some(bundle.part_table()),
        ..InterventionPolicy::per_concept(InterventionMode::Correct, 0.0, seed)
    };
    let rows = intervention_curve(&ck.model, &bundle.test, &bundle.spec, rates, &modes, &template, repetitions)?;
    let csv = curve_csv(&rows);
    write(out, &csv)?;
    print!("{csv}");
    if let Some(path) = svg {
        write(&path, &curve_svg(&rows))?;
    }
    Ok(())
}

fn export_clusters(checkpoint: &Path, data: &Path, out: &Path, seed: u64, reference_size: usize) -> Result<()> {
    let (ck, bundle) = load_pair(checkpoint, data)?;
    let csv = export_cluster_embeddings(&ck.model, &bundle.train, &bundle.spec, seed, reference_size)?;
    write(out, &csv)?;
    println!("{} filters in {} groups", ck.model.assignment.len(), ck.model.assignment.k());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval(&checkpoint, &data, &split, out),
        Command::Intervene {
            checkpoint,
            data,
            rates,
            modes,
            out,
            svg,
            repetitions,
            seed,
            unit,
        } => intervene(&checkpoint, &data, &rates, &modes, &out, svg, repetitions, seed, unit),
        Command::ExportClusters {
            checkpoint,
            data,
            out,
            seed,
            reference_size,
        } => export_clusters(&checkpoint, &data, &out, seed, reference_size),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
