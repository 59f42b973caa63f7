//! Command-line front end. `rtn <subcommand> --help` lists every flag.
//!
//! Exit codes: 0 success, 1 analysis or internal failure, 2 bad input,
//! 64 usage error. Failures print `{"stage": .., "message": ..}` to stderr.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::pipeline::{
    geometry_stage, oracle_stage, phases_stage, run_pipeline, spectra_stage, sweep_stage, AnalysisConfig, InputPaths,
    RunConfig, StageError,
};
use crate::spectra::{Normalization, WeightSource};
use crate::toy::write_toy_bundle;

pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "rtn", version, about = "Rare-token neuron analysis for GPT-2-layout models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Every stage: influence, phases, spectra and geometry reports.
    Run {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        phases: PhaseArgs,
        #[command(flatten)]
        spectra: SpectraArgs,
        #[command(flatten)]
        geometry: GeometryArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Mean-ablation sweep: influence.json, influence.csv and groups.json.
    Sweep {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Phase segmentation of an influence report.
    Phases {
        #[arg(long)]
        influence: PathBuf,
        #[command(flatten)]
        phases: PhaseArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Tail-index report for the groups of an earlier sweep.
    Spectra {
        /// Model manifest, optionally `NAME=PATH`; repeat for several checkpoints.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        groups: PathBuf,
        #[command(flatten)]
        spectra: SpectraArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Activation geometry for the groups of an earlier sweep.
    Geometry {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long)]
        groups: PathBuf,
        #[command(flatten)]
        geometry: GeometryArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Compare the fast ablation path with full reruns on sampled neurons.
    Oracle {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, default_value_t = 16)]
        sample: usize,
        /// Seed for the neuron sample.
        #[arg(long = "sample-seed", default_value_t = 7)]
        sample_seed: u64,
        /// Largest acceptable loss deviation.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Write the seeded toy model, corpus, mask and frequency table.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Model manifest.json.
    #[arg(long)]
    model: PathBuf,
    /// RTK1 token stream.
    #[arg(long)]
    tokens: PathBuf,
    /// RWM1 validity mask.
    #[arg(long)]
    mask: PathBuf,
    /// RFQ1 frequency table.
    #[arg(long = "freq")]
    frequencies: PathBuf,
}

impl From<InputArgs> for InputPaths {
    fn from(a: InputArgs) -> Self {
        InputPaths {
            model: a.model,
            tokens: a.tokens,
            mask: a.mask,
            frequencies: a.frequencies,
        }
    }
}

#[derive(Debug, Args)]
struct SelectionArgs {
    #[arg(long, default_value_t = 50.0)]
    percentile: f64,
    /// Defaults to the model's max_seq.
    #[arg(long)]
    context_len: Option<usize>,
    /// Subsample the eval set to at most this many positions.
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long, default_value_t = 50)]
    group_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PhaseArgs {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    plateau_threshold: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Debug, Args)]
struct SpectraArgs {
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long, value_enum)]
    weight_source: Option<SourceArg>,
    #[arg(long, value_enum)]
    normalization: Option<NormArg>,
}

#[derive(Debug, Args)]
struct GeometryArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    cluster_threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct WorkerArgs {
    #[arg(long, env = "RTN_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    WIn,
    WOut,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Group,
    Raw,
}

impl SelectionArgs {
    fn apply(&self, c: &mut AnalysisConfig) {
        c.percentile = self.percentile;
        c.context_len = self.context_len;
        c.max_positions = self.max_positions;
        c.group_size = self.group_size;
        c.seed = self.seed;
    }
}

impl PhaseArgs {
    fn apply(&self, c: &mut AnalysisConfig) {
        if let Some(v) = self.window {
            c.window = v;
        }
        if let Some(v) = self.plateau_threshold {
            c.plateau_threshold = v;
        }
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
    }
}

impl SpectraArgs {
    fn apply(&self, c: &mut AnalysisConfig) {
        if let Some(v) = self.bins {
            c.bins = v;
        }
        if let Some(v) = self.weight_source {
            c.weight_source = match v {
                SourceArg::WIn => WeightSource::WInRows,
                SourceArg::WOut => WeightSource::WOutColumns,
            };
        }
        if let Some(v) = self.normalization {
            c.normalization = match v {
                NormArg::Group => Normalization::GroupGram,
                NormArg::Raw => Normalization::Raw,
            };
        }
    }
}

impl GeometryArgs {
    fn apply(&self, c: &mut AnalysisConfig) {
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.cluster_threshold {
            c.cluster_threshold = v;
        }
    }
}

fn checkpoint(spec: &str, index: usize) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ if index == 0 => ("model".to_string(), PathBuf::from(spec)),
        _ => (format!("model{index}"), PathBuf::from(spec)),
    }
}

fn report(result: Result<String, StageError>) -> i32 {
    match result {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run {
            inputs,
            selection,
            phases,
            spectra,
            geometry,
            out,
            workers,
        } => {
            let mut analysis = AnalysisConfig::default();
            selection.apply(&mut analysis);
            phases.apply(&mut analysis);
            spectra.apply(&mut analysis);
            geometry.apply(&mut analysis);
            let config = RunConfig {
                inputs: inputs.into(),
                out_dir: out,
                analysis,
                workers: workers.workers,
            };
            report(run_pipeline(&config).map(|s| {
                serde_json::json!({
                    "out_dir": s.out_dir.display().to_string(),
                    "files": s.files.len(),
                    "eval_pairs": s.eval_pairs,
                    "change_points": s.phases.change_points.ranks,
                    "weak_segmentation": s.phases.change_points.weak,
                })
                .to_string()
            }))
        }
        Command::Sweep {
            inputs,
            selection,
            out,
            workers,
        } => {
            let mut analysis = AnalysisConfig::default();
            selection.apply(&mut analysis);
            report(sweep_stage(&inputs.into(), &analysis, &out, workers.workers).map(|d| {
                serde_json::json!({ "eval_pairs": d.profile.eval_pairs, "neurons": d.profile.len() }).to_string()
            }))
        }
        Command::Phases { influence, phases, out } => report(
            phases_stage(&influence, &out, |c| phases.apply(c)).map(|s| {
                serde_json::json!({
                    "change_points": s.change_points.ranks,
                    "weak_segmentation": s.change_points.weak,
                    "kappa": s.kappa,
                    "plateau": s.plateau,
                })
                .to_string()
            }),
        ),
        Command::Spectra {
            models,
            groups,
            spectra,
            out,
            workers,
        } => {
            let models: Vec<(String, PathBuf)> = models.iter().enumerate().map(|(i, m)| checkpoint(m, i)).collect();
            report(
                spectra_stage(&models, &groups, &out, workers.workers, |c| spectra.apply(c)).map(|r| {
                    serde_json::json!({ "entries": r.entries.len(), "deltas": r.deltas }).to_string()
                }),
            )
        }
        Command::Geometry {
            inputs,
            groups,
            geometry,
            out,
            workers,
        } => report(
            geometry_stage(&inputs.into(), &groups, &out, workers.workers, |c| geometry.apply(c))
                .map(|r| serde_json::json!({ "groups": r.groups.len(), "contexts": r.contexts }).to_string()),
        ),
        Command::Oracle {
            inputs,
            selection,
            sample,
            sample_seed,
            tolerance,
            workers,
        } => {
            let mut analysis = AnalysisConfig::default();
            selection.apply(&mut analysis);
            match oracle_stage(&inputs.into(), &analysis, sample, sample_seed, workers.workers) {
                Ok(r) => {
                    println!("{}", serde_json::to_string(&r).expect("serializable"));
                    if r.max_loss_deviation <= tolerance {
                        0
                    } else {
                        eprintln!(
                            "{}",
                            serde_json::json!({
                                "stage": "oracle",
                                "message": format!("max deviation {} exceeds {tolerance}", r.max_loss_deviation),
                            })
                        );
                        1
                    }
                }
                Err(e) => report(Err(e)),
            }
        }
        Command::MakeToy { out, seed } => report(
            write_toy_bundle(&out, seed)
                .map(|b| {
                    serde_json::json!({
                        "model": b.manifest.display().to_string(),
                        "tokens": b.stream.display().to_string(),
                        "mask": b.mask.display().to_string(),
                        "freq": b.frequencies.display().to_string(),
                    })
                    .to_string()
                })
                .map_err(|error| StageError { stage: "toy", error }),
        ),
    }
}
