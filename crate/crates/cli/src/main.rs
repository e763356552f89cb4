//! `mad`: run a maximum-discrepancy competition stage by stage or end to end.

mod config;
mod layout;
mod stages;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mad_core::synth::{ModelSpec, WorldConfig};
use mad_core::{Exec, RankSettings, Smoothing};

use config::{required, FileConfig};
use layout::OutDir;
use stages::{SelectionFlags, ServeOptions, SynthOptions};

#[derive(Debug, Parser)]
#[command(
    name = "mad",
    version,
    about = "Rank image classifiers on the images they disagree about most"
)]
struct Cli {
    /// TOML file providing defaults for any flag (keys as flag names).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run the data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select the top-k images of every model pair.
    Select {
        #[command(flatten)]
        taxonomy: TaxonomyFlag,
        #[command(flatten)]
        predictions: PredictionFlags,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Label the selected images with a ground-truth oracle file.
    Label {
        #[command(flatten)]
        taxonomy: TaxonomyFlag,
        #[command(flatten)]
        oracle: OracleFlag,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Serve the selected images to human annotators over HTTP.
    Serve {
        #[command(flatten)]
        taxonomy: TaxonomyFlag,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        rank: RankArgs,
        #[command(flatten)]
        out: OutFlag,
        /// Address to listen on.
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// Directory of images named by image id.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Directory of static annotation UI assets.
        #[arg(long)]
        ui: Option<PathBuf>,
        /// File of allowed annotator ids, one per line. Any id is accepted
        /// without it.
        #[arg(long)]
        annotators: Option<PathBuf>,
        /// Seconds before an unanswered assignment returns to the pool.
        #[arg(long)]
        lease_ttl: Option<u64>,
    },
    /// Compute the global ranking from the verdicts.
    Rank {
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        rank: RankArgs,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Add one classifier to a finished competition.
    AddModel {
        #[command(flatten)]
        taxonomy: TaxonomyFlag,
        /// Prediction files of every ranked model plus the new one.
        #[command(flatten)]
        predictions: PredictionFlags,
        #[command(flatten)]
        oracle: OracleFlag,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        rank: RankArgs,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Rank correlation of top-k' rankings with the full ranking.
    Stability {
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        rank: RankArgs,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Select, label and rank in one go.
    Run {
        #[command(flatten)]
        taxonomy: TaxonomyFlag,
        #[command(flatten)]
        predictions: PredictionFlags,
        #[command(flatten)]
        oracle: OracleFlag,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        rank: RankArgs,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Write a synthetic taxonomy, predictions and oracle.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Models as `id=error_rate`, comma separated.
        #[arg(long, value_delimiter = ',', value_parser = parse_model_spec, required = true)]
        models: Vec<ModelSpec>,
        #[arg(long, default_value_t = 10_000)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        branching: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 0.2)]
        multi_object_rate: f64,
        #[arg(long, default_value_t = 0.0)]
        nonnatural_rate: f64,
    },
}

#[derive(Debug, Args)]
struct TaxonomyFlag {
    /// Taxonomy file.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictionFlags {
    /// Prediction files, one per model, in competition order.
    #[arg(long, num_args = 1..)]
    predictions: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleFlag {
    /// Ground-truth label sets per image.
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OutFlag {
    /// Output directory shared by all stages.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectionArgs {
    /// Images per pair [default: 30].
    #[arg(long)]
    k: Option<usize>,
    /// Minimum top-1 confidence of both models [default: 0.8].
    #[arg(long)]
    confidence_threshold: Option<f64>,
    /// Most images one model may have with the same predicted label [default: 3].
    #[arg(long)]
    max_per_label: Option<usize>,
}

#[derive(Debug, Args)]
struct RankArgs {
    /// Power iteration stopping tolerance [default: 1e-10].
    #[arg(long)]
    tolerance: Option<f64>,
    /// Additive smoothing of pairwise accuracies [default: 1].
    #[arg(long)]
    smoothing: Option<f64>,
}

fn parse_model_spec(s: &str) -> Result<ModelSpec, String> {
    let (id, rate) = s
        .split_once('=')
        .ok_or_else(|| format!("expected `id=error_rate`, got `{s}`"))?;
    let rate: f64 = rate.parse().map_err(|_| format!("bad error rate `{rate}`"))?;
    Ok(ModelSpec::new(id, rate))
}

/// Flags merged with the config file.
struct Resolver {
    file: FileConfig,
}

impl Resolver {
    fn taxonomy(&self, f: TaxonomyFlag) -> Result<PathBuf> {
        required(f.taxonomy, self.file.taxonomy.clone(), "taxonomy")
    }

    fn predictions(&self, f: PredictionFlags) -> Result<Vec<PathBuf>> {
        let given = (!f.predictions.is_empty()).then_some(f.predictions);
        required(given, self.file.predictions.clone(), "predictions")
    }

    fn oracle(&self, f: OracleFlag) -> Result<PathBuf> {
        required(f.oracle, self.file.oracle.clone(), "oracle")
    }

    fn out(&self, f: OutFlag) -> Result<OutDir> {
        required(f.out, self.file.out.clone(), "out").map(OutDir::new)
    }

    fn selection(&self, f: SelectionArgs) -> SelectionFlags {
        SelectionFlags {
            k: f.k.or(self.file.k),
            confidence_threshold: f.confidence_threshold.or(self.file.confidence_threshold),
            max_per_label: f.max_per_label.or(self.file.max_per_label),
        }
    }

    fn rank(&self, f: RankArgs) -> RankSettings {
        let d = RankSettings::default();
        RankSettings {
            smoothing: f
                .smoothing
                .or(self.file.smoothing)
                .map(|alpha| Smoothing { alpha })
                .unwrap_or(d.smoothing),
            tolerance: f.tolerance.or(self.file.tolerance).unwrap_or(d.tolerance),
            ..d
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Select { .. } => "select",
            Command::Label { .. } => "label",
            Command::Serve { .. } => "serve",
            Command::Rank { .. } => "rank",
            Command::AddModel { .. } => "add-model",
            Command::Stability { .. } => "stability",
            Command::Run { .. } => "run",
            Command::Synth { .. } => "synth",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let stage = cli.command.name();
    dispatch(cli).context(stage)
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let r = Resolver { file };
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match cli.command {
        Command::Select {
            taxonomy,
            predictions,
            selection,
            out,
        } => {
            let (t, p, o) = (r.taxonomy(taxonomy)?, r.predictions(predictions)?, r.out(out)?);
            let selection = r.selection(selection).resolve()?;
            stages::select(&t, &p, selection, &o, exec)
        }
        Command::Label {
            taxonomy,
            oracle,
            selection,
            out,
        } => {
            let (t, orc, o) = (r.taxonomy(taxonomy)?, r.oracle(oracle)?, r.out(out)?);
            stages::label(&t, &orc, &r.selection(selection), &o)
        }
        Command::Serve {
            taxonomy,
            selection,
            rank,
            out,
            listen,
            images,
            ui,
            annotators,
            lease_ttl,
        } => {
            let listen = match listen {
                Some(a) => a,
                None => r
                    .file
                    .listen
                    .as_deref()
                    .unwrap_or("127.0.0.1:8080")
                    .parse()
                    .context("bad listen address")?,
            };
            let opts = ServeOptions {
                taxonomy: r.taxonomy(taxonomy)?,
                listen,
                images: images.or(r.file.images.clone()),
                ui: ui.or(r.file.ui.clone()),
                annotators: annotators.or(r.file.annotators.clone()),
                lease_ttl: Duration::from_secs(lease_ttl.or(r.file.lease_ttl).unwrap_or(600)),
                rank: r.rank(rank),
            };
            let o = r.out(out)?;
            stages::serve(opts, &r.selection(selection), &o)
        }
        Command::Rank { selection, rank, out } => {
            let o = r.out(out)?;
            stages::rank(r.rank(rank), &r.selection(selection), &o)
        }
        Command::AddModel {
            taxonomy,
            predictions,
            oracle,
            selection,
            rank,
            out,
        } => {
            let (t, p, orc, o) = (
                r.taxonomy(taxonomy)?,
                r.predictions(predictions)?,
                r.oracle(oracle)?,
                r.out(out)?,
            );
            stages::add_model(&t, &p, &orc, r.rank(rank), &r.selection(selection), &o, exec)
        }
        Command::Stability { selection, rank, out } => {
            let o = r.out(out)?;
            stages::stability(r.rank(rank), &r.selection(selection), &o, exec)
        }
        Command::Run {
            taxonomy,
            predictions,
            oracle,
            selection,
            rank,
            out,
        } => {
            let (t, p, orc, o) = (
                r.taxonomy(taxonomy)?,
                r.predictions(predictions)?,
                r.oracle(oracle)?,
                r.out(out)?,
            );
            let flags = r.selection(selection);
            stages::select(&t, &p, flags.resolve()?, &o, exec).context("select")?;
            stages::label(&t, &orc, &flags, &o).context("label")?;
            stages::rank(r.rank(rank), &flags, &o).context("rank")
        }
        Command::Synth {
            out,
            models,
            images,
            seed,
            branching,
            depth,
            multi_object_rate,
            nonnatural_rate,
        } => {
            let opts = SynthOptions {
                out,
                models,
                world: WorldConfig {
                    images,
                    multi_object_rate,
                    nonnatural_rate,
                    seed,
                },
                branching,
                depth,
            };
            stages::synth(&opts)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mad: {e:#}");
            ExitCode::FAILURE
        }
    }
}
