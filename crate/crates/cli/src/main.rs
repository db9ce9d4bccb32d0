use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dc3dcd_cli::commands::{self, MapSource, SceneSource, TrainOptions};
use dc3dcd_cli::config::PipelineConfig;
use dc3dcd_cli::serve::{serve, AppState};
use dc3dcd_cli::workdir::Workdir;
use dc3dcd_cli::exit_code;
use dc3dcd_core::similarity::SimilaritySource;
use dc3dcd_core::synth::UrbanParams;

#[derive(Parser)]
#[command(name = "dc3dcd", version, about = "Unsupervised multiclass change segmentation of 3D point cloud pairs")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding every stage artifact.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled scene pair.
    Synth(SynthArgs),
    /// Subsample both epochs and compute handcrafted features.
    Features,
    /// Train the backbone.
    Train(TrainArgs),
    /// Write per-point pseudo-labels with the final checkpoint.
    Infer,
    /// Map pseudo-clusters to classes.
    Map(MapArgs),
    /// Score the mapped prediction against the reference labels.
    Eval,
    /// Serve the labeling API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description JSON.
    #[arg(long, conflicts_with = "urban")]
    spec: Option<PathBuf>,
    /// Generate a random urban layout instead.
    #[arg(long)]
    urban: bool,
    /// Side of the square urban layout in meters.
    #[arg(long, default_value_t = 200.0)]
    extent: f64,
    /// Urban point density per square meter.
    #[arg(long, default_value_t = 1.0)]
    density: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Unsupervised,
    Supervised,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Loss {
    Nll,
    Contrastive,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ysim {
    Gt,
    C2c,
    M3c2,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "unsupervised")]
    mode: Mode,
    /// Labelled cylinders in supervised mode.
    #[arg(long)]
    cylinders: Option<usize>,
    #[arg(long, value_enum, default_value = "nll")]
    loss: Loss,
    /// Similarity source for the contrastive term.
    #[arg(long, value_enum, default_value = "c2c")]
    ysim: Ysim,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct MapArgs {
    /// Map every cluster to its majority reference class.
    #[arg(long, conflicts_with = "mapping")]
    auto_majority: bool,
    /// Complete mapping JSON.
    #[arg(long)]
    mapping: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory with the labeling UI bundle.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    }
    .resolve(cli.seed)?;
    let wd = Workdir::create(&cli.workdir)?;
    match cli.command {
        Command::Synth(a) => {
            let source = match (a.spec, a.urban) {
                (Some(p), _) => SceneSource::Spec(p),
                (None, true) => SceneSource::Urban(UrbanParams {
                    extent: [a.extent, a.extent],
                    density: a.density,
                    seed: cfg.seed,
                    ..UrbanParams::default()
                }),
                (None, false) => anyhow::bail!("synth needs --spec <path> or --urban"),
            };
            let s = commands::synth(&wd, &source, cli.seed)?;
            println!("pc1: {} points, pc2: {} points", s.n1, s.n2);
        }
        Command::Features => {
            let s = commands::features(&wd, &cfg)?;
            println!("subsampled pc1: {} points, pc2: {} points", s.n1, s.n2);
        }
        Command::Train(a) => {
            let opts = TrainOptions {
                supervised: a.mode == Mode::Supervised,
                cylinders: a.cylinders,
                contrastive: (a.loss == Loss::Contrastive).then_some(match a.ysim {
                    Ysim::Gt => SimilaritySource::GroundTruth,
                    Ysim::C2c => SimilaritySource::C2cThreshold,
                    Ysim::M3c2 => SimilaritySource::M3c2,
                }),
                epochs: a.epochs,
            };
            let out = commands::train(&wd, &cfg, &opts)?;
            if let Some(d) = out.diagnostics.last() {
                println!("epoch {}: loss {:.4}", d.epoch, d.loss);
            }
        }
        Command::Infer => {
            let labels = commands::infer(&wd)?;
            println!("labelled {} points", labels.len());
        }
        Command::Map(a) => {
            let source = match (a.mapping, a.auto_majority) {
                (Some(p), _) => MapSource::File(p),
                (None, true) => MapSource::AutoMajority,
                (None, false) => anyhow::bail!("map needs --mapping <path> or --auto-majority"),
            };
            let m = commands::map(&wd, &cfg, &source)?;
            println!("mapped {} clusters", m.entries.len());
        }
        Command::Eval => {
            let report = commands::eval(&wd, &cfg)?;
            print!("{}", report.to_table(&cfg.class_names()));
        }
        Command::Serve(a) => serve(AppState::load(wd, cfg, a.ui_dir)?, a.port)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
