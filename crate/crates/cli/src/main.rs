//! `dlpr`: simulate diffraction, build datasets, train and analyse phase-retrieval models.
//!
//! Exit codes: 0 success, 2 usage or bad input, 3 I/O failure, 4 numeric
//! divergence, 5 artifact mismatch (corrupt file or foreign optics digest).

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlpr_core::Error;

use settings::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dlpr", version, about = "Lensless phase retrieval with a residual encoder-decoder")]
struct Cli {
    /// `key = value` settings file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// worker threads; 1 gives fully reproducible runs
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// output directory (output file for `simulate`); defaults under $DLPR_OUT
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Propagate one image and write the raw intensity tensor plus a PGM preview
    Simulate(SimulateArgs),
    /// Build a dataset from an image directory or a procedural family
    GenData(GenDataArgs),
    /// Train a model and write history, best and final checkpoints
    Train(TrainArgs),
    /// Score a checkpoint on one or more datasets
    Eval(EvalArgs),
    /// Score a checkpoint while varying distance, shift or rotation
    Sweep(SweepArgs),
    /// Maximum-activation patterns for filters of one layer
    Maps(MapsArgs),
    /// Truth / measurement / reconstruction image grid
    Grid(GridArgs),
}

#[derive(Debug, Args)]
struct OpticsArgs {
    /// propagation distance, meters
    #[arg(long, allow_hyphen_values = true)]
    distance: Option<f64>,
    /// wavelength, meters
    #[arg(long)]
    wavelength: Option<f64>,
    /// pixel pitch, meters
    #[arg(long)]
    pixel_pitch: Option<f64>,
    /// simulation grid size
    #[arg(long)]
    grid: Option<usize>,
    /// zero-padding factor of the propagation window
    #[arg(long)]
    pad_factor: Option<usize>,
    /// standard deviation of additive intensity noise
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// quantize intensities to 8 bits
    #[arg(long)]
    quantize: Option<bool>,
    /// noise seed
    #[arg(long)]
    noise_seed: Option<u64>,
}

impl OpticsArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.set("optics.distance", self.distance);
        cfg.set("optics.wavelength", self.wavelength);
        cfg.set("optics.pixel_pitch", self.pixel_pitch);
        cfg.set("optics.grid", self.grid);
        cfg.set("optics.pad_factor", self.pad_factor);
        cfg.set("noise.sigma", self.noise_sigma);
        cfg.set("noise.quantize", self.quantize);
        cfg.set("noise.seed", self.noise_seed);
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// grayscale PGM or PNG
    #[arg(long)]
    input: Option<PathBuf>,
    /// gray-0 border kept around the fitted image
    #[arg(long)]
    margin: Option<usize>,
    #[command(flatten)]
    optics: OpticsArgs,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// directory of PGM/PNG images
    #[arg(long, conflicts_with = "procedural")]
    source: Option<PathBuf>,
    /// blobs, gratings, digits, characters or null
    #[arg(long)]
    procedural: Option<String>,
    /// number of samples (caps the count for --source)
    #[arg(long)]
    count: Option<usize>,
    /// fraction of samples in the train split
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// gray-0 border kept around ingested images
    #[arg(long)]
    margin: Option<usize>,
    /// dataset name recorded in the manifest for --source
    #[arg(long)]
    tag: Option<String>,
    #[command(flatten)]
    optics: OpticsArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// dataset directory written by gen-data
    #[arg(long)]
    data: Option<PathBuf>,
    /// network spec file (`key = value`)
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// f32 or f64
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// dataset directory, optionally `name=dir`; repeatable
    #[arg(long = "data")]
    data: Vec<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// distance, shift or rotation
    #[arg(long)]
    axis: Option<String>,
    /// comma-separated sweep points
    #[arg(long, allow_hyphen_values = true)]
    values: Option<String>,
}

#[derive(Debug, Args)]
struct MapsArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// 1 is the first convolution; k + 1 is the output of block k
    #[arg(long)]
    layer: Option<usize>,
    /// `a..b` (inclusive) or a comma list; default every filter
    #[arg(long)]
    filters: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// rows in the grid
    #[arg(long)]
    count: Option<usize>,
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn run(cli: Cli) -> dlpr_core::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.set("out", path_str(&cli.out));
    cfg.set("threads", cli.threads);
    if let Some(n) = cfg.get_parsed::<usize>("threads")? {
        if n == 0 {
            return Err(Error::InvalidArgument("threads must be at least 1".into()));
        }
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    match cli.command {
        Command::Simulate(a) => {
            a.optics.apply(&mut cfg);
            cfg.set("experiment.input", path_str(&a.input));
            cfg.set("dataset.margin", a.margin);
            commands::simulate(&cfg)
        }
        Command::GenData(a) => {
            a.optics.apply(&mut cfg);
            cfg.set("dataset.source", path_str(&a.source));
            cfg.set("dataset.kind", a.procedural);
            cfg.set("dataset.count", a.count);
            cfg.set("dataset.split", a.split);
            cfg.set("dataset.seed", a.seed);
            cfg.set("dataset.margin", a.margin);
            cfg.set("dataset.tag", a.tag);
            commands::gen_data(&cfg)
        }
        Command::Train(a) => {
            cfg.set("dataset.path", path_str(&a.data));
            cfg.set("train.epochs", a.epochs);
            cfg.set("train.seed", a.seed);
            cfg.set("train.batch_size", a.batch_size);
            cfg.set("train.learning_rate", a.learning_rate);
            cfg.set("train.precision", a.precision);
            cfg.set("train.eval_every", a.eval_every);
            commands::train(&cfg, a.spec.as_deref())
        }
        Command::Eval(a) => {
            cfg.set("experiment.checkpoint", path_str(&a.checkpoint));
            if !a.data.is_empty() {
                cfg.set("experiment.data", Some(a.data.join(",")));
            }
            commands::eval(&cfg)
        }
        Command::Sweep(a) => {
            cfg.set("experiment.checkpoint", path_str(&a.checkpoint));
            cfg.set("dataset.path", path_str(&a.data));
            cfg.set("experiment.axis", a.axis);
            cfg.set("experiment.values", a.values);
            commands::sweep(&cfg)
        }
        Command::Maps(a) => {
            cfg.set("experiment.checkpoint", path_str(&a.checkpoint));
            cfg.set("experiment.layer", a.layer);
            cfg.set("experiment.filters", a.filters);
            cfg.set("experiment.steps", a.steps);
            cfg.set("experiment.step_size", a.step_size);
            cfg.set("experiment.seed", a.seed);
            commands::maps(&cfg)
        }
        Command::Grid(a) => {
            cfg.set("experiment.checkpoint", path_str(&a.checkpoint));
            cfg.set("dataset.path", path_str(&a.data));
            cfg.set("experiment.count", a.count);
            commands::grid(&cfg)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) | Error::NonFinite(_) | Error::Parse(_) | Error::Graph(_) => 2,
        Error::Io { .. } | Error::DiskFull { .. } => 3,
        Error::Divergence { .. } => 4,
        Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated(_)
        | Error::TensorMismatch { .. }
        | Error::DigestMismatch { .. } => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
