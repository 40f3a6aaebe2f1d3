//! `sonuts`: preprocess bottle data, train nutrient regressors, predict with
//! MC-dropout uncertainty and grid the results.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::{Failure, PredictArgs};
use config::RunConfig;
use sonuts_core::{CellSize, SourceTag, Target};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "sonuts", version, about = "Southern Ocean nutrient regression with MC-dropout uncertainty")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for splits, initialisation, training and MC sampling.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    /// Output directory [default: out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, QC-filter and standardize a bottle table into features.csv.
    Preprocess {
        /// Hydrographic table (comma or tab delimited).
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// k-fold training of the NN and the linear baseline for each target.
    Train {
        /// Train a single target instead of both.
        #[arg(long)]
        target: Option<Target>,
    },
    /// Train and test MSE for trained models.
    Evaluate {
        /// Model file; repeatable [default: every model under --out].
        #[arg(long = "model", value_name = "PATH")]
        models: Vec<PathBuf>,
        /// Feature matrix with its .json sidecar [default: OUT/features.csv].
        #[arg(long, value_name = "PATH")]
        matrix: Option<PathBuf>,
    },
    /// MC-dropout predictions for an external table or the test split.
    Predict(PredictCmd),
    /// Gridded mean, std, reference and reference-minus-NN fields.
    Grid {
        /// Prediction table written by `predict`; repeatable.
        #[arg(long = "predictions", value_name = "PATH", required = true)]
        predictions: Vec<PathBuf>,
        /// Cell height in degrees.
        #[arg(long, value_name = "DEG")]
        cell_lat: Option<f64>,
        /// Cell width in degrees.
        #[arg(long, value_name = "DEG")]
        cell_lon: Option<f64>,
    },
    /// Summary of a run directory with provenance verification.
    Report,
}

#[derive(Args, Debug)]
struct PredictCmd {
    /// Model file [default: OUT/models/<target>_<kind>.json].
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Nutrient to predict (phosphate, silicate).
    #[arg(long, default_value = "phosphate")]
    target: Target,
    /// Which trained model under --out to use.
    #[arg(long, default_value = "nn", value_parser = ["nn", "linear"])]
    kind: String,
    /// External table; without it the matrix's test split is predicted.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Feature matrix whose standardizer the model was trained with.
    #[arg(long, value_name = "PATH")]
    matrix: Option<PathBuf>,
    /// Column with a per-row source tag (esm, argo, ship).
    #[arg(long, value_name = "NAME")]
    source_column: Option<String>,
    /// Source tag for every row when there is no source column.
    #[arg(long)]
    source: Option<SourceTag>,
    /// MC-dropout passes per row [default: 100].
    #[arg(long, value_name = "N")]
    samples: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.global.out {
        cfg.paths.out = Some(o.clone());
    }
    // The stamp covers the config file and --seed. Subcommand flags below
    // show up in the outputs themselves (sample counts, cell centres).
    cfg.pin();
    match &cli.command {
        Command::Preprocess { input: Some(i) } => cfg.paths.input = Some(i.clone()),
        Command::Predict(p) => {
            if let Some(n) = p.samples {
                cfg.predict.n_samples = n;
            }
            if let Some(c) = &p.source_column {
                cfg.predict.source_column = Some(c.clone());
            }
            if let Some(s) = p.source {
                cfg.predict.default_source = s;
            }
        }
        Command::Grid { cell_lat, cell_lon, .. } => {
            cfg.grid.lat = cell_lat.unwrap_or(cfg.grid.lat);
            cfg.grid.lon = cell_lon.unwrap_or(cfg.grid.lon);
        }
        _ => {}
    }
    cfg.validate().map_err(Failure::Usage)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    if let Some(n) = cli.global.threads {
        sonuts_core::par::set_threads(n.into());
    }
    match cli.command {
        Command::Preprocess { .. } => commands::preprocess(&cfg),
        Command::Train { target } => commands::train(&cfg, target),
        Command::Evaluate { models, matrix } => commands::evaluate(&cfg, &models, matrix.as_deref()),
        Command::Predict(p) => commands::predict(
            &cfg,
            &PredictArgs {
                model: p.model,
                target: p.target,
                kind: p.kind,
                input: p.input,
                matrix: p.matrix,
            },
        ),
        Command::Grid { predictions, .. } => commands::grid(&cfg, &predictions, CellSize { ..cfg.grid }),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
