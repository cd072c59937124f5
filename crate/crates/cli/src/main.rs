//! `zoneroute`: synthetic data, zoning, training, inference and evaluation
//! from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input data, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;

use zoneroute::dataio::{generate_synthetic, load_routes, write_routes, SynthConfig};
use zoneroute::hexgrid::GridSpec;
use zoneroute::metrics::{build_rows, EvalReport, TourSet};
use zoneroute::pipeline::{
    infer_general, infer_zoned, read_general, read_zoned, train_general, train_zone_models, write_general,
    write_zoned, TrainConfig,
};
use zoneroute::zoning::{dataset_center, Zoning, DEFAULT_K, DEFAULT_RESOLUTION};

#[derive(Debug, Parser)]
#[command(name = "zoneroute", version, about = "General vs. zone-based neural routing for last-mile delivery")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Strategy {
    General,
    Zoned,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic route directory.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the routes' grid cells into zones.
    Zones {
        #[arg(long)]
        routes: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: u8,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one general policy or one policy per zone.
    Train {
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long)]
        routes: PathBuf,
        #[arg(long)]
        zones: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy tours for every route.
    Infer {
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long)]
        routes: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        zones: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare both strategies' tours against the actual sequences.
    Eval {
        #[arg(long)]
        routes: PathBuf,
        #[arg(long)]
        tours_general: PathBuf,
        #[arg(long)]
        tours_zoned: PathBuf,
        #[arg(long)]
        zones: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        plot_data: Option<PathBuf>,
        /// Include the return arc to the start in every length.
        #[arg(long)]
        closed: bool,
    },
}

enum Failure {
    Usage(String),
    Lib(zoneroute::Error),
}

impl From<zoneroute::Error> for Failure {
    fn from(e: zoneroute::Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(zoneroute::Error::Numeric(_)) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Reads a flat TOML config; unknown keys are a usage error.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| zoneroute::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {}", path.display(), e.message())))
}

fn create_parent(path: &Path) -> Outcome {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| {
            Failure::Lib(zoneroute::Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        }),
        _ => Ok(()),
    }
}

fn synth(config: Option<&Path>, out: &Path) -> Outcome {
    let cfg: SynthConfig = read_config(config)?;
    let routes = generate_synthetic(&cfg)?;
    write_routes(out, &routes)?;
    eprintln!("wrote {} routes to {}", routes.len(), out.display());
    Ok(())
}

fn zones(routes: &Path, resolution: u8, k: usize, seed: u64, out: &Path) -> Outcome {
    let routes = load_routes(routes)?;
    let spec = GridSpec::new(dataset_center(&routes)?);
    let z = Zoning::fit(&routes, resolution, k, seed, &spec)?;
    create_parent(out)?;
    z.write(out)?;
    eprintln!("{} cells in {} zones", z.cell_to_zone.len(), z.k);
    Ok(())
}

fn train(strategy: Strategy, routes: &Path, zones: Option<&Path>, config: Option<&Path>, out: &Path) -> Outcome {
    let cfg: TrainConfig = read_config(config)?;
    let routes = load_routes(routes)?;
    match strategy {
        Strategy::General => {
            let t = train_general(&routes, &cfg)?;
            for e in &t.log {
                eprintln!(
                    "epoch {:>3}  sampled {:.1}  greedy-eval {:.1}  baseline {:.1}",
                    e.epoch, e.mean_sampled_len, e.greedy_eval_len, e.baseline
                );
            }
            write_general(out, &t)?;
        }
        Strategy::Zoned => {
            let zones = zones.ok_or_else(|| Failure::Usage("--strategy zoned requires --zones".into()))?;
            let z = Zoning::read(zones)?;
            let t = train_zone_models(&routes, &z, &cfg)?;
            for (zone, log) in &t.logs {
                if let Some(e) = log.last() {
                    eprintln!("zone {zone:>3}  greedy-eval {:.1}", e.greedy_eval_len);
                }
            }
            write_zoned(out, &t)?;
        }
    }
    Ok(())
}

fn infer(strategy: Strategy, routes: &Path, ckpt: &Path, zones: Option<&Path>, out: &Path) -> Outcome {
    let routes = load_routes(routes)?;
    let results = match strategy {
        Strategy::General => {
            let params = read_general(ckpt)?;
            routes.par_iter().map(|r| infer_general(r, &params)).collect::<Result<Vec<_>, _>>()?
        }
        Strategy::Zoned => {
            let zoning = zones.map(Zoning::read).transpose()?;
            let set = read_zoned(ckpt, zoning)?;
            routes.par_iter().map(|r| infer_zoned(r, &set)).collect::<Result<Vec<_>, _>>()?
        }
    };
    let name = match strategy {
        Strategy::General => "general",
        Strategy::Zoned => "zoned",
    };
    create_parent(out)?;
    TourSet::from_results(name, &routes, &results).write(out)?;
    eprintln!("wrote {} {name} tours", results.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    routes: &Path,
    tours_general: &Path,
    tours_zoned: &Path,
    zones: &Path,
    out: &Path,
    csv: Option<&Path>,
    plot_data: Option<&Path>,
    closed: bool,
) -> Outcome {
    let routes = load_routes(routes)?;
    let general = TourSet::read(tours_general)?;
    let zoned = TourSet::read(tours_zoned)?;
    let zoning = Zoning::read(zones)?;
    let report = EvalReport::from_rows(build_rows(&routes, &general, &zoned, &zoning, closed)?)?;
    create_parent(out)?;
    report.write_json(out)?;
    if let Some(p) = csv {
        create_parent(p)?;
        report.write_csv(p)?;
    }
    if let Some(p) = plot_data {
        create_parent(p)?;
        report.write_plot_data(p)?;
    }
    eprintln!(
        "MAPE general {:.2}%  zoned {:.2}%  over {} routes",
        report.general.mape,
        report.zoned.mape,
        report.rows.len()
    );
    Ok(())
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Synth { config, out } => synth(config.as_deref(), &out),
        Command::Zones {
            routes,
            resolution,
            k,
            seed,
            out,
        } => zones(&routes, resolution, k, seed, &out),
        Command::Train {
            strategy,
            routes,
            zones,
            config,
            out,
        } => train(strategy, &routes, zones.as_deref(), config.as_deref(), &out),
        Command::Infer {
            strategy,
            routes,
            ckpt,
            zones,
            out,
        } => infer(strategy, &routes, &ckpt, zones.as_deref(), &out),
        Command::Eval {
            routes,
            tours_general,
            tours_zoned,
            zones,
            out,
            csv,
            plot_data,
            closed,
        } => eval(
            &routes,
            &tours_general,
            &tours_zoned,
            &zones,
            &out,
            csv.as_deref(),
            plot_data.as_deref(),
            closed,
        ),
    }
}

fn run() -> Outcome {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let first = e.to_string().lines().next().map_or(msg, |l| l.trim_start_matches("error: ").to_string());
            return Err(Failure::Usage(first));
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(cli.command))
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("zoneroute: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
