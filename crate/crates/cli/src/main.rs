//! `dicache`: sampling runs, caching policies, traces, and sweeps from one
//! JSON config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O
//! error. Set `DICACHE_LOG=info` (or `debug`) for progress lines on stderr;
//! timing is never written into report files so re-runs stay byte-identical.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use dicache_cli::{commands, config};
use dicache_core::Error;

#[derive(Parser)]
#[command(name = "dicache", version, about = "Adaptive feature-cache sampling lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a fully-populated default run config.
    GenConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured policy; writes latent.dlat and report.json.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Reference latent (DLAT) to score quality against.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Token grid for SSIM, e.g. 8x8; inferred for square token counts.
        #[arg(long)]
        grid: Option<String>,
        /// Replace the config's noise seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Quality metrics between two latents (the second is the reference).
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record a per-step, per-layer feature trace of a plain run.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated layer ids; defaults to all layers.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Replay threshold schedules open-loop against a recorded trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Probe layer to read estimates from.
        #[arg(long)]
        layers: usize,
        /// Comma-separated reuse thresholds.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer-correlation (and optionally trajectory-consistency) analysis.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ascending recompute steps for the trajectory analysis, e.g. 10,30,50.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Closed-loop ablation sweep against a shared plain-run reference.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: delta, m, dcta.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the chosen axis.
        #[arg(long)]
        values: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Concurrent sweep points; defaults to the rayon pool size.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        grid: Option<String>,
    },
}

fn parse_usize_list(list: &str, what: &str) -> Result<Vec<usize>, Error> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} value {s}")))
        })
        .collect()
}

fn parse_f64_list(list: &str, what: &str) -> Result<Vec<f64>, Error> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} value {s}")))
        })
        .collect()
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenConfig { out } => commands::gen_config(&out),
        Command::Sample {
            config,
            out,
            reference,
            grid,
            seed_override,
        } => {
            let grid = grid.as_deref().map(config::parse_grid).transpose()?;
            commands::sample(&config, &out, reference.as_deref(), grid, seed_override)
        }
        Command::Compare { a, b, grid, out } => {
            let grid = grid.as_deref().map(config::parse_grid).transpose()?;
            commands::compare(&a, &b, grid, out.as_deref())
        }
        Command::Trace {
            config,
            out,
            layers,
        } => {
            let layers = layers
                .as_deref()
                .map(|s| parse_usize_list(s, "layer"))
                .transpose()?;
            commands::trace_cmd(&config, layers, &out)
        }
        Command::Replay {
            trace,
            layers,
            values,
            out,
        } => {
            let values = parse_f64_list(&values, "threshold")?;
            commands::replay_cmd(&trace, layers, &values, out.as_deref())
        }
        Command::Analyze {
            trace,
            out,
            schedule,
        } => {
            let schedule = schedule
                .as_deref()
                .map(|s| parse_usize_list(s, "schedule"))
                .transpose()?;
            commands::analyze(&trace, schedule, out.as_deref())
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            workers,
            grid,
        } => {
            let grid = grid.as_deref().map(config::parse_grid).transpose()?;
            commands::sweep(&config, &axis, &values, &out, workers, grid)
        }
    }
}

/// Stable exit codes for scripting, keyed off the root cause.
fn exit_code(err: &Error) -> i32 {
    let mut root = err;
    while let Error::AtStep { source, .. } = root {
        root = source;
    }
    match root {
        Error::Io { .. } | Error::MalformedFile { .. } => 4,
        Error::InvalidConfig(_)
        | Error::InvalidLayers(_)
        | Error::InvalidFraction { .. }
        | Error::InvalidInterval
        | Error::BadSchedule(_)
        | Error::LayerNotRecorded { .. }
        | Error::BadProbeDepth { .. }
        | Error::InvalidRange { .. }
        | Error::BadGrid { .. }
        | Error::BadWindow { .. } => 2,
        Error::ShapeMismatch { .. }
        | Error::ZeroReferenceNorm { .. }
        | Error::LengthMismatch { .. }
        | Error::DegenerateSequence { .. }
        | Error::DegenerateReference
        | Error::OutOfRangeTime { .. }
        | Error::NonFinite { .. } => 3,
        Error::AtStep { .. } => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err}");
        let mut source = std::error::Error::source(&err);
        while let Some(cause) = source {
            eprintln!("  caused by: {cause}");
            source = cause.source();
        }
        std::process::exit(exit_code(&err));
    }
}
