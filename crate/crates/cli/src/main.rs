//! Batch front-end: solve a configuration to grid/policy artifacts,
//! simulate a solved policy with full verification reports, and export
//! free-boundary polylines or grid slices as CSV.
//!
//! Exit codes: 0 success, 2 configuration/schema/artifact-pairing errors,
//! 3 solver or simulation failures.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "merton-experts", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the dynamic-programming equation for a configuration and
    /// write the value-grid and policy containers plus a run manifest.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overridden by MERTON_EXPERTS_OUT).
        #[arg(long)]
        out: PathBuf,
        /// Worker thread cap (overridden by MERTON_EXPERTS_THREADS).
        #[arg(long)]
        threads: Option<usize>,
        /// Fresh intervention re-checks in the invariant summary happen on
        /// every k-th time level.
        #[arg(long, default_value_t = 64)]
        verify_stride: usize,
    },
    /// Simulate the extracted strategy: expected-utility estimate,
    /// martingale diagnostic, and PDE-vs-MC consistency, with CSV exports.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Policy container produced by `solve`.
        #[arg(long)]
        policy: PathBuf,
        /// Value-grid container; defaults to value_grid.bin next to the
        /// policy.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Path count override.
        #[arg(long)]
        paths: Option<usize>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Emit the purchase-region boundary as CSV rows (time, belief,
    /// wealth-run) per time slice.
    Regions {
        #[arg(long)]
        policy: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit only every k-th time slice.
        #[arg(long, default_value_t = 1)]
        t_stride: usize,
    },
    /// Export a 1-D or 2-D slice of an artifact field as CSV.
    Slice {
        /// A value-grid or policy container.
        #[arg(long)]
        artifact: PathBuf,
        /// value | pi_hat | q_hat | gap | region
        #[arg(long)]
        field: String,
        /// Fix the time index.
        #[arg(long)]
        t: Option<usize>,
        /// Fix the wealth index.
        #[arg(long)]
        w: Option<usize>,
        /// Fix the belief index.
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve { config, out, threads, verify_stride } => {
            commands::cmd_solve(&config, &out, threads, verify_stride)
        }
        Command::Simulate { config, policy, grid, out, paths, seed, threads } => {
            commands::cmd_simulate(&config, &policy, grid.as_deref(), &out, paths, seed, threads)
        }
        Command::Regions { policy, out, t_stride } => {
            commands::cmd_regions(&policy, out.as_deref(), t_stride)
        }
        Command::Slice { artifact, field, t, w, p, out } => {
            commands::cmd_slice(&artifact, &field, t, w, p, out.as_deref())
        }
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit_code)
        }
    }
}
