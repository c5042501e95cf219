//! `kdvctl`: synthesize boundary feedback for the cascade ODE / linearized-KdV
//! plant, simulate the closed loop, and check the stability certificates.

use clap::{Parser, Subcommand};
use kdv_backstep::commands::{self, Which};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kdvctl", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the transform kernels and gain functions, write the artifacts.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the closed loop and/or the target system, write traces and summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// closed_loop, target, or both
        #[arg(long, default_value = "both")]
        which: String,
    },
    /// Run the full verification suite and print a pass/fail table.
    Verify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-run the pipeline over a parameter list, one CSV row per value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// lambda, N, or dt
        #[arg(long)]
        param: String,
        /// Comma-separated numbers; negatives are allowed
        #[arg(long, allow_hyphen_values = true)]
        values: String,
    },
}

fn parse_values(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad --values entry `{s}`: {e}"))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let report = match cli.cmd {
        Cmd::Synthesize { config, out } => commands::cmd_synthesize(&config, &out),
        Cmd::Simulate { config, out, which } => match which.parse::<Which>() {
            Ok(w) => commands::cmd_simulate(&config, &out, w),
            Err(e) => commands::CommandReport {
                code: commands::EXIT_CONFIG,
                text: format!("{e}\n"),
            },
        },
        Cmd::Verify { config } => commands::cmd_verify(&config),
        Cmd::Sweep {
            config,
            param,
            values,
        } => match parse_values(&values) {
            Ok(v) => commands::cmd_sweep(&config, &param, &v),
            Err(e) => commands::CommandReport {
                code: commands::EXIT_CONFIG,
                text: format!("{e}\n"),
            },
        },
    };
    print!("{}", report.text);
    ExitCode::from(report.code as u8)
}
