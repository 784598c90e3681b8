//! Thin CLI over the meetsim pipeline.
//!
//! Exit codes are a fixed contract for supervision scripts:
//! 0 ok, 1 QC warnings, 2 fatal QC findings, 64 usage/config errors,
//! 74 I/O or pipeline-state errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meetsim::pipeline::{
    self, load_config, PipelineConfig, PipelineError,
};
use meetsim::syncfit::Estimator;

const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "meetsim",
    version,
    about = "Simulate a multi-device meeting session, recover clock alignment, package it, and QC it"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Pipeline configuration JSON file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Session root directory.
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the timing validation tolerance, in milliseconds.
    #[arg(long = "tolerance-ms")]
    tolerance_ms: Option<f64>,
    /// Override the fit method: theil-sen or least-squares.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate devices and write the sourcedata subtree into a fresh root.
    Simulate(CommonOpts),
    /// Fit clock models from recorded anchors; writes timing artifacts.
    Align(CommonOpts),
    /// Align streams and write the canonical session tree plus manifest.
    Package(CommonOpts),
    /// (Re)write the per-task run slices of a packaged session.
    Slice(CommonOpts),
    /// QC a packaged session; exit code reflects the session status.
    Qc(CommonOpts),
    /// The whole pipeline: simulate, align, package, QC.
    Run(CommonOpts),
    /// Verify file hashes against the session manifest.
    Verify {
        /// Session root directory.
        #[arg(long, short = 'o')]
        out: PathBuf,
    },
}

fn effective_config(opts: &CommonOpts) -> Result<PipelineConfig, PipelineError> {
    let mut config = load_config(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        config.master_seed = seed;
    }
    if let Some(ms) = opts.tolerance_ms {
        // NaN falls through here; config.validate() rejects it below.
        if ms <= 0.0 {
            return Err(PipelineError::Config(format!(
                "--tolerance-ms must be positive, got {ms}"
            )));
        }
        config.tolerance_s = ms / 1000.0;
    }
    if let Some(method) = &opts.method {
        config.fit.kind = Estimator::parse(method).ok_or_else(|| {
            PipelineError::Config(format!(
                "unknown --method {method:?}; expected theil-sen or least-squares"
            ))
        })?;
    }
    config.validate()?;
    Ok(config)
}

fn print_summary_line(summary: &meetsim::qc::SessionSummary) {
    eprintln!(
        "session {}: status {:?}, {} fatal, {} warnings",
        summary.session_id,
        summary.status,
        summary.fatal.len(),
        summary.warnings.len()
    );
    for line in &summary.fatal {
        eprintln!("  fatal: {line}");
    }
    for line in &summary.warnings {
        eprintln!("  warning: {line}");
    }
}

fn execute(command: Command) -> Result<u8, PipelineError> {
    match command {
        Command::Simulate(opts) => {
            let config = effective_config(&opts)?;
            let sim = pipeline::cmd_simulate(&config, &opts.out)?;
            eprintln!(
                "simulated {} streams, {} anchors, {} audio clips over {:.1} s into {}",
                sim.streams.len(),
                sim.anchors.len(),
                sim.audio.len(),
                sim.session_end_s,
                opts.out.display()
            );
            Ok(0)
        }
        Command::Align(opts) => {
            let config = effective_config(&opts)?;
            let (timing, demotions) = pipeline::cmd_align(&config, &opts.out)?;
            for line in &demotions {
                eprintln!("repair: {line}");
            }
            let failing = timing.failing_devices();
            if failing.is_empty() {
                eprintln!("alignment fitted for {} devices, all within tolerance", timing.entries.len());
            } else {
                eprintln!(
                    "alignment fitted for {} devices; failing tolerance: {}",
                    timing.entries.len(),
                    failing.join(", ")
                );
            }
            Ok(0)
        }
        Command::Package(opts) => {
            let config = effective_config(&opts)?;
            let manifest = pipeline::cmd_package(&config, &opts.out)?;
            eprintln!(
                "packaged {} files into {}",
                manifest.entries.len(),
                opts.out.display()
            );
            Ok(0)
        }
        Command::Slice(opts) => {
            let _config = effective_config(&opts)?;
            let count = pipeline::cmd_slice(&opts.out)?;
            eprintln!("wrote {count} run slices under {}", opts.out.display());
            Ok(0)
        }
        Command::Qc(opts) => {
            let config = effective_config(&opts)?;
            let summary = pipeline::cmd_qc(&config, &opts.out)?;
            print_summary_line(&summary);
            Ok(summary.exit_code as u8)
        }
        Command::Run(opts) => {
            let config = effective_config(&opts)?;
            let outcome = pipeline::run_end_to_end(&config, &opts.out)?;
            for line in &outcome.demotions {
                eprintln!("repair: {line}");
            }
            eprintln!(
                "wrote {} files into {}",
                outcome.manifest.entries.len(),
                opts.out.display()
            );
            print_summary_line(&outcome.summary);
            Ok(outcome.summary.exit_code as u8)
        }
        Command::Verify { out } => {
            let issues = meetsim::packager::verify_manifest(&out)?;
            if issues.is_empty() {
                eprintln!("manifest verified: all files match");
                Ok(0)
            } else {
                for issue in &issues {
                    eprintln!(
                        "integrity: {} [{:?}] {}",
                        issue.relative_path, issue.kind, issue.detail
                    );
                }
                Ok(2)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are not usage errors.
            let code = if err.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
