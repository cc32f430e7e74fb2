use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use swarm_init::bench::{run_benchmark, write_csv};
use swarm_init::config::Config;
use swarm_init::pipeline::{localize, run_init_with_trace, PipelineError};
use swarm_init::simulator::read_trace;

#[derive(Parser)]
#[command(name = "swarm-init", version, about = "Swarm coordinate initialization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the initialization loop in simulation.
    Init {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the world seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump scanned epochs as JSON Lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare the relaxation against LM and GN and write CSV rows.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-solve a dumped epoch trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Observation noise used for screening and gating.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = swarm_init::sdp_rotation::DEFAULT_RANK_TOL)]
        rank_tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ReplayReport {
    epochs: usize,
    objective: f64,
    numeric_rank: usize,
    complete: bool,
    rotations: swarm_init::YawVector,
    translations: Vec<Option<nalgebra::Vector3<f64>>>,
    graph: swarm_init::correspondence::CorrespondenceGraph,
}

fn emit_json<T: Serialize>(value: &T, out: Option<&PathBuf>) -> Result<(), Box<dyn std::error::Error>> {
    let writer: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut writer = writer;
    serde_json::to_writer_pretty(&mut writer, value)?;
    writeln!(writer)?;
    writer.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Init {
            config,
            seed,
            out,
            trace,
        } => {
            let mut cfg = Config::load(&config)?;
            if let Some(s) = seed {
                cfg.world.seed = s;
            }
            match run_init_with_trace(&cfg, trace.as_deref()) {
                Ok(report) => {
                    emit_json(&report, out.as_ref())?;
                    Ok(ExitCode::SUCCESS)
                }
                Err(PipelineError::MaxEpochsExceeded(report)) => {
                    eprintln!("warning: epoch cap reached before convergence");
                    emit_json(&report, out.as_ref())?;
                    Ok(ExitCode::from(2))
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Bench { config, out } => {
            let cfg = Config::load(&config)?;
            let result = run_benchmark(&cfg.benchmark, &cfg.world)?;
            write_csv(&result.rows, BufWriter::new(File::create(&out)?))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay {
            trace,
            sigma,
            rank_tol,
            out,
        } => {
            let records = read_trace(&trace)?;
            let loc = localize(&records, sigma, rank_tol)?;
            let report = ReplayReport {
                epochs: records.len(),
                objective: loc.sdp.objective,
                numeric_rank: loc.sdp.numeric_rank,
                complete: loc.sdp.complete,
                rotations: loc.sdp.rotations.clone(),
                translations: loc.recovery.translations.clone(),
                graph: loc.recovery.graph.clone(),
            };
            emit_json(&report, out.as_ref())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
