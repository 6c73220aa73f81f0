//! Batch front-end: coefficient dumps, parameter sweeps, tier runs and Wigner views.

mod coeffs;
mod error;
mod io;
mod run;
mod sweep;
mod wigner;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, CliResult};
use crate::io::{load_json, Sink};

#[derive(Debug, Parser)]
#[command(name = "omsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output file. Defaults to <out-dir>/<config stem>.<ext>, or stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Default directory for outputs and snapshots.
    #[arg(long, global = true, env = "OMSIM_OUT_DIR")]
    out_dir: Option<PathBuf>,

    /// Worker threads for sweeps and tier comparisons (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Use the bare resonance splitting instead of the spring-corrected one.
    #[arg(long, global = true)]
    bare_resonance: bool,
}

#[derive(Debug, Args)]
struct Input {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Derived scales, both coefficient sets and the spring shifts as JSON.
    Coeffs(Input),
    /// Evaluate a target quantity over a parameter grid.
    Sweep(Input),
    /// Integrate one tier, or compare all tiers side by side.
    Evolve(Input),
    /// Spring-corrected resonance detunings over a grid.
    Resonance(Input),
    /// Wigner function of one mode of a snapshot.
    Wigner(Input),
}

impl Cli {
    fn sink(&self, config: &Path, ext: &str) -> Sink {
        Sink::choose(self.out.as_deref(), self.out_dir.as_deref(), config, ext)
    }

    fn dispatch(&self) -> CliResult<()> {
        match &self.command {
            Command::Coeffs(input) => {
                let spec: io::ParamsSpec = load_json(&input.config)?;
                let bytes = coeffs::run(&spec, self.bare_resonance)?;
                self.sink(&input.config, "json").write(&bytes)
            }
            Command::Sweep(input) => {
                let spec: sweep::SweepSpec = load_json(&input.config)?;
                let result = sweep::run(&spec, self.bare_resonance, self.workers)?;
                report_failed(result.failed);
                let bytes = sweep::to_csv("sweep", &spec, self.bare_resonance, result)?;
                self.sink(&input.config, "csv").write(&bytes)
            }
            Command::Resonance(input) => {
                let cfg: sweep::ResonanceConfig = load_json(&input.config)?;
                let result = sweep::run(&cfg.as_sweep(), false, self.workers)?;
                report_failed(result.failed);
                let bytes = sweep::to_csv("resonance", &cfg, false, result)?;
                self.sink(&input.config, "csv").write(&bytes)
            }
            Command::Evolve(input) => {
                let cfg: run::RunConfig = load_json(&input.config)?;
                let sink = self.sink(&input.config, "csv");
                let side = sink.side_dir(self.out_dir.as_deref());
                let stem = sink.stem(&input.config);
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(self.workers.unwrap_or(0))
                    .build()
                    .map_err(|e| CliError::Validation(format!("cannot build worker pool: {e}")))?;
                let out = pool.install(|| run::run(&cfg, self.bare_resonance, &side, &stem))?;
                for (tier, d) in &out.diagnostics {
                    if d.truncated {
                        eprintln!(
                            "warning: {} run reached top-level population {:?}; raise the cutoffs",
                            tier.name(),
                            d.max_top_population
                        );
                    }
                }
                sink.write(&out.csv)
            }
            Command::Wigner(input) => {
                let cfg: wigner::WignerConfig = load_json(&input.config)?;
                let ext = match cfg.format {
                    wigner::Format::Csv => "csv",
                    wigner::Format::Pgm => "pgm",
                };
                let bytes = wigner::run(&cfg, &input.config)?;
                self.sink(&input.config, ext).write(&bytes)
            }
        }
    }
}

fn report_failed(failed: usize) {
    if failed > 0 {
        eprintln!("warning: {failed} grid points failed; see the error column");
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
