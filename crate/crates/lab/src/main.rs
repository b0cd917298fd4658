use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use solfgr::pipeline::{self, Context, Outcome};
use solfgr::{LabError, LabResult, RunConfig};

#[derive(Parser)]
#[command(name = "solfgr", version, about = "Ground states, FGR coefficients and soliton dynamics for radial NLS")]
struct Cli {
    /// Run configuration (TOML). Required by every command except `defaults`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for scans and independent report stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// `section.key=value`, may be repeated.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the complete reference configuration.
    Defaults,
    /// Ground state, branch and the H3-H5 checks.
    GroundState,
    /// Linearized spectrum, internal mode, H7 and gap-only H9.
    Spectrum,
    /// Fermi golden rule coefficient and its cross-checks.
    Fgr,
    /// Evolve a perturbed ground state and store snapshots.
    Simulate {
        /// main (z0), half (z0/2) or standing (z0 = 0)
        #[arg(long, default_value = "main")]
        tag: String,
    },
    /// Modulation tracking and damping fit of a stored trajectory.
    Track {
        #[arg(long, default_value = "main")]
        tag: String,
    },
    /// Every stage plus the verdict table.
    Report,
}

fn load(cli: &Cli) -> LabResult<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| LabError::Config("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    RunConfig::from_toml_with(&text, &cli.overrides)
}

fn run(cli: &Cli) -> LabResult<Outcome> {
    if let Command::Defaults = cli.command {
        print!("{}", RunConfig::reference().to_toml());
        return Ok(Outcome { passed: true, summary: String::new() });
    }
    let ctx = Context::new(load(cli)?, cli.out.clone(), cli.jobs)?;
    match &cli.command {
        Command::Defaults => unreachable!(),
        Command::GroundState => pipeline::cmd_ground_state(&ctx),
        Command::Spectrum => pipeline::cmd_spectrum(&ctx),
        Command::Fgr => pipeline::cmd_fgr(&ctx),
        Command::Simulate { tag } => pipeline::cmd_simulate(&ctx, tag),
        Command::Track { tag } => pipeline::cmd_track(&ctx, tag),
        Command::Report => pipeline::cmd_report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors share the config-error code; 2 means a hypothesis failed
            return ExitCode::from(if e.use_stderr() { 4 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(o) => {
            if !o.summary.is_empty() {
                println!("{}", o.summary);
            }
            ExitCode::from(if o.passed { 0 } else { 2 })
        }
        Err(e) => {
            let err = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{err}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
