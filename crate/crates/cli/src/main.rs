use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::info;

use rfid_fabric::par::Execution;
use rfid_fabric::pipeline::Mode;
use rfid_fabric::report::ReportFormat;
use rfid_fabric::scenario::{self, bundled, Scenario, ScenarioError};
use rfid_fabric::sim::{self, RunError, RunOptions};

const EXIT_BREACH: u8 = 1;
const EXIT_INVALID: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    TwoStep,
    Direct,
    Compare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportArg {
    Json,
    Csv,
    Text,
}

impl From<ReportArg> for ReportFormat {
    fn from(r: ReportArg) -> Self {
        match r {
            ReportArg::Json => ReportFormat::Json,
            ReportArg::Csv => ReportFormat::Csv,
            ReportArg::Text => ReportFormat::Text,
        }
    }
}

/// Run an RFID tag infrastructure scenario and report what happened.
#[derive(Debug, Parser)]
#[command(name = "rfid-fabric", version)]
struct Cli {
    /// Scenario file, or `bundled:<name>` for a shipped scenario.
    #[arg(long, value_name = "PATH")]
    scenario: String,

    /// Force every system into one pipeline, or run both and compare.
    /// Without it each system uses the mode its scenario declares.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, value_enum, default_value_t = ReportArg::Text)]
    report: ReportArg,

    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Also print the inventory snapshots (JSON) to stderr.
    #[arg(long)]
    dump_inventory: bool,

    /// Parse, validate and provision the systems, then stop.
    #[arg(long)]
    validate_only: bool,
}

fn load(spec: &str) -> Result<Scenario, ScenarioError> {
    if let Some(name) = spec.strip_prefix("bundled:") {
        return bundled::get(name).unwrap_or_else(|| {
            Err(ScenarioError::Io {
                path: spec.to_string(),
                message: format!(
                    "no bundled scenario named {name:?} (have: {})",
                    bundled::ALL.map(|(n, _)| n).join(", ")
                ),
            })
        });
    }
    scenario::load_scenario(spec)
}

fn emit(cli: &Cli, text: &str) -> Result<(), String> {
    match &cli.out {
        Some(path) => std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn exit_for(err: &RunError) -> ExitCode {
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RFID_FABRIC_LOG")).init();
    let cli = Cli::parse();

    let scenario = match load(&cli.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    };
    info!("loaded scenario {} ({} systems)", scenario.name, scenario.systems.len());

    if cli.validate_only {
        let forced: &[Option<Mode>] = match cli.mode {
            None => &[None],
            Some(ModeArg::TwoStep) => &[Some(Mode::TwoStep)],
            Some(ModeArg::Direct) => &[Some(Mode::Direct)],
            Some(ModeArg::Compare) => &[Some(Mode::TwoStep), Some(Mode::Direct)],
        };
        for &mode in forced {
            let mut built = match scenario.build(mode) {
                Ok(b) => b,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_INVALID);
                }
            };
            if let Err(e) = built.create_all() {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_INVALID);
            }
            if cli.dump_inventory {
                eprintln!("{}", built.infra.inventory_json());
            }
        }
        println!("{}: ok", scenario.name);
        return ExitCode::SUCCESS;
    }

    let format = ReportFormat::from(cli.report);
    let (text, snapshots) = match cli.mode {
        Some(ModeArg::Compare) => match sim::compare_modes(&scenario, cli.seed, Execution::Parallel) {
            Ok((report, two, direct)) => (report.render(format), vec![two.inventory, direct.inventory]),
            Err(e) => {
                eprintln!("error: {e}");
                return exit_for(&e);
            }
        },
        other => {
            let mode = match other {
                Some(ModeArg::TwoStep) => Some(Mode::TwoStep),
                Some(ModeArg::Direct) => Some(Mode::Direct),
                _ => None,
            };
            match sim::run(&scenario, &RunOptions { seed: cli.seed, mode }) {
                Ok(result) => (result.report.render(format), vec![result.inventory]),
                Err(e) => {
                    eprintln!("error: {e}");
                    return exit_for(&e);
                }
            }
        }
    };
    if cli.dump_inventory {
        for s in &snapshots {
            eprintln!("{}", s.to_json());
        }
    }
    if let Err(e) = emit(&cli, &text) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_BREACH);
    }
    ExitCode::SUCCESS
}
