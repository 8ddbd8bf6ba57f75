//! `twincal`: run twin-photon calibration scenarios from the command line.
//!
//! Exit codes: 0 success, 2 config error, 3 out-of-regime correction,
//! 4 degenerate fit, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use twincal_core::error::Error;
use twincal_core::estimators::Method;
use twincal_core::report::{write_run_output, RunOutput};
use twincal_core::runner::{run_comparison, run_scenario, run_trials};
use twincal_core::scenario::{MethodConfig, Scenario};

#[derive(Parser)]
#[command(
    name = "twincal",
    about = "Deterministic Monte Carlo simulator of twin-photon detector calibration",
    version
)]
struct Cli {
    /// Scenario config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for the report and CSV sidecars
    /// (default: $TWINCAL_OUT_DIR or the current directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress the summary printed to stdout.
    #[arg(long, global = true, default_value_t = false)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario with the method named in the config.
    Simulate,
    /// Run the corrected coincidence-method calibration.
    CalibrateCoincidence,
    /// Run the conditional-polarization-rotation calibration.
    CalibrateConditional,
    /// Run the analog-correlation calibration.
    CalibrateAnalog,
    /// Run both methods on one simulated campaign and compare.
    Compare,
    /// Repeat the scenario n times with derived seeds and aggregate.
    Trials {
        /// Number of trials.
        #[arg(short, long)]
        n: u64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::OutOfRegime(_) => 3,
        Error::DegenerateScan(_) => 4,
        _ => 1,
    }
}

fn load_scenario(cli: &Cli) -> Result<Scenario, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config PATH is required"))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut scenario = Scenario::from_toml_str(&text)?;
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("TWINCAL_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Coincidence => "coincidence",
        Method::ConditionalRotation => "conditional_rotation",
        Method::Analog => "analog",
    }
}

fn print_summary(out: &RunOutput) {
    for est in &out.report.estimates {
        println!(
            "{:<22} eta = {:.4} +- {:.4}",
            method_name(est.method),
            est.value,
            est.std_uncertainty
        );
    }
    if let Some(raw) = out.report.raw_eta {
        println!("{:<22} eta = {raw:.4} (uncorrected ratio)", "raw");
    }
    if let Some(cmp) = &out.report.comparison {
        println!(
            "difference = {:+.4} (combined sigma {:.4}); curve phases {:.1} / {:.1} deg",
            cmp.difference, cmp.combined_sigma, cmp.phase_with_deg, cmp.phase_without_deg
        );
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut scenario = load_scenario(cli)?;
    let dir = out_dir(cli);

    let forced = match cli.command {
        Command::Simulate => None,
        Command::CalibrateCoincidence => Some(MethodConfig::Coincidence),
        Command::CalibrateConditional => Some(MethodConfig::ConditionalRotation),
        Command::CalibrateAnalog => Some(MethodConfig::Analog),
        Command::Compare => Some(MethodConfig::Compare),
        Command::Trials { .. } => None,
    };
    if let Some(method) = forced {
        scenario.method = method;
    }
    scenario.validate()?;

    match cli.command {
        Command::Trials { n } => {
            let stats = run_trials(&scenario, n)?;
            let json = serde_json::json!({
                "schema_version": twincal_core::scenario::SCHEMA_VERSION,
                "n_trials": stats.n_trials,
                "per_method": stats.per_method,
                "reports": stats.reports,
            });
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("trials_report.json");
            let mut text = serde_json::to_string_pretty(&json)
                .map_err(|e| Error::invalid(e.to_string()))?;
            text.push('\n');
            std::fs::write(&path, text)?;
            if !cli.quiet {
                for m in &stats.per_method {
                    println!(
                        "{:<22} mean = {:.4}  std = {:.4}  se = {:.4}  (n = {})",
                        method_name(m.method),
                        m.mean,
                        m.std_dev,
                        m.std_error,
                        stats.n_trials
                    );
                }
                println!("wrote {}", path.display());
            }
        }
        Command::Compare => {
            let mut out = run_comparison(&scenario)?;
            let files = write_run_output(&mut out, &dir, "compare")?;
            if !cli.quiet {
                print_summary(&out);
                println!("wrote {} files to {}", files.len(), dir.display());
            }
        }
        _ => {
            let mut out = run_scenario(&scenario)?;
            let prefix = match scenario.method {
                MethodConfig::Coincidence => "coincidence",
                MethodConfig::ConditionalRotation => "conditional",
                MethodConfig::Analog => "analog",
                MethodConfig::Compare => "compare",
            };
            let files = write_run_output(&mut out, &dir, prefix)?;
            if !cli.quiet {
                print_summary(&out);
                println!("wrote {} files to {}", files.len(), dir.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
