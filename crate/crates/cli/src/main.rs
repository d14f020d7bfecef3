use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rattle::executive::{compare_runs, run_scenario, RunError, ScenarioConfig};
use rattle::telemetry::{read_summary, validate_run, write_run, RunManifest, TimingReport};

#[derive(Parser)]
#[command(name = "rattle", version, about = "Information-aware planning and robust control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrast two run directories (B relative to A).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Re-check a run directory with the independent validators.
    Validate { log: PathBuf },
}

const EXIT_FAIL: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_NO_PLAN: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RATTLE_LOG_LEVEL", "error")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { scenario, seed, out } => cmd_run(scenario, seed, out),
        Command::Compare { a, b, json } => cmd_compare(a, b, json),
        Command::Validate { log } => cmd_validate(log),
    };
    ExitCode::from(code)
}

fn cmd_run(scenario: PathBuf, seed: Option<u64>, out: PathBuf) -> u8 {
    let bytes = match fs::read(&scenario) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {}: {e}", scenario.display());
            return EXIT_FAIL;
        }
    };
    let text = String::from_utf8_lossy(&bytes);
    let mut cfg = match ScenarioConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", scenario.display());
            return EXIT_SCHEMA;
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = RunManifest::new(&scenario, &bytes, cfg.seed, &out);
    let (log, code) = match run_scenario(&cfg) {
        Ok(log) => (log, 0),
        Err(RunError::Scenario(e)) => {
            eprintln!("error: {}: {e}", scenario.display());
            return EXIT_SCHEMA;
        }
        Err(RunError::Failed(f)) => {
            eprintln!("error: {f}");
            (*f.log, EXIT_NO_PLAN)
        }
    };
    let summary = match write_run(&log, &out).and_then(|s| manifest.write(&out).map(|_| s)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAIL;
        }
    };
    println!(
        "{}: {:?} at t = {} s, {} global replan(s), {} collision(s)",
        summary.name, summary.termination, summary.final_time_s, summary.global_replans, summary.collisions
    );
    println!("final theta {:?}", summary.final_theta_hat.as_slice());
    println!("final sigma {:?}", summary.final_sigma.as_slice());
    print!("{}", TimingReport::new(&log.config, &log.timings).render());
    if code == 0 && summary.collisions > 0 {
        return EXIT_FAIL;
    }
    code
}

fn cmd_compare(a: PathBuf, b: PathBuf, json: Option<PathBuf>) -> u8 {
    let (sa, sb) = match (read_summary(&a), read_summary(&b)) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("error: {e}");
            return EXIT_FAIL;
        }
    };
    match compare_runs(&sa, &sb) {
        Ok(c) => {
            print!("{}", c.render());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&c).expect("serializable") + "\n";
                if let Err(e) = fs::write(&path, text) {
                    eprintln!("error: {}: {e}", path.display());
                    return EXIT_FAIL;
                }
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAIL
        }
    }
}

fn cmd_validate(log: PathBuf) -> u8 {
    match validate_run(&log) {
        Ok(report) => {
            print!("{}", report.render());
            if let Some((t, name, msg)) = report.first_failure() {
                println!("FAIL: {name} at t = {t} s: {msg}");
                EXIT_FAIL
            } else {
                println!("PASS");
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAIL
        }
    }
}
