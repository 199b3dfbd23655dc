//! Command-line entry point: validate configs, print oracle documents,
//! execute runs and sweeps, and run the verification battery.
//!
//! Exit status: 0 success, 1 validation failure, 2 runtime failure,
//! 3 check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gtdlab::checks::run_battery;
use gtdlab::config::{ConfigError, RootConfig};
use gtdlab::output::{write_json, OracleDoc};
use gtdlab::runner::{execute_run, execute_sweep, worker_pool};
use gtdlab_core::mdp::{validate_model, ValidatedMdp};
use gtdlab_core::sim::OracleRefs;

#[derive(Parser)]
#[command(
    name = "gtdlab",
    about = "Desk-scale laboratory for gradient-based off-policy TD policy evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (required by `run` and `sweep`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override, comma separated (defaults to the config's seeds).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for seeds and sweep cells (0 = library default).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Verbose progress output.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the config and report every standing-condition check.
    Validate(Common),
    /// Solve and print the oracle document for the configured problem.
    Oracle(Common),
    /// Execute the experiment over its seed list.
    Run(Common),
    /// Execute the declared parameter grid.
    Sweep(Common),
    /// Run the verification battery.
    Check(Common),
}

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

fn load_config(common: &Common) -> Result<RootConfig, u8> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| {
        eprintln!("cannot read {}: {e}", common.config.display());
        EXIT_RUNTIME
    })?;
    RootConfig::from_json(&text).map_err(|e| {
        eprintln!("{e}");
        EXIT_VALIDATION
    })
}

fn seeds_of(common: &Common, config: &RootConfig) -> Vec<u64> {
    common.seeds.clone().unwrap_or_else(|| config.seeds())
}

fn classify(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn cmd_validate(common: &Common) -> u8 {
    let config = match load_config(common) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let raw = match config.build_raw_model() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_VALIDATION;
        }
    };
    let report = validate_model(&raw);
    for check in &report.checks {
        println!(
            "{} {}: {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
    }
    if !report.all_passed() {
        return EXIT_VALIDATION;
    }
    // Full experiment assembly exercises the remaining schema checks
    // (features, scheme, algorithm and stepsize compatibility).
    match config.build_experiment() {
        Ok(_) => {
            println!("PASS experiment: config is runnable");
            EXIT_OK
        }
        Err(e) => {
            println!("FAIL experiment: {e}");
            EXIT_VALIDATION
        }
    }
}

fn cmd_oracle(common: &Common) -> u8 {
    let config = match load_config(common) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let experiment = match config.build_experiment() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_VALIDATION;
        }
    };
    let refs = match OracleRefs::for_config(&experiment) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_RUNTIME;
        }
    };
    let doc = match OracleDoc::build(&refs.problem) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_RUNTIME;
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).expect("serializable document")
    );
    if let Some(out) = &common.out {
        if let Err(e) = std::fs::create_dir_all(out)
            .and_then(|_| write_json(&out.join("oracle.json"), &doc))
        {
            eprintln!("cannot write oracle document: {e}");
            return EXIT_RUNTIME;
        }
    }
    EXIT_OK
}

fn cmd_run(common: &Common) -> u8 {
    let config = match load_config(common) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let Some(out) = &common.out else {
        eprintln!("`run` requires --out <dir>");
        return EXIT_VALIDATION;
    };
    let seeds = seeds_of(common, &config);
    let pool = worker_pool(common.workers);
    match execute_run(&pool, &config, out, &seeds) {
        Ok(summary) => {
            if common.verbose {
                for s in &summary.seeds {
                    println!(
                        "seed {}: final dist_theta_opt {:.6e}, diverged {}",
                        s.seed, s.final_dist_theta_opt, s.diverged
                    );
                }
            }
            println!(
                "{} seeds -> {}; median final dist_theta_opt {:.6e}",
                summary.seeds.len(),
                out.display(),
                summary.median_final_dist_theta_opt
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            classify(&e)
        }
    }
}

fn cmd_sweep(common: &Common) -> u8 {
    let config = match load_config(common) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let Some(out) = &common.out else {
        eprintln!("`sweep` requires --out <dir>");
        return EXIT_VALIDATION;
    };
    let seeds = seeds_of(common, &config);
    let pool = worker_pool(common.workers);
    match execute_sweep(&pool, &config, out, &seeds) {
        Ok(summary) => {
            for (i, cell) in summary.cells.iter().enumerate() {
                match &cell.skipped {
                    Some(reason) => println!("cell {i} [{}]: skipped ({reason})", cell.label),
                    None => println!(
                        "cell {i} [{}]: median final dist_theta_opt {:.6e}",
                        cell.label,
                        cell.median_final_dist_theta_opt.unwrap_or(f64::NAN)
                    ),
                }
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            classify(&e)
        }
    }
}

fn cmd_check(common: &Common) -> u8 {
    let config = match load_config(common) {
        Ok(c) => c,
        Err(code) => return code,
    };
    // The battery needs a validated model before anything else.
    if let Ok(raw) = config.build_raw_model() {
        if ValidatedMdp::new(raw).is_err() && common.verbose {
            eprintln!("model failed validation; reporting model checks only");
        }
    }
    match run_battery(&config) {
        Ok(doc) => {
            for line in &doc.lines {
                println!(
                    "{} {} (margin {:.3e}, threshold {:.3e})",
                    if line.passed { "PASS" } else { "FAIL" },
                    line.name,
                    line.margin,
                    line.threshold
                );
            }
            if let Some(out) = &common.out {
                if let Err(e) = std::fs::create_dir_all(out)
                    .and_then(|_| write_json(&out.join("check_report.json"), &doc))
                {
                    eprintln!("cannot write check report: {e}");
                    return EXIT_RUNTIME;
                }
            }
            if doc.all_passed {
                EXIT_OK
            } else {
                EXIT_CHECK
            }
        }
        Err(e) => {
            eprintln!("{e}");
            classify(&e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Validate(c) => cmd_validate(c),
        Command::Oracle(c) => cmd_oracle(c),
        Command::Run(c) => cmd_run(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Check(c) => cmd_check(c),
    };
    ExitCode::from(code)
}
