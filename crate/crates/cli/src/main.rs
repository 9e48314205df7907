//! `miles`: record a demonstration, collect, fuse, train and evaluate from
//! one TOML config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 invalid or missing input,
//! 4 runtime failure. Log verbosity comes from `MILES_LOG` (default `info`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use miles::harness::{self, AblationMode, EvalSpec, Report};
use miles::pipeline::{self, RunConfig};
use miles::{deploy, policy, Error};

#[derive(Parser)]
#[command(name = "miles", version, about = "Single-demonstration augmentation and behavioral cloning")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `scenario` from the config.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Record the scenario's scripted demonstration.
    Demo,
    /// Calibrate the disturbance threshold and collect augmentation data.
    Collect,
    /// Fuse the collected trajectories with the demonstration.
    Fuse,
    /// Train a policy on the fused dataset.
    Train,
    /// Evaluate a policy over randomized trials.
    Eval {
        /// Policy file; defaults to the one in the output directory.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run ablations: no-sequence, no-disturbance, no-reachability,
    /// no-memory, data-fraction=F, or `all`.
    Ablate {
        #[arg(long, default_value = "all")]
        mode: String,
    },
    /// All stages in order, skipping those already up to date.
    Pipeline,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::UnknownScenario(_) => 2,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Version { .. }
        | Error::Shape { .. }
        | Error::Checksum
        | Error::Integrity(_)
        | Error::Invalid(_) => 3,
        _ => 4,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = &cli.scenario {
        cfg.scenario = s.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ablation_modes(mode: &str) -> Result<Vec<AblationMode>, Error> {
    if mode == "all" {
        let mut modes = vec![
            AblationMode::NoSequence,
            AblationMode::NoDisturbance,
            AblationMode::NoReachability,
            AblationMode::NoMemory,
        ];
        modes.extend(AblationMode::FRACTIONS.iter().map(|&f| AblationMode::DataFraction(f)));
        Ok(modes)
    } else {
        mode.split(',').map(|m| m.trim().parse()).collect()
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Demo => {
            let d = pipeline::stage_demo(&cfg)?;
            println!("{}: {} waypoints -> {}", d.scenario, d.len(), cfg.paths().demo.display());
        }
        Cmd::Collect => {
            let r = pipeline::stage_collect(&cfg)?;
            println!(
                "{}: {} trajectories, R = {}, stop {:?} -> {}",
                r.scenario,
                r.dataset.len(),
                r.r,
                r.stop_reason,
                cfg.paths().dataset.display()
            );
        }
        Cmd::Fuse => {
            let f = pipeline::stage_fuse(&cfg)?;
            println!("{} sequences, {} steps -> {}", f.len(), f.total_steps(), cfg.paths().fused.display());
        }
        Cmd::Train => {
            let p = pipeline::stage_train(&cfg)?;
            println!("{} parameters -> {}", p.net.param_count(), cfg.paths().policy.display());
        }
        Cmd::Eval { policy: None } => print!("{}", pipeline::stage_eval(&cfg)?.to_markdown()),
        Cmd::Eval { policy: Some(path) } => {
            let pol = policy::load_policy_expecting(path, &cfg.net)?;
            let spec = EvalSpec {
                scenario: pol.scenario.clone(),
                ..cfg.eval_spec()
            };
            let (row, episodes) = harness::evaluate_policy("miles", &pol, &spec, &cfg.sim, &cfg.deploy)?;
            let report = Report::single(row);
            let p = cfg.paths();
            report.save(&p.report_csv, &p.report_md)?;
            deploy::save_traces(&episodes, &p.traces)?;
            print!("{}", report.to_markdown());
        }
        Cmd::Ablate { mode } => {
            let mut report = Report::default();
            for m in ablation_modes(mode)? {
                log::info!("ablation {}", m.name());
                report.extend(harness::run_ablation(m, &cfg)?);
            }
            report.save(&cfg.out.join("ablation.csv"), &cfg.out.join("ablation.md"))?;
            print!("{}", report.to_markdown());
        }
        Cmd::Pipeline => print!("{}", pipeline::run_pipeline(&cfg)?.to_markdown()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MILES_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
