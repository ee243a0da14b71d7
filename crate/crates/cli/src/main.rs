use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lrcvar::harness::{run_experiment, write_outputs, Experiment, ExperimentConfig, HarnessError};
use lrcvar::mdp::DeterministicPolicy;
use lrcvar::oracle::{check_local_optimality, global_optimum_by, policy_report, Objective};
use serde_json::json;

/// Long-run CVaR Q-learning experiments.
#[derive(Parser)]
#[command(name = "lrcvar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded replications and write summary.json and CSV series.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the exact optimum and the mean-optimal policy.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Certify a deterministic policy as locally optimal or not.
    Check {
        #[arg(long)]
        config: PathBuf,
        /// JSON action list such as `[0,0,0,0,0,1]`, inline or as a file path.
        #[arg(long)]
        policy: String,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            reps,
            threads,
        } => run(&config, out, seed, reps, threads),
        Command::Oracle { config } => oracle(&config),
        Command::Check { config, policy } => check(&config, &policy),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(
    path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    reps: Option<usize>,
    threads: Option<usize>,
) -> Result<(), Failure> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.base_seed = s;
    }
    if let Some(r) = reps {
        config.replications = r;
    }
    if threads == Some(0) {
        return Err(Failure::Config("--threads must be positive".into()));
    }
    let dir = out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let exp = Experiment::prepare(config)?;
    let report = run_experiment(&exp, threads)?;
    write_outputs(&report, &dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    let s = &report.summary;
    println!(
        "{}: {}/{} replications, VaR {:.4} +- {:.4}, CVaR {:.4} +- {:.4}, mean {:.4} +- {:.4}, locally optimal {}",
        s.algorithm,
        s.succeeded,
        s.replications,
        s.var.mean,
        s.var.se,
        s.cvar.mean,
        s.cvar.se,
        s.mean.mean,
        s.mean.se,
        s.locally_optimal_count
    );
    for f in &s.failures {
        eprintln!("replication {} failed: {}", f.replication, f.error);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn model_and_config(path: &Path) -> Result<(ExperimentConfig, lrcvar::mdp::MdpModel), Failure> {
    let config = ExperimentConfig::load(path)?;
    config.validate()?;
    let model = config.env.build()?;
    if config.reference_state >= model.n_states() {
        return Err(Failure::Config(format!("reference state {} out of range", config.reference_state)));
    }
    Ok((config, model))
}

fn oracle(path: &Path) -> Result<(), Failure> {
    let (config, model) = model_and_config(path)?;
    let lambda = config.algorithm.lambda().unwrap_or(0.0);
    let runtime = |e: lrcvar::oracle::OracleError| Failure::Runtime(e.to_string());
    let best = global_optimum_by(&model, config.phi, Objective::MeanCvar { lambda }).map_err(runtime)?;
    let mean_best = global_optimum_by(&model, config.phi, Objective::Mean).map_err(runtime)?;
    let report = |p: &DeterministicPolicy| policy_report(&model, p, config.phi, lambda, config.reference_state);
    let out = json!({
        "phi": config.phi,
        "lambda": lambda,
        "evaluated": best.evaluated,
        "skipped_reducible": best.skipped_reducible,
        "optimum": report(&best.policy).map_err(runtime)?,
        "mean_optimal": report(&mean_best.policy).map_err(runtime)?,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
    Ok(())
}

fn parse_policy(arg: &str) -> Result<Vec<usize>, Failure> {
    let text = if Path::new(arg).is_file() {
        std::fs::read_to_string(arg).map_err(|e| Failure::Config(format!("{arg}: {e}")))?
    } else {
        arg.to_string()
    };
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("policy is not JSON: {e}")))?;
    let list = match &value {
        serde_json::Value::Object(m) => m.get("policy").or_else(|| m.get("action")).unwrap_or(&value),
        _ => &value,
    };
    serde_json::from_value(list.clone())
        .map_err(|_| Failure::Config("policy must be a list of action indices".into()))
}

fn check(path: &Path, policy: &str) -> Result<(), Failure> {
    let (config, model) = model_and_config(path)?;
    let actions = parse_policy(policy)?;
    let policy = DeterministicPolicy::new(&model, actions).map_err(|e| Failure::Config(e.to_string()))?;
    let lambda = config.algorithm.lambda().unwrap_or(0.0);
    let runtime = |e: lrcvar::oracle::OracleError| Failure::Runtime(e.to_string());
    let cert = check_local_optimality(
        &model,
        &policy,
        config.phi,
        Objective::MeanCvar { lambda },
        config.local_tol,
        config.reference_state,
    )
    .map_err(runtime)?;
    let report = policy_report(&model, &policy, config.phi, lambda, config.reference_state).map_err(runtime)?;
    let out = json!({
        "policy": report.policy,
        "var": report.var,
        "cvar": report.cvar,
        "mean": report.mean,
        "objective": report.objective,
        "locally_optimal": cert.locally_optimal,
        "tol": cert.tol,
        "failing_states": cert.failing_states(),
        "states": cert.states,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
    Ok(())
}
