//! Seeded replications of a learner run, checkpointed against the oracle.

mod config;
mod output;

pub use config::{Checkpoints, EnvSpec, ExperimentConfig, ScheduleOverrides};
pub use output::{emit_csv, series_mean, write_outputs, CSV_HEADER};

use std::collections::HashMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvError;
use crate::learner::{Criterion, LearnerConfig, LearnerError, LearnerState};
use crate::mdp::{DeterministicPolicy, MdpError, MdpModel, RandomizedPolicy};
use crate::oracle::{
    check_local_optimality, evaluate_deterministic, global_optimum_by, Objective, OracleError, PolicyEvaluation,
};
use crate::risk::RiskTriple;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("rate fit needs at least 10 points with positive values in the window, found {0}")]
    InsufficientPoints(usize),
    #[error("relative gap against a zero optimum")]
    ZeroDenominator,
    #[error("every replication failed")]
    AllReplicationsFailed,
}

impl HarnessError {
    /// Errors caused by the configuration or the model it names, as opposed
    /// to failures while running.
    pub fn is_config_error(&self) -> bool {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } | HarnessError::Env(_) | HarnessError::Mdp(_) => true,
            HarnessError::Learner(e) => matches!(e, LearnerError::Schedule(_) | LearnerError::Config(_)),
            _ => false,
        }
    }
}

/// `(value - opt) / |opt|`.
pub fn compute_gap(value: f64, opt: f64) -> Result<f64, HarnessError> {
    if opt == 0.0 {
        return Err(HarnessError::ZeroDenominator);
    }
    Ok((value - opt) / opt.abs())
}

/// Least-squares slope of `ln y` against `ln x` over points with
/// `x in [lo, hi]` and `y > 0`.
pub fn fit_rate(points: &[(f64, f64)], window: (f64, f64)) -> Result<f64, HarnessError> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x >= window.0 && *x <= window.1 && *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 10 {
        return Err(HarnessError::InsufficientPoints(logs.len()));
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Objective that judges a run: the learner's own mean-CVaR weight, or pure
/// CVaR for the mean baseline.
pub fn judging_objective(criterion: Criterion) -> Objective {
    Objective::MeanCvar {
        lambda: criterion.lambda().unwrap_or(0.0),
    }
}

/// A config resolved against its model, ready to replicate.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: MdpModel,
    pub learner: LearnerConfig,
    pub checkpoints: Vec<u64>,
    /// Best deterministic policy under [`judging_objective`], when
    /// enumeration is within budget.
    pub optimum: Option<(DeterministicPolicy, PolicyEvaluation)>,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let model = config.env.build()?;
        let learner = config.learner_config();
        learner.validate(&model)?;
        if config.initial_state >= model.n_states() {
            return Err(HarnessError::Config(format!("initial state {} out of range", config.initial_state)));
        }
        let checkpoints = config.checkpoints.resolve(config.total_epochs())?;
        let optimum = match global_optimum_by(&model, config.phi, judging_objective(config.algorithm)) {
            Ok(opt) => Some((opt.policy, opt.evaluation)),
            Err(OracleError::Budget { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(Experiment {
            config,
            model,
            learner,
            checkpoints,
            optimum,
        })
    }

    pub fn objective(&self) -> Objective {
        judging_objective(self.config.algorithm)
    }

    /// RNG of replication `rep`: stream `rep` of a ChaCha8 generator keyed by
    /// the base seed, so adding replications never changes earlier ones.
    pub fn rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.base_seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// Which policy `policy_distance` is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// The final greedy policy is certified and attains the oracle optimum.
    OracleOptimum,
    /// The final greedy policy is certified locally optimal but is not the
    /// global optimum.
    LocalOptimum,
    /// Not certified; the run's own final greedy policy.
    OwnFinalGreedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: u64,
    pub running_cvar: f64,
    /// Oracle risk of the greedy policy; NaN when its chain has several
    /// recurrent classes.
    pub oracle: RiskTriple,
    pub gap: f64,
    pub policy_distance: f64,
    pub v: f64,
    pub max_abs_q: f64,
    pub greedy: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub greedy: Vec<usize>,
    pub risk: RiskTriple,
    pub objective: f64,
    pub gap: f64,
    pub locally_optimal: bool,
    pub reference: ReferenceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub replication: usize,
    pub checkpoints: Vec<CheckpointRecord>,
    pub final_record: FinalRecord,
}

const NAN_RISK: RiskTriple = RiskTriple {
    var: f64::NAN,
    cvar: f64::NAN,
    mean: f64::NAN,
};

/// Runs replication `rep` of the experiment from scratch.
pub fn run_replication(exp: &Experiment, rep: usize) -> Result<MetricsSeries, HarnessError> {
    let model = &exp.model;
    let cfg = &exp.learner;
    let objective = exp.objective();
    let mut rng = exp.rng(rep);
    let mut state = LearnerState::new(model, cfg, exp.config.initial_state)?;
    let mut cache: HashMap<Vec<usize>, Option<RiskTriple>> = HashMap::new();
    let mut evaluate = |policy: &DeterministicPolicy| -> Result<Option<RiskTriple>, HarnessError> {
        if let Some(r) = cache.get(policy.actions()) {
            return Ok(*r);
        }
        let r = match evaluate_deterministic(model, policy, cfg.phi, 0.0) {
            Ok(e) => Some(e.risk),
            Err(OracleError::Mdp(MdpError::Reducible { .. })) => None,
            Err(e) => return Err(e.into()),
        };
        cache.insert(policy.actions().to_vec(), r);
        Ok(r)
    };
    let opt_score = exp.optimum.as_ref().map(|(_, e)| objective.score(&e.risk));
    let gap_of = |risk: &RiskTriple| -> Result<f64, HarnessError> {
        match opt_score {
            Some(opt) if risk.cvar.is_finite() => compute_gap(objective.score(risk), opt).map(|g| g.max(0.0)),
            _ => Ok(f64::NAN),
        }
    };

    let mut records = Vec::with_capacity(exp.checkpoints.len());
    let mut snapshots = Vec::with_capacity(exp.checkpoints.len());
    for &epoch in &exp.checkpoints {
        state.run(model, cfg, epoch - state.epoch(), &mut rng)?;
        let greedy = state.policy().greedy();
        let risk = evaluate(&greedy)?.unwrap_or(NAN_RISK);
        records.push(CheckpointRecord {
            epoch,
            running_cvar: state.running_cvar_estimate(model, cfg),
            gap: gap_of(&risk)?,
            oracle: risk,
            policy_distance: f64::NAN,
            v: state.v(),
            max_abs_q: state.max_abs_q(),
            greedy: greedy.actions().to_vec(),
        });
        snapshots.push(state.policy().clone());
    }

    let greedy = state.policy().greedy();
    let risk = evaluate(&greedy)?;
    let locally_optimal = match risk {
        Some(_) => {
            check_local_optimality(model, &greedy, cfg.phi, objective, exp.config.local_tol, cfg.reference_state)?
                .locally_optimal
        }
        None => false,
    };
    let risk = risk.unwrap_or(NAN_RISK);
    // policies differing only on transient states share the optimum's value
    let reference = match (opt_score, locally_optimal) {
        (Some(opt), true) if (objective.score(&risk) - opt).abs() <= 1e-9 * opt.abs().max(1.0) => {
            ReferenceKind::OracleOptimum
        }
        (_, true) => ReferenceKind::LocalOptimum,
        _ => ReferenceKind::OwnFinalGreedy,
    };
    let d_ref = RandomizedPolicy::from_deterministic(model, &greedy);
    for (rec, snap) in records.iter_mut().zip(&snapshots) {
        rec.policy_distance = snap.distance(&d_ref);
    }
    Ok(MetricsSeries {
        replication: rep,
        checkpoints: records,
        final_record: FinalRecord {
            greedy: greedy.actions().to_vec(),
            objective: objective.score(&risk),
            gap: gap_of(&risk)?,
            risk,
            locally_optimal,
            reference,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    /// Mean and standard error of the finite values.
    pub fn of(values: impl IntoIterator<Item = f64>) -> MeanSe {
        let xs: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        let n = xs.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanSe { mean, se, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumSummary {
    pub policy: Vec<usize>,
    pub var: f64,
    pub cvar: f64,
    pub mean: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub config: ExperimentConfig,
    pub replications: usize,
    pub succeeded: usize,
    pub failures: Vec<ReplicationFailure>,
    pub optimum: Option<OptimumSummary>,
    pub var: MeanSe,
    pub cvar: MeanSe,
    pub mean: MeanSe,
    pub objective: MeanSe,
    pub gap: MeanSe,
    pub locally_optimal_count: usize,
    /// Slope of the replication-averaged policy distance over the last two
    /// decades of epochs, when there are enough checkpoints.
    pub distance_rate: Option<f64>,
    pub finals: Vec<FinalRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub summary: Summary,
    pub series: Vec<MetricsSeries>,
}

/// Runs every replication on a pool of `threads` workers (all cores when
/// `None`) and aggregates the successes.
pub fn run_experiment(exp: &Experiment, threads: Option<usize>) -> Result<ExperimentReport, HarnessError> {
    let reps = exp.config.replications;
    let work = || -> Vec<Result<MetricsSeries, HarnessError>> {
        (0..reps).into_par_iter().map(|i| run_replication(exp, i)).collect()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut series = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => series.push(s),
            Err(e) => failures.push(ReplicationFailure {
                replication: i,
                error: e.to_string(),
            }),
        }
    }
    if series.is_empty() {
        return Err(HarnessError::AllReplicationsFailed);
    }
    Ok(ExperimentReport {
        summary: summarize(exp, &series, failures),
        series,
    })
}

fn summarize(exp: &Experiment, series: &[MetricsSeries], failures: Vec<ReplicationFailure>) -> Summary {
    let finals: Vec<FinalRecord> = series.iter().map(|s| s.final_record.clone()).collect();
    let total = exp.config.total_epochs() as f64;
    let mean_distance: Vec<(f64, f64)> = series_mean(series)
        .iter()
        .map(|row| (row.epoch as f64, row.policy_distance))
        .collect();
    Summary {
        algorithm: exp.config.algorithm.name().to_string(),
        config: exp.config.clone(),
        replications: exp.config.replications,
        succeeded: series.len(),
        failures,
        optimum: exp.optimum.as_ref().map(|(p, e)| OptimumSummary {
            policy: p.actions().to_vec(),
            var: e.risk.var,
            cvar: e.risk.cvar,
            mean: e.risk.mean,
            objective: exp.objective().score(&e.risk),
        }),
        var: MeanSe::of(finals.iter().map(|f| f.risk.var)),
        cvar: MeanSe::of(finals.iter().map(|f| f.risk.cvar)),
        mean: MeanSe::of(finals.iter().map(|f| f.risk.mean)),
        objective: MeanSe::of(finals.iter().map(|f| f.objective)),
        gap: MeanSe::of(finals.iter().map(|f| f.gap)),
        locally_optimal_count: finals.iter().filter(|f| f.locally_optimal).count(),
        distance_rate: fit_rate(&mean_distance, (total / 100.0, total)).ok(),
        finals,
    }
}
