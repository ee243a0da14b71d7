//! Exact evaluation of stationary policies on finite models.
//!
//! The long-run VaR and CVaR of a policy equal those of its steady-state
//! cost, a mixture of the per-pair cost distributions weighted by the
//! stationary state-action law. Everything here is computed from that
//! mixture and from linear solves; nothing is simulated.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{stationary_distribution, DeterministicPolicy, MdpError, MdpModel, RandomizedPolicy, StateActionDist};
use crate::risk::{mixture_risk, tilde_c_exact, RiskError, RiskTriple};

/// Hard cap on exhaustive enumeration.
pub const ENUMERATION_BUDGET: u128 = 10_000_000;
/// Default tolerance on Q-value gaps when certifying local optimality.
pub const DEFAULT_LOCAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("{count} deterministic policies exceed the enumeration budget")]
    Budget { count: u128 },
    #[error("no enumerated policy induces a single recurrent class")]
    NoUnichainPolicy,
    #[error("Poisson system is singular")]
    Singular,
    #[error("Poisson residual {0:e} exceeds tolerance")]
    Residual(f64),
}

/// What a policy is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// `CVaR + lambda * mean` of the steady-state cost.
    MeanCvar { lambda: f64 },
    /// Long-run mean cost.
    Mean,
}

impl Objective {
    pub const CVAR: Objective = Objective::MeanCvar { lambda: 0.0 };

    pub fn score(&self, risk: &RiskTriple) -> f64 {
        match self {
            Objective::MeanCvar { lambda } => risk.cvar + lambda * risk.mean,
            Objective::Mean => risk.mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub policy: RandomizedPolicy,
    pub occupancy: StateActionDist,
    pub risk: RiskTriple,
    /// `cvar + lambda * mean`.
    pub mean_cvar_objective: f64,
}

/// Steady-state VaR, CVaR and mean of `policy`, plus `cvar + lambda * mean`.
pub fn evaluate_policy(
    model: &MdpModel,
    policy: &RandomizedPolicy,
    phi: f64,
    lambda: f64,
) -> Result<PolicyEvaluation, OracleError> {
    let occupancy = stationary_distribution(model, policy)?;
    let risk = mixture_risk(&model.cost_mixture(&occupancy), phi)?;
    Ok(PolicyEvaluation {
        policy: policy.clone(),
        occupancy,
        mean_cvar_objective: risk.cvar + lambda * risk.mean,
        risk,
    })
}

pub fn evaluate_deterministic(
    model: &MdpModel,
    policy: &DeterministicPolicy,
    phi: f64,
    lambda: f64,
) -> Result<PolicyEvaluation, OracleError> {
    evaluate_policy(model, &RandomizedPolicy::from_deterministic(model, policy), phi, lambda)
}

/// Number of deterministic policies, `prod_s |feasible(s)|`.
pub fn policy_count(model: &MdpModel) -> u128 {
    (0..model.n_states())
        .map(|s| model.feasible_actions(s).len() as u128)
        .product()
}

/// The `index`-th deterministic policy in lexicographic order (state 0 most
/// significant).
pub fn policy_from_index(model: &MdpModel, mut index: u128) -> DeterministicPolicy {
    let mut actions = vec![0; model.n_states()];
    for s in (0..model.n_states()).rev() {
        let acts = model.feasible_actions(s);
        let k = acts.len() as u128;
        actions[s] = acts[(index % k) as usize];
        index /= k;
    }
    DeterministicPolicy::new(model, actions).expect("enumerated actions are feasible")
}

/// Every deterministic policy exactly once, in lexicographic order.
pub fn enumerate_deterministic_policies(model: &MdpModel) -> impl Iterator<Item = DeterministicPolicy> + '_ {
    (0..policy_count(model)).map(move |i| policy_from_index(model, i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalOptimum {
    pub policy: DeterministicPolicy,
    pub evaluation: PolicyEvaluation,
    pub evaluated: usize,
    /// Policies skipped because their chain has several recurrent classes.
    pub skipped_reducible: usize,
}

/// Exhaustive minimizer of `cvar + lambda * mean` over deterministic
/// policies; ties go to the lexicographically first policy.
pub fn global_optimum(model: &MdpModel, phi: f64, lambda: f64) -> Result<GlobalOptimum, OracleError> {
    global_optimum_by(model, phi, Objective::MeanCvar { lambda })
}

pub fn global_optimum_by(model: &MdpModel, phi: f64, objective: Objective) -> Result<GlobalOptimum, OracleError> {
    let count = policy_count(model);
    if count > ENUMERATION_BUDGET {
        return Err(OracleError::Budget { count });
    }
    let lambda = match objective {
        Objective::MeanCvar { lambda } => lambda,
        Objective::Mean => 0.0,
    };
    type Scored = Option<(f64, u128, PolicyEvaluation)>;
    let results: Vec<Result<Scored, OracleError>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let policy = policy_from_index(model, i);
            match evaluate_deterministic(model, &policy, phi, lambda) {
                Ok(eval) => Ok(Some((objective.score(&eval.risk), i, eval))),
                Err(OracleError::Mdp(MdpError::Reducible { .. })) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut best: Scored = None;
    let mut skipped = 0;
    for r in results {
        match r? {
            None => skipped += 1,
            Some(cand) => {
                if best.as_ref().is_none_or(|b| cand.0 < b.0) {
                    best = Some(cand);
                }
            }
        }
    }
    let (_, index, evaluation) = best.ok_or(OracleError::NoUnichainPolicy)?;
    Ok(GlobalOptimum {
        policy: policy_from_index(model, index),
        evaluation,
        evaluated: count as usize - skipped,
        skipped_reducible: skipped,
    })
}

/// Relative values `V` with `V(reference) = 0` and the gain `g` of the
/// Poisson equation `V(s) + g = sum_a d(s, a) [r(s, a) + sum_s' p(s'|s, a) V(s')]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub values: Vec<f64>,
    pub gain: f64,
    pub reference_state: usize,
    /// Steady-state VaR used inside the per-stage cost.
    pub var: f64,
}

/// Per-stage cost under `objective`: `tilde_c(var, s, a) + lambda mean(s, a)`,
/// or the plain mean.
fn stage_cost(model: &MdpModel, s: usize, a: usize, var: f64, phi: f64, objective: Objective) -> f64 {
    let d = model.cost(s, a);
    match objective {
        Objective::MeanCvar { lambda } => tilde_c_exact(d, var, phi) + lambda * d.mean(),
        Objective::Mean => d.mean(),
    }
}

/// Solves the evaluation equation of `policy` with per-stage cost
/// `tilde_c(VaR^d, s, a) + lambda E[C(s, a)]` (or the mean cost for
/// [`Objective::Mean`]). The gain equals the policy's objective value.
pub fn relative_value_function(
    model: &MdpModel,
    policy: &RandomizedPolicy,
    phi: f64,
    objective: Objective,
    reference_state: usize,
) -> Result<ValueFunction, OracleError> {
    let eval = evaluate_policy(model, policy, phi, 0.0)?;
    let var = eval.risk.var;
    let n = model.n_states();
    if reference_state >= n {
        return Err(MdpError::StateOutOfRange { state: reference_state, n_states: n }.into());
    }
    let p = model.induced_chain(policy);
    let r: Vec<f64> = (0..n)
        .map(|s| {
            model
                .feasible_actions(s)
                .iter()
                .map(|&a| {
                    let w = policy.prob(s, a);
                    if w == 0.0 { 0.0 } else { w * stage_cost(model, s, a, var, phi, objective) }
                })
                .sum()
        })
        .collect();

    // unknowns (V_0..V_{n-1}, g): (I - P) V + g 1 = r, V(ref) = 0
    let mut a = DMatrix::zeros(n + 1, n + 1);
    let mut b = DVector::zeros(n + 1);
    for s in 0..n {
        for t in 0..n {
            a[(s, t)] = if s == t { 1.0 } else { 0.0 } - p[(s, t)];
        }
        a[(s, n)] = 1.0;
        b[s] = r[s];
    }
    a[(n, reference_state)] = 1.0;
    let x = a.clone().lu().solve(&b).ok_or(OracleError::Singular)?;
    let residual = (&a * &x - &b).amax();
    let scale = r.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if residual > 1e-10 * scale {
        return Err(OracleError::Residual(residual));
    }
    let mut values: Vec<f64> = x.iter().take(n).copied().collect();
    values[reference_state] = 0.0;
    Ok(ValueFunction {
        values,
        gain: x[n],
        reference_state,
        var,
    })
}

/// `Q^d(s, a) = r(s, a) + sum_s' p(s'|s, a) V^d(s')` for every feasible pair;
/// `+inf` elsewhere. Row-major `[s][a]`.
pub fn q_function(
    model: &MdpModel,
    policy: &RandomizedPolicy,
    phi: f64,
    objective: Objective,
    reference_state: usize,
) -> Result<(ValueFunction, Vec<Vec<f64>>), OracleError> {
    let vf = relative_value_function(model, policy, phi, objective, reference_state)?;
    let q = (0..model.n_states())
        .map(|s| {
            (0..model.n_actions())
                .map(|a| {
                    if !model.is_feasible(s, a) {
                        return f64::INFINITY;
                    }
                    let future: f64 = model.kernel_row(s, a).iter().zip(&vf.values).map(|(p, v)| p * v).sum();
                    stage_cost(model, s, a, vf.var, phi, objective) + future
                })
                .collect()
        })
        .collect();
    Ok((vf, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCheck {
    pub state: usize,
    pub chosen: usize,
    pub best: usize,
    /// `Q(s, chosen) - min_a Q(s, a)`, nonnegative.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOptimalityReport {
    pub locally_optimal: bool,
    pub tol: f64,
    pub objective_value: f64,
    pub states: Vec<StateCheck>,
}

impl LocalOptimalityReport {
    pub fn failing_states(&self) -> Vec<usize> {
        self.states.iter().filter(|c| c.gap > self.tol).map(|c| c.state).collect()
    }
}

/// Certifies that every state's action attains `min_a Q^d(s, a)` within
/// `tol`, where `Q^d` is built from the candidate's own steady-state VaR and
/// relative values.
pub fn check_local_optimality(
    model: &MdpModel,
    policy: &DeterministicPolicy,
    phi: f64,
    objective: Objective,
    tol: f64,
    reference_state: usize,
) -> Result<LocalOptimalityReport, OracleError> {
    let d = RandomizedPolicy::from_deterministic(model, policy);
    let (vf, q) = q_function(model, &d, phi, objective, reference_state)?;
    let states: Vec<StateCheck> = q
        .iter()
        .enumerate()
        .map(|(s, row)| {
            let chosen = policy.action(s);
            let mut best = chosen;
            for &a in model.feasible_actions(s) {
                if row[a] < row[best] {
                    best = a;
                }
            }
            StateCheck {
                state: s,
                chosen,
                best,
                gap: (row[chosen] - row[best]).max(0.0),
            }
        })
        .collect();
    Ok(LocalOptimalityReport {
        locally_optimal: states.iter().all(|c| c.gap <= tol),
        tol,
        objective_value: vf.gain,
        states,
    })
}

/// One line of the oracle's JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: Vec<usize>,
    pub var: f64,
    pub cvar: f64,
    pub mean: f64,
    pub objective: f64,
    pub locally_optimal: bool,
}

pub fn policy_report(
    model: &MdpModel,
    policy: &DeterministicPolicy,
    phi: f64,
    lambda: f64,
    reference_state: usize,
) -> Result<PolicyReport, OracleError> {
    let eval = evaluate_deterministic(model, policy, phi, lambda)?;
    let cert = check_local_optimality(
        model,
        policy,
        phi,
        Objective::MeanCvar { lambda },
        DEFAULT_LOCAL_TOL,
        reference_state,
    )?;
    Ok(PolicyReport {
        policy: policy.actions().to_vec(),
        var: eval.risk.var,
        cvar: eval.risk.cvar,
        mean: eval.risk.mean,
        objective: eval.mean_cvar_objective,
        locally_optimal: cert.locally_optimal,
    })
}
