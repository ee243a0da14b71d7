//! Finite MDPs with random per-(state, action) costs.
//!
//! Indices are dense: states `0..n_states`, actions `0..n_actions`, and every
//! per-(state, action) table is stored row-major at `s * n_actions + a`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::{CostDistribution, RiskError};

const KERNEL_SUM_TOL: f64 = 1e-12;
const POLICY_SUM_TOL: f64 = 1e-12;
const OCCUPANCY_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("state {state} out of range (model has {n_states} states)")]
    StateOutOfRange { state: usize, n_states: usize },
    #[error("action {action} is not feasible in state {state}")]
    InfeasiblePair { state: usize, action: usize },
    #[error("invalid model: {}", display_violations(.0))]
    InvalidModel(Vec<Violation>),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("induced chain has {classes} recurrent classes; stationary law is not unique")]
    Reducible { classes: usize },
    #[error("stationary system is singular")]
    Singular,
    #[error("stationary residual {0:e} exceeds tolerance")]
    Residual(f64),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn display_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A broken [`MdpModel`] invariant, as reported by [`validate_model`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    NoFeasibleAction { state: usize },
    KernelRowSum { state: usize, action: usize, sum: f64 },
    NegativeProbability { state: usize, action: usize, next: usize },
    MissingCost { state: usize, action: usize },
    InvalidCost { state: usize, action: usize, error: RiskError },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "shape: {msg}"),
            Violation::NoFeasibleAction { state } => write!(f, "state {state} has no feasible action"),
            Violation::KernelRowSum { state, action, sum } => {
                write!(f, "kernel row ({state}, {action}) sums to {sum}")
            }
            Violation::NegativeProbability { state, action, next } => {
                write!(f, "kernel entry ({state}, {action}, {next}) is negative")
            }
            Violation::MissingCost { state, action } => {
                write!(f, "feasible pair ({state}, {action}) has no cost distribution")
            }
            Violation::InvalidCost { state, action, error } => {
                write!(f, "cost at ({state}, {action}): {error}")
            }
        }
    }
}

/// Serialized form of an [`MdpModel`].
///
/// `feasible` is a 0/1 matrix `[s][a]`, `kernel` is indexed `[s][a][s']`
/// and `costs` is `[s][a]` with `null` for infeasible pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub feasible: Vec<Vec<u8>>,
    pub kernel: Vec<Vec<Vec<f64>>>,
    pub costs: Vec<Vec<Option<CostDistribution>>>,
}

/// Lists every invariant the document breaks. Empty means it can be turned
/// into an [`MdpModel`].
pub fn validate_model(doc: &ModelDocument) -> Vec<Violation> {
    let mut out = Vec::new();
    let (ns, na) = (doc.n_states, doc.n_actions);
    if ns == 0 || na == 0 {
        out.push(Violation::Shape("need at least one state and one action".into()));
        return out;
    }
    if doc.feasible.len() != ns || doc.feasible.iter().any(|r| r.len() != na) {
        out.push(Violation::Shape(format!("feasible must be {ns}x{na}")));
        return out;
    }
    if doc.kernel.len() != ns
        || doc
            .kernel
            .iter()
            .any(|r| r.len() != na || r.iter().any(|p| p.len() != ns))
    {
        out.push(Violation::Shape(format!("kernel must be {ns}x{na}x{ns}")));
        return out;
    }
    if doc.costs.len() != ns || doc.costs.iter().any(|r| r.len() != na) {
        out.push(Violation::Shape(format!("costs must be {ns}x{na}")));
        return out;
    }
    for s in 0..ns {
        if doc.feasible[s].iter().all(|f| *f == 0) {
            out.push(Violation::NoFeasibleAction { state: s });
        }
        for a in 0..na {
            if doc.feasible[s][a] == 0 {
                continue;
            }
            let row = &doc.kernel[s][a];
            for (next, p) in row.iter().enumerate() {
                if !(p.is_finite() && *p >= 0.0) {
                    out.push(Violation::NegativeProbability { state: s, action: a, next });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > KERNEL_SUM_TOL {
                out.push(Violation::KernelRowSum { state: s, action: a, sum });
            }
            match &doc.costs[s][a] {
                None => out.push(Violation::MissingCost { state: s, action: a }),
                Some(d) => {
                    if let Err(error) = d.validate() {
                        out.push(Violation::InvalidCost { state: s, action: a, error });
                    }
                }
            }
        }
    }
    out
}

/// Pairs whose cost distribution is not absolutely continuous. The
/// convergence theory assumes continuous costs; discrete ones still run.
pub fn discrete_cost_pairs(model: &MdpModel) -> Vec<(usize, usize)> {
    model
        .feasible_pairs()
        .filter(|&(s, a)| model.cost(s, a).is_discrete())
        .collect()
}

/// Finite MDP with per-state feasible action sets and random costs.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    n_states: usize,
    n_actions: usize,
    feasible: Vec<bool>,
    feasible_actions: Vec<Vec<usize>>,
    kernel: Vec<f64>,
    costs: Vec<Option<CostDistribution>>,
}

impl MdpModel {
    pub fn from_document(doc: ModelDocument) -> Result<Self, MdpError> {
        let violations = validate_model(&doc);
        if !violations.is_empty() {
            return Err(MdpError::InvalidModel(violations));
        }
        let ModelDocument {
            n_states,
            n_actions,
            feasible,
            kernel,
            costs,
        } = doc;
        let feasible: Vec<bool> = feasible.into_iter().flatten().map(|f| f != 0).collect();
        let feasible_actions = (0..n_states)
            .map(|s| (0..n_actions).filter(|&a| feasible[s * n_actions + a]).collect())
            .collect();
        let mut costs: Vec<Option<CostDistribution>> = costs.into_iter().flatten().collect();
        let mut kernel: Vec<f64> = kernel.into_iter().flatten().flatten().collect();
        for i in 0..n_states * n_actions {
            if !feasible[i] {
                costs[i] = None;
                kernel[i * n_states..(i + 1) * n_states].fill(0.0);
            }
        }
        Ok(MdpModel {
            n_states,
            n_actions,
            feasible,
            feasible_actions,
            kernel,
            costs,
        })
    }

    pub fn to_document(&self) -> ModelDocument {
        let (ns, na) = (self.n_states, self.n_actions);
        ModelDocument {
            n_states: ns,
            n_actions: na,
            feasible: (0..ns)
                .map(|s| (0..na).map(|a| u8::from(self.is_feasible(s, a))).collect())
                .collect(),
            kernel: (0..ns)
                .map(|s| (0..na).map(|a| self.kernel_row(s, a).to_vec()).collect())
                .collect(),
            costs: (0..ns)
                .map(|s| (0..na).map(|a| self.costs[s * na + a].clone()).collect())
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("model document serializes")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn is_feasible(&self, s: usize, a: usize) -> bool {
        self.feasible[s * self.n_actions + a]
    }

    /// Feasibility mask of state `s`.
    pub fn feasible_mask(&self, s: usize) -> &[bool] {
        &self.feasible[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Feasible actions of state `s` in increasing order.
    pub fn feasible_actions(&self, s: usize) -> &[usize] {
        &self.feasible_actions[s]
    }

    pub fn feasible_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_states).flat_map(move |s| self.feasible_actions[s].iter().map(move |&a| (s, a)))
    }

    /// `p(. | s, a)`; all zeros for infeasible pairs.
    #[inline]
    pub fn kernel_row(&self, s: usize, a: usize) -> &[f64] {
        let i = s * self.n_actions + a;
        &self.kernel[i * self.n_states..(i + 1) * self.n_states]
    }

    /// Cost distribution of a feasible pair.
    ///
    /// Panics on infeasible pairs.
    #[inline]
    pub fn cost(&self, s: usize, a: usize) -> &CostDistribution {
        self.costs[s * self.n_actions + a]
            .as_ref()
            .expect("feasible pairs carry a cost distribution")
    }

    fn check_state(&self, s: usize) -> Result<(), MdpError> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(MdpError::StateOutOfRange {
                state: s,
                n_states: self.n_states,
            })
        }
    }

    fn check_pair(&self, s: usize, a: usize) -> Result<(), MdpError> {
        self.check_state(s)?;
        if a < self.n_actions && self.is_feasible(s, a) {
            Ok(())
        } else {
            Err(MdpError::InfeasiblePair { state: s, action: a })
        }
    }

    /// Weighted components `(pi(s, a), F(.; s, a))` of the steady-state cost,
    /// skipping zero-weight pairs.
    pub fn cost_mixture<'a>(&'a self, occupancy: &StateActionDist) -> Vec<(f64, &'a CostDistribution)> {
        self.feasible_pairs()
            .filter_map(|(s, a)| {
                let w = occupancy.get(s, a);
                (w > 0.0).then(|| (w, self.cost(s, a)))
            })
            .collect()
    }

    /// State-to-state matrix `P_d(s' | s) = sum_a d(s, a) p(s' | s, a)`.
    pub fn induced_chain(&self, policy: &RandomizedPolicy) -> DMatrix<f64> {
        let n = self.n_states;
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            for &a in self.feasible_actions(s) {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (next, q) in self.kernel_row(s, a).iter().enumerate() {
                    p[(s, next)] += w * q;
                }
            }
        }
        p
    }
}

/// Stationary randomized policy `d(s) in Delta(A)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizedPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl RandomizedPolicy {
    /// Checks every row against the model's feasibility mask.
    pub fn new(model: &MdpModel, rows: Vec<Vec<f64>>) -> Result<Self, MdpError> {
        if rows.len() != model.n_states() || rows.iter().any(|r| r.len() != model.n_actions()) {
            return Err(MdpError::InvalidPolicy(format!(
                "expected {}x{} probabilities",
                model.n_states(),
                model.n_actions()
            )));
        }
        let policy = RandomizedPolicy {
            n_actions: model.n_actions(),
            probs: rows.into_iter().flatten().collect(),
        };
        policy.check(model)?;
        Ok(policy)
    }

    pub fn uniform(model: &MdpModel) -> Self {
        let na = model.n_actions();
        let mut probs = vec![0.0; model.n_states() * na];
        for s in 0..model.n_states() {
            let acts = model.feasible_actions(s);
            for &a in acts {
                probs[s * na + a] = 1.0 / acts.len() as f64;
            }
        }
        RandomizedPolicy { n_actions: na, probs }
    }

    /// One-hot embedding of a deterministic policy.
    pub fn from_deterministic(model: &MdpModel, policy: &DeterministicPolicy) -> Self {
        let na = model.n_actions();
        let mut probs = vec![0.0; model.n_states() * na];
        for (s, &a) in policy.actions().iter().enumerate() {
            probs[s * na + a] = 1.0;
        }
        RandomizedPolicy { n_actions: na, probs }
    }

    pub fn check(&self, model: &MdpModel) -> Result<(), MdpError> {
        if self.n_actions != model.n_actions() || self.probs.len() != model.n_states() * self.n_actions {
            return Err(MdpError::InvalidPolicy("shape does not match the model".into()));
        }
        for s in 0..model.n_states() {
            let row = self.row(s);
            let mut sum = 0.0;
            for (a, &p) in row.iter().enumerate() {
                if !(p.is_finite() && p >= 0.0) {
                    return Err(MdpError::InvalidPolicy(format!("d({s}, {a}) = {p}")));
                }
                if p > 0.0 && !model.is_feasible(s, a) {
                    return Err(MdpError::InvalidPolicy(format!(
                        "infeasible action {a} has probability {p} in state {s}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > POLICY_SUM_TOL {
                return Err(MdpError::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.n_actions)
    }

    /// `argmax_a d(s, a)` per state, ties to the smallest index.
    pub fn greedy(&self) -> DeterministicPolicy {
        let actions = self
            .rows()
            .map(|row| {
                let mut best = 0;
                for (a, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect();
        DeterministicPolicy { action: actions }
    }

    /// Sum over states of the Euclidean distance between `d(s)` and
    /// `other(s)`.
    pub fn distance(&self, other: &RandomizedPolicy) -> f64 {
        self.rows()
            .zip(other.rows())
            .map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .sum()
    }
}

/// One feasible action per state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    action: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(model: &MdpModel, actions: Vec<usize>) -> Result<Self, MdpError> {
        if actions.len() != model.n_states() {
            return Err(MdpError::InvalidPolicy(format!(
                "expected {} actions, got {}",
                model.n_states(),
                actions.len()
            )));
        }
        for (s, &a) in actions.iter().enumerate() {
            model.check_pair(s, a)?;
        }
        Ok(DeterministicPolicy { action: actions })
    }

    pub fn actions(&self) -> &[usize] {
        &self.action
    }

    pub fn action(&self, s: usize) -> usize {
        self.action[s]
    }
}

/// Joint state-action distribution `pi(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateActionDist {
    n_actions: usize,
    weights: Vec<f64>,
}

impl StateActionDist {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.weights[s * self.n_actions + a]
    }

    /// State marginal `mu(s) = sum_a pi(s, a)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.weights.chunks(self.n_actions).map(|r| r.iter().sum()).collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Draws `a ~ d(s)`. Zero-probability (in particular infeasible) actions are
/// never returned.
pub fn sample_action<R: Rng + ?Sized>(
    policy: &RandomizedPolicy,
    s: usize,
    rng: &mut R,
) -> Result<usize, MdpError> {
    if s >= policy.n_states() {
        return Err(MdpError::StateOutOfRange {
            state: s,
            n_states: policy.n_states(),
        });
    }
    Ok(sample_index(policy.row(s), rng))
}

#[inline]
pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if w > 0.0 && u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Draws `(s', C(s, a))` with the next state and the cost sampled
/// independently.
pub fn sample_transition<R: Rng + ?Sized>(
    model: &MdpModel,
    s: usize,
    a: usize,
    rng: &mut R,
) -> Result<(usize, f64), MdpError> {
    model.check_pair(s, a)?;
    let next = sample_index(model.kernel_row(s, a), rng);
    let cost = model.cost(s, a).sample(rng);
    Ok((next, cost))
}

/// Number of closed communicating classes of the chain's support graph.
pub fn recurrent_classes(p: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = p.nrows();
    let mut reach = vec![vec![false; n]; n];
    for (start, row) in reach.iter_mut().enumerate() {
        let mut stack = vec![start];
        row[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if p[(i, j)] > 0.0 && !row[j] {
                    row[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    // i is recurrent iff every state it reaches reaches it back
    let mut assigned = vec![false; n];
    let mut classes = Vec::new();
    for i in 0..n {
        if assigned[i] || !(0..n).all(|j| !reach[i][j] || reach[j][i]) {
            continue;
        }
        let class: Vec<usize> = (0..n).filter(|&j| reach[i][j]).collect();
        for &j in &class {
            assigned[j] = true;
        }
        classes.push(class);
    }
    classes
}

/// Unique stationary law of a unichain transition matrix, by a direct solve
/// of `mu^T (P - I) = 0` with one balance equation replaced by `sum mu = 1`.
pub fn stationary_state_law(p: &DMatrix<f64>) -> Result<Vec<f64>, MdpError> {
    let n = p.nrows();
    let classes = recurrent_classes(p).len();
    if classes != 1 {
        return Err(MdpError::Reducible { classes });
    }
    let mut a = p.transpose() - DMatrix::identity(n, n);
    a.row_mut(n - 1).fill(1.0);
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let mu = a.lu().solve(&b).ok_or(MdpError::Singular)?;
    let mut mu: Vec<f64> = mu.iter().map(|x| if x.abs() < 1e-15 { 0.0 } else { *x }).collect();
    let total: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|x| *x /= total);

    let residual = (0..n)
        .map(|j| ((0..n).map(|i| mu[i] * p[(i, j)]).sum::<f64>() - mu[j]).abs())
        .fold(0.0, f64::max);
    if residual >= 1e-10 || mu.iter().any(|x| *x < -1e-12) {
        return Err(MdpError::Residual(residual));
    }
    Ok(mu.into_iter().map(|x| x.max(0.0)).collect())
}

/// Steady-state distribution `pi(s, a) = mu(s) d(s, a)` of the chain induced
/// by `policy`.
///
/// Fails with [`MdpError::Reducible`] when the chain has more than one
/// recurrent class. Transient states are fine and get zero mass.
pub fn stationary_distribution(
    model: &MdpModel,
    policy: &RandomizedPolicy,
) -> Result<StateActionDist, MdpError> {
    policy.check(model)?;
    let mu = stationary_state_law(&model.induced_chain(policy))?;
    let na = model.n_actions();
    let mut weights = vec![0.0; model.n_states() * na];
    for (s, m) in mu.iter().enumerate() {
        for a in 0..na {
            weights[s * na + a] = m * policy.prob(s, a);
        }
    }
    let dist = StateActionDist { n_actions: na, weights };
    debug_assert!((dist.total() - 1.0).abs() < OCCUPANCY_SUM_TOL);
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_machine_replacement, CostFamily, REPLACE_ROW};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state_flip() -> MdpModel {
        MdpModel::from_document(ModelDocument {
            n_states: 2,
            n_actions: 1,
            feasible: vec![vec![1], vec![1]],
            kernel: vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
            costs: vec![
                vec![Some(CostDistribution::constant(1.0))],
                vec![Some(CostDistribution::constant(2.0))],
            ],
        })
        .unwrap()
    }

    fn machine() -> MdpModel {
        build_machine_replacement(CostFamily::Gaussian)
    }

    #[test]
    fn degenerate_and_masked_sampling() {
        let m = machine();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = RandomizedPolicy::new(&m, vec![vec![1.0, 0.0]; 5].into_iter().chain([vec![0.0, 1.0]]).collect()).unwrap();
        for _ in 0..100 {
            assert_eq!(sample_action(&d, 0, &mut rng).unwrap(), 0);
            assert_eq!(sample_action(&d, 5, &mut rng).unwrap(), 1);
        }
        assert!(matches!(sample_action(&d, 6, &mut rng), Err(MdpError::StateOutOfRange { .. })));
        let w = [0.0, 1.0, 0.0, 0.0];
        for _ in 0..100 {
            assert_eq!(sample_index(&w, &mut rng), 1);
        }
    }

    #[test]
    fn fair_coin_frequency() {
        let m = machine();
        let d = RandomizedPolicy::uniform(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let zeros = (0..n).filter(|_| sample_action(&d, 2, &mut rng).unwrap() == 0).count();
        assert!((zeros as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn replace_transition_frequencies() {
        let m = machine();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 6];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_transition(&m, 1, 1, &mut rng).unwrap().0] += 1;
        }
        let published = [0.496, 0.254, 0.131, 0.067, 0.034, 0.018];
        for (c, p) in counts.iter().zip(published) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
        assert!(matches!(sample_transition(&m, 5, 0, &mut rng), Err(MdpError::InfeasiblePair { .. })));
    }

    #[test]
    fn deterministic_kernel_and_gaussian_cost() {
        let m = two_state_flip();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(sample_transition(&m, 0, 0, &mut rng).unwrap().0, 1);
        }
        let g = CostDistribution::gaussian(15.0, 0.5).unwrap();
        let mean = (0..100_000).map(|_| g.sample(&mut rng)).sum::<f64>() / 100_000.0;
        assert!((mean - 15.0).abs() < 0.02);
    }

    #[test]
    fn always_replace_occupancy_is_common_row() {
        let m = machine();
        let d = RandomizedPolicy::new(&m, vec![vec![0.0, 1.0]; 6]).unwrap();
        let pi = stationary_distribution(&m, &d).unwrap();
        for (got, want) in pi.state_marginal().iter().zip(REPLACE_ROW) {
            assert_abs_diff_eq!(*got, want / REPLACE_ROW.iter().sum::<f64>(), epsilon = 1e-12);
        }
    }

    #[test]
    fn flip_chain_is_uniform() {
        let m = two_state_flip();
        let pi = stationary_distribution(&m, &RandomizedPolicy::uniform(&m)).unwrap();
        assert_abs_diff_eq!(pi.get(0, 0), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(pi.get(1, 0), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn reducible_chain_is_an_error() {
        let m = MdpModel::from_document(ModelDocument {
            n_states: 2,
            n_actions: 1,
            feasible: vec![vec![1], vec![1]],
            kernel: vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            costs: vec![vec![Some(CostDistribution::constant(0.0))]; 2],
        })
        .unwrap();
        let err = stationary_distribution(&m, &RandomizedPolicy::uniform(&m)).unwrap_err();
        assert!(matches!(err, MdpError::Reducible { classes: 2 }));
    }

    #[test]
    fn transient_states_get_zero_mass() {
        // 0 -> 1 <-> 2, state 0 transient
        let m = MdpModel::from_document(ModelDocument {
            n_states: 3,
            n_actions: 1,
            feasible: vec![vec![1]; 3],
            kernel: vec![
                vec![vec![0.0, 1.0, 0.0]],
                vec![vec![0.0, 0.0, 1.0]],
                vec![vec![0.0, 0.5, 0.5]],
            ],
            costs: vec![vec![Some(CostDistribution::constant(0.0))]; 3],
        })
        .unwrap();
        let mu = stationary_distribution(&m, &RandomizedPolicy::uniform(&m)).unwrap().state_marginal();
        assert_eq!(mu[0], 0.0);
        assert_abs_diff_eq!(mu[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn relabeling_states_permutes_the_law() {
        let m = machine();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|s| {
                if s == 5 {
                    vec![0.0, 1.0]
                } else {
                    let x: f64 = rng.random_range(0.05..0.95);
                    vec![x, 1.0 - x]
                }
            })
            .collect();
        let p = m.induced_chain(&RandomizedPolicy::new(&m, rows).unwrap());
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut q = DMatrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                q[(perm[i], perm[j])] = p[(i, j)];
            }
        }
        let mu = stationary_state_law(&p).unwrap();
        let nu = stationary_state_law(&q).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(mu[i], nu[perm[i]], epsilon = 1e-12);
        }
    }

    #[test]
    fn validation_reports() {
        let good = machine().to_document();
        assert!(validate_model(&good).is_empty());

        let mut bad = good.clone();
        bad.kernel[2][0] = vec![0.0, 0.0, 0.5, 0.2, 0.1, 0.1];
        match validate_model(&bad).as_slice() {
            [Violation::KernelRowSum { state: 2, action: 0, sum }] => assert_abs_diff_eq!(*sum, 0.9, epsilon = 1e-12),
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        bad.feasible[4] = vec![0, 0];
        assert_eq!(validate_model(&bad), vec![Violation::NoFeasibleAction { state: 4 }]);

        let mut bad = good;
        bad.costs[0][1] = None;
        assert_eq!(validate_model(&bad), vec![Violation::MissingCost { state: 0, action: 1 }]);
        assert!(matches!(MdpModel::from_document(bad), Err(MdpError::InvalidModel(_))));
    }

    #[test]
    fn json_round_trip() {
        let m = machine();
        let back = MdpModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn greedy_and_distance() {
        let m = machine();
        let d = RandomizedPolicy::uniform(&m);
        assert_eq!(d.greedy().actions(), &[0, 0, 0, 0, 0, 1]);
        let one_hot = RandomizedPolicy::from_deterministic(&m, &d.greedy());
        assert_abs_diff_eq!(d.distance(&one_hot), 5.0 * 0.5f64.sqrt(), epsilon = 1e-12);
    }
}
