//! Single-trajectory long-run CVaR Q-learning.
//!
//! Every epoch runs three coupled recursions on their own timescales:
//!
//! 1. a Robbins-Monro quantile tracker for the steady-state VaR,
//!    `v <- v + alpha_n (phi - 1{C <= v})`;
//! 2. asynchronous relative Q-learning at the visited pair with the
//!    surrogate cost `v + (C - v)^+ / (1 - phi)` and the reference-state
//!    minimum subtracted;
//! 3. an incremental policy average toward the greedy action in every state,
//!    projected back onto the simplex with coordinates at least `epsilon_n`.
//!
//! The mean-CVaR variant adds `lambda * C` to the Q target. The mean
//! baseline drops the VaR tracker and uses the raw cost as its target, with
//! everything else unchanged.

mod projection;
mod schedule;

pub use projection::{argmin_smallest_index, project_to_constrained_simplex};
pub use schedule::SchedulePack;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{sample_action, sample_transition, MdpError, MdpModel, RandomizedPolicy};
use crate::risk::tilde_c_sample;
use projection::project_into;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid learner configuration: {0}")]
    Config(String),
    #[error("no feasible action")]
    EmptyFeasibleSet,
    #[error("exploration floor {eps} is too large for {k} feasible actions")]
    InfeasibleProjection { eps: f64, k: usize },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Which long-run criterion the learner optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    /// Long-run CVaR.
    Crl,
    /// Long-run CVaR plus `lambda` times the long-run mean.
    Mcrl { lambda: f64 },
    /// Long-run mean.
    Mrl,
}

impl Criterion {
    /// Weight on the mean in the objective `CVaR + lambda * mean`. `None` for
    /// the pure mean criterion.
    pub fn lambda(&self) -> Option<f64> {
        match self {
            Criterion::Crl => Some(0.0),
            Criterion::Mcrl { lambda } => Some(*lambda),
            Criterion::Mrl => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Crl => "CRL",
            Criterion::Mcrl { .. } => "M-CRL",
            Criterion::Mrl => "MRL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub phi: f64,
    pub criterion: Criterion,
    pub reference_state: usize,
    /// Epochs at the start with uniformly random actions. All three
    /// recursions still run.
    pub warmup_epochs: u64,
    pub schedules: SchedulePack,
}

impl LearnerConfig {
    pub fn validate(&self, model: &MdpModel) -> Result<(), LearnerError> {
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(LearnerError::Config(format!("phi must lie in (0, 1), got {}", self.phi)));
        }
        if let Criterion::Mcrl { lambda } = self.criterion {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(LearnerError::Config(format!("lambda must be nonnegative, got {lambda}")));
            }
        }
        if self.reference_state >= model.n_states() {
            return Err(LearnerError::Config(format!(
                "reference state {} out of range",
                self.reference_state
            )));
        }
        self.schedules.validate_for(model.n_actions())
    }
}

/// What happened in one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub state: usize,
    pub action: usize,
    pub cost: f64,
    pub next_state: usize,
    /// VaR estimate after the update.
    pub v: f64,
    pub running_cvar: f64,
}

/// `v + alpha (phi - 1{cost <= v})`.
#[inline]
pub fn var_update(v: f64, cost: f64, alpha: f64, phi: f64) -> f64 {
    let below = if cost <= v { 1.0 } else { 0.0 };
    v + alpha * (phi - below)
}

/// Iterates of the learner: VaR estimate, Q table, policy, visit counts,
/// epoch counter and the current state of the trajectory.
#[derive(Debug, Clone)]
pub struct LearnerState {
    v: f64,
    q: Vec<f64>,
    d: RandomizedPolicy,
    counts: Vec<u64>,
    epoch: u64,
    current_state: usize,
    n_actions: usize,
    buf: Vec<f64>,
    scratch: Vec<f64>,
}

impl LearnerState {
    /// Starts from `v = 0`, `Q = 0` and the uniform policy over feasible
    /// actions.
    pub fn new(model: &MdpModel, config: &LearnerConfig, initial_state: usize) -> Result<Self, LearnerError> {
        let q = vec![vec![0.0; model.n_actions()]; model.n_states()];
        Self::with_initial(model, config, initial_state, 0.0, q, RandomizedPolicy::uniform(model))
    }

    pub fn with_initial(
        model: &MdpModel,
        config: &LearnerConfig,
        initial_state: usize,
        v0: f64,
        q0: Vec<Vec<f64>>,
        d0: RandomizedPolicy,
    ) -> Result<Self, LearnerError> {
        config.validate(model)?;
        if initial_state >= model.n_states() {
            return Err(LearnerError::Config(format!("initial state {initial_state} out of range")));
        }
        if q0.len() != model.n_states() || q0.iter().any(|r| r.len() != model.n_actions()) {
            return Err(LearnerError::Config("Q0 has the wrong shape".into()));
        }
        d0.check(model)?;
        if !config.schedules.is_frozen() {
            let eps0 = config.schedules.epsilon(0);
            for s in 0..model.n_states() {
                if model.feasible_actions(s).iter().any(|&a| d0.prob(s, a) < eps0 - 1e-12) {
                    return Err(LearnerError::Config(format!(
                        "initial policy leaves the exploration set in state {s}"
                    )));
                }
            }
        }
        let na = model.n_actions();
        let mut q: Vec<f64> = q0.into_iter().flatten().collect();
        for s in 0..model.n_states() {
            for a in 0..na {
                if !model.is_feasible(s, a) {
                    q[s * na + a] = f64::INFINITY;
                }
            }
        }
        Ok(LearnerState {
            v: v0,
            q,
            d: d0,
            counts: vec![0; model.n_states() * na],
            epoch: 0,
            current_state: initial_state,
            n_actions: na,
            buf: vec![0.0; na],
            scratch: Vec::with_capacity(na),
        })
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    /// `Q(s, a)`; `+inf` for infeasible pairs.
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn policy(&self) -> &RandomizedPolicy {
        &self.d
    }

    pub fn visits(&self, s: usize, a: usize) -> u64 {
        self.counts[s * self.n_actions + a]
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn current_state(&self) -> usize {
        self.current_state
    }

    /// Largest `|Q(s, a)|` over feasible pairs.
    pub fn max_abs_q(&self) -> f64 {
        self.q.iter().filter(|x| x.is_finite()).fold(0.0, |m, x| m.max(x.abs()))
    }

    fn min_q(&self, model: &MdpModel, s: usize) -> f64 {
        model
            .feasible_actions(s)
            .iter()
            .map(|&a| self.q[s * self.n_actions + a])
            .fold(f64::INFINITY, f64::min)
    }

    /// `min_a Q(s_ref, a)`: the learner's running estimate of the optimal
    /// objective, since the relative value of the reference state is zero.
    pub fn running_cvar_estimate(&self, model: &MdpModel, config: &LearnerConfig) -> f64 {
        self.min_q(model, config.reference_state)
    }

    /// Applies the VaR recursion and returns the new estimate.
    pub fn var_step(&mut self, cost: f64, alpha: f64, phi: f64) -> f64 {
        self.v = var_update(self.v, cost, alpha, phi);
        self.v
    }

    /// Updates `Q(s, a)` only, using the current VaR estimate in the surrogate
    /// cost. Returns the new entry.
    #[allow(clippy::too_many_arguments)]
    pub fn q_step(
        &mut self,
        model: &MdpModel,
        s: usize,
        a: usize,
        cost: f64,
        next_state: usize,
        beta: f64,
        config: &LearnerConfig,
    ) -> Result<f64, LearnerError> {
        if s >= model.n_states() || a >= model.n_actions() || !model.is_feasible(s, a) {
            return Err(MdpError::InfeasiblePair { state: s, action: a }.into());
        }
        let target = match config.criterion {
            Criterion::Crl => tilde_c_sample(self.v, cost, config.phi),
            Criterion::Mcrl { lambda } => tilde_c_sample(self.v, cost, config.phi) + lambda * cost,
            Criterion::Mrl => cost,
        };
        let bootstrap = self.min_q(model, next_state) - self.min_q(model, config.reference_state);
        let i = s * self.n_actions + a;
        self.q[i] = (1.0 - beta) * self.q[i] + beta * (target + bootstrap);
        Ok(self.q[i])
    }

    /// Moves every `d(s)` a `gamma` step toward the greedy action of `Q(s, .)`
    /// and projects it back so feasible coordinates stay at least `eps`.
    pub fn policy_step(&mut self, model: &MdpModel, gamma: f64, eps: f64) -> Result<(), LearnerError> {
        for s in 0..model.n_states() {
            let mask = model.feasible_mask(s);
            let greedy = argmin_smallest_index(self.q_row(s), mask)?;
            let row = self.d.row(s);
            for (a, (b, p)) in self.buf.iter_mut().zip(row).enumerate() {
                let target = if a == greedy { 1.0 } else { 0.0 };
                *b = p + gamma * (target - p);
            }
            project_into(&self.buf, eps, mask, self.d.row_mut(s), &mut self.scratch)?;
        }
        Ok(())
    }

    /// One full epoch: act, observe, update v, Q and d, advance.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        model: &MdpModel,
        config: &LearnerConfig,
        rng: &mut R,
    ) -> Result<StepRecord, LearnerError> {
        let n = self.epoch;
        let s = self.current_state;
        let sched = &config.schedules;

        let a = if n < config.warmup_epochs {
            let acts = model.feasible_actions(s);
            acts[rng.random_range(0..acts.len())]
        } else {
            sample_action(&self.d, s, rng)?
        };
        let (next, cost) = sample_transition(model, s, a, rng)?;

        // Q uses v_n, so it goes before the VaR update.
        let i = s * self.n_actions + a;
        let beta = sched.beta(self.counts[i] + 1);
        self.q_step(model, s, a, cost, next, beta, config)?;
        self.counts[i] += 1;
        if config.criterion != Criterion::Mrl {
            self.var_step(cost, sched.alpha(n), config.phi);
        }
        if !sched.is_frozen() {
            self.policy_step(model, sched.gamma(n), sched.epsilon(n))?;
        }

        self.epoch += 1;
        self.current_state = next;
        Ok(StepRecord {
            epoch: n,
            state: s,
            action: a,
            cost,
            next_state: next,
            v: self.v,
            running_cvar: self.running_cvar_estimate(model, config),
        })
    }

    /// Runs `epochs` steps without keeping the records.
    pub fn run<R: Rng + ?Sized>(
        &mut self,
        model: &MdpModel,
        config: &LearnerConfig,
        epochs: u64,
        rng: &mut R,
    ) -> Result<(), LearnerError> {
        for _ in 0..epochs {
            self.step(model, config, rng)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_machine_replacement, CostFamily};
    use crate::mdp::ModelDocument;
    use crate::risk::CostDistribution;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(criterion: Criterion) -> LearnerConfig {
        LearnerConfig {
            phi: 0.9,
            criterion,
            reference_state: 0,
            warmup_epochs: 0,
            schedules: SchedulePack::MACHINE_REPLACEMENT,
        }
    }

    /// Two states, two actions, every transition to state 1.
    fn toy() -> MdpModel {
        MdpModel::from_document(ModelDocument {
            n_states: 2,
            n_actions: 2,
            feasible: vec![vec![1, 1], vec![1, 1]],
            kernel: vec![vec![vec![0.0, 1.0]; 2]; 2],
            costs: vec![vec![Some(CostDistribution::constant(1.0)); 2]; 2],
        })
        .unwrap()
    }

    fn with_q(model: &MdpModel, cfg: &LearnerConfig, v: f64, q: Vec<Vec<f64>>) -> LearnerState {
        LearnerState::with_initial(model, cfg, 0, v, q, RandomizedPolicy::uniform(model)).unwrap()
    }

    #[test]
    fn var_recursion_cases() {
        assert_abs_diff_eq!(var_update(0.0, 1.0, 0.1, 0.9), 0.09, epsilon = 1e-15);
        assert_abs_diff_eq!(var_update(0.0, -1.0, 0.1, 0.9), -0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(var_update(5.0, 5.0, 0.2, 0.9), 4.98, epsilon = 1e-12);
    }

    #[test]
    fn crl_q_step_plug_in() {
        // target C~ = 2 from v = 0 and a cost of 0.2 at phi = 0.9
        let m = toy();
        let cfg = config(Criterion::Crl);
        let mut st = with_q(&m, &cfg, 0.0, vec![vec![0.5, 0.7], vec![1.0, 3.0]]);
        // reference state 0 has min 0.5, next state 1 has min 1
        let q = st.q_step(&m, 0, 1, 0.2, 1, 0.5, &cfg).unwrap();
        assert_abs_diff_eq!(q, 0.5 * 0.7 + 0.5 * (2.0 + 1.0 - 0.5), epsilon = 1e-12);

        let mut st = with_q(&m, &cfg, 0.0, vec![vec![0.5, 0.0], vec![1.0, 3.0]]);
        // now min at the reference state is Q(0, 1) = 0 itself
        let q = st.q_step(&m, 1, 1, 0.2, 1, 0.5, &cfg).unwrap();
        assert_abs_diff_eq!(q, 0.5 * 3.0 + 0.5 * (2.0 + 1.0 - 0.0), epsilon = 1e-12);
    }

    #[test]
    fn tiny_beta_is_a_no_op() {
        let m = toy();
        let cfg = config(Criterion::Crl);
        let mut st = with_q(&m, &cfg, 0.0, vec![vec![0.3, 0.7], vec![1.0, 3.0]]);
        let q = st.q_step(&m, 0, 0, 100.0, 1, 1e-15, &cfg).unwrap();
        assert_abs_diff_eq!(q, 0.3, epsilon = 1e-9);
    }

    #[test]
    fn mcrl_and_mrl_targets() {
        let m = toy();
        let cfg = config(Criterion::Mcrl { lambda: 0.3 });
        // v = 6, cost = 10: C~ = 6 + 4 / 0.1 = 46, plus 0.3 * 10
        let mut st = with_q(&m, &cfg, 6.0, vec![vec![0.0; 2]; 2]);
        let q = st.q_step(&m, 0, 0, 10.0, 1, 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(q, 46.0 + 3.0, epsilon = 1e-9);

        // cost below v: C~ = v
        let mut st = with_q(&m, &cfg, 6.0, vec![vec![0.0; 2]; 2]);
        let q = st.q_step(&m, 0, 0, 5.0, 1, 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(q, 6.0 + 1.5, epsilon = 1e-12);

        let cfg = config(Criterion::Mrl);
        let mut st = with_q(&m, &cfg, 123.0, vec![vec![0.0; 2]; 2]);
        let q = st.q_step(&m, 0, 0, 10.0, 1, 1.0, &cfg).unwrap();
        assert_eq!(q, 10.0);
    }

    #[test]
    fn q_step_rejects_infeasible_pair() {
        let m = build_machine_replacement(CostFamily::Gaussian);
        let cfg = config(Criterion::Crl);
        let mut st = LearnerState::new(&m, &cfg, 0).unwrap();
        assert!(st.q_step(&m, 5, 0, 1.0, 0, 0.5, &cfg).is_err());
    }

    #[test]
    fn policy_step_cases() {
        let m = toy();
        let cfg = config(Criterion::Crl);
        let mut st = with_q(&m, &cfg, 0.0, vec![vec![0.0, 1.0], vec![2.0, 1.0]]);
        st.policy_step(&m, 0.1, 0.01).unwrap();
        assert_abs_diff_eq!(st.policy().prob(0, 0), 0.55, epsilon = 1e-12);
        assert_abs_diff_eq!(st.policy().prob(0, 1), 0.45, epsilon = 1e-12);
        assert_abs_diff_eq!(st.policy().prob(1, 1), 0.55, epsilon = 1e-12);

        let d0 = RandomizedPolicy::new(&m, vec![vec![0.99, 0.01]; 2]).unwrap();
        let frozen = LearnerConfig {
            schedules: SchedulePack { gamma_c: 0.0, ..SchedulePack::MACHINE_REPLACEMENT },
            ..cfg
        };
        let mut st = LearnerState::with_initial(&m, &frozen, 0, 0.0, vec![vec![0.0, 1.0]; 2], d0).unwrap();
        st.policy_step(&m, 0.5, 0.01).unwrap();
        assert_abs_diff_eq!(st.policy().prob(0, 0), 0.99, epsilon = 1e-12);
        assert_abs_diff_eq!(st.policy().prob(0, 1), 0.01, epsilon = 1e-12);

        let mut st = with_q(&m, &cfg, 0.0, vec![vec![1.0, 0.0]; 2]);
        st.policy_step(&m, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(st.policy().prob(0, 0), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(st.policy().prob(0, 1), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn running_estimate() {
        let m = toy();
        let cfg = config(Criterion::Crl);
        let st = with_q(&m, &cfg, 0.0, vec![vec![2.0, 1.5], vec![0.0, 0.0]]);
        assert_eq!(st.running_cvar_estimate(&m, &cfg), 1.5);
        let st = with_q(&m, &cfg, 0.0, vec![vec![0.0; 2]; 2]);
        assert_eq!(st.running_cvar_estimate(&m, &cfg), 0.0);
    }

    #[test]
    fn steps_are_deterministic() {
        let m = build_machine_replacement(CostFamily::Gaussian);
        let cfg = LearnerConfig { warmup_epochs: 10, ..config(Criterion::Crl) };
        let run = || {
            let mut st = LearnerState::new(&m, &cfg, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..50).map(|_| st.step(&m, &cfg, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_pair_gets_visited() {
        let m = build_machine_replacement(CostFamily::Gaussian);
        let cfg = config(Criterion::Crl);
        let mut st = LearnerState::new(&m, &cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        st.run(&m, &cfg, 10_000, &mut rng).unwrap();
        let total: u64 = m.feasible_pairs().map(|(s, a)| st.visits(s, a)).sum();
        assert_eq!(total, 10_000);
        for (s, a) in m.feasible_pairs() {
            assert!(st.visits(s, a) >= 1, "({s}, {a}) never visited");
        }
    }

    #[test]
    fn exactly_one_q_entry_changes() {
        let m = build_machine_replacement(CostFamily::Gaussian);
        let cfg = config(Criterion::Crl);
        let mut st = LearnerState::new(&m, &cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let before = st.q.clone();
            let rec = st.step(&m, &cfg, &mut rng).unwrap();
            let changed: Vec<usize> = (0..before.len()).filter(|&i| before[i] != st.q[i]).collect();
            assert!(changed.len() <= 1);
            if let Some(&i) = changed.first() {
                assert_eq!(i, rec.state * 2 + rec.action);
            }
        }
    }

    #[test]
    fn simplex_preserved_and_var_bounded() {
        let m = build_machine_replacement(CostFamily::StudentT);
        let cfg = LearnerConfig { warmup_epochs: 100, ..config(Criterion::Crl) };
        let mut st = LearnerState::new(&m, &cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 0..20_000u64 {
            st.step(&m, &cfg, &mut rng).unwrap();
            let eps = cfg.schedules.epsilon(n);
            for s in 0..6 {
                let row = st.policy().row(s);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                for &a in m.feasible_actions(s) {
                    assert!(row[a] >= eps - 1e-12);
                }
            }
            if n >= 1000 {
                // costs live in roughly [-5, 20] with t noise
                assert!(st.v() > -6.0 && st.v() < 21.0, "v = {}", st.v());
            }
        }
    }

    #[test]
    fn mrl_skips_var() {
        let m = build_machine_replacement(CostFamily::Gaussian);
        let cfg = config(Criterion::Mrl);
        let mut st = LearnerState::new(&m, &cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        st.run(&m, &cfg, 100, &mut rng).unwrap();
        assert_eq!(st.v(), 0.0);
    }

    #[test]
    fn config_errors() {
        let m = build_machine_replacement(CostFamily::Gaussian);
        let bad_phi = LearnerConfig { phi: 1.0, ..config(Criterion::Crl) };
        assert!(LearnerState::new(&m, &bad_phi, 0).is_err());
        let bad_ref = LearnerConfig { reference_state: 6, ..config(Criterion::Crl) };
        assert!(LearnerState::new(&m, &bad_ref, 0).is_err());
        let cfg = config(Criterion::Crl);
        let skewed = RandomizedPolicy::new(&m, vec![vec![0.0, 1.0]; 6]).unwrap();
        assert!(LearnerState::with_initial(&m, &cfg, 0, 0.0, vec![vec![0.0; 2]; 6], skewed).is_err());
    }

    /// Bisection on the KKT multiplier: find theta with
    /// `sum max(x_i - theta, eps) = 1`. Independent of the sort rule.
    fn kkt_projection(x: &[f64], eps: f64) -> Vec<f64> {
        let g = |t: f64| x.iter().map(|v| (v - t).max(eps)).sum::<f64>() - 1.0;
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 { lo = mid } else { hi = mid }
        }
        let t = 0.5 * (lo + hi);
        x.iter().map(|v| (v - t).max(eps)).collect()
    }

    proptest! {
        #[test]
        fn projection_agrees_with_kkt(x in prop::collection::vec(-2.0f64..2.0, 2..6), frac in 0.0f64..1.0) {
            let eps = frac / x.len() as f64;
            let y = project_to_constrained_simplex(&x, eps, &vec![true; x.len()]).unwrap();
            let z = kkt_projection(&x, eps);
            for (a, b) in y.iter().zip(&z) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.iter().all(|v| *v >= eps - 1e-12));
            let again = project_to_constrained_simplex(&y, eps, &vec![true; x.len()]).unwrap();
            prop_assert_eq!(again, y);
        }
    }
}
