//! Cost distributions and the tail-risk functionals built on them.
//!
//! For a loss `C` and tail level `phi` in (0, 1):
//!
//! - `VaR(C) = inf { x : P(C <= x) >= phi }`
//! - `CVaR(C) = VaR(C) + E[(C - VaR(C))^+] / (1 - phi)`
//!
//! The second form is the Rockafellar-Uryasev representation. It equals the
//! conditional tail expectation for continuous losses and stays the correct
//! tail average when `VaR` sits on an atom of a discrete loss.
//!
//! Steady-state costs of an MDP are finite mixtures of per-(state, action)
//! distributions, so most functions here accept a list of weighted
//! components.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

/// Probability-sum tolerance for discrete distributions.
const DISCRETE_SUM_TOL: f64 = 1e-12;
/// Bisection stops once the VaR bracket is narrower than this.
const VAR_BRACKET_WIDTH: f64 = 1e-10;
const VAR_MAX_ITERATIONS: usize = 1_000_000;
/// Slack used when comparing an accumulated discrete CDF against `phi`.
const CDF_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("tail level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("invalid cost distribution: {0}")]
    InvalidDistribution(String),
    #[error("mixture weights must be nonnegative and sum to 1, got sum {0}")]
    InvalidWeights(f64),
    #[error("mixture has no components")]
    EmptyMixture,
    #[error("could not bracket the {phi}-quantile: F({lo}) = {f_lo}, F({hi}) = {f_hi}")]
    BracketFailure {
        phi: f64,
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },
    #[error("empirical risk needs at least one sample")]
    EmptySample,
}

/// Per-(state, action) random cost.
///
/// Serialized as `{"kind":"gaussian","mean":..,"sd":..}`,
/// `{"kind":"student_t","location":..,"scale":..,"dof":..}` or
/// `{"kind":"discrete","values":[..],"probs":[..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostDistribution {
    Gaussian { mean: f64, sd: f64 },
    StudentT { location: f64, scale: f64, dof: f64 },
    Discrete { values: Vec<f64>, probs: Vec<f64> },
}

impl CostDistribution {
    pub fn gaussian(mean: f64, sd: f64) -> Result<Self, RiskError> {
        let d = CostDistribution::Gaussian { mean, sd };
        d.validate()?;
        Ok(d)
    }

    pub fn student_t(location: f64, scale: f64, dof: f64) -> Result<Self, RiskError> {
        let d = CostDistribution::StudentT {
            location,
            scale,
            dof,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn discrete(values: Vec<f64>, probs: Vec<f64>) -> Result<Self, RiskError> {
        let d = CostDistribution::Discrete { values, probs };
        d.validate()?;
        Ok(d)
    }

    /// A point mass at `value`.
    pub fn constant(value: f64) -> Self {
        CostDistribution::Discrete {
            values: vec![value],
            probs: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        let bad = |msg: String| Err(RiskError::InvalidDistribution(msg));
        match self {
            CostDistribution::Gaussian { mean, sd } => {
                if !mean.is_finite() {
                    return bad(format!("gaussian mean {mean} is not finite"));
                }
                if !(sd.is_finite() && *sd > 0.0) {
                    return bad(format!("gaussian sd must be positive, got {sd}"));
                }
            }
            CostDistribution::StudentT {
                location,
                scale,
                dof,
            } => {
                if !location.is_finite() {
                    return bad(format!("student-t location {location} is not finite"));
                }
                if !(scale.is_finite() && *scale > 0.0) {
                    return bad(format!("student-t scale must be positive, got {scale}"));
                }
                // finite variance
                if !(dof.is_finite() && *dof > 2.0) {
                    return bad(format!("student-t dof must exceed 2, got {dof}"));
                }
            }
            CostDistribution::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return bad(format!(
                        "discrete needs equally many values and probs ({} vs {})",
                        values.len(),
                        probs.len()
                    ));
                }
                if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                    return bad(format!("discrete value {v} is not finite"));
                }
                if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
                    return bad(format!("discrete probability {p} is negative"));
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > DISCRETE_SUM_TOL {
                    return bad(format!("discrete probabilities sum to {sum}"));
                }
            }
        }
        Ok(())
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, CostDistribution::Discrete { .. })
    }

    pub fn mean(&self) -> f64 {
        match self {
            CostDistribution::Gaussian { mean, .. } => *mean,
            CostDistribution::StudentT { location, .. } => *location,
            CostDistribution::Discrete { values, probs } => {
                values.iter().zip(probs).map(|(v, p)| v * p).sum()
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            CostDistribution::Gaussian { mean, sd } => standard_normal().cdf((x - mean) / sd),
            CostDistribution::StudentT {
                location,
                scale,
                dof,
            } => standard_t(*dof).cdf((x - location) / scale),
            CostDistribution::Discrete { values, probs } => values
                .iter()
                .zip(probs)
                .filter(|(v, _)| **v <= x)
                .map(|(_, p)| p)
                .sum(),
        }
    }

    /// `E[(C - v)^+]` in closed form.
    pub fn expected_excess(&self, v: f64) -> f64 {
        let excess = match self {
            CostDistribution::Gaussian { mean, sd } => {
                let z = (mean - v) / sd;
                let n = standard_normal();
                (mean - v) * n.cdf(z) + sd * n.pdf(z)
            }
            CostDistribution::StudentT {
                location,
                scale,
                dof,
            } => {
                // For standard T with nu dof:
                // E[(T - k)^+] = (nu + k^2) / (nu - 1) * f(k) - k * (1 - F(k))
                let k = (v - location) / scale;
                let t = standard_t(*dof);
                scale * ((dof + k * k) / (dof - 1.0) * t.pdf(k) - k * t.sf(k))
            }
            CostDistribution::Discrete { values, probs } => values
                .iter()
                .zip(probs)
                .map(|(x, p)| p * (x - v).max(0.0))
                .sum(),
        };
        excess.max(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            CostDistribution::Gaussian { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            CostDistribution::StudentT {
                location,
                scale,
                dof,
            } => {
                let t = StudentT::new(*dof).expect("dof validated at construction");
                location + scale * t.sample(rng)
            }
            CostDistribution::Discrete { values, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                // u landed in the rounding gap above the accumulated sum
                let last = probs.iter().rposition(|p| *p > 0.0).unwrap_or(0);
                values[last]
            }
        }
    }

    /// A pair `(lo, hi)` such that the CDF is well below any reasonable tail
    /// level at `lo` and essentially 1 at `hi`.
    fn bracket_hint(&self) -> (f64, f64) {
        match self {
            CostDistribution::Gaussian { mean, sd } => (mean - 10.0 * sd, mean + 10.0 * sd),
            CostDistribution::StudentT {
                location, scale, ..
            } => (location - 10.0 * scale, location + 10.0 * scale),
            CostDistribution::Discrete { values, .. } => {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo - 1.0, hi)
            }
        }
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal parameters are valid")
}

fn standard_t(dof: f64) -> StudentsT {
    StudentsT::new(0.0, 1.0, dof).expect("dof validated at construction")
}

/// Value-at-risk, CVaR and mean of one loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskTriple {
    pub var: f64,
    pub cvar: f64,
    pub mean: f64,
}

fn check_level(phi: f64) -> Result<(), RiskError> {
    if phi > 0.0 && phi < 1.0 {
        Ok(())
    } else {
        Err(RiskError::InvalidLevel(phi))
    }
}

pub fn dist_mean(d: &CostDistribution) -> f64 {
    d.mean()
}

pub fn dist_cdf(d: &CostDistribution, x: f64) -> f64 {
    d.cdf(x)
}

pub fn expected_excess(d: &CostDistribution, v: f64) -> f64 {
    d.expected_excess(v)
}

/// Single-sample estimator `v + (cost - v)^+ / (1 - phi)` of [`tilde_c_exact`].
#[inline]
pub fn tilde_c_sample(v: f64, cost_sample: f64, phi: f64) -> f64 {
    v + (cost_sample - v).max(0.0) / (1.0 - phi)
}

/// `v + E[(C - v)^+] / (1 - phi)`.
pub fn tilde_c_exact(d: &CostDistribution, v: f64, phi: f64) -> f64 {
    v + d.expected_excess(v) / (1.0 - phi)
}

fn check_components(components: &[(f64, &CostDistribution)]) -> Result<(), RiskError> {
    if components.is_empty() {
        return Err(RiskError::EmptyMixture);
    }
    if components.iter().any(|(w, _)| !(w.is_finite() && *w >= 0.0)) {
        return Err(RiskError::InvalidWeights(f64::NAN));
    }
    let total: f64 = components.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(RiskError::InvalidWeights(total));
    }
    Ok(())
}

/// CDF of the finite mixture `sum_i w_i F_i`.
pub fn mixture_cdf(components: &[(f64, &CostDistribution)], x: f64) -> f64 {
    components.iter().map(|(w, d)| w * d.cdf(x)).sum()
}

pub fn mixture_mean(components: &[(f64, &CostDistribution)]) -> f64 {
    components.iter().map(|(w, d)| w * d.mean()).sum()
}

/// Smallest `x` with mixture CDF at least `phi`.
///
/// Purely discrete mixtures return the exact atom. Anything with a
/// continuous component is solved by bisection down to a bracket of width
/// 1e-10.
pub fn mixture_var(components: &[(f64, &CostDistribution)], phi: f64) -> Result<f64, RiskError> {
    check_level(phi)?;
    check_components(components)?;

    if components.iter().all(|(_, d)| d.is_discrete()) {
        return Ok(discrete_mixture_var(components, phi));
    }

    let (mut lo, mut hi) = components
        .iter()
        .filter(|(w, _)| *w > 0.0)
        .map(|(_, d)| d.bracket_hint())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (l, h)| {
            (lo.min(l), hi.max(h))
        });

    // Heavy tails or extreme levels can push the quantile outside the hint.
    let mut widenings = 0;
    loop {
        let f_lo = mixture_cdf(components, lo);
        let f_hi = mixture_cdf(components, hi);
        if f_lo < phi && f_hi >= phi {
            break;
        }
        if widenings == 64 {
            return Err(RiskError::BracketFailure {
                phi,
                lo,
                hi,
                f_lo,
                f_hi,
            });
        }
        let width = (hi - lo).max(1.0);
        if f_lo >= phi {
            lo -= width;
        }
        if f_hi < phi {
            hi += width;
        }
        widenings += 1;
    }

    let mut iterations = 0;
    while hi - lo > VAR_BRACKET_WIDTH && iterations < VAR_MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mixture_cdf(components, mid) >= phi {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    Ok(hi)
}

fn discrete_mixture_var(components: &[(f64, &CostDistribution)], phi: f64) -> f64 {
    let mut atoms: Vec<(f64, f64)> = components
        .iter()
        .filter(|(w, _)| *w > 0.0)
        .flat_map(|(w, d)| match d {
            CostDistribution::Discrete { values, probs } => values
                .iter()
                .zip(probs)
                .map(|(v, p)| (*v, w * p))
                .collect::<Vec<_>>(),
            _ => unreachable!("caller checked every component is discrete"),
        })
        .collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut acc = 0.0;
    for (i, (value, mass)) in atoms.iter().enumerate() {
        acc += mass;
        let last_of_value = atoms.get(i + 1).is_none_or(|next| next.0 != *value);
        if last_of_value && acc >= phi - CDF_TOL {
            return *value;
        }
    }
    atoms.last().map(|a| a.0).unwrap_or(f64::NAN)
}

/// CVaR of the mixture through `v* + (1 - phi)^-1 sum_i w_i E[(C_i - v*)^+]`
/// with `v*` from [`mixture_var`].
pub fn mixture_cvar(components: &[(f64, &CostDistribution)], phi: f64) -> Result<f64, RiskError> {
    Ok(mixture_risk(components, phi)?.cvar)
}

/// VaR, CVaR and mean of the mixture in one pass.
pub fn mixture_risk(
    components: &[(f64, &CostDistribution)],
    phi: f64,
) -> Result<RiskTriple, RiskError> {
    let var = mixture_var(components, phi)?;
    let excess: f64 = components
        .iter()
        .map(|(w, d)| w * d.expected_excess(var))
        .sum();
    Ok(RiskTriple {
        var,
        cvar: var + excess / (1.0 - phi),
        mean: mixture_mean(components),
    })
}

/// 1-based index `ceil(phi * n)` of the order statistic used as the
/// empirical VaR, robust to `phi * n` landing a rounding error above an
/// integer.
fn var_rank(phi: f64, n: usize) -> usize {
    let x = phi * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).clamp(1, n)
}

fn empirical_var(samples: &[f64], phi: f64) -> Result<f64, RiskError> {
    check_level(phi)?;
    if samples.is_empty() {
        return Err(RiskError::EmptySample);
    }
    let mut sorted = samples.to_vec();
    let k = var_rank(phi, sorted.len()) - 1;
    let (_, var, _) = sorted.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    Ok(*var)
}

/// Order-statistic VaR (rank `ceil(phi * n)`), the mean of all samples at or
/// above it, and the sample mean.
pub fn empirical_var_cvar(samples: &[f64], phi: f64) -> Result<RiskTriple, RiskError> {
    let var = empirical_var(samples, phi)?;
    let (tail_sum, tail_n) = samples
        .iter()
        .filter(|x| **x >= var)
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    Ok(RiskTriple {
        var,
        cvar: tail_sum / tail_n as f64,
        mean: samples.iter().sum::<f64>() / samples.len() as f64,
    })
}

/// Like [`empirical_var_cvar`] but with the plug-in Rockafellar-Uryasev CVaR
/// `var + sum (x_i - var)^+ / ((1 - phi) n)`.
///
/// This is the consistent estimator of [`mixture_cvar`] when the loss has
/// atoms at its VaR.
pub fn empirical_tail_risk(samples: &[f64], phi: f64) -> Result<RiskTriple, RiskError> {
    let var = empirical_var(samples, phi)?;
    let n = samples.len() as f64;
    let excess: f64 = samples.iter().map(|x| (x - var).max(0.0)).sum();
    Ok(RiskTriple {
        var,
        cvar: var + excess / ((1.0 - phi) * n),
        mean: samples.iter().sum::<f64>() / n,
    })
}
