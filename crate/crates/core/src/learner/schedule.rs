use serde::{Deserialize, Serialize};

use super::LearnerError;

/// Step-size and exploration sequences.
///
/// - `alpha(n) = alpha_c / (n + 1)^alpha_exp` drives the VaR recursion,
/// - `beta(k) = 1 / (k + 1)^beta_exp` is the per-pair Q step at visit count `k`,
/// - `gamma(n) = gamma_c / (n + 1)^gamma_exp` drives the policy average,
/// - `epsilon(n) = epsilon_c / (n + 1)^epsilon_exp` is the exploration floor.
///
/// The exponents must be ordered `alpha_exp < gamma_exp < epsilon_exp` so the
/// policy moves slower than the value estimates and exploration vanishes
/// faster still. `gamma_c = 0` freezes the policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePack {
    pub alpha_c: f64,
    pub alpha_exp: f64,
    pub beta_exp: f64,
    pub gamma_c: f64,
    pub gamma_exp: f64,
    pub epsilon_c: f64,
    pub epsilon_exp: f64,
}

impl SchedulePack {
    /// Machine replacement settings: `10/(n+1)^0.9`, `1/(k+1)^0.8`,
    /// `1/(n+1)^0.99` and `1/(2(n+1)^0.999)`.
    pub const MACHINE_REPLACEMENT: SchedulePack = SchedulePack {
        alpha_c: 10.0,
        alpha_exp: 0.9,
        beta_exp: 0.8,
        gamma_c: 1.0,
        gamma_exp: 0.99,
        epsilon_c: 0.5,
        epsilon_exp: 0.999,
    };

    /// Same as machine replacement but with exploration `1/(4(n+1)^0.999)`.
    pub const ENERGY_STORAGE: SchedulePack = SchedulePack {
        epsilon_c: 0.25,
        ..Self::MACHINE_REPLACEMENT
    };

    pub fn validate(&self) -> Result<(), LearnerError> {
        let fail = |m: String| Err(LearnerError::Schedule(m));
        let finite = [
            self.alpha_c,
            self.alpha_exp,
            self.beta_exp,
            self.gamma_c,
            self.gamma_exp,
            self.epsilon_c,
            self.epsilon_exp,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return fail("schedule constants must be finite".into());
        }
        if self.alpha_c <= 0.0 || self.epsilon_c <= 0.0 || self.gamma_c < 0.0 {
            return fail(format!(
                "need alpha_c > 0, epsilon_c > 0, gamma_c >= 0 (got {}, {}, {})",
                self.alpha_c, self.epsilon_c, self.gamma_c
            ));
        }
        if self.alpha_exp <= 0.0 {
            return fail(format!("alpha_exp must be positive, got {}", self.alpha_exp));
        }
        if self.gamma_exp <= self.alpha_exp {
            return fail(format!(
                "gamma must decay faster than alpha (gamma_exp {} <= alpha_exp {})",
                self.gamma_exp, self.alpha_exp
            ));
        }
        if self.epsilon_exp <= self.gamma_exp {
            return fail(format!(
                "epsilon must decay faster than gamma (epsilon_exp {} <= gamma_exp {})",
                self.epsilon_exp, self.gamma_exp
            ));
        }
        if self.gamma_exp >= 1.0 {
            return fail(format!("gamma_exp must be below 1, got {}", self.gamma_exp));
        }
        if !(self.beta_exp > 0.5 && self.beta_exp <= 1.0) {
            return fail(format!("beta_exp must lie in (0.5, 1], got {}", self.beta_exp));
        }
        Ok(())
    }

    /// Checks that the exploration floor leaves room in the simplex from the
    /// first epoch on.
    pub fn validate_for(&self, n_actions: usize) -> Result<(), LearnerError> {
        self.validate()?;
        if n_actions as f64 * self.epsilon(0) > 1.0 + 1e-12 {
            return Err(LearnerError::Schedule(format!(
                "{n_actions} actions with epsilon(0) = {} leave the exploration set empty",
                self.epsilon(0)
            )));
        }
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.gamma_c == 0.0
    }

    #[inline]
    pub fn alpha(&self, n: u64) -> f64 {
        self.alpha_c / ((n + 1) as f64).powf(self.alpha_exp)
    }

    #[inline]
    pub fn beta(&self, visits: u64) -> f64 {
        1.0 / ((visits + 1) as f64).powf(self.beta_exp)
    }

    #[inline]
    pub fn gamma(&self, n: u64) -> f64 {
        self.gamma_c / ((n + 1) as f64).powf(self.gamma_exp)
    }

    #[inline]
    pub fn epsilon(&self, n: u64) -> f64 {
        self.epsilon_c / ((n + 1) as f64).powf(self.epsilon_exp)
    }
}

impl Default for SchedulePack {
    fn default() -> Self {
        Self::MACHINE_REPLACEMENT
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_values() {
        let s = SchedulePack::MACHINE_REPLACEMENT;
        s.validate_for(2).unwrap();
        assert_eq!(s.alpha(0), 10.0);
        assert_eq!(s.epsilon(0), 0.5);
        assert_eq!(s.beta(0), 1.0);
        assert!((s.gamma(99) - 1.0 / 100f64.powf(0.99)).abs() < 1e-15);
        SchedulePack::ENERGY_STORAGE.validate_for(4).unwrap();
        assert!(SchedulePack::MACHINE_REPLACEMENT.validate_for(4).is_err());
    }

    #[test]
    fn sequences_decrease() {
        let s = SchedulePack::default();
        for n in 0..1000 {
            assert!(s.alpha(n + 1) < s.alpha(n));
            assert!(s.gamma(n + 1) < s.gamma(n));
            assert!(s.epsilon(n + 1) < s.epsilon(n));
            assert!(s.beta(n + 1) < s.beta(n));
        }
    }

    #[test]
    fn ordering_is_enforced() {
        let base = SchedulePack::default();
        let bad = [
            SchedulePack { gamma_exp: 0.9, ..base },
            SchedulePack { gamma_exp: 0.8, ..base },
            SchedulePack { epsilon_exp: 0.99, ..base },
            SchedulePack { gamma_exp: 1.0, epsilon_exp: 1.1, ..base },
            SchedulePack { beta_exp: 0.5, ..base },
            SchedulePack { beta_exp: 1.2, ..base },
            SchedulePack { alpha_c: 0.0, ..base },
            SchedulePack { epsilon_c: -1.0, ..base },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(LearnerError::Schedule(_))), "{s:?}");
        }
        assert!(SchedulePack { gamma_c: 0.0, ..base }.validate().is_ok());
    }
}
