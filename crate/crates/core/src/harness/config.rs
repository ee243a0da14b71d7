use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::envs::{build_energy_storage, build_machine_replacement_with, CostFamily, EnergyParams, MachineCosts};
use crate::learner::{Criterion, LearnerConfig, SchedulePack};
use crate::mdp::MdpModel;

/// Which model to learn on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    MachineReplacement {
        #[serde(default = "gaussian")]
        cost_family: CostFamily,
        #[serde(default = "half")]
        scale: f64,
        #[serde(default = "five")]
        dof: f64,
    },
    EnergyStorage {
        #[serde(default)]
        params: EnergyParams,
    },
    /// A model document on disk. Relative paths resolve against the config
    /// file's directory.
    ModelFile { path: PathBuf },
}

fn gaussian() -> CostFamily {
    CostFamily::Gaussian
}
fn half() -> f64 {
    0.5
}
fn five() -> f64 {
    5.0
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::MachineReplacement {
            cost_family: CostFamily::Gaussian,
            scale: 0.5,
            dof: 5.0,
        }
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<MdpModel, HarnessError> {
        match self {
            EnvSpec::MachineReplacement { cost_family, scale, dof } => Ok(build_machine_replacement_with(MachineCosts {
                family: *cost_family,
                scale: *scale,
                dof: *dof,
            })?),
            EnvSpec::EnergyStorage { params } => Ok(build_energy_storage(params)?),
            EnvSpec::ModelFile { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
                    path: path.clone(),
                    source: e,
                })?;
                Ok(MdpModel::from_json(&text)?)
            }
        }
    }

    fn base_schedule(&self) -> SchedulePack {
        match self {
            EnvSpec::EnergyStorage { .. } => SchedulePack::ENERGY_STORAGE,
            _ => SchedulePack::MACHINE_REPLACEMENT,
        }
    }

    fn default_epochs(&self) -> (u64, u64) {
        match self {
            EnvSpec::EnergyStorage { .. } => (600_000, 10_000),
            _ => (1_000_000, 1_000),
        }
    }
}

/// Per-field overrides of the environment's default schedules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub alpha_c: Option<f64>,
    pub alpha_exp: Option<f64>,
    pub beta_exp: Option<f64>,
    pub gamma_c: Option<f64>,
    pub gamma_exp: Option<f64>,
    pub epsilon_c: Option<f64>,
    pub epsilon_exp: Option<f64>,
}

impl ScheduleOverrides {
    pub fn apply(&self, base: SchedulePack) -> SchedulePack {
        SchedulePack {
            alpha_c: self.alpha_c.unwrap_or(base.alpha_c),
            alpha_exp: self.alpha_exp.unwrap_or(base.alpha_exp),
            beta_exp: self.beta_exp.unwrap_or(base.beta_exp),
            gamma_c: self.gamma_c.unwrap_or(base.gamma_c),
            gamma_exp: self.gamma_exp.unwrap_or(base.gamma_exp),
            epsilon_c: self.epsilon_c.unwrap_or(base.epsilon_c),
            epsilon_exp: self.epsilon_exp.unwrap_or(base.epsilon_exp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoints {
    /// `count` epochs spaced evenly in log scale over `[1, total_epochs]`.
    LogSpaced(usize),
    Epochs(Vec<u64>),
}

impl Default for Checkpoints {
    fn default() -> Self {
        Checkpoints::LogSpaced(50)
    }
}

impl Checkpoints {
    /// Strictly increasing epochs in `[1, total]`, always ending at `total`.
    pub fn resolve(&self, total: u64) -> Result<Vec<u64>, HarnessError> {
        let mut out = match self {
            Checkpoints::LogSpaced(0) => return Err(HarnessError::Config("log_spaced count must be positive".into())),
            Checkpoints::LogSpaced(k) => log_spaced(total, *k),
            Checkpoints::Epochs(list) => {
                if list.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(HarnessError::Config("checkpoint epochs must be strictly increasing".into()));
                }
                if list.iter().any(|&e| e == 0 || e > total) {
                    return Err(HarnessError::Config(format!(
                        "checkpoint epochs must lie in [1, {total}]"
                    )));
                }
                list.clone()
            }
        };
        if out.last() != Some(&total) {
            out.push(total);
        }
        Ok(out)
    }
}

fn log_spaced(total: u64, k: usize) -> Vec<u64> {
    if total == 0 {
        return Vec::new();
    }
    let top = (total as f64).ln();
    let mut out: Vec<u64> = (0..k)
        .map(|i| {
            let t = if k == 1 { 1.0 } else { i as f64 / (k - 1) as f64 };
            ((t * top).exp().round() as u64).clamp(1, total)
        })
        .collect();
    out.dedup();
    out
}

/// One experiment: a model, a learner and a replication protocol. Every
/// field has a default, so `{}` is the Gaussian machine replacement CRL run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub env: EnvSpec,
    #[serde(default = "crl")]
    pub algorithm: Criterion,
    #[serde(default = "phi")]
    pub phi: f64,
    /// Defaults to 10^6 (machine replacement) or 6 x 10^5 (energy storage).
    #[serde(default)]
    pub total_epochs: Option<u64>,
    /// Defaults to 1000 (machine replacement) or 10000 (energy storage).
    #[serde(default)]
    pub warmup_epochs: Option<u64>,
    #[serde(default = "thirty")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub reference_state: usize,
    #[serde(default)]
    pub initial_state: usize,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    #[serde(default)]
    pub checkpoints: Checkpoints,
    /// Tolerance of the final local-optimality certificate.
    #[serde(default = "local_tol")]
    pub local_tol: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn crl() -> Criterion {
    Criterion::Crl
}
fn phi() -> f64 {
    0.9
}
fn thirty() -> usize {
    30
}
fn local_tol() -> f64 {
    crate::oracle::DEFAULT_LOCAL_TOL
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a config file; a relative model path is rebased on the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let EnvSpec::ModelFile { path: model } = &mut cfg.env {
            if model.is_relative() {
                if let Some(dir) = path.parent() {
                    *model = dir.join(&*model);
                }
            }
        }
        Ok(cfg)
    }

    pub fn total_epochs(&self) -> u64 {
        self.total_epochs.unwrap_or(self.env.default_epochs().0)
    }

    pub fn warmup_epochs(&self) -> u64 {
        self.warmup_epochs.unwrap_or(self.env.default_epochs().1)
    }

    pub fn schedules(&self) -> SchedulePack {
        self.schedule.apply(self.env.base_schedule())
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            phi: self.phi,
            criterion: self.algorithm,
            reference_state: self.reference_state,
            warmup_epochs: self.warmup_epochs(),
            schedules: self.schedules(),
        }
    }

    /// Checks everything that does not need the model.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replications == 0 {
            return Err(HarnessError::Config("replications must be at least 1".into()));
        }
        if self.total_epochs() < self.warmup_epochs() {
            return Err(HarnessError::Config(format!(
                "total_epochs {} is below warmup_epochs {}",
                self.total_epochs(),
                self.warmup_epochs()
            )));
        }
        if self.local_tol.is_nan() || self.local_tol < 0.0 {
            return Err(HarnessError::Config("local_tol must be nonnegative".into()));
        }
        self.schedules().validate()?;
        self.checkpoints.resolve(self.total_epochs())?;
        Ok(())
    }
}
