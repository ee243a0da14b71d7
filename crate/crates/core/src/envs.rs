//! The two benchmark problems: machine replacement and renewable energy
//! storage scheduling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{MdpError, MdpModel, ModelDocument};
use crate::risk::CostDistribution;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid energy parameters: {0}")]
    InvalidParams(String),
    #[error("storage level {level} reached from ({state}, {action}) is not on the grid")]
    OffGrid { state: usize, action: usize, level: f64 },
    #[error(transparent)]
    Model(#[from] MdpError),
}

/// Transition rows for retaining the machine, states 1..=5. The sixth state
/// must replace.
pub const RETAIN_KERNEL: [[f64; 6]; 5] = [
    [0.496, 0.254, 0.131, 0.067, 0.034, 0.018],
    [0.000, 0.505, 0.259, 0.133, 0.068, 0.035],
    [0.000, 0.000, 0.523, 0.268, 0.138, 0.071],
    [0.000, 0.000, 0.000, 0.563, 0.289, 0.148],
    [0.000, 0.000, 0.000, 0.000, 0.661, 0.339],
];

/// Transition row for replacing, identical in every state.
pub const REPLACE_ROW: [f64; 6] = [0.496, 0.254, 0.131, 0.067, 0.034, 0.018];

/// Mean cost of retaining in each state; replacing always costs 15 on average.
pub const RETAIN_MEAN_COST: [f64; 6] = [0.0, 3.0, 6.0, 9.0, 12.0, 15.0];
pub const REPLACE_MEAN_COST: f64 = 15.0;

pub const RETAIN: usize = 0;
pub const REPLACE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostFamily {
    Gaussian,
    StudentT,
}

/// Noise around the tabulated mean costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineCosts {
    pub family: CostFamily,
    /// Gaussian standard deviation, or Student-t scale.
    #[serde(default = "default_noise_scale")]
    pub scale: f64,
    #[serde(default = "default_dof")]
    pub dof: f64,
}

fn default_noise_scale() -> f64 {
    0.5
}

fn default_dof() -> f64 {
    5.0
}

impl MachineCosts {
    pub fn new(family: CostFamily) -> Self {
        MachineCosts {
            family,
            scale: default_noise_scale(),
            dof: default_dof(),
        }
    }

    fn at(&self, mean: f64) -> CostDistribution {
        match self.family {
            CostFamily::Gaussian => CostDistribution::Gaussian { mean, sd: self.scale },
            CostFamily::StudentT => CostDistribution::StudentT {
                location: mean,
                scale: self.scale,
                dof: self.dof,
            },
        }
    }
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let sum: f64 = row.iter().sum();
    row.iter().map(|p| p / sum).collect()
}

/// Six-state machine replacement with the default noise (scale 0.5, and
/// 5 degrees of freedom for Student-t).
pub fn build_machine_replacement(family: CostFamily) -> MdpModel {
    build_machine_replacement_with(MachineCosts::new(family)).expect("published tables are valid")
}

/// Kernel rows are renormalized by their sums; the published three-decimal
/// rows are off by at most 1e-3.
pub fn build_machine_replacement_with(costs: MachineCosts) -> Result<MdpModel, EnvError> {
    let n = 6;
    let replace = normalized(&REPLACE_ROW);
    let mut feasible = Vec::with_capacity(n);
    let mut kernel = Vec::with_capacity(n);
    let mut cost = Vec::with_capacity(n);
    for s in 0..n {
        if s < RETAIN_KERNEL.len() {
            feasible.push(vec![1, 1]);
            kernel.push(vec![normalized(&RETAIN_KERNEL[s]), replace.clone()]);
            cost.push(vec![
                Some(costs.at(RETAIN_MEAN_COST[s])),
                Some(costs.at(REPLACE_MEAN_COST)),
            ]);
        } else {
            feasible.push(vec![0, 1]);
            kernel.push(vec![vec![0.0; n], replace.clone()]);
            cost.push(vec![None, Some(costs.at(REPLACE_MEAN_COST))]);
        }
    }
    Ok(MdpModel::from_document(ModelDocument {
        n_states: n,
        n_actions: 2,
        feasible,
        kernel,
        costs: cost,
    })?)
}

/// A finite distribution given as `(value, probability)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Parameters of the storage scheduling problem. `Default` is the published
/// setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    /// Largest discharge magnitude: actions satisfy `a >= -c_min`.
    pub c_min: f64,
    /// Largest charge: `a <= c_max`.
    pub c_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    /// Price paid per unit bought from the grid.
    pub p_buy: f64,
    /// Price received per unit sold to the grid.
    pub p_sell: f64,
    /// Battery utilization cost per unit of action.
    pub utilization_cost: f64,
    /// Holding cost per unit of stored energy.
    pub holding_cost: f64,
    pub storage_grid: Vec<f64>,
    pub action_grid: Vec<f64>,
    pub generation: Outcomes,
    pub demand: Outcomes,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            c_min: 2.4,
            c_max: 1.2,
            b_min: 0.4,
            b_max: 3.4,
            p_buy: 3.0,
            p_sell: 1.5,
            utilization_cost: 4.0,
            holding_cost: 2.0,
            storage_grid: vec![0.4, 1.0, 1.6, 2.2, 2.8, 3.4],
            action_grid: vec![-2.4, -1.2, 0.6, 1.2],
            generation: Outcomes {
                values: vec![0.0, 0.6, 1.2, 1.8, 2.4, 3.0],
                probs: vec![0.10, 0.30, 0.20, 0.10, 0.15, 0.15],
            },
            demand: Outcomes {
                values: vec![0.6, 1.2, 1.8, 2.4, 3.0, 3.6],
                probs: vec![0.05, 0.25, 0.15, 0.25, 0.2, 0.1],
            },
        }
    }
}

const GRID_TOL: f64 = 1e-9;

impl EnergyParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidParams(m.to_string()));
        let sorted = |g: &[f64]| g.windows(2).all(|w| w[0] < w[1]);
        if self.storage_grid.is_empty() || !sorted(&self.storage_grid) {
            return bad("storage grid must be nonempty and strictly ascending");
        }
        if self.action_grid.is_empty() || !sorted(&self.action_grid) {
            return bad("action grid must be nonempty and strictly ascending");
        }
        if self
            .storage_grid
            .iter()
            .any(|b| *b < self.b_min - GRID_TOL || *b > self.b_max + GRID_TOL)
        {
            return bad("storage levels must lie in [b_min, b_max]");
        }
        for (name, o) in [("generation", &self.generation), ("demand", &self.demand)] {
            if o.values.len() != o.probs.len() || o.values.is_empty() {
                return Err(EnvError::InvalidParams(format!("{name}: values/probs length mismatch")));
            }
            let sum: f64 = o.probs.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || o.probs.iter().any(|p| *p < 0.0) {
                return Err(EnvError::InvalidParams(format!("{name}: probabilities sum to {sum}")));
            }
        }
        Ok(())
    }

    /// Whether action `a` is admissible at storage level `b`.
    pub fn is_admissible(&self, b: f64, a: f64) -> bool {
        a >= -self.c_min - GRID_TOL
            && a <= self.c_max + GRID_TOL
            && a >= b - self.b_max - GRID_TOL
            && a <= b - self.b_min + GRID_TOL
    }

    /// Stage cost `p_b [W]^+ - p_s [W]^- + c a + h (B - a)` with
    /// `W = D - G - a` and `[x]^- = -min(x, 0)`.
    pub fn stage_cost(&self, b: f64, a: f64, generation: f64, demand: f64) -> f64 {
        let w = demand - generation - a;
        let shortage = w.max(0.0);
        let surplus = -w.min(0.0);
        self.p_buy * shortage - self.p_sell * surplus + self.utilization_cost * a + self.holding_cost * (b - a)
    }

    /// Cost atoms of `(b, a)` over the full generation x demand grid, one per
    /// outcome pair, in generation-major order.
    pub fn cost_atoms(&self, b: f64, a: f64) -> (Vec<f64>, Vec<f64>) {
        let mut values = Vec::new();
        let mut probs = Vec::new();
        for (g, pg) in self.generation.values.iter().zip(&self.generation.probs) {
            for (d, pd) in self.demand.values.iter().zip(&self.demand.probs) {
                // snap so that mathematically equal costs compare equal
                values.push((self.stage_cost(b, a, *g, *d) * 1e12).round() / 1e12);
                probs.push(pg * pd);
            }
        }
        (values, probs)
    }
}

/// Storage scheduling MDP: states are storage levels, actions the
/// charge/discharge grid, and the next level is `B - a`.
pub fn build_energy_storage(params: &EnergyParams) -> Result<MdpModel, EnvError> {
    params.validate()?;
    let ns = params.storage_grid.len();
    let na = params.action_grid.len();
    let mut feasible = vec![vec![0u8; na]; ns];
    let mut kernel = vec![vec![vec![0.0; ns]; na]; ns];
    let mut costs = vec![vec![None; na]; ns];
    for (s, &b) in params.storage_grid.iter().enumerate() {
        for (ai, &a) in params.action_grid.iter().enumerate() {
            if !params.is_admissible(b, a) {
                continue;
            }
            let level = b - a;
            let next = params
                .storage_grid
                .iter()
                .position(|x| (x - level).abs() < GRID_TOL)
                .ok_or(EnvError::OffGrid { state: s, action: ai, level })?;
            feasible[s][ai] = 1;
            kernel[s][ai][next] = 1.0;
            let (values, probs) = params.cost_atoms(b, a);
            costs[s][ai] = Some(CostDistribution::Discrete { values, probs });
        }
    }
    Ok(MdpModel::from_document(ModelDocument {
        n_states: ns,
        n_actions: na,
        feasible,
        kernel,
        costs,
    })?)
}
