//! The concave occupancy-measure program and its solvers.
//!
//! [`solve_frank_wolfe`] maximises `lambda . (r + sigma * sqrt(-2 log lambda))`
//! over the flow polytope. Each iteration is one backward pass (greedy policy
//! for the gradient reward) and one forward pass (its occupancy measure).

mod dual;
mod frank_wolfe;
mod lite;
mod maxent;
mod objective;

pub use dual::{certify_dual, dual_value, DualCertificate};
pub use frank_wolfe::{solve_frank_wolfe, ConcaveObjective, FrankWolfe};
pub use lite::{lite_scale, solve_vapor_lite_tabular, vapor_lite_objective, VaporLite};
pub use maxent::{solve_weighted_max_entropy, weighted_entropy, WeightedEntropy};
pub use objective::{
    closed_form_tau, smoothed_gradient, smoothed_objective, vapor_objective, vapor_objective_tau,
    ConcaveSmoothedVapor, SmoothedVapor,
};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bayes::TransformedBeliefs;
use crate::error::{Result, VaporError};
use crate::mdp::PROB_TOL;
use crate::table::{CellTable, Transitions};

/// Known dynamics, expected rewards and per-cell uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct VaporProblem {
    pub p: Transitions,
    pub rho: Vec<f64>,
    pub r: CellTable,
    pub sigma: CellTable,
}

impl VaporProblem {
    pub fn new(p: Transitions, rho: Vec<f64>, r: CellTable, sigma: CellTable) -> Result<Self> {
        let prob = Self { p, rho, r, sigma };
        prob.validate()?;
        Ok(prob)
    }

    pub fn from_transformed(t: TransformedBeliefs, rho: Vec<f64>) -> Result<Self> {
        Self::new(t.p_mean, rho, t.reward_mu, t.sigma_tilde)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = &self.p.shape;
        self.r.check_shape(shape, "reward")?;
        self.sigma.check_shape(shape, "sigma")?;
        if self.sigma.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(VaporError::Parameter("sigma must be finite and >= 0".into()));
        }
        if self.rho.len() != shape.states(0)
            || self.rho.iter().any(|&x| x < 0.0)
            || (self.rho.iter().sum::<f64>() - 1.0).abs() > PROB_TOL
        {
            return Err(VaporError::InvalidMdp("rho is not a distribution".into()));
        }
        for (l, layer) in self.p.layers.iter().enumerate() {
            for row in layer.chunks(shape.states(l + 1)) {
                if row.iter().any(|&x| x < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
                    return Err(VaporError::InvalidMdp(format!("bad transition row in layer {l}")));
                }
            }
        }
        Ok(())
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.iter().fold(0.0, |m, &x| m.max(x))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `gamma_k = 2 / (k + 1)`, halved while the step would lower the objective.
    Harmonic,
    /// Golden-section search for the best `gamma` in `[0, 1]`.
    LineSearch,
    /// Pairwise steps between active vertices with golden-section search.
    #[default]
    Pairwise,
}

/// Which smoothed objective the Frank-Wolfe solver maximises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// [`SmoothedVapor`]: `sqrt(-2 (log(lambda + delta) + delta))` clamped at zero.
    Clamped,
    /// [`ConcaveSmoothedVapor`]: concave on the whole simplex.
    #[default]
    Concave,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop once the Frank-Wolfe gap falls to this value.
    pub gap_tol: f64,
    /// Smoothing `delta`; `None` means `accuracy / (sigma_max * L * S * A)`.
    pub delta: Option<f64>,
    /// Target accuracy used for the automatic smoothing parameter.
    pub accuracy: f64,
    pub lambda_floor: f64,
    pub step: StepRule,
    pub smoothing: Smoothing,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            gap_tol: 1e-5,
            delta: None,
            accuracy: 1e-4,
            lambda_floor: 1e-300,
            step: StepRule::Pairwise,
            smoothing: Smoothing::Concave,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.gap_tol > 0.0
            && self.accuracy > 0.0
            && self.lambda_floor > 0.0
            && self.delta.is_none_or(|d| d > 0.0);
        if ok {
            Ok(())
        } else {
            Err(VaporError::Parameter("solver options must be positive".into()))
        }
    }

    /// Floor `eta = (accuracy / (sigma_max * L))^2` of the square-root argument
    /// in [`ConcaveSmoothedVapor`]; it adds at most `accuracy` to the objective.
    pub fn resolve_eta(&self, sigma_max: f64, horizon: usize) -> f64 {
        let scale = sigma_max.max(1e-12) * horizon.max(1) as f64;
        (self.accuracy / scale).powi(2).max(1e-30)
    }

    /// Smoothing parameter for a problem with the given size and `sigma_max`.
    pub fn resolve_delta(&self, sigma_max: f64, horizon: usize, states: usize, actions: usize) -> f64 {
        self.delta.unwrap_or_else(|| {
            let scale = sigma_max.max(1e-12) * (horizon * states * actions) as f64;
            (self.accuracy / scale).max(1e-15)
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// Smoothed objective after each iteration, starting with the initial point.
    pub objective_trace: Vec<f64>,
    pub gap_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
    pub fw_gap: f64,
    /// Value of the constructed dual point, when one was computed.
    pub dual_value: Option<f64>,
    /// Unsmoothed primal objective at the returned point.
    pub primal_value: f64,
    pub iterations: usize,
    pub max_flow_residual: f64,
    pub converged: bool,
}

impl SolveDiagnostics {
    pub fn duality_gap(&self) -> Option<f64> {
        self.dual_value.map(|d| d - self.primal_value)
    }

    /// Writes `iter,objective,fw_gap,max_flow_residual`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "objective", "fw_gap", "max_flow_residual"])?;
        for (i, ((obj, gap), res)) in self
            .objective_trace
            .iter()
            .skip(1)
            .zip(&self.gap_trace)
            .zip(&self.residual_trace)
            .enumerate()
        {
            w.write_record([
                (i + 1).to_string(),
                obj.to_string(),
                gap.to_string(),
                res.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
