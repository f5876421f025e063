use crate::error::{Result, VaporError};
use crate::mdp::OccupancyMeasure;
use crate::table::{CellTable, Transitions};

use super::frank_wolfe::{ConcaveObjective, FrankWolfe};
use super::{SolveDiagnostics, SolverOptions};

/// `-sum w lambda log lambda` with `0 log 0 = 0`.
pub fn weighted_entropy(lambda: &CellTable, weights: &CellTable) -> f64 {
    lambda
        .iter()
        .zip(weights.iter())
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &w)| -w * x * x.ln())
        .sum()
}

/// Smoothed weighted entropy `-sum w lambda log(lambda + delta)`.
pub struct WeightedEntropy<'a> {
    pub weights: &'a CellTable,
    pub delta: f64,
}

impl ConcaveObjective for WeightedEntropy<'_> {
    fn value(&self, lambda: &CellTable) -> f64 {
        lambda
            .iter()
            .zip(self.weights.iter())
            .map(|(&x, &w)| -w * x * (x + self.delta).ln())
            .sum()
    }

    fn gradient(&self, lambda: &CellTable, out: &mut CellTable) {
        let d = self.delta;
        for ((g, &x), &w) in out.iter_mut().zip(lambda.iter()).zip(self.weights.iter()) {
            *g = -w * ((x + d).ln() + x / (x + d));
        }
    }

    fn cell_value(&self, l: usize, i: usize, x: f64) -> Option<f64> {
        Some(-self.weights.layers[l][i] * x * (x + self.delta).ln())
    }
}

/// Maximum weighted-entropy occupancy measure; used for reward-free coverage.
pub fn solve_weighted_max_entropy(
    weights: &CellTable,
    p: &Transitions,
    rho: &[f64],
    opts: &SolverOptions,
) -> Result<(OccupancyMeasure, SolveDiagnostics)> {
    opts.validate()?;
    let shape = &p.shape;
    weights.check_shape(shape, "weights")?;
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(VaporError::Parameter("entropy weights must be finite and >= 0".into()));
    }
    if rho.len() != shape.states(0) {
        return Err(VaporError::Shape("rho length".into()));
    }
    let w_max = weights.iter().fold(0.0f64, |m, &w| m.max(w));
    let delta = opts.resolve_delta(w_max, shape.horizon(), shape.max_states(), shape.actions);
    let obj = WeightedEntropy { weights, delta };
    let fw = FrankWolfe { p, rho, opts };
    let (lam, mut diag) = fw.run(&obj);
    diag.primal_value = weighted_entropy(&lam, weights);
    Ok((lam, diag))
}
