use crate::error::{Result, VaporError};
use crate::mdp::OccupancyMeasure;
use crate::table::CellTable;

use super::frank_wolfe::{ConcaveObjective, FrankWolfe};
use super::{SolveDiagnostics, SolverOptions, VaporProblem};

/// Episode-indexed scale `sqrt(2) * (1 + log(S * L * t))`.
pub fn lite_scale(states: usize, horizon: usize, episode: usize) -> f64 {
    let n = (states.max(1) * horizon.max(1) * episode.max(1)) as f64;
    2f64.sqrt() * (1.0 + n.ln())
}

/// `sum lambda (r + c sigma) + sum_{l,s} mu_l(s) * H_{c sigma}(pi_l(s, .))`
/// where `H_w(p) = -sum w p log p` and `pi` is `lambda` row-normalised.
pub fn vapor_lite_objective(lambda: &CellTable, prob: &VaporProblem, c: f64) -> Result<f64> {
    lambda.check_shape(&prob.p.shape, "occupancy")?;
    Ok(VaporLite { prob, c, floor: 0.0 }.value(lambda))
}

/// VAPOR-lite as a Frank-Wolfe target. `floor` bounds `pi` away from zero
/// inside the gradient's logarithm.
pub struct VaporLite<'a> {
    pub prob: &'a VaporProblem,
    pub c: f64,
    pub floor: f64,
}

impl ConcaveObjective for VaporLite<'_> {
    fn value(&self, lambda: &CellTable) -> f64 {
        let a_n = lambda.actions;
        let mut total = 0.0;
        for ((lam, r), sig) in lambda.layers.iter().zip(&self.prob.r.layers).zip(&self.prob.sigma.layers) {
            for ((row, r), sig) in lam.chunks(a_n).zip(r.chunks(a_n)).zip(sig.chunks(a_n)) {
                let mu: f64 = row.iter().sum();
                for ((&x, &r), &s) in row.iter().zip(r).zip(sig) {
                    total += x * (r + self.c * s);
                    if x > 0.0 && mu > 0.0 {
                        total -= self.c * s * x * (x / mu).ln();
                    }
                }
            }
        }
        total
    }

    fn gradient(&self, lambda: &CellTable, out: &mut CellTable) {
        let a_n = lambda.actions;
        let uniform = 1.0 / a_n as f64;
        for (l, layer) in out.layers.iter_mut().enumerate() {
            for (s, g) in layer.chunks_mut(a_n).enumerate() {
                let row = lambda.row(l, s);
                let r = self.prob.r.row(l, s);
                let sig = self.prob.sigma.row(l, s);
                let mu: f64 = row.iter().sum();
                let pi = |a: usize| if mu > 0.0 { row[a] / mu } else { uniform };
                let mean: f64 = (0..a_n).map(|b| self.c * sig[b] * pi(b)).sum();
                for (a, ga) in g.iter_mut().enumerate() {
                    *ga = r[a] - self.c * sig[a] * pi(a).max(self.floor).ln() + mean;
                }
            }
        }
    }
}

pub fn solve_vapor_lite_tabular(
    prob: &VaporProblem,
    c: f64,
    opts: &SolverOptions,
) -> Result<(OccupancyMeasure, SolveDiagnostics)> {
    prob.validate()?;
    opts.validate()?;
    if !(c > 0.0) || !c.is_finite() {
        return Err(VaporError::Parameter(format!("lite scale must be positive, got {c}")));
    }
    let shape = &prob.p.shape;
    let floor = opts.resolve_delta(prob.sigma_max() * c, shape.horizon(), shape.max_states(), shape.actions);
    let obj = VaporLite { prob, c, floor };
    let fw = FrankWolfe {
        p: &prob.p,
        rho: &prob.rho,
        opts,
    };
    let (lam, mut diag) = fw.run(&obj);
    diag.primal_value = obj.value(&lam);
    Ok((lam, diag))
}
