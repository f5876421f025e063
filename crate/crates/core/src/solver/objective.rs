use crate::error::{Result, VaporError};
use crate::table::CellTable;

use super::frank_wolfe::ConcaveObjective;
use super::VaporProblem;

/// Values of `lambda` at or above this are treated as 1 by [`closed_form_tau`].
const ONE_MINUS: f64 = 1.0 - 1e-12;

#[inline]
fn optimism(lam: f64, sigma: f64, floor: f64) -> f64 {
    if lam <= 0.0 || sigma == 0.0 {
        return 0.0;
    }
    let inner = -2.0 * lam.clamp(floor, 1.0).ln();
    lam * sigma * inner.max(0.0).sqrt()
}

/// `sum lambda * (r + sigma * sqrt(-2 log lambda))` with `0 * sqrt(-2 log 0) = 0`.
pub fn vapor_objective(lambda: &CellTable, prob: &VaporProblem) -> Result<f64> {
    lambda.check_shape(&prob.p.shape, "occupancy")?;
    Ok(objective_unchecked(lambda, prob, 1e-300))
}

pub(crate) fn objective_unchecked(lambda: &CellTable, prob: &VaporProblem, floor: f64) -> f64 {
    lambda
        .iter()
        .zip(prob.r.iter())
        .zip(prob.sigma.iter())
        .map(|((&x, &r), &s)| x * r + optimism(x, s, floor))
        .sum()
}

/// `lambda . (r + sigma^2 / (2 tau)) - sum tau * lambda * log lambda`.
///
/// Infinite `tau` marks cells whose entropy weight is irrelevant; they
/// contribute `lambda * r`.
pub fn vapor_objective_tau(lambda: &CellTable, tau: &CellTable, prob: &VaporProblem) -> Result<f64> {
    lambda.check_shape(&prob.p.shape, "occupancy")?;
    tau.check_shape(&prob.p.shape, "tau")?;
    if tau.iter().any(|&t| !(t > 0.0)) {
        return Err(VaporError::Parameter("tau must be positive".into()));
    }
    let mut total = 0.0;
    for (((&x, &t), &r), &s) in lambda.iter().zip(tau.iter()).zip(prob.r.iter()).zip(prob.sigma.iter()) {
        total += x * r;
        if t.is_finite() {
            total += x * s * s / (2.0 * t);
            if x > 0.0 {
                total -= t * x * x.ln();
            }
        }
    }
    Ok(total)
}

/// Pointwise minimiser `tau = sigma / sqrt(-2 log lambda)`.
///
/// Cells with `sigma = 0` or `lambda >= 1 - 1e-12` get the `+inf` sentinel.
pub fn closed_form_tau(lambda: &CellTable, sigma: &CellTable) -> CellTable {
    lambda.zip_map(sigma, |x, s| {
        if s == 0.0 || x >= ONE_MINUS {
            f64::INFINITY
        } else {
            s / (-2.0 * x.max(1e-300).ln()).sqrt()
        }
    })
}

/// Smoothed objective `sum lambda (r + sigma sqrt(-2 (log(lambda + delta) + delta)))`.
pub fn smoothed_objective(lambda: &CellTable, prob: &VaporProblem, delta: f64) -> f64 {
    lambda
        .iter()
        .zip(prob.r.iter())
        .zip(prob.sigma.iter())
        .map(|((&x, &r), &s)| {
            let inner = -2.0 * ((x + delta).ln() + delta);
            x * r + if inner > 0.0 { x * s * inner.sqrt() } else { 0.0 }
        })
        .sum()
}

/// Elementwise derivative of [`smoothed_objective`]; equal to `r` where the
/// square-root argument is clamped at zero.
pub fn smoothed_gradient(lambda: &CellTable, prob: &VaporProblem, delta: f64) -> Result<CellTable> {
    if !(delta > 0.0) {
        return Err(VaporError::Parameter("delta must be positive".into()));
    }
    lambda.check_shape(&prob.p.shape, "occupancy")?;
    let mut out = lambda.clone();
    SmoothedVapor { prob, delta }.gradient(lambda, &mut out);
    Ok(out)
}

/// The smoothed VAPOR objective as a Frank-Wolfe target.
pub struct SmoothedVapor<'a> {
    pub prob: &'a VaporProblem,
    pub delta: f64,
}

impl ConcaveObjective for SmoothedVapor<'_> {
    fn value(&self, lambda: &CellTable) -> f64 {
        smoothed_objective(lambda, self.prob, self.delta)
    }

    fn cell_value(&self, l: usize, i: usize, x: f64) -> Option<f64> {
        let (r, s) = (self.prob.r.layers[l][i], self.prob.sigma.layers[l][i]);
        let inner = -2.0 * ((x + self.delta).ln() + self.delta);
        Some(x * r + if inner > 0.0 { x * s * inner.sqrt() } else { 0.0 })
    }

    fn gradient(&self, lambda: &CellTable, out: &mut CellTable) {
        let d = self.delta;
        for (((g, &x), &r), &s) in out
            .iter_mut()
            .zip(lambda.iter())
            .zip(self.prob.r.iter())
            .zip(self.prob.sigma.iter())
        {
            let inner = -2.0 * ((x + d).ln() + d);
            *g = if inner > 0.0 && s > 0.0 {
                let root = inner.sqrt();
                r + s * root - s * x / ((x + d) * root)
            } else {
                r
            };
        }
    }
}

/// Concave smoothing used by the solver by default:
/// `lambda (r + sigma sqrt(eta - 2 log((lambda + delta) / (1 + delta))))`.
///
/// The square-root argument stays at least `eta` on `[0, 1]`, so no clamp is
/// needed and the slope at `lambda = 1` is steep but finite. The clamped form
/// above has a convex kink where the clamp starts, which can trap the solver at
/// high-mass vertices.
pub struct ConcaveSmoothedVapor<'a> {
    pub prob: &'a VaporProblem,
    pub delta: f64,
    pub eta: f64,
}

impl ConcaveSmoothedVapor<'_> {
    #[inline]
    fn arg(&self, x: f64) -> f64 {
        let d = self.delta;
        (self.eta - 2.0 * ((x + d) / (1.0 + d)).ln()).max(self.eta)
    }
}

impl ConcaveObjective for ConcaveSmoothedVapor<'_> {
    fn value(&self, lambda: &CellTable) -> f64 {
        lambda
            .iter()
            .zip(self.prob.r.iter())
            .zip(self.prob.sigma.iter())
            .map(|((&x, &r), &s)| x * r + if s > 0.0 { x * s * self.arg(x).sqrt() } else { 0.0 })
            .sum()
    }

    fn cell_value(&self, l: usize, i: usize, x: f64) -> Option<f64> {
        let (r, s) = (self.prob.r.layers[l][i], self.prob.sigma.layers[l][i]);
        Some(x * r + if s > 0.0 { x * s * self.arg(x).sqrt() } else { 0.0 })
    }

    fn gradient(&self, lambda: &CellTable, out: &mut CellTable) {
        for (((g, &x), &r), &s) in out
            .iter_mut()
            .zip(lambda.iter())
            .zip(self.prob.r.iter())
            .zip(self.prob.sigma.iter())
        {
            *g = if s > 0.0 {
                let root = self.arg(x).sqrt();
                r + s * root - s * x / ((x + self.delta) * root)
            } else {
                r
            };
        }
    }
}
