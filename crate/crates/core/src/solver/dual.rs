use crate::error::{Result, VaporError};
use crate::table::CellTable;

use super::objective::closed_form_tau;
use super::VaporProblem;

/// Mass used in place of zero when matching state occupancies.
const MASS_FLOOR: f64 = 1e-300;
/// Cells with positive uncertainty never get an infinite temperature in the
/// certificate; their `lambda` is capped here before computing `tau`.
const CERT_MAX_LAMBDA: f64 = 1.0 - 1e-9;
const BISECT_ITERS: usize = 200;
/// Newton iterations used to tighten the constructed dual point.
const NEWTON_ITERS: usize = 100;
const TAU_MIN: f64 = 1e-10;
const EXP_CAP: f64 = 700.0;

/// A dual point `(tau, V)` and its objective value, which upper-bounds the
/// VAPOR optimum.
#[derive(Clone, Debug, PartialEq)]
pub struct DualCertificate {
    pub tau: CellTable,
    pub v: Vec<Vec<f64>>,
    pub dual: f64,
}

#[inline]
fn linear_part(prob: &VaporProblem, v: &[Vec<f64>], tau: f64, l: usize, s: usize, a: usize) -> f64 {
    let sigma = prob.sigma.get(l, s, a);
    let mut k = prob.r.get(l, s, a);
    if tau.is_finite() {
        k += sigma * sigma / (2.0 * tau);
    }
    if l + 1 < prob.p.shape.horizon() {
        k += prob.p.expect(l, s, a, &v[l + 1]);
    }
    k
}

/// `sum rho V_1 + sum tau * exp((r + sigma^2/(2 tau) + P V' - V) / tau - 1)`.
///
/// Cells with `tau = inf` are linear: they contribute nothing when
/// `r + P V' <= V` and make the value `+inf` otherwise.
pub fn dual_value(prob: &VaporProblem, tau: &CellTable, v: &[Vec<f64>]) -> Result<f64> {
    let shape = &prob.p.shape;
    tau.check_shape(shape, "tau")?;
    if v.len() != shape.horizon() || v.iter().enumerate().any(|(l, x)| x.len() != shape.states(l)) {
        return Err(VaporError::Shape("value table does not match the layer sizes".into()));
    }
    if tau.iter().any(|&t| !(t > 0.0)) {
        return Err(VaporError::Parameter("tau must be positive".into()));
    }
    let mut total: f64 = prob.rho.iter().zip(&v[0]).map(|(p, x)| p * x).sum();
    for l in 0..shape.horizon() {
        for s in 0..shape.states(l) {
            for a in 0..shape.actions {
                let t = tau.get(l, s, a);
                let excess = linear_part(prob, v, t, l, s, a) - v[l][s];
                if t.is_finite() {
                    total += t * (excess / t - 1.0).exp();
                } else if excess > 0.0 {
                    return Ok(f64::INFINITY);
                }
            }
        }
    }
    Ok(total)
}

/// Builds a dual point from a (near-)optimal occupancy measure.
///
/// `tau` is the pointwise minimiser at `lambda`; `V` is chosen backwards so the
/// occupancy implied by `(tau, V)` has the same state masses as `lambda`.
pub fn certify_dual(lambda: &CellTable, prob: &VaporProblem) -> DualCertificate {
    let shape = &prob.p.shape;
    let capped = lambda.map(|x| x.min(CERT_MAX_LAMBDA));
    let tau = closed_form_tau(&capped, &prob.sigma);
    let mass = lambda.state_sums();
    let mut v: Vec<Vec<f64>> = shape.layer_sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut k = vec![0.0; shape.actions];
    for l in (0..shape.horizon()).rev() {
        for s in 0..shape.states(l) {
            for (a, ka) in k.iter_mut().enumerate() {
                *ka = linear_part(prob, &v, tau.get(l, s, a), l, s, a);
            }
            let mu = mass[l][s].max(MASS_FLOOR);
            let mut floor = f64::NEG_INFINITY;
            let mut anchors = Vec::with_capacity(shape.actions);
            for (a, &ka) in k.iter().enumerate() {
                let t = tau.get(l, s, a);
                if t.is_finite() {
                    anchors.push((ka - t * (1.0 + mu.ln()), t));
                } else {
                    floor = floor.max(ka);
                }
            }
            let matched = if anchors.is_empty() {
                f64::NEG_INFINITY
            } else {
                match_mass(&anchors)
            };
            v[l][s] = matched.max(floor);
        }
    }
    let dual = dual_value(prob, &tau, &v).unwrap_or(f64::INFINITY);
    refine(prob, DualCertificate { tau, v, dual })
}

/// Minimiser over `tau > 0` of `tau * exp((k0 + sigma^2 / (2 tau) - V) / tau - 1)`
/// where `d = V - k0`.
fn best_tau(sigma: f64, d: f64) -> f64 {
    let root = (d * d + 4.0 * sigma * sigma).sqrt();
    let t = if d > 0.0 {
        2.0 * sigma * sigma / (d + root)
    } else {
        (root - d) / 2.0
    };
    t.max(TAU_MIN)
}

fn capped_exp(x: f64) -> f64 {
    x.min(EXP_CAP).exp()
}

/// Per-cell dual term minimised over `tau`, as a function of
/// `u = r + P V' - V`: returns `(tau, value, lambda, d lambda / du)`.
fn cell_terms(sigma: f64, u: f64) -> (f64, f64, f64, f64) {
    let tau = best_tau(sigma, -u);
    let lam = capped_exp(u / tau + sigma * sigma / (2.0 * tau * tau) - 1.0);
    let curv = if sigma > 0.0 { lam * sigma * sigma / (tau * (tau * tau + sigma * sigma)) } else { 0.0 };
    (tau, tau * lam, lam, curv)
}

/// Damped Newton descent on the dual with `tau` eliminated in closed form.
///
/// What remains is a smooth convex function of `V` whose gradient is the flow
/// residual of the implied occupancy. Every iterate is a dual point, so the
/// smallest value seen is kept.
fn refine(prob: &VaporProblem, start: DualCertificate) -> DualCertificate {
    let shape = &prob.p.shape;
    let horizon = shape.horizon();
    let a_n = shape.actions;
    let mut offset = Vec::with_capacity(horizon + 1);
    offset.push(0);
    for l in 0..horizon {
        offset.push(offset[l] + shape.states(l));
    }
    let n = offset[horizon];
    let u_of = |v: &[f64], l: usize, s: usize, a: usize| {
        let mut u = prob.r.get(l, s, a) - v[offset[l] + s];
        if l + 1 < horizon {
            u += prob.p.expect(l, s, a, &v[offset[l + 1]..offset[l + 2]]);
        }
        u
    };
    let value = |v: &[f64]| {
        let mut f: f64 = prob.rho.iter().zip(v).map(|(p, x)| p * x).sum();
        for l in 0..horizon {
            for s in 0..shape.states(l) {
                for a in 0..a_n {
                    f += cell_terms(prob.sigma.get(l, s, a), u_of(v, l, s, a)).1;
                }
            }
        }
        f
    };
    let mut v: Vec<f64> = start.v.concat();
    let mut f = value(&v);
    if !f.is_finite() {
        v = vec![0.0; n];
        f = value(&v);
    }
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    for _ in 0..NEWTON_ITERS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        grad[..prob.rho.len()].copy_from_slice(&prob.rho);
        for l in 0..horizon {
            for s in 0..shape.states(l) {
                let i = offset[l] + s;
                for a in 0..a_n {
                    let (_, _, lam, curv) = cell_terms(prob.sigma.get(l, s, a), u_of(&v, l, s, a));
                    // d u / d V = -e_i + P(. | s, a) on the next layer.
                    grad[i] -= lam;
                    hess[i * n + i] += curv;
                    if l + 1 < horizon {
                        let row = prob.p.row(l, s, a);
                        let o = offset[l + 1];
                        for (j, &pj) in row.iter().enumerate() {
                            if pj == 0.0 {
                                continue;
                            }
                            grad[o + j] += pj * lam;
                            hess[i * n + o + j] -= curv * pj;
                            hess[(o + j) * n + i] -= curv * pj;
                            for (k, &pk) in row.iter().enumerate() {
                                hess[(o + j) * n + o + k] += curv * pj * pk;
                            }
                        }
                    }
                }
            }
        }
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm < 1e-14 {
            break;
        }
        let diag_max = (0..n).map(|i| hess[i * n + i]).fold(0.0f64, f64::max);
        let step = match cholesky_solve(&mut hess, &grad, n, 1e-12 * (1.0 + diag_max)) {
            Some(x) => x,
            None => break,
        };
        let slope: f64 = -grad.iter().zip(&step).map(|(g, d)| g * d).sum::<f64>();
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = v.iter().zip(&step).map(|(x, d)| x - t * d).collect();
            let ft = value(&trial);
            if ft <= f + 1e-4 * t * slope {
                moved = ft < f;
                v = trial;
                f = ft;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let v: Vec<Vec<f64>> = (0..horizon).map(|l| v[offset[l]..offset[l + 1]].to_vec()).collect();
    let flat: Vec<f64> = v.concat();
    let tau = CellTable::from_fn(shape, |l, s, a| cell_terms(prob.sigma.get(l, s, a), u_of(&flat, l, s, a)).0);
    let dual = dual_value(prob, &tau, &v).unwrap_or(f64::INFINITY);
    if dual < start.dual {
        DualCertificate { tau, v, dual }
    } else {
        start
    }
}

/// Solves `(H + ridge I) x = g` in place by Cholesky; `None` if not positive.
fn cholesky_solve(h: &mut [f64], g: &[f64], n: usize, ridge: f64) -> Option<Vec<f64>> {
    for i in 0..n {
        h[i * n + i] += ridge;
    }
    for j in 0..n {
        let mut d = h[j * n + j];
        for k in 0..j {
            d -= h[j * n + k] * h[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        h[j * n + j] = d;
        for i in j + 1..n {
            let mut x = h[i * n + j];
            for k in 0..j {
                x -= h[i * n + k] * h[j * n + k];
            }
            h[i * n + j] = x / d;
        }
    }
    let mut y = g.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= h[i * n + k] * y[k];
        }
        y[i] /= h[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= h[k * n + i] * y[k];
        }
        y[i] /= h[i * n + i];
    }
    Some(y)
}

/// Solves `sum_a exp((c_a - V) / t_a) = 1` for `V`.
fn match_mass(anchors: &[(f64, f64)]) -> f64 {
    let n = anchors.len() as f64;
    let mut lo = anchors.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
    let mut hi = anchors
        .iter()
        .map(|(c, t)| c + t * n.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let f = |x: f64| anchors.iter().map(|(c, t)| ((c - x) / t).exp()).sum::<f64>() - 1.0;
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::objective::objective_unchecked;
    use crate::solver::{solve_frank_wolfe, SolverOptions};
    use crate::table::{Shape, Transitions};

    fn primal_dual_gap(lambda: &CellTable, prob: &VaporProblem) -> f64 {
        certify_dual(lambda, prob).dual - objective_unchecked(lambda, prob, 1e-300)
    }

    #[test]
    fn symmetric_bandit_certificate_is_tight() {
        let shape = Shape::new(vec![1], 2);
        let prob = VaporProblem::new(
            Transitions::zeros(&shape),
            vec![1.0],
            CellTable::zeros(&shape),
            CellTable::filled(&shape, 1.0),
        )
        .unwrap();
        let lam = CellTable { actions: 2, layers: vec![vec![0.5, 0.5]] };
        let gap = primal_dual_gap(&lam, &prob);
        assert!(gap.abs() < 1e-9, "gap {gap}");
    }

    #[test]
    fn zero_problem_dual_is_cells_over_e() {
        let shape = Shape::new(vec![2, 3], 2);
        let prob = VaporProblem::new(
            Transitions::deterministic(&shape, |_, s, a| (s + a) % 3),
            vec![0.5, 0.5],
            CellTable::zeros(&shape),
            CellTable::zeros(&shape),
        )
        .unwrap();
        let v: Vec<Vec<f64>> = vec![vec![0.0; 2], vec![0.0; 3]];
        let d = dual_value(&prob, &CellTable::filled(&shape, 1.0), &v).unwrap();
        assert!((d - 10.0 * (-1.0f64).exp()).abs() < 1e-12, "{d}");
    }

    #[test]
    fn any_dual_point_bounds_the_solution() {
        let shape = Shape::new(vec![1, 2], 2);
        let p = Transitions::deterministic(&shape, |_, _, a| a);
        let prob = VaporProblem::new(
            p,
            vec![1.0],
            CellTable::from_fn(&shape, |l, s, a| 0.1 * (l + s + a) as f64),
            CellTable::filled(&shape, 0.5),
        )
        .unwrap();
        let (_, diag) = solve_frank_wolfe(&prob, &SolverOptions::default()).unwrap();
        for scale in [0.3, 1.0, 3.0] {
            let tau = CellTable::filled(&shape, scale);
            for shift in [-0.5, 0.0, 0.7] {
                let v = vec![vec![1.0 + shift], vec![0.5 + shift, 0.2]];
                assert!(dual_value(&prob, &tau, &v).unwrap() >= diag.primal_value - 1e-9);
            }
        }
        assert!(diag.duality_gap().unwrap() >= -1e-9);
        assert!(diag.duality_gap().unwrap() < 1e-3);
    }

    #[test]
    fn linear_cells_are_constraints() {
        let shape = Shape::new(vec![1], 2);
        let prob = VaporProblem::new(
            Transitions::zeros(&shape),
            vec![1.0],
            CellTable { actions: 2, layers: vec![vec![0.2, 0.5]] },
            CellTable::zeros(&shape),
        )
        .unwrap();
        let tau = CellTable::filled(&shape, f64::INFINITY);
        assert_eq!(dual_value(&prob, &tau, &[vec![0.5]]).unwrap(), 0.5);
        assert!(dual_value(&prob, &tau, &[vec![0.4]]).unwrap().is_infinite());
        let lam = CellTable { actions: 2, layers: vec![vec![0.0, 1.0]] };
        assert_eq!(certify_dual(&lam, &prob).dual, 0.5);
    }
}
