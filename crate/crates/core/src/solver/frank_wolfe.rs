use crate::error::Result;
use crate::mdp::{flow_residual, occupancy_unchecked, optimal_values, OccupancyMeasure, Policy};
use crate::table::{CellTable, Transitions};

use super::dual::certify_dual;
use super::objective::{objective_unchecked, ConcaveSmoothedVapor, SmoothedVapor};
use super::{Smoothing, SolveDiagnostics, SolverOptions, StepRule, VaporProblem};

/// A differentiable concave function of an occupancy measure.
pub trait ConcaveObjective {
    fn value(&self, lambda: &CellTable) -> f64;
    fn gradient(&self, lambda: &CellTable, out: &mut CellTable);

    /// Contribution of cell `i` of layer `l` at occupancy `x` when the value
    /// is a sum over cells; `None` otherwise. Separable objectives get cheap
    /// line searches restricted to the cells a step changes.
    fn cell_value(&self, _l: usize, _i: usize, _x: f64) -> Option<f64> {
        None
    }
}

/// Frank-Wolfe over the flow polytope of `(p, rho)`.
///
/// The linear maximisation step is backward induction on the gradient reward
/// followed by the forward flow recursion of the greedy policy.
pub struct FrankWolfe<'a> {
    pub p: &'a Transitions,
    pub rho: &'a [f64],
    pub opts: &'a SolverOptions,
}

const GOLDEN_ITERS: usize = 48;
/// Active weights below this may be dropped in one step.
const DROP_WEIGHT: f64 = 1e-9;
/// Relative objective loss tolerated by a drop step (rounding only).
const DROP_SLACK: f64 = 1e-14;

/// A deterministic-policy vertex stored by its non-zero cells.
struct Vertex {
    key: Vec<u16>,
    cells: Vec<(u32, u32, f64)>,
    weight: f64,
}

impl Vertex {
    fn dot(&self, g: &CellTable) -> f64 {
        self.cells.iter().map(|&(l, i, x)| g.layers[l as usize][i as usize] * x).sum()
    }
}

fn vertex_of(lam: &CellTable, pi: &CellTable) -> (Vec<u16>, Vec<(u32, u32, f64)>) {
    let a_n = pi.actions;
    let key = pi
        .layers
        .iter()
        .flat_map(|layer| layer.chunks(a_n).map(|row| row.iter().position(|&x| x == 1.0).unwrap_or(0) as u16))
        .collect();
    let mut cells = Vec::new();
    for (l, layer) in lam.layers.iter().enumerate() {
        for (i, &x) in layer.iter().enumerate() {
            if x != 0.0 {
                cells.push((l as u32, i as u32, x));
            }
        }
    }
    (key, cells)
}

impl FrankWolfe<'_> {
    pub fn run<O: ConcaveObjective>(&self, obj: &O) -> (OccupancyMeasure, SolveDiagnostics) {
        match self.opts.step {
            StepRule::Pairwise => self.run_pairwise(obj),
            _ => self.run_vanilla(obj),
        }
    }

    fn lmo(&self, grad: &CellTable) -> (CellTable, CellTable) {
        let (_, pi) = optimal_values(&self.p.shape, self.p, grad);
        let vertex = occupancy_unchecked(self.p, self.rho, &pi).0;
        (vertex, pi.0)
    }

    /// Classic Frank-Wolfe from the uniform-policy occupancy.
    fn run_vanilla<O: ConcaveObjective>(&self, obj: &O) -> (OccupancyMeasure, SolveDiagnostics) {
        let shape = &self.p.shape;
        let mut lam = occupancy_unchecked(self.p, self.rho, &Policy::uniform(shape)).0;
        let mut grad = CellTable::zeros(shape);
        let mut trial = lam.clone();
        let mut diag = SolveDiagnostics::default();
        let mut current = obj.value(&lam);
        diag.objective_trace.push(current);
        diag.fw_gap = f64::INFINITY;

        for k in 1..=self.opts.max_iters {
            obj.gradient(&lam, &mut grad);
            let (vertex, _) = self.lmo(&grad);
            let gap: f64 = grad
                .iter()
                .zip(vertex.iter().zip(lam.iter()))
                .map(|(g, (v, x))| g * (v - x))
                .sum();
            diag.fw_gap = gap;
            diag.iterations = k;
            if gap <= self.opts.gap_tol {
                diag.converged = true;
                break;
            }
            let eval = |gamma: f64, buf: &mut CellTable| {
                for ((b, &x), &v) in buf.iter_mut().zip(lam.iter()).zip(vertex.iter()) {
                    *b = (1.0 - gamma) * x + gamma * v;
                }
                obj.value(buf)
            };
            let (gamma, value) = match self.opts.step {
                StepRule::Harmonic => {
                    let mut gamma = 2.0 / (k as f64 + 1.0);
                    let mut value = eval(gamma, &mut trial);
                    let mut halvings = 0;
                    while value < current && halvings < 60 {
                        gamma *= 0.5;
                        value = eval(gamma, &mut trial);
                        halvings += 1;
                    }
                    if value < current {
                        (0.0, current)
                    } else {
                        (gamma, value)
                    }
                }
                _ => golden_section(&mut |g| eval(g, &mut trial), 1.0, current),
            };
            if gamma > 0.0 {
                for (x, &v) in lam.iter_mut().zip(vertex.iter()) {
                    *x = (1.0 - gamma) * *x + gamma * v;
                }
                current = value;
            }
            diag.objective_trace.push(current);
            diag.gap_trace.push(gap);
            diag.residual_trace.push(flow_residual(&lam, self.p, self.rho));
        }
        diag.max_flow_residual = flow_residual(&lam, self.p, self.rho);
        (OccupancyMeasure(lam), diag)
    }

    /// Pairwise Frank-Wolfe: mass moves from the worst active vertex to the
    /// greedy vertex, with an exact line search on the transfer.
    fn run_pairwise<O: ConcaveObjective>(&self, obj: &O) -> (OccupancyMeasure, SolveDiagnostics) {
        let shape = &self.p.shape;
        let mut grad = CellTable::zeros(shape);
        let uniform = occupancy_unchecked(self.p, self.rho, &Policy::uniform(shape)).0;
        obj.gradient(&uniform, &mut grad);
        let (mut lam, pi) = self.lmo(&grad);
        let (key, cells) = vertex_of(&lam, &pi);
        let mut active = vec![Vertex { key, cells, weight: 1.0 }];
        let mut trial = lam.clone();
        let mut diag = SolveDiagnostics::default();
        let mut current = obj.value(&lam);
        diag.objective_trace.push(current);
        diag.fw_gap = f64::INFINITY;
        let separable = obj.cell_value(0, 0, 0.0).is_some();
        let mut support: Vec<(u32, u32, f64)> = Vec::new();
        let mut line: Vec<(u32, u32, f64, f64, f64)> = Vec::new();

        for k in 1..=self.opts.max_iters {
            obj.gradient(&lam, &mut grad);
            let (vertex, pi) = self.lmo(&grad);
            let gap: f64 = grad
                .iter()
                .zip(vertex.iter().zip(lam.iter()))
                .map(|(g, (v, x))| g * (v - x))
                .sum();
            diag.fw_gap = gap;
            diag.iterations = k;
            if gap <= self.opts.gap_tol {
                diag.converged = true;
                break;
            }
            let (key, cells) = vertex_of(&vertex, &pi);
            let toward = match active.iter().position(|v| v.key == key) {
                Some(i) => i,
                None => {
                    active.push(Vertex { key, cells, weight: 0.0 });
                    active.len() - 1
                }
            };
            let away = active
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.dot(&grad)))
                .fold((toward, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best });
            let mut moved = false;
            if away.0 != toward {
                let max_step = active[away.0].weight;
                let (to, from) = (&active[toward], &active[away.0]);
                let ascent = to.dot(&grad) - from.dot(&grad);
                if separable {
                    // (layer, cell, lambda, direction, value at lambda) on the
                    // union of both supports.
                    support.clear();
                    for &(l, i, x) in &to.cells {
                        support.push((l, i, x));
                    }
                    for &(l, i, x) in &from.cells {
                        support.push((l, i, -x));
                    }
                    support.sort_unstable_by_key(|c| (c.0, c.1));
                    line.clear();
                    for &(l, i, d) in support.iter() {
                        match line.last_mut() {
                            Some(last) if last.0 == l && last.1 == i => last.3 += d,
                            _ => line.push((l, i, lam.layers[l as usize][i as usize], d, 0.0)),
                        }
                    }
                    line.retain(|c| c.3 != 0.0);
                    for c in line.iter_mut() {
                        c.4 = obj.cell_value(c.0 as usize, c.1 as usize, c.2).unwrap_or(0.0);
                    }
                }
                let base: f64 = line.iter().map(|c| c.4).sum();
                let mut eval = |gamma: f64| {
                    if separable {
                        let moved: f64 = line
                            .iter()
                            .map(|&(l, i, x, d, _)| {
                                obj.cell_value(l as usize, i as usize, (x + gamma * d).max(0.0)).unwrap_or(0.0)
                            })
                            .sum();
                        return current + (moved - base);
                    }
                    trial.clone_from(&lam);
                    for &(l, i, x) in &to.cells {
                        trial.layers[l as usize][i as usize] += gamma * x;
                    }
                    for &(l, i, x) in &from.cells {
                        let c = &mut trial.layers[l as usize][i as usize];
                        *c = (*c - gamma * x).max(0.0);
                    }
                    obj.value(&trial)
                };
                let (mut gamma, mut value) = golden_section(&mut eval, max_step, current);
                if gamma == 0.0 && ascent > 0.0 && max_step < DROP_WEIGHT {
                    // Drop step: the transfer is below rounding, so move the
                    // whole weight whenever that does not visibly hurt.
                    let v = eval(max_step);
                    if v >= current - DROP_SLACK * current.abs().max(1.0) {
                        (gamma, value) = (max_step, v.max(current));
                    }
                }
                if gamma > 0.0 {
                    for &(l, i, x) in &active[toward].cells {
                        lam.layers[l as usize][i as usize] += gamma * x;
                    }
                    for &(l, i, x) in &active[away.0].cells {
                        let c = &mut lam.layers[l as usize][i as usize];
                        *c = (*c - gamma * x).max(0.0);
                    }
                    active[toward].weight += gamma;
                    active[away.0].weight -= gamma;
                    current = value;
                    moved = true;
                }
            }
            if !moved {
                // Plain Frank-Wolfe step towards the greedy vertex.
                let mut eval = |gamma: f64| {
                    for ((b, &x), &v) in trial.iter_mut().zip(lam.iter()).zip(vertex.iter()) {
                        *b = (1.0 - gamma) * x + gamma * v;
                    }
                    obj.value(&trial)
                };
                let (gamma, value) = golden_section(&mut eval, 1.0, current);
                if gamma > 0.0 {
                    for (x, &v) in lam.iter_mut().zip(vertex.iter()) {
                        *x = (1.0 - gamma) * *x + gamma * v;
                    }
                    for v in active.iter_mut() {
                        v.weight *= 1.0 - gamma;
                    }
                    active[toward].weight += gamma;
                    current = value;
                }
            }
            active.retain(|v| v.weight > 1e-15);
            if active.len() == 1 {
                // Rebuild from the single vertex to shed accumulated rounding.
                let only = &mut active[0];
                only.weight = 1.0;
                lam.iter_mut().for_each(|x| *x = 0.0);
                for &(l, i, x) in &only.cells {
                    lam.layers[l as usize][i as usize] = x;
                }
                current = obj.value(&lam);
            }
            diag.objective_trace.push(current);
            diag.gap_trace.push(gap);
            diag.residual_trace.push(flow_residual(&lam, self.p, self.rho));
        }
        diag.max_flow_residual = flow_residual(&lam, self.p, self.rho);
        (OccupancyMeasure(lam), diag)
    }
}

/// Maximises a 1-D concave function on `[0, hi]`; never returns a value below
/// `at_zero` (the value at `gamma = 0`).
fn golden_section(f: &mut impl FnMut(f64) -> f64, hi: f64, at_zero: f64) -> (f64, f64) {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let at_hi = f(hi);
    let (mut lo, mut hi_b) = (0.0f64, hi);
    let mut x1 = hi_b - phi * (hi_b - lo);
    let mut x2 = lo + phi * (hi_b - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..GOLDEN_ITERS {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi_b - lo);
            f2 = f(x2);
        } else {
            hi_b = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi_b - phi * (hi_b - lo);
            f1 = f(x1);
        }
    }
    let mut best = (0.0, at_zero);
    for cand in [(x1, f1), (x2, f2), (hi, at_hi)] {
        if cand.1 > best.1 {
            best = cand;
        }
    }
    best
}

/// Solves the smoothed VAPOR program and certifies the result with a dual point.
pub fn solve_frank_wolfe(prob: &VaporProblem, opts: &SolverOptions) -> Result<(OccupancyMeasure, SolveDiagnostics)> {
    prob.validate()?;
    opts.validate()?;
    let shape = &prob.p.shape;
    let delta = opts.resolve_delta(prob.sigma_max(), shape.horizon(), shape.max_states(), shape.actions);
    let fw = FrankWolfe {
        p: &prob.p,
        rho: &prob.rho,
        opts,
    };
    let (lam, mut diag) = match opts.smoothing {
        Smoothing::Clamped => fw.run(&SmoothedVapor { prob, delta }),
        Smoothing::Concave => {
            let eta = opts.resolve_eta(prob.sigma_max(), shape.horizon());
            fw.run(&ConcaveSmoothedVapor { prob, delta, eta })
        }
    };
    diag.primal_value = objective_unchecked(&lam, prob, opts.lambda_floor);
    diag.dual_value = Some(certify_dual(&lam, prob).dual);
    Ok((lam, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{backward_induction, check_flow, LayeredMdp};
    use crate::table::Shape;

    fn bandit() -> VaporProblem {
        let shape = Shape::new(vec![1], 2);
        VaporProblem::new(
            Transitions::zeros(&shape),
            vec![1.0],
            CellTable::zeros(&shape),
            CellTable::filled(&shape, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn symmetric_bandit_converges_to_the_centre() {
        let (lam, diag) = solve_frank_wolfe(&bandit(), &SolverOptions::default()).unwrap();
        assert!((lam.get(0, 0, 0) - 0.5).abs() < 1e-3);
        assert!((diag.primal_value - 1.17741).abs() < 1e-4);
    }

    #[test]
    fn harmonic_steps_are_monotone() {
        let opts = SolverOptions {
            step: StepRule::Harmonic,
            max_iters: 300,
            ..Default::default()
        };
        let (lam, diag) = solve_frank_wolfe(&bandit(), &opts).unwrap();
        for w in diag.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert!((lam.get(0, 0, 0) - 0.5).abs() < 1e-2);
    }

    #[test]
    fn zero_uncertainty_gives_the_greedy_vertex() {
        let shape = Shape::new(vec![1, 2, 2], 2);
        let p = Transitions::deterministic(&shape, |_, s, a| (s + a) % 2);
        let r = CellTable::from_fn(&shape, |l, s, a| ((l * 7 + s * 3 + a * 5) % 4) as f64 * 0.25);
        let prob = VaporProblem::new(p.clone(), vec![1.0], r.clone(), CellTable::zeros(&shape)).unwrap();
        let (lam, diag) = solve_frank_wolfe(&prob, &SolverOptions::default()).unwrap();
        let mdp = LayeredMdp::new(shape, p.clone(), r.clone(), vec![1.0], 0.0).unwrap();
        let (vt, _) = backward_induction(&mdp, None).unwrap();
        assert!((diag.primal_value - vt.initial_value(&[1.0])).abs() < 1e-9);
        assert!(check_flow(&lam, &p, &[1.0], 1e-8).unwrap().ok);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let (_, diag) = solve_frank_wolfe(&bandit(), &SolverOptions::default()).unwrap();
        let mut buf = Vec::new();
        diag.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,objective,fw_gap,max_flow_residual"));
        assert_eq!(text.lines().count(), diag.gap_trace.len() + 1);
    }
}
