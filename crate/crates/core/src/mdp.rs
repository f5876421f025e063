//! Finite layered MDPs, exact dynamic programming and occupancy-measure algebra.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaporError};
use crate::table::{CellTable, Shape, Transitions};

/// Tolerance used when validating probability rows.
pub const PROB_TOL: f64 = 1e-9;
/// Rows whose total mass is below this are treated as unvisited.
pub const ZERO_MASS: f64 = 1e-300;

/// A finite-horizon, time-inhomogeneous MDP whose states are partitioned by step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredMdp {
    pub shape: Shape,
    pub transitions: Transitions,
    /// Mean reward `r_l(s, a)`.
    pub rewards: CellTable,
    /// Initial distribution over layer-0 states.
    pub rho: Vec<f64>,
    /// Standard deviation of additive Gaussian observation noise.
    pub reward_noise_std: f64,
}

/// State-action visitation probabilities `lambda_l(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure(pub CellTable);

/// Per-layer state-conditional action distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy(pub CellTable);

macro_rules! table_newtype {
    ($t:ty) => {
        impl Deref for $t {
            type Target = CellTable;
            fn deref(&self) -> &CellTable {
                &self.0
            }
        }
        impl DerefMut for $t {
            fn deref_mut(&mut self) -> &mut CellTable {
                &mut self.0
            }
        }
    };
}
table_newtype!(OccupancyMeasure);
table_newtype!(Policy);

#[derive(Clone, Debug, PartialEq)]
pub struct ValueTables {
    pub q: CellTable,
    /// `v[l][s]`; `V_{L+1} = 0` is implicit.
    pub v: Vec<Vec<f64>>,
}

impl ValueTables {
    /// `sum_s rho(s) V_1(s)`.
    pub fn initial_value(&self, rho: &[f64]) -> f64 {
        rho.iter().zip(&self.v[0]).map(|(p, v)| p * v).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowCheck {
    pub ok: bool,
    pub max_residual: f64,
}

impl Policy {
    pub fn uniform(shape: &Shape) -> Self {
        Policy(CellTable::filled(shape, 1.0 / shape.actions as f64))
    }

    /// Deterministic policy from an action index per `(l, s)`.
    pub fn deterministic(shape: &Shape, choice: impl Fn(usize, usize) -> usize) -> Self {
        Policy(CellTable::from_fn(shape, |l, s, a| {
            if choice(l, s) == a {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Largest deviation of any row sum from one, or a negative entry.
    pub fn max_row_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for l in 0..self.horizon() {
            for s in 0..self.states(l) {
                let row = self.row(l, s);
                err = err.max((row.iter().sum::<f64>() - 1.0).abs());
                for &p in row {
                    if p < 0.0 {
                        err = err.max(-p);
                    }
                }
            }
        }
        err
    }
}

impl LayeredMdp {
    pub fn new(
        shape: Shape,
        transitions: Transitions,
        rewards: CellTable,
        rho: Vec<f64>,
        reward_noise_std: f64,
    ) -> Result<Self> {
        let mdp = Self {
            shape,
            transitions,
            rewards,
            rho,
            reward_noise_std,
        };
        let report = validate_mdp(&mdp);
        if report.is_empty() {
            Ok(mdp)
        } else {
            Err(VaporError::InvalidMdp(report.join("; ")))
        }
    }

    pub fn horizon(&self) -> usize {
        self.shape.horizon()
    }
}

/// Lists every violated structural invariant; empty when the MDP is valid.
pub fn validate_mdp(mdp: &LayeredMdp) -> Vec<String> {
    let mut out = Vec::new();
    let shape = &mdp.shape;
    if shape.horizon() == 0 || shape.actions == 0 {
        out.push("empty horizon or action set".to_string());
        return out;
    }
    if shape.layer_sizes.contains(&0) {
        out.push("a layer has no states".to_string());
        return out;
    }
    if !mdp.rewards.matches(shape) {
        out.push(format!(
            "reward table shape {:?} does not match {:?}",
            mdp.rewards.shape(),
            shape
        ));
    }
    if mdp.rho.len() != shape.states(0) {
        out.push(format!(
            "rho has {} entries, layer 0 has {} states",
            mdp.rho.len(),
            shape.states(0)
        ));
    } else {
        for (s, &p) in mdp.rho.iter().enumerate() {
            if p < 0.0 || !p.is_finite() {
                out.push(format!("rho[{s}] = {p} is negative"));
            }
        }
        let total: f64 = mdp.rho.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            out.push(format!("rho sums to {total}"));
        }
    }
    if !(mdp.reward_noise_std >= 0.0) {
        out.push(format!("reward noise std {} < 0", mdp.reward_noise_std));
    }
    let p = &mdp.transitions;
    if p.shape != *shape || p.layers.len() + 1 != shape.horizon() {
        out.push("transition kernel shape mismatch".to_string());
        return out;
    }
    for l in 0..p.layers.len() {
        let expected = shape.states(l) * shape.actions * shape.states(l + 1);
        if p.layers[l].len() != expected {
            out.push(format!(
                "transition layer {l} has {} entries, expected {expected}",
                p.layers[l].len()
            ));
            continue;
        }
        for s in 0..shape.states(l) {
            for a in 0..shape.actions {
                let row = p.row(l, s, a);
                if row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                    out.push(format!("P[layer {l}, state {s}, action {a}] has a negative entry"));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > PROB_TOL {
                    out.push(format!(
                        "P[layer {l}, state {s}, action {a}] sums to {total}"
                    ));
                }
            }
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
#[inline]
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Optimal `Q*`, `V*` and the greedy policy for the given rewards.
///
/// The greedy policy is deterministic with argmax ties broken by the lowest
/// action index. `reward_override` replaces the MDP's mean rewards.
pub fn backward_induction(
    mdp: &LayeredMdp,
    reward_override: Option<&CellTable>,
) -> Result<(ValueTables, Policy)> {
    let rewards = reward_override.unwrap_or(&mdp.rewards);
    rewards.check_shape(&mdp.shape, "reward override")?;
    Ok(optimal_values(&mdp.shape, &mdp.transitions, rewards))
}

/// Backward induction on raw `(P, r)`; shapes are assumed consistent.
pub fn optimal_values(shape: &Shape, p: &Transitions, r: &CellTable) -> (ValueTables, Policy) {
    let l_n = shape.horizon();
    let a_n = shape.actions;
    let mut q = CellTable::zeros(shape);
    let mut v: Vec<Vec<f64>> = shape.layer_sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut pi = CellTable::zeros(shape);
    for l in (0..l_n).rev() {
        for s in 0..shape.states(l) {
            for a in 0..a_n {
                let cont = if l + 1 < l_n {
                    p.expect(l, s, a, &v[l + 1])
                } else {
                    0.0
                };
                q.set(l, s, a, r.get(l, s, a) + cont);
            }
            let best = argmax_lowest(q.row(l, s));
            v[l][s] = q.get(l, s, best);
            pi.set(l, s, best, 1.0);
        }
    }
    (ValueTables { q, v }, Policy(pi))
}

/// Forward recursion `lambda_1 = rho * pi_1`, `lambda_{l+1} = (P lambda_l) * pi_{l+1}`.
pub fn occupancy_from_policy(
    p: &Transitions,
    rho: &[f64],
    policy: &Policy,
) -> Result<OccupancyMeasure> {
    let shape = &p.shape;
    policy.check_shape(shape, "policy")?;
    if rho.len() != shape.states(0) {
        return Err(VaporError::Shape(format!(
            "rho has {} entries, layer 0 has {} states",
            rho.len(),
            shape.states(0)
        )));
    }
    Ok(occupancy_unchecked(p, rho, policy))
}

pub(crate) fn occupancy_unchecked(p: &Transitions, rho: &[f64], policy: &CellTable) -> OccupancyMeasure {
    let shape = &p.shape;
    let mut lam = CellTable::zeros(shape);
    let mut mu = rho.to_vec();
    for l in 0..shape.horizon() {
        for (s, &m) in mu.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for a in 0..shape.actions {
                lam.set(l, s, a, m * policy.get(l, s, a));
            }
        }
        if l + 1 < shape.horizon() {
            let mut next = vec![0.0; shape.states(l + 1)];
            for s in 0..shape.states(l) {
                for a in 0..shape.actions {
                    let w = lam.get(l, s, a);
                    if w == 0.0 {
                        continue;
                    }
                    for (n, &pr) in next.iter_mut().zip(p.row(l, s, a)) {
                        *n += w * pr;
                    }
                }
            }
            mu = next;
        }
    }
    OccupancyMeasure(lam)
}

/// Row-normalises an occupancy measure; rows without mass become uniform.
pub fn policy_from_occupancy(lambda: &CellTable) -> Policy {
    let a_n = lambda.actions;
    let mut pi = lambda.clone();
    for layer in pi.layers.iter_mut() {
        for row in layer.chunks_mut(a_n) {
            let total: f64 = row.iter().map(|x| x.max(0.0)).sum();
            if total < ZERO_MASS {
                row.fill(1.0 / a_n as f64);
            } else {
                for x in row.iter_mut() {
                    *x = x.max(0.0) / total;
                }
            }
        }
    }
    Policy(pi)
}

/// Exact `Q^pi`, `V^pi` by backward recursion.
pub fn policy_value(mdp: &LayeredMdp, policy: &Policy) -> Result<ValueTables> {
    policy.check_shape(&mdp.shape, "policy")?;
    Ok(evaluate_policy(&mdp.shape, &mdp.transitions, &mdp.rewards, policy))
}

pub fn evaluate_policy(shape: &Shape, p: &Transitions, r: &CellTable, policy: &CellTable) -> ValueTables {
    let l_n = shape.horizon();
    let mut q = CellTable::zeros(shape);
    let mut v: Vec<Vec<f64>> = shape.layer_sizes.iter().map(|&n| vec![0.0; n]).collect();
    for l in (0..l_n).rev() {
        for s in 0..shape.states(l) {
            let mut acc = 0.0;
            for a in 0..shape.actions {
                let cont = if l + 1 < l_n {
                    p.expect(l, s, a, &v[l + 1])
                } else {
                    0.0
                };
                let qa = r.get(l, s, a) + cont;
                q.set(l, s, a, qa);
                acc += policy.get(l, s, a) * qa;
            }
            v[l][s] = acc;
        }
    }
    ValueTables { q, v }
}

/// Sup-norm residual of the occupancy flow constraints.
pub fn flow_residual(lambda: &CellTable, p: &Transitions, rho: &[f64]) -> f64 {
    let shape = &p.shape;
    let mass = lambda.state_sums();
    let mut res: f64 = 0.0;
    for x in lambda.iter() {
        if *x < 0.0 {
            res = res.max(-x);
        }
    }
    for (m, r) in mass[0].iter().zip(rho) {
        res = res.max((m - r).abs());
    }
    for l in 0..shape.horizon().saturating_sub(1) {
        let mut inflow = vec![0.0; shape.states(l + 1)];
        for s in 0..shape.states(l) {
            for a in 0..shape.actions {
                let w = lambda.get(l, s, a);
                for (n, &pr) in inflow.iter_mut().zip(p.row(l, s, a)) {
                    *n += w * pr;
                }
            }
        }
        for (m, f) in mass[l + 1].iter().zip(&inflow) {
            res = res.max((m - f).abs());
        }
    }
    res
}

pub fn check_flow(lambda: &CellTable, p: &Transitions, rho: &[f64], tol: f64) -> Result<FlowCheck> {
    lambda.check_shape(&p.shape, "occupancy")?;
    if rho.len() != p.shape.states(0) {
        return Err(VaporError::Shape("rho length".into()));
    }
    let max_residual = flow_residual(lambda, p, rho);
    Ok(FlowCheck {
        ok: max_residual <= tol,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_mdp(rng: &mut impl Rng, sizes: &[usize], actions: usize) -> LayeredMdp {
        let shape = Shape::new(sizes.to_vec(), actions);
        let mut p = Transitions::zeros(&shape);
        for l in 0..p.layers.len() {
            for s in 0..shape.states(l) {
                for a in 0..actions {
                    let row = p.row_mut(l, s, a);
                    let w: Vec<f64> = row.iter().map(|_| rng.random::<f64>() + 0.05).collect();
                    let t: f64 = w.iter().sum();
                    for (x, wi) in row.iter_mut().zip(&w) {
                        *x = wi / t;
                    }
                }
            }
        }
        let r = CellTable::from_fn(&shape, |_, _, _| rng.random::<f64>() * 2.0 - 1.0);
        let w: Vec<f64> = (0..sizes[0]).map(|_| rng.random::<f64>() + 0.1).collect();
        let t: f64 = w.iter().sum();
        let rho = w.iter().map(|x| x / t).collect();
        LayeredMdp::new(shape, p, r, rho, 0.0).unwrap()
    }

    fn random_policy(rng: &mut impl Rng, shape: &Shape) -> Policy {
        let raw = CellTable::from_fn(shape, |_, _, _| rng.random::<f64>());
        policy_from_occupancy(&raw)
    }

    fn two_layer() -> LayeredMdp {
        let shape = Shape::new(vec![1, 2], 2);
        let p = Transitions::deterministic(&shape, |_, _, a| a);
        let r = CellTable::from_fn(&shape, |l, s, a| (l + s + a) as f64);
        LayeredMdp::new(shape, p, r, vec![1.0], 0.0).unwrap()
    }

    #[test]
    fn valid_mdp_has_empty_report() {
        assert!(validate_mdp(&two_layer()).is_empty());
    }

    #[test]
    fn short_row_and_negative_rho_are_reported() {
        let mut m = two_layer();
        m.transitions.row_mut(0, 0, 1)[1] = 0.9;
        let report = validate_mdp(&m);
        assert_eq!(report.len(), 1);
        assert!(report[0].contains("layer 0, state 0, action 1"), "{report:?}");

        let shape = Shape::new(vec![2, 1], 1);
        let p = Transitions::deterministic(&shape, |_, _, _| 0);
        let bad = LayeredMdp {
            rewards: CellTable::zeros(&shape),
            shape,
            transitions: p,
            rho: vec![1.5, -0.5],
            reward_noise_std: 0.0,
        };
        let report = validate_mdp(&bad);
        assert_eq!(report.len(), 1, "{report:?}");
        assert!(report[0].contains("negative"));
    }

    #[test]
    fn one_cell_backward_induction() {
        let shape = Shape::new(vec![1], 2);
        let r = CellTable {
            actions: 2,
            layers: vec![vec![1.0, 0.0]],
        };
        let m = LayeredMdp::new(shape.clone(), Transitions::zeros(&shape), r, vec![1.0], 0.0).unwrap();
        let (vt, pi) = backward_induction(&m, None).unwrap();
        assert_eq!(vt.v[0][0], 1.0);
        assert_eq!(pi.row(0, 0), &[1.0, 0.0]);
    }

    #[test]
    fn ties_go_to_lowest_action() {
        assert_eq!(argmax_lowest(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn override_shape_mismatch_is_an_error() {
        let m = two_layer();
        let bad = CellTable::zeros(&Shape::new(vec![1], 2));
        assert!(backward_induction(&m, Some(&bad)).is_err());
    }

    /// Exhaustive maximum over deterministic policies.
    fn brute_force_value(m: &LayeredMdp) -> f64 {
        let cells: Vec<(usize, usize)> = (0..m.horizon())
            .flat_map(|l| (0..m.shape.states(l)).map(move |s| (l, s)))
            .collect();
        let a_n = m.shape.actions;
        let total = a_n.pow(cells.len() as u32);
        let mut best = f64::NEG_INFINITY;
        for code in 0..total {
            let mut c = code;
            let mut choice = vec![vec![0usize; m.shape.max_states()]; m.horizon()];
            for &(l, s) in &cells {
                choice[l][s] = c % a_n;
                c /= a_n;
            }
            let pi = Policy::deterministic(&m.shape, |l, s| choice[l][s]);
            let v = policy_value(m, &pi).unwrap().initial_value(&m.rho);
            best = best.max(v);
        }
        best
    }

    #[test]
    fn backward_induction_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let l_n = rng.random_range(1..=3);
            let sizes: Vec<usize> = (0..l_n).map(|_| rng.random_range(1..=3)).collect();
            let a_n = rng.random_range(1..=3);
            let m = random_mdp(&mut rng, &sizes, a_n);
            let (vt, _) = backward_induction(&m, None).unwrap();
            let exact = vt.initial_value(&m.rho);
            assert!((exact - brute_force_value(&m)).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_chain_occupancy_is_indicator() {
        let shape = Shape::new(vec![2, 2, 2], 2);
        let p = Transitions::deterministic(&shape, |_, _, a| a);
        let pi = Policy::deterministic(&shape, |l, _| if l == 0 { 1 } else { 0 });
        let lam = occupancy_from_policy(&p, &[1.0, 0.0], &pi).unwrap();
        assert_eq!(lam.layers[0], vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(lam.layers[1], vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(lam.layers[2], vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_mass_rows_become_uniform() {
        let lam = CellTable {
            actions: 3,
            layers: vec![vec![0.2, 0.6, 0.2, 0.0, 0.0, 0.0]],
        };
        let pi = policy_from_occupancy(&lam);
        assert_eq!(pi.row(0, 0), &[0.2, 0.6, 0.2]);
        for &x in pi.row(0, 1) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let two = CellTable {
            actions: 2,
            layers: vec![vec![0.0, 0.0]],
        };
        assert_eq!(policy_from_occupancy(&two).row(0, 0), &[0.5, 0.5]);
    }

    #[test]
    fn round_trip_and_dual_identity_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let l_n = rng.random_range(1..=4);
            let sizes: Vec<usize> = (0..l_n).map(|_| rng.random_range(1..=4)).collect();
            let a_n = rng.random_range(1..=3);
            let m = random_mdp(&mut rng, &sizes, a_n);
            let pi = random_policy(&mut rng, &m.shape);
            let lam = occupancy_from_policy(&m.transitions, &m.rho, &pi).unwrap();
            let fc = check_flow(&lam, &m.transitions, &m.rho, 1e-12).unwrap();
            assert!(fc.ok, "residual {}", fc.max_residual);
            let back = policy_from_occupancy(&lam);
            let mass = lam.state_sums();
            for l in 0..l_n {
                for s in 0..sizes[l] {
                    if mass[l][s] > 1e-12 {
                        for a in 0..a_n {
                            assert!((back.get(l, s, a) - pi.get(l, s, a)).abs() < 1e-9);
                        }
                    }
                }
            }
            let v = policy_value(&m, &pi).unwrap().initial_value(&m.rho);
            assert!((v - lam.dot(&m.rewards)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_rewards_have_zero_value_and_optimal_policy_attains_vstar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = random_mdp(&mut rng, &[2, 3, 2], 2);
        let (vt, pi) = backward_induction(&m, None).unwrap();
        let vp = policy_value(&m, &pi).unwrap();
        for (a, b) in vt.v.iter().flatten().zip(vp.v.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        m.rewards = CellTable::zeros(&m.shape);
        let vz = policy_value(&m, &Policy::uniform(&m.shape)).unwrap();
        assert!(vz.v.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn perturbed_or_uniform_occupancy_fails_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mdp(&mut rng, &[2, 2, 2], 2);
        let mut lam = occupancy_from_policy(&m.transitions, &m.rho, &Policy::uniform(&m.shape)).unwrap();
        lam.layers[1][0] += 1e-3;
        assert!(!check_flow(&lam, &m.transitions, &m.rho, 1e-8).unwrap().ok);

        // Two states that both move to state 0 under every action: uniform
        // mass on layer 1 contradicts the inflow.
        let shape = Shape::new(vec![2, 2], 2);
        let p = Transitions::deterministic(&shape, |_, _, _| 0);
        let uniform = CellTable::filled(&shape, 0.25);
        let fc = check_flow(&uniform, &p, &[0.5, 0.5], 1e-8).unwrap();
        assert!(!fc.ok);
        assert!((fc.max_residual - 0.5).abs() < 1e-12);
    }

    #[test]
    fn greedy_policy_is_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_mdp(&mut rng, &[3, 3, 3], 3);
        let a = backward_induction(&m, None).unwrap().1;
        let b = backward_induction(&m, None).unwrap().1;
        assert_eq!(a, b);
    }
}
