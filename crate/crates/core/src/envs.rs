//! Tabular environments as layered MDPs, plus a noisy stepping interface.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VaporError};
use crate::mdp::LayeredMdp;
use crate::oracles::FiniteSupportPrior;
use crate::table::{CellTable, Shape, Transitions};

pub const DEEPSEA_LEFT: usize = 0;
pub const DEEPSEA_RIGHT: usize = 1;

pub const CHAIN_DOWN: usize = 0;
pub const CHAIN_RIGHT: usize = 1;

/// Grid actions, in index order.
pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;

/// DeepSea of depth `L`: layer `l` has `l + 1` columns, the agent starts in
/// column 0 and drifts down one row per step.
///
/// Every right move costs `0.01 / L`; moving right from the last column of the
/// last row pays an extra `+1`. The optimal value is `0.99`.
pub fn make_deepsea(depth: usize) -> Result<LayeredMdp> {
    if depth < 2 {
        return Err(VaporError::Parameter(format!("deepsea depth must be >= 2, got {depth}")));
    }
    let shape = Shape::new((1..=depth).collect(), 2);
    let p = Transitions::deterministic(&shape, |_, s, a| {
        if a == DEEPSEA_RIGHT {
            s + 1
        } else {
            s.saturating_sub(1)
        }
    });
    let cost = 0.01 / depth as f64;
    let rewards = CellTable::from_fn(&shape, |l, s, a| {
        if a != DEEPSEA_RIGHT {
            0.0
        } else if l == depth - 1 && s == depth - 1 {
            1.0 - cost
        } else {
            -cost
        }
    });
    LayeredMdp::new(shape, p, rewards, vec![1.0], 0.0)
}

/// Whether `(l, s, a)` is the rewarding transition of a DeepSea of the
/// given depth.
pub fn deepsea_goal(depth: usize, l: usize, s: usize, a: usize) -> bool {
    l + 1 == depth && s + 1 == depth && a == DEEPSEA_RIGHT
}

/// Two chain MDPs that differ only in the sign of the reward at the end of
/// the chain, with a uniform prior over them.
///
/// Each layer has the chain state 0 and an absorbing exit 1. Right keeps the
/// agent on the chain at cost `epsilon`; down leaves for the exit. Both
/// actions in the final chain state pay `+1` (first MDP) or `-1` (second).
pub fn make_chain_pair(length: usize, epsilon: f64) -> Result<FiniteSupportPrior> {
    if length < 2 {
        return Err(VaporError::Parameter(format!("chain length must be >= 2, got {length}")));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(VaporError::Parameter(format!("chain cost must be >= 0, got {epsilon}")));
    }
    if epsilon * length as f64 >= 0.1 {
        log::warn!("chain cost {epsilon} times length {length} is not small");
    }
    let shape = Shape::new(vec![2; length], 2);
    let p = Transitions::deterministic(&shape, |_, s, a| if s == 0 && a == CHAIN_RIGHT { 0 } else { 1 });
    let build = |end: f64| {
        let r = CellTable::from_fn(&shape, |l, s, a| match (s, a) {
            (0, _) if l + 1 == length => end,
            (0, CHAIN_RIGHT) => -epsilon,
            _ => 0.0,
        });
        LayeredMdp::new(shape.clone(), p.clone(), r, vec![1.0, 0.0], 0.0)
    };
    FiniteSupportPrior::new(vec![build(1.0)?, build(-1.0)?], vec![0.5, 0.5])
}

/// How random grid rewards are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridRewardSpec {
    /// Probability that a cell carries a non-zero mean reward.
    pub density: f64,
    /// Per-cell belief std is uniform on `[std_low, std_high]`.
    pub std_low: f64,
    pub std_high: f64,
}

impl Default for GridRewardSpec {
    fn default() -> Self {
        Self {
            density: 0.2,
            std_low: 0.1,
            std_high: 1.0,
        }
    }
}

/// A gridworld together with a per-cell reward uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct Gridworld {
    pub mdp: LayeredMdp,
    pub reward_std: CellTable,
}

/// `n x n` grid unrolled over `2n` steps with known deterministic moves.
///
/// Rewards depend on the cell only; a sparse subset gets `N(0, 1)` means.
pub fn make_gridworld<R: Rng + ?Sized>(n: usize, rng: &mut R, spec: GridRewardSpec) -> Result<Gridworld> {
    if n < 2 {
        return Err(VaporError::Parameter(format!("grid size must be >= 2, got {n}")));
    }
    if !(0.0..=1.0).contains(&spec.density) || !(0.0 <= spec.std_low && spec.std_low <= spec.std_high) {
        return Err(VaporError::Parameter("invalid grid reward spec".into()));
    }
    let cells = n * n;
    let mut mean = vec![0.0; cells];
    let mut std = vec![0.0; cells];
    for c in 0..cells {
        if rng.random::<f64>() < spec.density {
            mean[c] = StandardNormal.sample(rng);
        }
        std[c] = spec.std_low + (spec.std_high - spec.std_low) * rng.random::<f64>();
    }
    let free = vec![true; cells];
    let mdp = unrolled_grid(n, &free, 2 * n, |c| mean[c], 0.0)?;
    let reward_std = CellTable::from_fn(&mdp.shape, |_, s, _| std[s]);
    Ok(Gridworld { mdp, reward_std })
}

/// Free-cell mask of the four-room layout: walls on the middle row and column
/// with one door per wall segment.
pub fn four_room_layout(n: usize) -> Vec<bool> {
    let mid = n / 2;
    let doors = [n / 4, 3 * n / 4];
    let mut free = vec![true; n * n];
    for i in 0..n {
        if !doors.contains(&i) {
            free[mid * n + i] = false;
            free[i * n + mid] = false;
        }
    }
    free[mid * n + mid] = false;
    free
}

/// Reward-free four-room gridworld on an odd `n x n` grid, horizon `2n`.
///
/// States are the free cells in row-major order; the agent starts top-left.
pub fn make_four_room(n: usize) -> Result<LayeredMdp> {
    if n < 5 || n % 2 == 0 {
        return Err(VaporError::Parameter(format!("four-room size must be odd and >= 5, got {n}")));
    }
    unrolled_grid(n, &four_room_layout(n), 2 * n, |_| 0.0, 0.0)
}

fn grid_move(n: usize, free: &[bool], cell: usize, action: usize) -> usize {
    let (row, col) = (cell / n, cell % n);
    let target = match action {
        UP if row > 0 => cell - n,
        RIGHT if col + 1 < n => cell + 1,
        DOWN if row + 1 < n => cell + n,
        LEFT if col > 0 => cell - 1,
        _ => cell,
    };
    if free[target] {
        target
    } else {
        cell
    }
}

fn unrolled_grid(
    n: usize,
    free: &[bool],
    horizon: usize,
    reward: impl Fn(usize) -> f64,
    noise: f64,
) -> Result<LayeredMdp> {
    let cells: Vec<usize> = (0..n * n).filter(|&c| free[c]).collect();
    let mut index = vec![usize::MAX; n * n];
    for (i, &c) in cells.iter().enumerate() {
        index[c] = i;
    }
    let shape = Shape::new(vec![cells.len(); horizon], 4);
    let p = Transitions::deterministic(&shape, |_, s, a| index[grid_move(n, free, cells[s], a)]);
    let rewards = CellTable::from_fn(&shape, |_, s, _| reward(cells[s]));
    let mut rho = vec![0.0; cells.len()];
    rho[0] = 1.0;
    LayeredMdp::new(shape, p, rewards, rho, noise)
}

/// Grid cells reachable from the start within `steps` moves (breadth-first).
pub fn grid_reachable(n: usize, free: &[bool], steps: usize) -> Vec<bool> {
    let start = (0..n * n).find(|&c| free[c]).unwrap_or(0);
    let mut dist = vec![usize::MAX; n * n];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        for a in 0..4 {
            let t = grid_move(n, free, c, a);
            if dist[t] == usize::MAX {
                dist[t] = dist[c] + 1;
                queue.push_back(t);
            }
        }
    }
    dist.iter().map(|&d| d <= steps).collect()
}

/// Samples `(r_obs, s_next)`; `s_next` is `None` after the last layer.
pub fn env_step<R: Rng + ?Sized>(
    mdp: &LayeredMdp,
    l: usize,
    s: usize,
    a: usize,
    rng: &mut R,
) -> Result<(f64, Option<usize>)> {
    if l >= mdp.horizon() || s >= mdp.shape.states(l) || a >= mdp.shape.actions {
        return Err(VaporError::Index(format!("({l}, {s}, {a}) is out of range")));
    }
    let mut r = mdp.rewards.get(l, s, a);
    if mdp.reward_noise_std > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        r += mdp.reward_noise_std * z;
    }
    if l + 1 == mdp.horizon() {
        return Ok((r, None));
    }
    Ok((r, Some(sample_index(mdp.transitions.row(l, s, a), rng))))
}

/// Draws an index from a probability vector; one-hot rows use no randomness.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    if let Some(i) = probs.iter().position(|&p| p == 1.0) {
        return i;
    }
    let mut u = rng.random::<f64>();
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return i;
            }
            u -= p;
            last = i;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{backward_induction, occupancy_from_policy, policy_value, validate_mdp, Policy};
    use crate::oracles::exact_pgamma;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deepsea_optimum_is_always_right() {
        for depth in [2, 5, 10] {
            let mdp = make_deepsea(depth).unwrap();
            assert!(validate_mdp(&mdp).is_empty());
            assert_eq!(mdp.shape.total_states(), depth * (depth + 1) / 2);
            let (vt, pi) = backward_induction(&mdp, None).unwrap();
            assert!((vt.v[0][0] - 0.99).abs() < 1e-12);
            for l in 0..depth {
                assert_eq!(pi.get(l, l, DEEPSEA_RIGHT), 1.0);
            }
            let left = Policy::deterministic(&mdp.shape, |_, _| DEEPSEA_LEFT);
            assert_eq!(policy_value(&mdp, &left).unwrap().v[0][0], 0.0);
        }
        assert!(make_deepsea(1).is_err());
    }

    #[test]
    fn deepsea_uniform_policy_rarely_reaches_the_corner() {
        let depth = 8;
        let mdp = make_deepsea(depth).unwrap();
        let lam = occupancy_from_policy(&mdp.transitions, &mdp.rho, &Policy::uniform(&mdp.shape)).unwrap();
        let corner: f64 = lam.row(depth - 1, depth - 1).iter().sum();
        assert_eq!(corner, 0.5f64.powi(depth as i32 - 1));
        assert_eq!(lam.get(depth - 1, depth - 1, DEEPSEA_RIGHT), 0.5f64.powi(depth as i32));
    }

    #[test]
    fn chain_pair_optima_and_pgamma() {
        let prior = make_chain_pair(5, 0.001).unwrap();
        let (_, plus) = backward_induction(&prior.mdps[0], None).unwrap();
        let (_, minus) = backward_induction(&prior.mdps[1], None).unwrap();
        for l in 0..4 {
            assert_eq!(plus.get(l, 0, CHAIN_RIGHT), 1.0);
        }
        assert_eq!(minus.get(0, 0, CHAIN_DOWN), 1.0);
        let pg = exact_pgamma(&prior).unwrap();
        assert_eq!(pg.get(0, 0, CHAIN_RIGHT), 0.5);
        assert_eq!(pg.get(0, 0, CHAIN_DOWN), 0.5);
        for l in 1..4 {
            assert_eq!(pg.get(l, 0, CHAIN_RIGHT), 0.5);
            assert_eq!(pg.get(l, 0, CHAIN_DOWN), 0.0);
        }
    }

    #[test]
    fn chain_uniform_occupancy_halves_each_step() {
        let prior = make_chain_pair(6, 0.001).unwrap();
        let mdp = &prior.mdps[0];
        let lam = occupancy_from_policy(&mdp.transitions, &mdp.rho, &Policy::uniform(&mdp.shape)).unwrap();
        for l in 0..6 {
            let half = 0.5f64.powi(l as i32) * 0.5;
            assert_eq!(lam.row(l, 0), &[half, half]);
        }
    }

    #[test]
    fn gridworld_walls_clip_and_seed_reproduces() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = make_gridworld(4, &mut rng, GridRewardSpec::default()).unwrap();
        assert!(validate_mdp(&g.mdp).is_empty());
        assert_eq!(g.mdp.horizon(), 8);
        assert_eq!(g.mdp.transitions.row(0, 0, UP)[0], 1.0);
        assert_eq!(g.mdp.transitions.row(0, 0, LEFT)[0], 1.0);
        assert_eq!(g.mdp.transitions.row(0, 0, RIGHT)[1], 1.0);
        assert_eq!(g.mdp.transitions.row(0, 0, DOWN)[4], 1.0);
        let again = make_gridworld(4, &mut ChaCha8Rng::seed_from_u64(3), GridRewardSpec::default()).unwrap();
        assert_eq!(g, again);
        assert!(g.reward_std.iter().all(|&s| (0.1..=1.0).contains(&s)));
    }

    #[test]
    fn four_room_is_connected_reward_free_and_deterministic() {
        for n in [5, 7, 9, 11] {
            let mdp = make_four_room(n).unwrap();
            assert!(validate_mdp(&mdp).is_empty());
            assert!(mdp.rewards.iter().all(|&r| r == 0.0));
            for layer in &mdp.transitions.layers {
                for row in layer.chunks(mdp.shape.states(1)) {
                    assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
                }
            }
            let free = four_room_layout(n);
            let reach = grid_reachable(n, &free, 2 * n);
            assert!(free.iter().zip(&reach).all(|(&f, &r)| !f || r));
        }
        assert!(make_four_room(6).is_err());
        assert!(make_four_room(3).is_err());
    }

    #[test]
    fn env_step_noise_and_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = make_deepsea(3).unwrap();
        assert_eq!(env_step(&mdp, 0, 0, DEEPSEA_RIGHT, &mut rng).unwrap(), (-0.01 / 3.0, Some(1)));
        assert_eq!(env_step(&mdp, 2, 2, DEEPSEA_RIGHT, &mut rng).unwrap().1, None);
        assert!(env_step(&mdp, 0, 1, 0, &mut rng).is_err());

        let shape = Shape::new(vec![1, 3], 1);
        let mut p = Transitions::zeros(&shape);
        p.row_mut(0, 0, 0).copy_from_slice(&[0.2, 0.3, 0.5]);
        let mdp = LayeredMdp::new(shape.clone(), p, CellTable::zeros(&shape), vec![1.0], 1.0).unwrap();
        let n = 10_000;
        let mut hits = [0usize; 3];
        let mut rsum = 0.0;
        for _ in 0..n {
            let (r, s) = env_step(&mdp, 0, 0, 0, &mut rng).unwrap();
            hits[s.unwrap()] += 1;
            rsum += r;
        }
        for (h, p) in hits.iter().zip([0.2, 0.3, 0.5]) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*h as f64 / n as f64 - p).abs() < 3.0 * se);
        }
        assert!((rsum / n as f64).abs() < 3.0 / (n as f64).sqrt());
    }
}
