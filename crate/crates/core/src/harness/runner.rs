//! Episodic learning loop.
//!
//! Seed scheme: for seed `k`, stream 0 of `k` draws the true MDP; episode `t`
//! (1-based) draws its agent and environment randomness from stream `t`. The
//! gridworld layout uses the last stream of `world_seed` (or `k`). A run of a
//! single seed therefore reproduces that seed's slice of a larger run.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{agent_policy, AgentContext, AgentKind, AgentOutput};
use crate::bayes::{BeliefState, Learner, Posterior, RewardPrior};
use crate::envs::{deepsea_goal, env_step, make_chain_pair, make_deepsea, make_four_room, make_gridworld, sample_index};
use crate::error::{Result, VaporError};
use crate::harness::config::{EnvSpec, ExperimentConfig, StopWhen};
use crate::mdp::{evaluate_policy, optimal_values, policy_from_occupancy, LayeredMdp, Policy};
use crate::oracles::FiniteSupportPrior;
use crate::par::{map_indexed, stream_rng, with_workers, Exec};
use crate::solver::solve_weighted_max_entropy;
use crate::table::CellTable;

/// One transition of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub layer: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next: Option<usize>,
}

/// Samples one length-`L` trajectory of `policy` in `mdp`.
pub fn run_episode<R: Rng + ?Sized>(mdp: &LayeredMdp, policy: &Policy, rng: &mut R) -> Result<Vec<Step>> {
    policy.check_shape(&mdp.shape, "policy")?;
    let mut s = sample_index(&mdp.rho, rng);
    let mut steps = Vec::with_capacity(mdp.horizon());
    for l in 0..mdp.horizon() {
        let a = sample_index(policy.row(l, s), rng);
        let (reward, next) = env_step(mdp, l, s, a, rng)?;
        steps.push(Step {
            layer: l,
            state: s,
            action: a,
            reward,
            next,
        });
        if let Some(n) = next {
            s = n;
        }
    }
    Ok(steps)
}

/// Which transitions count as finding the goal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    None,
    /// The rewarding move of a DeepSea of this depth.
    DeepSea(usize),
    /// Reaching the end of a chain of this length.
    ChainEnd(usize),
}

impl Goal {
    pub fn hit(self, l: usize, s: usize, a: usize) -> bool {
        match self {
            Goal::None => false,
            Goal::DeepSea(depth) => deepsea_goal(depth, l, s, a),
            Goal::ChainEnd(len) => l + 1 == len && s == 0,
        }
    }
}

/// Visit tracking over the state-actions reachable under the uniform policy.
///
/// With `aggregate` a state-action counts as visited at any layer; this
/// suits grids whose layers replicate one state space.
#[derive(Clone, Debug)]
pub struct Coverage {
    aggregate: bool,
    actions: usize,
    offsets: Vec<usize>,
    required: Vec<bool>,
    seen: Vec<bool>,
    missing: usize,
}

impl Coverage {
    pub fn new(mdp: &LayeredMdp, aggregate: bool) -> Result<Self> {
        let shape = &mdp.shape;
        if aggregate && shape.layer_sizes.iter().any(|&n| n != shape.states(0)) {
            return Err(VaporError::Shape("aggregated coverage needs equal layer sizes".into()));
        }
        let mut offsets = Vec::with_capacity(shape.horizon());
        let mut total = 0;
        for l in 0..shape.horizon() {
            offsets.push(total);
            total += shape.states(l) * shape.actions;
        }
        let uniform = Policy::uniform(shape);
        let lam = crate::mdp::occupancy_from_policy(&mdp.transitions, &mdp.rho, &uniform)?;
        let keys = if aggregate { shape.states(0) * shape.actions } else { total };
        let mut cov = Self {
            aggregate,
            actions: shape.actions,
            offsets,
            required: vec![false; keys],
            seen: vec![false; keys],
            missing: 0,
        };
        for l in 0..shape.horizon() {
            for s in 0..shape.states(l) {
                for a in 0..shape.actions {
                    if lam.get(l, s, a) > 0.0 {
                        let k = cov.key(l, s, a);
                        cov.required[k] = true;
                    }
                }
            }
        }
        cov.missing = cov.required.iter().filter(|&&r| r).count();
        Ok(cov)
    }

    fn key(&self, l: usize, s: usize, a: usize) -> usize {
        let local = s * self.actions + a;
        if self.aggregate {
            local
        } else {
            self.offsets[l] + local
        }
    }

    pub fn visit(&mut self, l: usize, s: usize, a: usize) {
        let k = self.key(l, s, a);
        if !self.seen[k] {
            self.seen[k] = true;
            if self.required[k] {
                self.missing -= 1;
            }
        }
    }

    pub fn required(&self) -> usize {
        self.required.iter().filter(|&&r| r).count()
    }

    pub fn missing(&self) -> usize {
        self.missing
    }

    pub fn complete(&self) -> bool {
        self.missing == 0
    }

    /// 1 on required state-actions not yet visited, 0 elsewhere.
    pub fn unvisited_weights(&self, like: &CellTable) -> CellTable {
        let shape = like.shape();
        CellTable::from_fn(&shape, |l, s, a| {
            let k = self.key(l, s, a);
            (self.required[k] && !self.seen[k]) as u8 as f64
        })
    }
}

/// Per-episode outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    /// 1-based.
    pub episode: usize,
    /// `rho . (V* - V^pi)` in the true MDP.
    pub regret: f64,
    pub cum_regret: f64,
    pub goal_found: bool,
    pub fw_gap: Option<f64>,
    pub fw_iters: Option<usize>,
}

/// All episodes of one agent on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub agent: String,
    pub seed: u64,
    pub records: Vec<EpisodeRecord>,
    pub time_to_solve: Option<usize>,
    /// First episode in which the goal was found.
    pub first_goal: Option<usize>,
    pub coverage_time: Option<usize>,
    pub wall_time_s: f64,
}

impl SeedRun {
    pub fn cum_regret(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cum_regret).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Agent-major, then in seed order.
    pub runs: Vec<SeedRun>,
    pub wall_time_s: f64,
}

impl ExperimentResult {
    pub fn runs_for<'a>(&'a self, agent: &'a str) -> impl Iterator<Item = &'a SeedRun> + 'a {
        self.runs.iter().filter(move |r| r.agent == agent)
    }
}

/// Loop parameters for [`learn`].
#[derive(Clone, Copy, Debug)]
pub struct LearnOptions {
    pub episodes: usize,
    pub replication: u64,
    pub stop_when: Option<StopWhen>,
    pub goal: Goal,
    pub aggregate_coverage: bool,
}

/// What a policy rule sees besides the beliefs.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeInfo<'a> {
    /// 1-based.
    pub episode: usize,
    pub coverage: &'a Coverage,
}

/// Runs the episodic loop: `choose` maps beliefs to a policy, the policy acts
/// in `truth`, and every transition is fed back `replication` times.
pub fn learn<B, F>(mut beliefs: B, truth: &LayeredMdp, seed: u64, opts: &LearnOptions, mut choose: F) -> Result<SeedRun>
where
    B: Learner,
    F: FnMut(&B, &EpisodeInfo<'_>, &mut ChaCha8Rng) -> Result<AgentOutput>,
{
    let start = Instant::now();
    let shape = &truth.shape;
    let (opt, _) = optimal_values(shape, &truth.transitions, &truth.rewards);
    let v_star = opt.initial_value(&truth.rho);
    let mut coverage = Coverage::new(truth, opts.aggregate_coverage)?;
    let mut run = SeedRun {
        agent: String::new(),
        seed,
        records: Vec::with_capacity(opts.episodes),
        time_to_solve: None,
        first_goal: None,
        coverage_time: None,
        wall_time_s: 0.0,
    };
    let mut cum = 0.0;
    let mut hits = 0usize;
    for t in 1..=opts.episodes {
        let mut rng = stream_rng(seed, t as u64);
        let out = choose(
            &beliefs,
            &EpisodeInfo {
                episode: t,
                coverage: &coverage,
            },
            &mut rng,
        )?;
        let v_pi = evaluate_policy(shape, &truth.transitions, &truth.rewards, &out.policy).initial_value(&truth.rho);
        // Negative values can only be rounding error.
        let regret = (v_star - v_pi).max(0.0);
        cum += regret;
        let steps = run_episode(truth, &out.policy, &mut rng)?;
        let mut found = false;
        for st in &steps {
            found |= opts.goal.hit(st.layer, st.state, st.action);
            coverage.visit(st.layer, st.state, st.action);
            beliefs.observe(st.layer, st.state, st.action, st.reward, st.next, opts.replication)?;
        }
        hits += found as usize;
        if found && run.first_goal.is_none() {
            run.first_goal = Some(t);
        }
        if run.time_to_solve.is_none() && 10 * hits >= t {
            run.time_to_solve = Some(t);
        }
        if run.coverage_time.is_none() && coverage.complete() {
            run.coverage_time = Some(t);
        }
        run.records.push(EpisodeRecord {
            seed,
            episode: t,
            regret,
            cum_regret: cum,
            goal_found: found,
            fw_gap: out.diagnostics.as_ref().map(|d| d.fw_gap),
            fw_iters: out.diagnostics.as_ref().map(|d| d.iterations),
        });
        let stop = match opts.stop_when {
            None => false,
            Some(StopWhen::Solved) => run.time_to_solve.is_some(),
            Some(StopWhen::GoalFound) => run.first_goal.is_some(),
            Some(StopWhen::Covered) => run.coverage_time.is_some(),
        };
        if stop {
            break;
        }
    }
    run.wall_time_s = start.elapsed().as_secs_f64();
    Ok(run)
}

/// Prior beliefs, a true MDP drawn from them, and the env's goal.
pub enum World {
    Conjugate(BeliefState),
    Finite(FiniteSupportPrior),
}

pub struct Setup {
    pub world: World,
    pub truth: LayeredMdp,
    pub goal: Goal,
    pub aggregate_coverage: bool,
}

/// Builds the beliefs and true MDP of `cfg.env` for one seed.
pub fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<Setup> {
    let mut rng = stream_rng(seed, 0);
    Ok(match &cfg.env {
        EnvSpec::DeepSea { size } => {
            let truth = make_deepsea(*size)?;
            let scale = 1.0 / (truth.shape.max_states() as f64).sqrt();
            let b = BeliefState::new(&truth.shape, truth.rho.clone(), scale, RewardPrior::default(), cfg.nu)?;
            Setup {
                world: World::Conjugate(b),
                truth,
                goal: Goal::DeepSea(*size),
                aggregate_coverage: false,
            }
        }
        EnvSpec::Chain { size, epsilon } => {
            let prior = make_chain_pair(*size, *epsilon)?;
            let truth = prior.sample_model(&mut rng).into_owned();
            Setup {
                world: World::Finite(prior),
                truth,
                goal: Goal::ChainEnd(*size),
                aggregate_coverage: false,
            }
        }
        EnvSpec::Gridworld {
            size,
            world_seed,
            rewards,
        } => {
            let mut world_rng = stream_rng(world_seed.unwrap_or(seed), u64::MAX);
            let g = make_gridworld(*size, &mut world_rng, *rewards)?;
            let var = g.reward_std.map(|x| x * x);
            let b = BeliefState::with_known_transitions(
                g.mdp.transitions.clone(),
                g.mdp.rho.clone(),
                g.mdp.rewards.clone(),
                var,
                cfg.nu,
            )?;
            let truth = b.sample_mdp(&mut rng);
            Setup {
                world: World::Conjugate(b),
                truth,
                goal: Goal::None,
                aggregate_coverage: true,
            }
        }
        EnvSpec::FourRoom { size } => {
            let truth = make_four_room(*size)?;
            let zeros = CellTable::zeros(&truth.shape);
            let b = BeliefState::with_known_transitions(
                truth.transitions.clone(),
                truth.rho.clone(),
                zeros.clone(),
                zeros,
                cfg.nu,
            )?;
            Setup {
                world: World::Conjugate(b),
                truth,
                goal: Goal::None,
                aggregate_coverage: true,
            }
        }
        EnvSpec::Random {
            layer_sizes,
            actions,
            dirichlet_scale,
        } => {
            let shape = crate::table::Shape::new(layer_sizes.clone(), *actions);
            let rho = vec![1.0 / layer_sizes[0] as f64; layer_sizes[0]];
            let b = BeliefState::new(&shape, rho, *dirichlet_scale, RewardPrior::default(), cfg.nu)?;
            let truth = b.sample_mdp(&mut rng);
            Setup {
                world: World::Conjugate(b),
                truth,
                goal: Goal::None,
                aggregate_coverage: false,
            }
        }
    })
}

/// Policy rule for a configured agent, including the runner-driven ones.
pub struct AgentDriver<'a> {
    kind: &'a AgentKind,
    cfg: &'a ExperimentConfig,
    truth_policy: Policy,
    cached: Option<AgentOutput>,
}

impl<'a> AgentDriver<'a> {
    pub fn new(kind: &'a AgentKind, cfg: &'a ExperimentConfig, truth: &LayeredMdp) -> Self {
        let (_, truth_policy) = optimal_values(&truth.shape, &truth.transitions, &truth.rewards);
        Self {
            kind,
            cfg,
            truth_policy,
            cached: None,
        }
    }

    pub fn policy<P: Posterior>(&mut self, post: &P, info: &EpisodeInfo<'_>, rng: &mut ChaCha8Rng) -> Result<AgentOutput> {
        match *self.kind {
            AgentKind::Oracle => Ok(AgentOutput {
                policy: self.truth_policy.clone(),
                diagnostics: None,
            }),
            AgentKind::MaxEntropy { weighted } => {
                if let Some(out) = &self.cached {
                    return Ok(out.clone());
                }
                let p = post.mean_transitions();
                let unit = CellTable::filled(post.shape(), 1.0);
                let mut w = if weighted { info.coverage.unvisited_weights(&unit) } else { unit.clone() };
                if w.iter().all(|&x| x == 0.0) {
                    w = unit;
                }
                let (lam, diag) = solve_weighted_max_entropy(&w, &p, post.rho(), &self.cfg.solver)?;
                let out = AgentOutput {
                    policy: policy_from_occupancy(&lam),
                    diagnostics: Some(diag),
                };
                // The unweighted program only changes with the dynamics.
                if !weighted && post.known_transitions() {
                    self.cached = Some(out.clone());
                }
                Ok(out)
            }
            _ => {
                let ctx = AgentContext {
                    episode: info.episode,
                    sigma_mode: self.cfg.sigma_mode,
                    solver: &self.cfg.solver,
                };
                agent_policy(self.kind, post, &ctx, rng)
            }
        }
    }
}

fn learn_with<B: Learner>(beliefs: B, s: &Setup, kind: &AgentKind, cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let opts = LearnOptions {
        episodes: cfg.episodes,
        replication: cfg.replication(),
        stop_when: cfg.stop_when,
        goal: s.goal,
        aggregate_coverage: s.aggregate_coverage,
    };
    let mut driver = AgentDriver::new(kind, cfg, &s.truth);
    let mut run = learn(beliefs, &s.truth, seed, &opts, |b, info, rng| driver.policy(b, info, rng))?;
    run.agent = kind.name().to_string();
    Ok(run)
}

/// One agent on one seed.
pub fn run_seed(cfg: &ExperimentConfig, kind: &AgentKind, seed: u64) -> Result<SeedRun> {
    let s = setup(cfg, seed)?;
    match &s.world {
        World::Conjugate(b) => learn_with(b.clone(), &s, kind, cfg, seed),
        World::Finite(p) => learn_with(p.clone(), &s, kind, cfg, seed),
    }
}

/// Every configured agent on every seed; seeds run on the worker pool.
pub fn run_learning(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let jobs: Vec<(&AgentKind, u64)> = cfg
        .agents
        .iter()
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs = with_workers(cfg.workers, || {
        map_indexed(jobs.len(), Exec::Parallel, |i| run_seed(cfg, jobs[i].0, jobs[i].1))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        runs,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_deepsea;

    fn cfg(env: EnvSpec, agents: Vec<AgentKind>) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(env, agents);
        c.episodes = 5;
        c.seeds = vec![0, 1];
        c
    }

    #[test]
    fn deterministic_trajectory() {
        let mdp = make_deepsea(4).unwrap();
        let right = Policy::deterministic(&mdp.shape, |_, _| 1);
        let mut rng = stream_rng(3, 1);
        let steps = run_episode(&mdp, &right, &mut rng).unwrap();
        assert_eq!(steps.iter().map(|s| s.layer).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(steps.iter().map(|s| s.state).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(Goal::DeepSea(4).hit(3, steps[3].state, steps[3].action));
        let left = Policy::deterministic(&mdp.shape, |_, _| 0);
        let steps = run_episode(&mdp, &left, &mut rng).unwrap();
        assert!(steps.iter().all(|s| s.state == 0 && !Goal::DeepSea(4).hit(s.layer, s.state, s.action)));
    }

    #[test]
    fn oracle_has_zero_regret() {
        for env in [
            EnvSpec::DeepSea { size: 5 },
            EnvSpec::Chain { size: 4, epsilon: 0.001 },
            EnvSpec::Random {
                layer_sizes: vec![2, 3, 2],
                actions: 2,
                dirichlet_scale: 1.0,
            },
        ] {
            let res = run_learning(&cfg(env, vec![AgentKind::Oracle])).unwrap();
            assert!(res.runs.iter().flat_map(|r| &r.records).all(|e| e.regret == 0.0));
        }
    }

    #[test]
    fn identical_configs_are_identical() {
        let c = cfg(EnvSpec::DeepSea { size: 4 }, vec![AgentKind::Psrl, AgentKind::Vapor]);
        let mut a = run_learning(&c).unwrap();
        let mut b = run_learning(&c).unwrap();
        for r in a.runs.iter_mut().chain(b.runs.iter_mut()) {
            r.wall_time_s = 0.0;
        }
        assert_eq!(a.runs, b.runs);
        assert_eq!(a.runs.len(), 4);
        assert_eq!(a.runs[0].agent, "psrl");
    }

    #[test]
    fn single_seed_matches_full_run_slice() {
        let c = cfg(EnvSpec::Chain { size: 4, epsilon: 0.001 }, vec![AgentKind::Psrl]);
        let full = run_learning(&c).unwrap();
        let one = run_seed(&c, &AgentKind::Psrl, 1).unwrap();
        assert_eq!(one.records, full.runs[1].records);
    }

    #[test]
    fn cumulative_regret_is_monotone() {
        let mut c = cfg(
            EnvSpec::Random {
                layer_sizes: vec![2, 2],
                actions: 2,
                dirichlet_scale: 1.0,
            },
            vec![AgentKind::soft_q()],
        );
        c.episodes = 20;
        let res = run_learning(&c).unwrap();
        for r in &res.runs {
            assert!(r.records.windows(2).all(|w| w[1].cum_regret >= w[0].cum_regret));
        }
    }

    #[test]
    fn stop_when_goal_found() {
        let mut c = cfg(EnvSpec::Chain { size: 3, epsilon: 0.001 }, vec![AgentKind::Vapor]);
        c.stop_when = Some(StopWhen::GoalFound);
        c.episodes = 50;
        let res = run_learning(&c).unwrap();
        for r in &res.runs {
            assert_eq!(r.first_goal, Some(r.records.len()));
        }
    }

    #[test]
    fn coverage_excludes_unreachable_cells() {
        // Layer 1 state 1 is never reached.
        let shape = crate::table::Shape::new(vec![1, 2], 1);
        let p = crate::table::Transitions::deterministic(&shape, |_, _, _| 0);
        let mdp = LayeredMdp::new(shape.clone(), p, CellTable::zeros(&shape), vec![1.0], 0.0).unwrap();
        let mut cov = Coverage::new(&mdp, false).unwrap();
        assert_eq!(cov.required(), 2);
        cov.visit(0, 0, 0);
        cov.visit(1, 0, 0);
        assert!(cov.complete());
    }

    #[test]
    fn four_room_max_entropy_covers() {
        let mut c = cfg(EnvSpec::FourRoom { size: 5 }, vec![AgentKind::MaxEntropy { weighted: true }]);
        c.episodes = 400;
        c.seeds = vec![0];
        c.stop_when = Some(StopWhen::Covered);
        c.solver.max_iters = 100;
        c.solver.gap_tol = 1e-3;
        let res = run_learning(&c).unwrap();
        assert!(res.runs[0].coverage_time.is_some());
    }
}
