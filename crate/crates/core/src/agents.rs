//! Episodic exploration agents: each maps the current beliefs to a policy.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{sample_transformed_rewards, Posterior, SigmaMode};
use crate::error::{Result, VaporError};
use crate::mdp::{argmax_lowest, optimal_values, policy_from_occupancy, LayeredMdp, Policy};
use crate::solver::{lite_scale, solve_frank_wolfe, solve_vapor_lite_tabular, SolveDiagnostics, SolverOptions, VaporProblem};
use crate::table::{CellTable, Shape, Transitions};

fn default_temperature() -> f64 {
    1.0
}

fn default_samples() -> usize {
    200
}

fn default_tau_min() -> f64 {
    1e-3
}

fn default_tau_max() -> f64 {
    1e3
}

/// Agent identifiers and their parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentKind {
    Vapor,
    Psrl,
    KLearning {
        #[serde(default = "default_tau_min")]
        tau_min: f64,
        #[serde(default = "default_tau_max")]
        tau_max: f64,
    },
    SoftQ {
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    MarginalOptimality {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    RlsviVariant,
    /// Fixed `scale` or, when absent, the episode-indexed schedule.
    VaporLite {
        #[serde(default)]
        scale: Option<f64>,
    },
    /// Reward-free coverage: maximum (weighted) entropy occupancy. With
    /// `weighted` the weights are the indicator of unvisited cells.
    MaxEntropy {
        #[serde(default)]
        weighted: bool,
    },
    /// Acts optimally in the true MDP; a zero-regret reference.
    Oracle,
}

impl AgentKind {
    pub fn k_learning() -> Self {
        Self::KLearning {
            tau_min: default_tau_min(),
            tau_max: default_tau_max(),
        }
    }

    pub fn soft_q() -> Self {
        Self::SoftQ {
            temperature: default_temperature(),
        }
    }

    pub fn marginal() -> Self {
        Self::MarginalOptimality {
            samples: default_samples(),
        }
    }

    /// Short identifier used in result files.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Vapor => "vapor",
            Self::Psrl => "psrl",
            Self::KLearning { .. } => "k_learning",
            Self::SoftQ { .. } => "soft_q",
            Self::MarginalOptimality { .. } => "marginal_optimality",
            Self::RlsviVariant => "rlsvi_variant",
            Self::VaporLite { .. } => "vapor_lite",
            Self::MaxEntropy { weighted: false } => "max_entropy",
            Self::MaxEntropy { weighted: true } => "weighted_max_entropy",
            Self::Oracle => "oracle",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::KLearning { tau_min, tau_max } => 0.0 < tau_min && tau_min < tau_max && tau_max.is_finite(),
            Self::SoftQ { temperature } => temperature > 0.0 && temperature.is_finite(),
            Self::MarginalOptimality { samples } => samples >= 1,
            Self::VaporLite { scale } => scale.is_none_or(|c| c > 0.0 && c.is_finite()),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(VaporError::Config(format!("invalid parameters for agent {}", self.name())))
        }
    }
}

/// Inputs shared by every agent for one episode.
#[derive(Clone, Debug)]
pub struct AgentContext<'a> {
    /// 1-based episode index.
    pub episode: usize,
    pub sigma_mode: SigmaMode,
    pub solver: &'a SolverOptions,
}

/// Chosen policy plus solver diagnostics for the optimisation-based agents.
#[derive(Clone, Debug)]
pub struct AgentOutput {
    pub policy: Policy,
    pub diagnostics: Option<SolveDiagnostics>,
}

impl AgentOutput {
    fn plain(policy: Policy) -> Self {
        Self {
            policy,
            diagnostics: None,
        }
    }
}

/// Policy for one episode.
///
/// `MaxEntropy` and `Oracle` need data the beliefs do not carry and are
/// resolved by the harness; they are rejected here.
pub fn agent_policy<P: Posterior, R: Rng + ?Sized>(
    kind: &AgentKind,
    post: &P,
    ctx: &AgentContext<'_>,
    rng: &mut R,
) -> Result<AgentOutput> {
    kind.validate()?;
    Ok(match *kind {
        AgentKind::Vapor => {
            let (policy, diag) = vapor_policy(post, ctx.sigma_mode, ctx.solver)?;
            AgentOutput {
                policy,
                diagnostics: Some(diag),
            }
        }
        AgentKind::Psrl => AgentOutput::plain(psrl_policy(post, rng)),
        AgentKind::KLearning { tau_min, tau_max } => {
            AgentOutput::plain(klearning_policy(post, ctx.sigma_mode, (tau_min, tau_max))?)
        }
        AgentKind::SoftQ { temperature } => {
            AgentOutput::plain(soft_q_policy(&post.mean_rewards(), &post.mean_transitions(), temperature)?)
        }
        AgentKind::MarginalOptimality { samples } => {
            AgentOutput::plain(marginal_optimality_policy(post, samples, rng)?)
        }
        AgentKind::RlsviVariant => AgentOutput::plain(rlsvi_variant_policy(post, ctx.sigma_mode, rng)),
        AgentKind::VaporLite { scale } => {
            let shape = post.shape();
            let c = scale.unwrap_or_else(|| lite_scale(shape.max_states(), shape.horizon(), ctx.episode));
            let (policy, diag) = vapor_lite_policy(post, c, ctx.sigma_mode, ctx.solver)?;
            AgentOutput {
                policy,
                diagnostics: Some(diag),
            }
        }
        AgentKind::MaxEntropy { .. } | AgentKind::Oracle => {
            return Err(VaporError::Config(format!(
                "agent {} is driven by the experiment runner",
                kind.name()
            )))
        }
    })
}

fn optimistic_problem<P: Posterior>(post: &P, mode: SigmaMode) -> Result<VaporProblem> {
    VaporProblem::from_transformed(post.optimism(mode), post.rho().to_vec())
}

/// Solves the VAPOR program on the transformed beliefs and returns `pi ∝ lambda`.
pub fn vapor_policy<P: Posterior>(
    post: &P,
    mode: SigmaMode,
    opts: &SolverOptions,
) -> Result<(Policy, SolveDiagnostics)> {
    let prob = optimistic_problem(post, mode)?;
    let (lam, diag) = solve_frank_wolfe(&prob, opts)?;
    Ok((policy_from_occupancy(&lam), diag))
}

/// VAPOR-lite with scale `c` on the transformed beliefs.
pub fn vapor_lite_policy<P: Posterior>(
    post: &P,
    c: f64,
    mode: SigmaMode,
    opts: &SolverOptions,
) -> Result<(Policy, SolveDiagnostics)> {
    let prob = optimistic_problem(post, mode)?;
    let (lam, diag) = solve_vapor_lite_tabular(&prob, c, opts)?;
    Ok((policy_from_occupancy(&lam), diag))
}

/// Greedy policy of one posterior sample.
pub fn psrl_policy<P: Posterior, R: Rng + ?Sized>(post: &P, rng: &mut R) -> Policy {
    let m = post.sample_model(rng);
    optimal_values(&m.shape, &m.transitions, &m.rewards).1
}

/// Greedy policy for rewards drawn from `N(E r, sigma_tilde^2)` under the
/// mean dynamics.
pub fn rlsvi_variant_policy<P: Posterior, R: Rng + ?Sized>(post: &P, mode: SigmaMode, rng: &mut R) -> Policy {
    let t = post.optimism(mode);
    let r = sample_transformed_rewards(&t, rng);
    optimal_values(post.shape(), &t.p_mean, &r).1
}

/// Frequency with which each action is optimal across `samples` posterior draws.
pub fn marginal_optimality_policy<P: Posterior, R: Rng + ?Sized>(
    post: &P,
    samples: usize,
    rng: &mut R,
) -> Result<Policy> {
    if samples == 0 {
        return Err(VaporError::Parameter("need at least one sample".into()));
    }
    let shape = post.shape();
    let greedy = |m: &LayeredMdp| {
        let (vt, _) = optimal_values(shape, &m.transitions, &m.rewards);
        (0..shape.horizon())
            .flat_map(|l| (0..shape.states(l)).map(move |s| (l, s)))
            .map(|(l, s)| argmax_lowest(vt.q.row(l, s)))
            .collect::<Vec<usize>>()
    };
    // Borrowed draws are atoms of a finite-support posterior; solve each once.
    let mut cache: Vec<(*const LayeredMdp, Vec<usize>)> = Vec::new();
    let mut freq = CellTable::zeros(shape);
    for _ in 0..samples {
        let m = post.sample_model(rng);
        let fresh;
        let actions: &[usize] = match &m {
            Cow::Borrowed(atom) => {
                let key: *const LayeredMdp = *atom;
                let i = match cache.iter().position(|c| c.0 == key) {
                    Some(i) => i,
                    None => {
                        cache.push((key, greedy(atom)));
                        cache.len() - 1
                    }
                };
                &cache[i].1
            }
            Cow::Owned(owned) => {
                fresh = greedy(owned);
                &fresh
            }
        };
        let mut next = actions.iter();
        for l in 0..shape.horizon() {
            for s in 0..shape.states(l) {
                let a = *next.next().expect("one action per state");
                freq.row_mut(l, s)[a] += 1.0;
            }
        }
    }
    let inv = 1.0 / samples as f64;
    freq.iter_mut().for_each(|x| *x *= inv);
    Ok(Policy(freq))
}

/// `tau * log sum exp(q / tau)` and the Boltzmann distribution, in place.
fn soft_max_row(q: &[f64], tau: f64, pi: &mut [f64]) -> f64 {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &x) in pi.iter_mut().zip(q) {
        *p = ((x - m) / tau).exp();
        z += *p;
    }
    pi.iter_mut().for_each(|p| *p /= z);
    m + tau * z.ln()
}

/// Soft backward induction with a scalar temperature: returns the soft
/// values and the Boltzmann policy for `Q = bonus_r + P V'`.
fn soft_backup(shape: &Shape, p: &Transitions, r: &CellTable, tau: f64) -> (Vec<Vec<f64>>, Policy) {
    let l_n = shape.horizon();
    let mut v: Vec<Vec<f64>> = shape.layer_sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut pi = CellTable::zeros(shape);
    let mut q = vec![0.0; shape.actions];
    for l in (0..l_n).rev() {
        for s in 0..shape.states(l) {
            for (a, qa) in q.iter_mut().enumerate() {
                *qa = r.get(l, s, a) + if l + 1 < l_n { p.expect(l, s, a, &v[l + 1]) } else { 0.0 };
            }
            v[l][s] = soft_max_row(&q, tau, pi.row_mut(l, s));
        }
    }
    (v, Policy(pi))
}

/// Boltzmann policy of soft value iteration on the given mean model; no
/// epistemic term.
pub fn soft_q_policy(r: &CellTable, p: &Transitions, temperature: f64) -> Result<Policy> {
    if !(temperature > 0.0) {
        return Err(VaporError::Parameter("temperature must be positive".into()));
    }
    r.check_shape(&p.shape, "reward")?;
    Ok(soft_backup(&p.shape, p, r, temperature).1)
}

/// K-learning objective `g(tau) = rho . V_1(tau)` for the soft backup of
/// `E r + sigma^2 / (2 tau)`.
pub fn klearning_dual<P: Posterior>(post: &P, mode: SigmaMode, tau: f64) -> f64 {
    let t = post.optimism(mode);
    klearning_eval(&t.p_mean, &t.reward_mu, &t.sigma_tilde, post.rho(), tau).0
}

fn klearning_eval(p: &Transitions, mu: &CellTable, sigma: &CellTable, rho: &[f64], tau: f64) -> (f64, Policy) {
    let bonus = mu.zip_map(sigma, |m, s| m + s * s / (2.0 * tau));
    let (v, pi) = soft_backup(&p.shape, p, &bonus, tau);
    (rho.iter().zip(&v[0]).map(|(a, b)| a * b).sum(), pi)
}

const TAU_GRID: usize = 41;

/// K-learning with one temperature chosen to minimise its dual bound.
pub fn klearning_policy<P: Posterior>(post: &P, mode: SigmaMode, tau_bounds: (f64, f64)) -> Result<Policy> {
    let (lo, hi) = tau_bounds;
    if !(0.0 < lo && lo < hi && hi.is_finite()) {
        return Err(VaporError::Parameter(format!("invalid temperature bounds [{lo}, {hi}]")));
    }
    let t = post.optimism(mode);
    let rho = post.rho();
    let g = |log_tau: f64| klearning_eval(&t.p_mean, &t.reward_mu, &t.sigma_tilde, rho, log_tau.exp()).0;
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / (TAU_GRID - 1) as f64;
    let grid: Vec<f64> = (0..TAU_GRID).map(|i| g(a + step * i as f64)).collect();
    let best = grid
        .iter()
        .enumerate()
        .fold(0, |bi, (i, &x)| if x < grid[bi] { i } else { bi });
    let mut left = a + step * best.saturating_sub(1) as f64;
    let mut right = a + step * (best + 1).min(TAU_GRID - 1) as f64;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..40 {
        let x1 = right - phi * (right - left);
        let x2 = left + phi * (right - left);
        if g(x1) < g(x2) {
            right = x2;
        } else {
            left = x1;
        }
    }
    let mut log_tau = 0.5 * (left + right);
    if g(log_tau) > grid[best] {
        log_tau = a + step * best as f64;
    }
    Ok(klearning_eval(&t.p_mean, &t.reward_mu, &t.sigma_tilde, rho, log_tau.exp()).1)
}
