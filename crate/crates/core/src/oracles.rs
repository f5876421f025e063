//! Ground-truth computations: exact and sampled probabilities of state-action
//! optimality, weighted KL divergences and expected optimal values.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{sample_transformed_rewards, Learner, Posterior, SigmaMode, TransformedBeliefs};
use crate::error::{Result, VaporError};
use crate::mdp::{evaluate_policy, occupancy_unchecked, optimal_values, LayeredMdp, OccupancyMeasure, Policy};
use crate::par::{mc_blocks, Exec};
use crate::table::{CellTable, Shape, Transitions};

/// A prior putting `weights[i]` on `mdps[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteSupportPrior {
    pub mdps: Vec<LayeredMdp>,
    pub weights: Vec<f64>,
}

impl FiniteSupportPrior {
    pub fn new(mdps: Vec<LayeredMdp>, weights: Vec<f64>) -> Result<Self> {
        if mdps.is_empty() || mdps.len() != weights.len() {
            return Err(VaporError::Parameter("need one weight per MDP".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(VaporError::Parameter("weights must be a distribution".into()));
        }
        let first = &mdps[0];
        if mdps.iter().any(|m| m.shape != first.shape || m.rho != first.rho) {
            return Err(VaporError::Shape("support MDPs must share shape and rho".into()));
        }
        Ok(Self { mdps, weights })
    }

    /// A single-MDP prior.
    pub fn point(mdp: LayeredMdp) -> Self {
        Self {
            mdps: vec![mdp],
            weights: vec![1.0],
        }
    }

    pub fn shares_transitions(&self) -> bool {
        self.mdps.iter().all(|m| m.transitions == self.mdps[0].transitions)
    }

    fn weighted(&self, f: impl Fn(&LayeredMdp) -> &CellTable) -> CellTable {
        let mut out = CellTable::zeros(&self.mdps[0].shape);
        for (m, &w) in self.mdps.iter().zip(&self.weights) {
            for (o, &x) in out.iter_mut().zip(f(m).iter()) {
                *o += w * x;
            }
        }
        out
    }

    /// Exact standard deviation of each mean reward under the prior.
    pub fn reward_std(&self) -> CellTable {
        let mean = self.mean_rewards();
        let mut var = CellTable::zeros(&self.mdps[0].shape);
        for (m, &w) in self.mdps.iter().zip(&self.weights) {
            for ((v, &x), &mu) in var.iter_mut().zip(m.rewards.iter()).zip(mean.iter()) {
                *v += w * (x - mu) * (x - mu);
            }
        }
        var.map(|v| v.max(0.0).sqrt())
    }
}

impl Posterior for FiniteSupportPrior {
    fn shape(&self) -> &Shape {
        &self.mdps[0].shape
    }

    fn rho(&self) -> &[f64] {
        &self.mdps[0].rho
    }

    fn mean_transitions(&self) -> Transitions {
        let mut p = Transitions::zeros(self.shape());
        for (m, &w) in self.mdps.iter().zip(&self.weights) {
            for (dst, src) in p.layers.iter_mut().zip(&m.transitions.layers) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        p
    }

    fn mean_rewards(&self) -> CellTable {
        self.weighted(|m| &m.rewards)
    }

    fn sample_mdp<R: Rng + ?Sized>(&self, rng: &mut R) -> LayeredMdp {
        self.sample_model(rng).into_owned()
    }

    fn sample_model<R: Rng + ?Sized>(&self, rng: &mut R) -> Cow<'_, LayeredMdp> {
        let mut u = rng.random::<f64>();
        let mut pick = self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 && u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        Cow::Borrowed(&self.mdps[pick])
    }

    /// Mean dynamics and the exact prior std of each reward; no inflation is
    /// applied since the support is explicit.
    fn optimism(&self, _mode: SigmaMode) -> TransformedBeliefs {
        TransformedBeliefs {
            p_mean: self.mean_transitions(),
            reward_mu: self.mean_rewards(),
            sigma_tilde: self.reward_std(),
        }
    }

    fn known_transitions(&self) -> bool {
        self.shares_transitions()
    }
}

/// Bayes' rule over the support. Rewards are compared exactly when an MDP
/// has no observation noise and through the Gaussian likelihood otherwise.
impl Learner for FiniteSupportPrior {
    fn observe(&mut self, l: usize, s: usize, a: usize, r_obs: f64, s_next: Option<usize>, replication: u64) -> Result<()> {
        let shape = self.shape();
        if l >= shape.horizon() || s >= shape.states(l) || a >= shape.actions {
            return Err(VaporError::Index(format!("cell ({l}, {s}, {a})")));
        }
        let k = replication as f64;
        let mut log_w: Vec<f64> = Vec::with_capacity(self.mdps.len());
        for (m, &w) in self.mdps.iter().zip(&self.weights) {
            let mut lw = w.ln();
            if let (Some(sn), true) = (s_next, l + 1 < m.horizon()) {
                lw += k * m.transitions.row(l, s, a)[sn].ln();
            }
            let mean = m.rewards.get(l, s, a);
            if m.reward_noise_std > 0.0 {
                let z = (r_obs - mean) / m.reward_noise_std;
                lw -= k * 0.5 * z * z;
            } else if (r_obs - mean).abs() > 1e-9 {
                lw = f64::NEG_INFINITY;
            }
            log_w.push(lw);
        }
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(VaporError::Parameter("observation is impossible under every support MDP".into()));
        }
        let z: f64 = log_w.iter().map(|lw| (lw - top).exp()).sum();
        for (w, lw) in self.weights.iter_mut().zip(&log_w) {
            *w = (lw - top).exp() / z;
        }
        Ok(())
    }
}

/// `P(Gamma)`: the prior mixture of the optimal occupancy measures.
pub fn exact_pgamma(prior: &FiniteSupportPrior) -> Result<OccupancyMeasure> {
    if !prior.shares_transitions() {
        return Err(VaporError::Parameter(
            "exact P(Gamma) requires dynamics shared across the support".into(),
        ));
    }
    let shape = prior.shape();
    let mut out = CellTable::zeros(shape);
    for (m, &w) in prior.mdps.iter().zip(&prior.weights) {
        let (_, pi) = optimal_values(shape, &m.transitions, &m.rewards);
        let lam = occupancy_unchecked(&m.transitions, &m.rho, &pi);
        for (o, &x) in out.iter_mut().zip(lam.iter()) {
            *o += w * x;
        }
    }
    Ok(OccupancyMeasure(out))
}

/// Dynamics under which each Thompson-sampling occupancy is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsDynamics {
    /// Posterior-mean dynamics; the average is then a valid occupancy measure.
    #[default]
    MeanTransitions,
    /// The sampled MDP's own dynamics.
    SampledTransitions,
}

/// Average occupancy of `n` posterior-sampling policies.
pub fn ts_monte_carlo_pgamma<P: Posterior>(
    post: &P,
    n: usize,
    seed: u64,
    dynamics: TsDynamics,
    exec: Exec,
) -> Result<OccupancyMeasure> {
    if n == 0 {
        return Err(VaporError::Parameter("need at least one sample".into()));
    }
    let shape = post.shape().clone();
    let p_mean = post.mean_transitions();
    let rho = post.rho().to_vec();
    let blocks = mc_blocks(n, seed, exec, |rng, count| {
        let mut acc = CellTable::zeros(&shape);
        for _ in 0..count {
            let m = post.sample_model(rng);
            let (_, pi) = optimal_values(&shape, &m.transitions, &m.rewards);
            let p = match dynamics {
                TsDynamics::MeanTransitions => &p_mean,
                TsDynamics::SampledTransitions => &m.transitions,
            };
            let lam = occupancy_unchecked(p, &rho, &pi);
            for (a, &x) in acc.iter_mut().zip(lam.iter()) {
                *a += x;
            }
        }
        acc
    });
    let mut out = CellTable::zeros(&shape);
    for b in &blocks {
        for (o, &x) in out.iter_mut().zip(b.iter()) {
            *o += x;
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|x| *x *= inv);
    Ok(OccupancyMeasure(out))
}

/// `sum tau * lam_p * log(lam_p / lam_q)` with `0 log 0 = 0`.
///
/// Cells with infinite `tau` are skipped. Returns `+inf` when `lam_q` vanishes
/// where `lam_p` does not.
pub fn weighted_kl(tau: &CellTable, lam_p: &CellTable, lam_q: &CellTable) -> f64 {
    let mut total = 0.0;
    for ((&t, &p), &q) in tau.iter().zip(lam_p.iter()).zip(lam_q.iter()) {
        if !t.is_finite() || t == 0.0 || p <= 0.0 {
            continue;
        }
        if q <= 0.0 {
            return f64::INFINITY;
        }
        total += t * p * (p / q).ln();
    }
    total
}

/// Exact `E V*` over a finite-support prior.
pub fn exact_expected_vstar(prior: &FiniteSupportPrior) -> f64 {
    prior
        .mdps
        .iter()
        .zip(&prior.weights)
        .map(|(m, &w)| {
            let (vt, _) = optimal_values(&m.shape, &m.transitions, &m.rewards);
            w * vt.initial_value(&m.rho)
        })
        .sum()
}

fn mean_and_se(blocks: &[(f64, f64)], n: usize) -> (f64, f64) {
    let (s, s2) = blocks.iter().fold((0.0, 0.0), |acc, b| (acc.0 + b.0, acc.1 + b.1));
    let nf = n as f64;
    let mean = s / nf;
    let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return Err(VaporError::Parameter("need at least two samples".into()));
    }
    Ok(())
}

/// Monte-Carlo `E rho . V_1*` over posterior samples, with its standard error.
pub fn mc_expected_vstar<P: Posterior>(post: &P, n: usize, seed: u64, exec: Exec) -> Result<(f64, f64)> {
    check_samples(n)?;
    let blocks = mc_blocks(n, seed, exec, |rng, count| {
        (0..count).fold((0.0, 0.0), |(s, s2), _| {
            let m = post.sample_mdp(rng);
            let (vt, _) = optimal_values(&m.shape, &m.transitions, &m.rewards);
            let v = vt.initial_value(&m.rho);
            (s + v, s2 + v * v)
        })
    });
    Ok(mean_and_se(&blocks, n))
}

/// Monte-Carlo `E V*` under transformed beliefs: mean dynamics and rewards
/// drawn from `N(reward_mu, sigma_tilde^2)`.
pub fn mc_transformed_vstar(
    t: &TransformedBeliefs,
    rho: &[f64],
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<(f64, f64)> {
    check_samples(n)?;
    let shape = &t.p_mean.shape;
    let blocks = mc_blocks(n, seed, exec, |rng, count| {
        (0..count).fold((0.0, 0.0), |(s, s2), _| {
            let r = sample_transformed_rewards(t, rng);
            let (vt, _) = optimal_values(shape, &t.p_mean, &r);
            let v = vt.initial_value(rho);
            (s + v, s2 + v * v)
        })
    });
    Ok(mean_and_se(&blocks, n))
}

/// Monte-Carlo `E rho . V_1^pi` of a fixed policy over sampled dynamics, with
/// rewards held at their posterior means.
pub fn mc_policy_value<P: Posterior>(
    post: &P,
    policy: &Policy,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<(f64, f64)> {
    check_samples(n)?;
    policy.check_shape(post.shape(), "policy")?;
    let r = post.mean_rewards();
    let blocks = mc_blocks(n, seed, exec, |rng, count| {
        (0..count).fold((0.0, 0.0), |(s, s2), _| {
            let m = post.sample_mdp(rng);
            let v = evaluate_policy(&m.shape, &m.transitions, &r, policy).initial_value(&m.rho);
            (s + v, s2 + v * v)
        })
    });
    Ok(mean_and_se(&blocks, n))
}
