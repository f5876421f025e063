//! Conjugate posterior over an unknown layered MDP and the belief
//! transformation that folds transition uncertainty into reward uncertainty.
//!
//! Transitions carry independent Dirichlet posteriors per `(l, s, a)` row.
//! Mean rewards carry Gaussian posteriors under Gaussian observation noise with
//! known standard deviation `nu`; sufficient statistics (count, sum) are kept
//! instead of raw observations.

use std::borrow::Cow;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VaporError};
use crate::mdp::LayeredMdp;
use crate::table::{CellTable, Shape, Transitions};

/// Inflation constant applied to the reward uncertainty by the transformation.
pub const SUBGAUSSIAN_INFLATION: f64 = 3.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sqrt((nu^2 + 1) / max(n, 1))`.
    #[default]
    CountBound,
    /// Standard deviation of the Gaussian posterior on the mean reward.
    ExactPosteriorStd,
}

/// Gaussian prior on a mean reward: `N(mean, var)`. `var = 0` means known.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardPrior {
    pub mean: f64,
    pub var: f64,
}

impl Default for RewardPrior {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub shape: Shape,
    pub rho: Vec<f64>,
    /// Dirichlet parameters `alpha_l(s, a, .)`. When `known_transitions` is
    /// set this holds the known kernel and is never updated.
    pub alpha: Transitions,
    pub known_transitions: bool,
    pub prior_mean: CellTable,
    pub prior_var: CellTable,
    pub nu: f64,
    /// Integer-valued visit counts `n_l(s, a)`.
    pub counts: CellTable,
    pub reward_sum: CellTable,
}

/// Transformed beliefs: mean dynamics, mean rewards and the inflated std.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedBeliefs {
    pub p_mean: Transitions,
    pub reward_mu: CellTable,
    pub sigma_tilde: CellTable,
}

/// A distribution over layered MDPs sharing one shape.
pub trait Posterior: Sync {
    fn shape(&self) -> &Shape;
    fn rho(&self) -> &[f64];
    fn mean_transitions(&self) -> Transitions;
    fn mean_rewards(&self) -> CellTable;
    fn sample_mdp<R: Rng + ?Sized>(&self, rng: &mut R) -> LayeredMdp;
    /// Dynamics, mean rewards and uncertainty fed to the optimistic programs.
    fn optimism(&self, mode: SigmaMode) -> TransformedBeliefs;
    /// Whether every sample shares the mean dynamics.
    fn known_transitions(&self) -> bool;

    /// Like [`Posterior::sample_mdp`] but may borrow when the sample is an
    /// existing model.
    fn sample_model<R: Rng + ?Sized>(&self, rng: &mut R) -> Cow<'_, LayeredMdp> {
        Cow::Owned(self.sample_mdp(rng))
    }

    fn mean_mdp(&self) -> LayeredMdp {
        LayeredMdp {
            shape: self.shape().clone(),
            transitions: self.mean_transitions(),
            rewards: self.mean_rewards(),
            rho: self.rho().to_vec(),
            reward_noise_std: 0.0,
        }
    }
}

/// A posterior that can absorb observations.
pub trait Learner: Posterior + Clone + Send {
    /// Records `replication` identical observations of one transition.
    fn observe(&mut self, l: usize, s: usize, a: usize, r_obs: f64, s_next: Option<usize>, replication: u64) -> Result<()>;
}

impl Learner for BeliefState {
    fn observe(&mut self, l: usize, s: usize, a: usize, r_obs: f64, s_next: Option<usize>, replication: u64) -> Result<()> {
        self.update(l, s, a, r_obs, s_next, replication)
    }
}

impl BeliefState {
    /// Symmetric Dirichlet(`dirichlet_scale`) per transition row and the same
    /// Gaussian reward prior in every cell.
    ///
    /// Rows whose parameters would sum below one are rescaled to sum to one.
    pub fn new(
        shape: &Shape,
        rho: Vec<f64>,
        dirichlet_scale: f64,
        reward_prior: RewardPrior,
        nu: f64,
    ) -> Result<Self> {
        if !(dirichlet_scale > 0.0) || !dirichlet_scale.is_finite() {
            return Err(VaporError::Parameter(format!(
                "dirichlet scale must be positive, got {dirichlet_scale}"
            )));
        }
        check_noise_and_prior(nu, reward_prior)?;
        if rho.len() != shape.states(0) {
            return Err(VaporError::Shape("rho length".into()));
        }
        let mut alpha = Transitions::zeros(shape);
        for l in 0..alpha.layers.len() {
            let n_next = shape.states(l + 1);
            let per = if dirichlet_scale * n_next as f64 >= 1.0 {
                dirichlet_scale
            } else {
                1.0 / n_next as f64
            };
            alpha.layers[l].fill(per);
        }
        Ok(Self {
            shape: shape.clone(),
            rho,
            alpha,
            known_transitions: false,
            prior_mean: CellTable::filled(shape, reward_prior.mean),
            prior_var: CellTable::filled(shape, reward_prior.var),
            nu,
            counts: CellTable::zeros(shape),
            reward_sum: CellTable::zeros(shape),
        })
    }

    /// Beliefs with known dynamics `p` and per-cell Gaussian reward priors.
    pub fn with_known_transitions(
        p: Transitions,
        rho: Vec<f64>,
        prior_mean: CellTable,
        prior_var: CellTable,
        nu: f64,
    ) -> Result<Self> {
        let shape = p.shape.clone();
        prior_mean.check_shape(&shape, "prior mean")?;
        prior_var.check_shape(&shape, "prior variance")?;
        if prior_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(VaporError::Parameter("negative prior variance".into()));
        }
        check_noise_and_prior(nu, RewardPrior::default())?;
        Ok(Self {
            rho,
            alpha: p,
            known_transitions: true,
            prior_mean,
            prior_var,
            nu,
            counts: CellTable::zeros(&shape),
            reward_sum: CellTable::zeros(&shape),
            shape,
        })
    }

    /// Records `replication` identical observations of `(r_obs, s_next)`.
    ///
    /// `s_next` is required on every layer but the last.
    pub fn update(
        &mut self,
        l: usize,
        s: usize,
        a: usize,
        r_obs: f64,
        s_next: Option<usize>,
        replication: u64,
    ) -> Result<()> {
        if replication == 0 {
            return Err(VaporError::Parameter("replication must be >= 1".into()));
        }
        if l >= self.shape.horizon() || s >= self.shape.states(l) || a >= self.shape.actions {
            return Err(VaporError::Index(format!("cell ({l}, {s}, {a})")));
        }
        let k = replication as f64;
        if l + 1 < self.shape.horizon() {
            let sn = s_next.ok_or_else(|| VaporError::Index("missing next state".into()))?;
            if sn >= self.shape.states(l + 1) {
                return Err(VaporError::Index(format!("next state {sn} in layer {}", l + 1)));
            }
            if !self.known_transitions {
                self.alpha.row_mut(l, s, a)[sn] += k;
            }
        }
        let i = s * self.shape.actions + a;
        self.counts.layers[l][i] += k;
        self.reward_sum.layers[l][i] += k * r_obs;
        Ok(())
    }

    pub fn count(&self, l: usize, s: usize, a: usize) -> f64 {
        self.counts.get(l, s, a)
    }

    /// Posterior mean and variance of `r_l(s, a)`.
    pub fn reward_posterior(&self, l: usize, s: usize, a: usize) -> (f64, f64) {
        let n = self.counts.get(l, s, a);
        let sum = self.reward_sum.get(l, s, a);
        let m0 = self.prior_mean.get(l, s, a);
        let v0 = self.prior_var.get(l, s, a);
        if v0 == 0.0 {
            return (m0, 0.0);
        }
        if n == 0.0 {
            return (m0, v0);
        }
        if self.nu == 0.0 {
            // Noise-free observations pin the mean exactly.
            return (sum / n, 0.0);
        }
        let nu2 = self.nu * self.nu;
        let precision = 1.0 / v0 + n / nu2;
        ((m0 / v0 + sum / nu2) / precision, 1.0 / precision)
    }

    pub fn reward_mu(&self) -> CellTable {
        CellTable::from_fn(&self.shape, |l, s, a| self.reward_posterior(l, s, a).0)
    }

    /// Uncertainty `sigma_l(s, a)` in reward units.
    pub fn uncertainty_sigma(&self, mode: SigmaMode) -> CellTable {
        let bound = self.nu * self.nu + 1.0;
        CellTable::from_fn(&self.shape, |l, s, a| match mode {
            SigmaMode::CountBound => (bound / self.counts.get(l, s, a).max(1.0)).sqrt(),
            SigmaMode::ExactPosteriorStd => self.reward_posterior(l, s, a).1.sqrt(),
        })
    }

    /// `sum_{s'} alpha_l(s, a, s')`, infinite under known dynamics.
    pub fn alpha_total(&self, l: usize, s: usize, a: usize) -> f64 {
        if self.known_transitions || l + 1 >= self.shape.horizon() {
            f64::INFINITY
        } else {
            self.alpha.row(l, s, a).iter().sum()
        }
    }

    pub fn transform(&self, mode: SigmaMode) -> TransformedBeliefs {
        transform_beliefs(self, mode)
    }

    pub fn to_snapshot(&self) -> BeliefSnapshot {
        BeliefSnapshot {
            horizon: self.shape.horizon(),
            layer_sizes: self.shape.layer_sizes.clone(),
            actions: self.shape.actions,
            rho: self.rho.clone(),
            alpha: self.alpha.layers.clone(),
            known_transitions: self.known_transitions,
            reward_mu: self.reward_mu().layers,
            reward_count: self.counts.layers.clone(),
            reward_sum: self.reward_sum.layers.clone(),
            prior_mean: self.prior_mean.layers.clone(),
            prior_var: self.prior_var.layers.clone(),
            nu: self.nu,
        }
    }

    pub fn from_snapshot(snap: BeliefSnapshot) -> Result<Self> {
        let shape = Shape::new(snap.layer_sizes, snap.actions);
        if snap.horizon != shape.horizon() {
            return Err(VaporError::Shape("L does not match layer_sizes".into()));
        }
        let table = |layers: Vec<Vec<f64>>, what: &str| -> Result<CellTable> {
            let t = CellTable {
                actions: shape.actions,
                layers,
            };
            t.check_shape(&shape, what)?;
            Ok(t)
        };
        let alpha = Transitions {
            shape: shape.clone(),
            layers: snap.alpha,
        };
        if alpha.layers.len() + 1 != shape.horizon()
            || alpha.layers.iter().enumerate().any(|(l, v)| {
                v.len() != shape.states(l) * shape.actions * shape.states(l + 1)
            })
        {
            return Err(VaporError::Shape("alpha".into()));
        }
        Ok(Self {
            rho: snap.rho,
            alpha,
            known_transitions: snap.known_transitions,
            prior_mean: table(snap.prior_mean, "prior_mean")?,
            prior_var: table(snap.prior_var, "prior_var")?,
            nu: snap.nu,
            counts: table(snap.reward_count, "reward_count")?,
            reward_sum: table(snap.reward_sum, "reward_sum")?,
            shape,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_snapshot())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_snapshot(serde_json::from_str(text)?)
    }
}

fn check_noise_and_prior(nu: f64, prior: RewardPrior) -> Result<()> {
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(VaporError::Parameter(format!("noise std must be >= 0, got {nu}")));
    }
    if !(prior.var >= 0.0) {
        return Err(VaporError::Parameter("reward prior variance must be >= 0".into()));
    }
    Ok(())
}

/// JSON checkpoint of a [`BeliefState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefSnapshot {
    #[serde(rename = "L")]
    pub horizon: usize,
    pub layer_sizes: Vec<usize>,
    pub actions: usize,
    pub rho: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub known_transitions: bool,
    pub reward_mu: Vec<Vec<f64>>,
    pub reward_count: Vec<Vec<f64>>,
    pub reward_sum: Vec<Vec<f64>>,
    pub prior_mean: Vec<Vec<f64>>,
    pub prior_var: Vec<Vec<f64>>,
    pub nu: f64,
}

/// `sigma_tilde^2 = 3.6^2 sigma^2 + (L - l)^2 / sum alpha` with 1-based `l`.
pub fn sigma_tilde(sigma: f64, steps_to_go: usize, alpha_total: f64) -> f64 {
    let k = steps_to_go as f64;
    let dyn_term = if alpha_total.is_infinite() || steps_to_go == 0 {
        0.0
    } else {
        k * k / alpha_total
    };
    (SUBGAUSSIAN_INFLATION * SUBGAUSSIAN_INFLATION * sigma * sigma + dyn_term).sqrt()
}

pub fn transform_beliefs(b: &BeliefState, mode: SigmaMode) -> TransformedBeliefs {
    let sigma = b.uncertainty_sigma(mode);
    let l_n = b.shape.horizon();
    let sigma_tilde = CellTable::from_fn(&b.shape, |l, s, a| {
        sigma_tilde(sigma.get(l, s, a), l_n - 1 - l, b.alpha_total(l, s, a))
    });
    TransformedBeliefs {
        p_mean: b.mean_transitions(),
        reward_mu: b.reward_mu(),
        sigma_tilde,
    }
}

/// Draws a probability vector from `Dirichlet(alpha)`.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R, out: &mut [f64]) {
    let mut total = 0.0;
    for (o, &a) in out.iter_mut().zip(alpha) {
        *o = if a > 0.0 {
            Gamma::new(a, 1.0).map(|g| g.sample(rng)).unwrap_or(0.0)
        } else {
            0.0
        };
        total += *o;
    }
    if total > 0.0 && total.is_finite() {
        for o in out.iter_mut() {
            *o /= total;
        }
    } else {
        // Every gamma draw underflowed: fall back to a categorical draw.
        let a_total: f64 = alpha.iter().sum();
        let mut u = rng.random::<f64>() * a_total;
        let mut pick = alpha.len() - 1;
        for (i, &a) in alpha.iter().enumerate() {
            if u < a {
                pick = i;
                break;
            }
            u -= a;
        }
        out.fill(0.0);
        out[pick] = 1.0;
    }
}

impl Posterior for BeliefState {
    fn shape(&self) -> &Shape {
        &self.shape
    }

    fn rho(&self) -> &[f64] {
        &self.rho
    }

    fn mean_transitions(&self) -> Transitions {
        let mut p = self.alpha.clone();
        if self.known_transitions {
            return p;
        }
        for l in 0..p.layers.len() {
            let n_next = self.shape.states(l + 1);
            for row in p.layers[l].chunks_mut(n_next) {
                let t: f64 = row.iter().sum();
                for x in row.iter_mut() {
                    *x /= t;
                }
            }
        }
        p
    }

    fn mean_rewards(&self) -> CellTable {
        self.reward_mu()
    }

    fn sample_mdp<R: Rng + ?Sized>(&self, rng: &mut R) -> LayeredMdp {
        let transitions = if self.known_transitions {
            self.alpha.clone()
        } else {
            let mut p = Transitions::zeros(&self.shape);
            for l in 0..p.layers.len() {
                let n_next = self.shape.states(l + 1);
                for (src, dst) in self.alpha.layers[l]
                    .chunks(n_next)
                    .zip(p.layers[l].chunks_mut(n_next))
                {
                    sample_dirichlet(src, rng, dst);
                }
            }
            p
        };
        let rewards = CellTable::from_fn(&self.shape, |l, s, a| {
            let (m, v) = self.reward_posterior(l, s, a);
            if v > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            } else {
                m
            }
        });
        LayeredMdp {
            shape: self.shape.clone(),
            transitions,
            rewards,
            rho: self.rho.clone(),
            reward_noise_std: self.nu,
        }
    }

    fn optimism(&self, mode: SigmaMode) -> TransformedBeliefs {
        transform_beliefs(self, mode)
    }

    fn known_transitions(&self) -> bool {
        self.known_transitions
    }
}

/// Independent draws `r ~ N(reward_mu, sigma_tilde^2)`.
pub fn sample_transformed_rewards<R: Rng + ?Sized>(t: &TransformedBeliefs, rng: &mut R) -> CellTable {
    t.reward_mu.zip_map(&t.sigma_tilde, |m, sd| {
        if sd > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            m + sd * z
        } else {
            m
        }
    })
}
