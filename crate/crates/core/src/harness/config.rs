use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::AgentKind;
use crate::bayes::SigmaMode;
use crate::envs::GridRewardSpec;
use crate::error::{Result, VaporError};
use crate::solver::SolverOptions;

/// Environment and prior for an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    /// Fixed DeepSea of depth `size`; Dirichlet(1/sqrt(S)) and N(0, 1) priors.
    #[serde(rename = "deepsea")]
    DeepSea { size: usize },
    /// Two-point chain prior; the true MDP is drawn from it.
    Chain { size: usize, epsilon: f64 },
    /// Known-dynamics gridworld with Gaussian reward beliefs; the true means
    /// are drawn from them. `world_seed` fixes the layout across seeds.
    Gridworld {
        size: usize,
        #[serde(default)]
        world_seed: Option<u64>,
        #[serde(default)]
        rewards: GridRewardSpec,
    },
    /// Reward-free four-room grid with known dynamics.
    #[serde(rename = "fourroom")]
    FourRoom { size: usize },
    /// Dirichlet/Gaussian prior over MDPs with the given layer sizes; the
    /// true MDP is drawn from it.
    Random {
        layer_sizes: Vec<usize>,
        actions: usize,
        #[serde(default = "one")]
        dirichlet_scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::DeepSea { .. } => "deepsea",
            Self::Chain { .. } => "chain",
            Self::Gridworld { .. } => "gridworld",
            Self::FourRoom { .. } => "fourroom",
            Self::Random { .. } => "random",
        }
    }
}

/// Early stopping for a single seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopWhen {
    /// The goal has been found in at least 10% of the episodes so far.
    Solved,
    /// The goal has been found once.
    GoalFound,
    /// Every reachable state-action has been visited.
    Covered,
}

fn default_episodes() -> usize {
    100
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_agents() -> Vec<AgentKind> {
    vec![AgentKind::Vapor]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default = "default_agents")]
    pub agents: Vec<AgentKind>,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Each observation is fed to the beliefs this many times; defaults to
    /// 100 on DeepSea and 1 elsewhere.
    #[serde(default)]
    pub replication: Option<u64>,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Observation noise std assumed by the beliefs.
    #[serde(default = "one")]
    pub nu: f64,
    #[serde(default)]
    pub stop_when: Option<StopWhen>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(env: EnvSpec, agents: Vec<AgentKind>) -> Self {
        Self {
            env,
            agents,
            episodes: default_episodes(),
            seeds: default_seeds(),
            replication: None,
            sigma_mode: SigmaMode::default(),
            solver: SolverOptions::default(),
            nu: 1.0,
            stop_when: None,
            workers: None,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn replication(&self) -> u64 {
        self.replication.unwrap_or(match self.env {
            EnvSpec::DeepSea { .. } => 100,
            _ => 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(VaporError::Config(m.to_string()));
        if self.episodes == 0 {
            return fail("episodes must be >= 1");
        }
        if self.seeds.is_empty() {
            return fail("seeds must be non-empty");
        }
        if self.replication == Some(0) {
            return fail("replication must be >= 1");
        }
        if self.agents.is_empty() {
            return fail("at least one agent is required");
        }
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return fail("nu must be finite and >= 0");
        }
        for a in &self.agents {
            a.validate()?;
        }
        self.solver.validate()?;
        match &self.env {
            EnvSpec::DeepSea { size } if *size < 2 => fail("deepsea size must be >= 2"),
            EnvSpec::Chain { size, epsilon } if *size < 2 || !(*epsilon >= 0.0) => fail("invalid chain"),
            EnvSpec::Gridworld { size, .. } if *size < 2 => fail("gridworld size must be >= 2"),
            EnvSpec::FourRoom { size } if *size < 5 || size % 2 == 0 => fail("fourroom size must be odd and >= 5"),
            EnvSpec::Random { layer_sizes, actions, dirichlet_scale }
                if layer_sizes.is_empty() || layer_sizes.contains(&0) || *actions == 0 || !(*dirichlet_scale > 0.0) =>
            {
                fail("invalid random env")
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"env": {"name": "deepsea", "size": 6}, "agents": [{"kind": "vapor"}, {"kind": "psrl"}],
                "episodes": 50, "seeds": [1, 2], "stop_when": "solved"}"#,
        )
        .unwrap();
        assert_eq!(cfg.env, EnvSpec::DeepSea { size: 6 });
        assert_eq!(cfg.agents.len(), 2);
        assert_eq!(cfg.nu, 1.0);
        assert_eq!(cfg.replication(), 100);
        assert_eq!(cfg.stop_when, Some(StopWhen::Solved));
        let back = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&back).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"env": {"name": "deepsea", "size": 6}, "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": {"name": "deepsea", "size": 6}, "seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": {"name": "deepsea", "size": 6}, "episodes": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": {"name": "fourroom", "size": 8}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": {"name": "chain", "size": 4, "epsilon": 0.001}, "solver": {"max_iter": 3}}"#).is_err());
    }
}
