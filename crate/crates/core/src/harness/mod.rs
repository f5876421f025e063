//! Experiment configuration, the episodic learning loop, metrics and result
//! files.

pub mod config;
pub mod metrics;
pub mod output;
pub mod runner;

pub use config::{EnvSpec, ExperimentConfig, StopWhen};
pub use metrics::{aggregate_bayes_regret, coverage_time, loglog_slope, median_time, time_to_solve, RegretCurve};
pub use output::{summarize, write_compare, write_csv, write_run, AgentSummary};
pub use runner::{
    learn, run_episode, run_learning, run_seed, setup, AgentDriver, Coverage, EpisodeInfo, EpisodeRecord,
    ExperimentResult, Goal, LearnOptions, SeedRun, Setup, Step, World,
};
