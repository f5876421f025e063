use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{aggregate_bayes_regret, loglog_slope, median_time};
use crate::harness::runner::{ExperimentResult, SeedRun};

const COLUMNS: [&str; 7] = ["seed", "episode", "regret", "cum_regret", "goal_found", "fw_gap", "fw_iters"];

/// Writes the per-episode records of `runs`; with `agent_column` the rows are
/// in long format with a leading `agent` column.
pub fn write_csv<'a, W: Write>(out: W, runs: impl IntoIterator<Item = &'a SeedRun>, agent_column: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if agent_column {
        w.write_field("agent")?;
    }
    w.write_record(COLUMNS)?;
    for run in runs {
        for e in &run.records {
            if agent_column {
                w.write_field(&run.agent)?;
            }
            w.write_record([
                e.seed.to_string(),
                e.episode.to_string(),
                e.regret.to_string(),
                e.cum_regret.to_string(),
                (e.goal_found as u8).to_string(),
                e.fw_gap.map(|g| g.to_string()).unwrap_or_default(),
                e.fw_iters.map(|g| g.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct AgentSummary {
    pub agent: String,
    pub seeds: usize,
    pub median_time_to_solve: Option<f64>,
    pub solved_seeds: usize,
    pub mean_coverage_time: Option<f64>,
    pub mean_final_cum_regret: f64,
    pub regret_loglog_slope: Option<f64>,
}

pub fn summarize(result: &ExperimentResult) -> Vec<AgentSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in &result.runs {
        if !names.contains(&r.agent.as_str()) {
            names.push(&r.agent);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let runs: Vec<&SeedRun> = result.runs_for(name).collect();
            let times: Vec<Option<usize>> = runs.iter().map(|r| r.time_to_solve).collect();
            let cov: Vec<usize> = runs.iter().filter_map(|r| r.coverage_time).collect();
            let n = runs.len() as f64;
            let final_regret = runs.iter().map(|r| r.records.last().map_or(0.0, |e| e.cum_regret)).sum::<f64>() / n;
            let curves: Vec<Vec<f64>> = runs.iter().map(|r| r.cum_regret()).collect();
            let slope = aggregate_bayes_regret(&curves).and_then(|c| loglog_slope(&c.mean));
            AgentSummary {
                agent: name.to_string(),
                seeds: runs.len(),
                median_time_to_solve: median_time(&times),
                solved_seeds: times.iter().flatten().count(),
                mean_coverage_time: (cov.len() == runs.len())
                    .then(|| cov.iter().sum::<usize>() as f64 / n),
                mean_final_cum_regret: final_regret,
                regret_loglog_slope: slope,
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub library: &'static str,
    pub version: &'static str,
    pub config: &'a ExperimentConfig,
    pub effective_replication: u64,
    pub wall_time_s: f64,
    pub seed_scheme: &'static str,
    pub protocol: &'static str,
    pub csv: Vec<String>,
    pub summary: Vec<AgentSummary>,
}

pub const SEED_SCHEME: &str = "stream 0 of each seed draws the true MDP; episode t uses stream t of the same seed";
pub const PROTOCOL: &str = "one posterior sample per episode for sampling agents; regret is exact policy evaluation in the true MDP";

pub fn write_manifest<W: Write>(out: W, result: &ExperimentResult, csv: &[PathBuf]) -> Result<()> {
    let m = Manifest {
        library: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: &result.config,
        effective_replication: result.config.replication(),
        wall_time_s: result.wall_time_s,
        seed_scheme: SEED_SCHEME,
        protocol: PROTOCOL,
        csv: csv.iter().map(|p| p.display().to_string()).collect(),
        summary: summarize(result),
    };
    serde_json::to_writer_pretty(out, &m)?;
    Ok(())
}

/// Writes `results.csv` (or `results_<agent>.csv` per agent when several are
/// configured) and `manifest.json` into `dir`.
pub fn write_run(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let agents: Vec<&str> = result.config.agents.iter().map(|a| a.name()).collect();
    let mut files = Vec::new();
    if agents.len() == 1 {
        let path = dir.join("results.csv");
        write_csv(std::fs::File::create(&path)?, &result.runs, false)?;
        files.push(path);
    } else {
        for a in agents {
            let path = dir.join(format!("results_{a}.csv"));
            write_csv(std::fs::File::create(&path)?, result.runs_for(a), false)?;
            files.push(path);
        }
    }
    write_manifest_file(result, dir, &mut files)?;
    Ok(files)
}

/// Writes the long-format `compare.csv` and `manifest.json` into `dir`.
pub fn write_compare(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("compare.csv");
    write_csv(std::fs::File::create(&path)?, &result.runs, true)?;
    let mut files = vec![path];
    write_manifest_file(result, dir, &mut files)?;
    Ok(files)
}

fn write_manifest_file(result: &ExperimentResult, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join("manifest.json");
    write_manifest(std::fs::File::create(&path)?, result, files)?;
    files.push(path);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentKind;
    use crate::harness::config::EnvSpec;
    use crate::harness::runner::run_learning;

    fn result() -> ExperimentResult {
        let mut c = ExperimentConfig::new(EnvSpec::DeepSea { size: 3 }, vec![AgentKind::Psrl, AgentKind::Vapor]);
        c.episodes = 3;
        c.seeds = vec![4, 5];
        run_learning(&c).unwrap()
    }

    #[test]
    fn csv_columns() {
        let res = result();
        let mut buf = Vec::new();
        write_csv(&mut buf, &res.runs, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "agent,seed,episode,regret,cum_regret,goal_found,fw_gap,fw_iters");
        assert_eq!(lines.count(), 12);
        let mut buf = Vec::new();
        write_csv(&mut buf, res.runs_for("vapor"), false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row.len(), 7);
        assert_eq!(row[0], "4");
        assert!(!row[5].is_empty() && !row[6].is_empty());
    }

    #[test]
    fn manifest_echoes_config() {
        let res = result();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &res, &[]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["config"]["env"]["name"], "deepsea");
        assert_eq!(v["effective_replication"], 100);
        assert_eq!(v["summary"].as_array().unwrap().len(), 2);
        assert!(v["wall_time_s"].as_f64().is_some());
    }
}
