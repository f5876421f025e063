use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vapor_core::agents::vapor_policy;
use vapor_core::bayes::{Posterior, SigmaMode};
use vapor_core::harness::{run_learning, setup, summarize, write_compare, write_run, EnvSpec, ExperimentConfig, World};
use vapor_core::mdp::Policy;
use vapor_core::oracles::{exact_pgamma, ts_monte_carlo_pgamma, TsDynamics};
use vapor_core::par::{with_workers, Exec};
use vapor_core::solver::{solve_frank_wolfe, SolverOptions, VaporProblem};
use vapor_core::table::CellTable;

#[derive(Parser)]
#[command(name = "vapor", version, about = "Variational optimism for exploration in tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EnvName {
    Deepsea,
    Chain,
    Gridworld,
    Fourroom,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    CountBound,
    ExactPosteriorStd,
}

impl From<Mode> for SigmaMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::CountBound => SigmaMode::CountBound,
            Mode::ExactPosteriorStd => SigmaMode::ExactPosteriorStd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Exact,
    TsMc,
    Vapor,
}

/// Environment selection shared by `solve` and `pgamma`.
#[derive(clap::Args, Debug)]
struct EnvArgs {
    #[arg(long, value_enum)]
    env: EnvName,
    /// Depth, chain length or grid side.
    #[arg(long = "L", alias = "size", default_value_t = 5)]
    size: usize,
    /// Chain step cost.
    #[arg(long, default_value_t = 0.001)]
    eps: f64,
    /// Layer sizes of the random env, e.g. `2,3,3`.
    #[arg(long, value_delimiter = ',', default_value = "2,3,3")]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    actions: usize,
    /// Seed used to draw the world (layout, true MDP).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EnvArgs {
    fn spec(&self) -> EnvSpec {
        match self.env {
            EnvName::Deepsea => EnvSpec::DeepSea { size: self.size },
            EnvName::Chain => EnvSpec::Chain {
                size: self.size,
                epsilon: self.eps,
            },
            EnvName::Gridworld => EnvSpec::Gridworld {
                size: self.size,
                world_seed: None,
                rewards: Default::default(),
            },
            EnvName::Fourroom => EnvSpec::FourRoom { size: self.size },
            EnvName::Random => EnvSpec::Random {
                layer_sizes: self.layers.clone(),
                actions: self.actions,
                dirichlet_scale: 1.0,
            },
        }
    }

    fn world(&self) -> Result<World> {
        let cfg = ExperimentConfig::new(self.spec(), Vec::new());
        Ok(setup(&cfg, self.seed)?.world)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the VAPOR program on an environment's prior beliefs.
    Solve {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, value_enum, default_value = "count-bound")]
        sigma_mode: Mode,
        #[arg(long, default_value_t = 1e-5)]
        gap_tol: f64,
        #[arg(long, default_value_t = 5000)]
        max_iters: usize,
        /// Write the per-iteration objective, FW gap and flow residual as CSV.
        #[arg(long)]
        dump_trace: Option<PathBuf>,
    },
    /// Run a learning experiment and write per-agent CSVs plus a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run every configured agent and write one long-format CSV.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print P(Gamma) estimates side by side.
    Pgamma {
        #[command(flatten)]
        env: EnvArgs,
        /// Estimators to print; all three by default.
        #[arg(long, value_enum, value_delimiter = ',')]
        method: Vec<Method>,
        /// Thompson-sampling draws for `ts-mc`.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, value_enum, default_value = "count-bound")]
        sigma_mode: Mode,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Solve {
            env,
            sigma_mode,
            gap_tol,
            max_iters,
            dump_trace,
        } => {
            let opts = SolverOptions {
                gap_tol,
                max_iters,
                ..SolverOptions::default()
            };
            let converged = match env.world()? {
                World::Conjugate(b) => solve(&b, sigma_mode.into(), &opts, dump_trace.as_deref())?,
                World::Finite(f) => solve(&f, sigma_mode.into(), &opts, dump_trace.as_deref())?,
            };
            Ok(if converged { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Run { config, out, workers } => {
            let (cfg, dir) = load(&config, out, workers)?;
            let result = with_workers(cfg.workers, || run_learning(&cfg))?;
            let files = write_run(&result, &dir)?;
            report(&result, &files)
        }
        Command::Compare { config, out, workers } => {
            let (cfg, dir) = load(&config, out, workers)?;
            let result = with_workers(cfg.workers, || run_learning(&cfg))?;
            let files = write_compare(&result, &dir)?;
            report(&result, &files)
        }
        Command::Pgamma {
            env,
            method,
            samples,
            sigma_mode,
        } => {
            let methods = if method.is_empty() {
                vec![Method::Exact, Method::TsMc, Method::Vapor]
            } else {
                method
            };
            let seed = env.seed;
            match env.world()? {
                World::Conjugate(b) => pgamma(&b, None, &methods, samples, seed, sigma_mode.into()),
                World::Finite(f) => {
                    let exact = methods
                        .contains(&Method::Exact)
                        .then(|| exact_pgamma(&f))
                        .transpose()?
                        .map(|m| m.0);
                    pgamma(&f, exact, &methods, samples, seed, sigma_mode.into())
                }
            }?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load(path: &Path, out: Option<PathBuf>, workers: Option<usize>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if workers.is_some() {
        cfg.workers = workers;
    }
    let dir = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("results"));
    Ok((cfg, dir))
}

fn report(result: &vapor_core::harness::ExperimentResult, files: &[PathBuf]) -> Result<ExitCode> {
    for f in files {
        println!("wrote {}", f.display());
    }
    println!("{}", serde_json::to_string_pretty(&summarize(result))?);
    Ok(ExitCode::SUCCESS)
}

fn solve<P: Posterior>(post: &P, mode: SigmaMode, opts: &SolverOptions, trace: Option<&Path>) -> Result<bool> {
    let (pi, diag) = vapor_policy(post, mode, opts)?;
    if let Some(path) = trace {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        diag.write_trace_csv(file)?;
    }
    println!("objective      {:.10}", diag.primal_value);
    match diag.dual_value {
        Some(d) => println!("dual           {d:.10}\ndual gap       {:.3e}", d - diag.primal_value),
        None => println!("dual           -"),
    }
    println!("fw gap         {:.3e}", diag.fw_gap);
    println!("iterations     {}", diag.iterations);
    println!("flow residual  {:.3e}", diag.max_flow_residual);
    print_policy(&pi);
    Ok(diag.fw_gap <= opts.gap_tol)
}

fn print_policy(pi: &Policy) {
    println!("policy (layer state: action probabilities)");
    for (l, layer) in pi.layers.iter().enumerate() {
        for (s, row) in layer.chunks(pi.actions).enumerate() {
            let probs: Vec<String> = row.iter().map(|p| format!("{p:.4}")).collect();
            println!("{l:>4} {s:>4}: {}", probs.join(" "));
        }
    }
}

fn pgamma<P: Posterior>(
    post: &P,
    exact: Option<CellTable>,
    methods: &[Method],
    samples: usize,
    seed: u64,
    mode: SigmaMode,
) -> Result<()> {
    let mut columns: Vec<(&str, CellTable)> = Vec::new();
    for m in methods {
        match m {
            Method::Exact => match &exact {
                Some(t) => columns.push(("exact", t.clone())),
                None => bail!("exact P(Gamma) needs a finite-support prior (use --env chain)"),
            },
            Method::TsMc => {
                let t = ts_monte_carlo_pgamma(post, samples, seed, TsDynamics::MeanTransitions, Exec::Parallel)?;
                columns.push(("ts-mc", t.0));
            }
            Method::Vapor => {
                let prob = VaporProblem::from_transformed(post.optimism(mode), post.rho().to_vec())?;
                let (lam, _) = solve_frank_wolfe(&prob, &SolverOptions::default())?;
                columns.push(("vapor", lam.0));
            }
        }
    }
    let names: Vec<String> = columns.iter().map(|c| format!("{:>10}", c.0)).collect();
    println!("layer state action {}", names.join(" "));
    let shape = post.shape();
    for l in 0..shape.horizon() {
        for s in 0..shape.states(l) {
            for a in 0..shape.actions {
                let vals: Vec<f64> = columns.iter().map(|c| c.1.get(l, s, a)).collect();
                if vals.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let cells: Vec<String> = vals.iter().map(|v| format!("{v:>10.6}")).collect();
                println!("{l:>5} {s:>5} {a:>6} {}", cells.join(" "));
            }
        }
    }
    Ok(())
}
