//! Command-line entry point: `train`, `bench` (quadratic, rosenbrock,
//! cost-ratio) and `oracle`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical
//! failure/divergence, 3 I/O failure.

mod config;

use clap::{Parser, Subcommand};
use config::{resolve, TrainArgs};
use qnrl_core::bench::{
    self, check_convergence_bound, cost_ratio, lbfgs_minimize, make_quadratic, ConvexOptimizer,
};
use qnrl_core::envs::{value_iteration, NUM_ACTIONS};
use qnrl_core::linesearch::WolfeParams;
use qnrl_core::trainer::{self, TrainLogRecord};
use qnrl_core::{checkpoint, Error as CoreError, NetworkSpec};
use serde::Serialize;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::TrainingDiverged(_)
            | CoreError::Diverged(_)
            | CoreError::LineSearchFailed(_)
            | CoreError::NotDescentDirection(_) => CliError::Numerical(e.to_string()),
            CoreError::Io(inner) => CliError::Io(inner.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "qnrl", about = "Multi-batch line-search L-BFGS deep Q-learning harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job and write train_log.csv, summary.json and a
    /// final checkpoint.
    Train(TrainArgs),
    /// Optimizer benchmarks.
    Bench {
        #[command(subcommand)]
        suite: BenchCommand,
    },
    /// Exact tabular values: write the optimal Q table, optionally
    /// compare a checkpoint against it.
    Oracle(OracleArgs),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Minibatch quasi-Newton on a generated strongly convex quadratic,
    /// with the convergence-bound check.
    Quadratic(QuadraticArgs),
    /// Line-search smoke test from the classic start point.
    Rosenbrock(RosenbrockArgs),
    /// Closed-form per-update runtime ratio against the SGD baseline.
    CostRatio(CostRatioArgs),
}

#[derive(Debug, clap::Args)]
struct QuadraticArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda_max: f64,
    #[arg(long, default_value_t = 16)]
    partitions: usize,
    #[arg(long, default_value_t = 0.02)]
    alpha: f64,
    #[arg(long, default_value_t = 40)]
    m: usize,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.25)]
    batch_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// lbfgs or sgd.
    #[arg(long, default_value = "lbfgs")]
    optimizer: String,
    #[arg(long, default_value = "qnrl-out")]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct RosenbrockArgs {
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    grad_tol: f64,
    #[arg(long, default_value = "qnrl-out")]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct CostRatioArgs {
    /// SGD update frequency.
    #[arg(long, default_value_t = 4.0)]
    f: f64,
    /// Gradient recomputations per line search.
    #[arg(long, default_value_t = 5.0)]
    z: f64,
    /// SGD batch size.
    #[arg(long, default_value_t = 32.0)]
    bs: f64,
    /// Quasi-Newton batch size.
    #[arg(long, default_value_t = 2048.0)]
    b: f64,
    /// Curvature-pair memory size.
    #[arg(long, default_value_t = 20.0)]
    m: f64,
}

#[derive(Debug, clap::Args)]
struct OracleArgs {
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    env_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = -0.01)]
    step_reward: f64,
    #[arg(long, default_value_t = 1.0)]
    goal_reward: f64,
    #[arg(long, default_value_t = 200)]
    max_episode_steps: u32,
    /// Checkpoint to compare against the oracle.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Hidden layer sizes of the checkpointed network.
    #[arg(long)]
    layers: Option<String>,
    /// Fail (exit 2) when the optimality gap exceeds this.
    #[arg(long)]
    gap_threshold: Option<f64>,
    #[arg(long, default_value = "qnrl-out")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Bench { suite } => match suite {
            BenchCommand::Quadratic(args) => cmd_bench_quadratic(args),
            BenchCommand::Rosenbrock(args) => cmd_bench_rosenbrock(args),
            BenchCommand::CostRatio(args) => cmd_bench_cost_ratio(args),
        },
        Command::Oracle(args) => cmd_oracle(args),
    };
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a config::ConfigEcho,
    stop_reason: String,
    optimization_steps: usize,
    final_score: f64,
    final_grad_norm: Option<f64>,
    wolfe_satisfied_fraction: Option<f64>,
    total_wall_ms: u128,
}

fn write_train_log(path: &PathBuf, records: &[TrainLogRecord]) -> Result<(), CliError> {
    let mut text = String::from(TrainLogRecord::CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.to_csv_row());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let run = resolve(args)?;
    std::fs::create_dir_all(&run.out)?;

    let started = Instant::now();
    let outcome = trainer::train(&run.train, &run.env, &run.spec)?;
    let total_wall_ms = started.elapsed().as_millis();

    write_train_log(&run.out.join("train_log.csv"), &outcome.records)?;
    checkpoint::save(&run.out.join("checkpoint.bin"), &outcome.final_weights)?;

    let accepted_unit_steps = outcome
        .records
        .iter()
        .filter(|r| r.wolfe_satisfied)
        .count();
    let summary = TrainSummary {
        config: &run.echo,
        stop_reason: outcome.stop_reason.to_string(),
        optimization_steps: outcome.records.len(),
        final_score: outcome.final_score,
        final_grad_norm: outcome.records.last().map(|r| r.grad_norm),
        wolfe_satisfied_fraction: if outcome.records.is_empty() {
            None
        } else {
            Some(accepted_unit_steps as f64 / outcome.records.len() as f64)
        },
        total_wall_ms,
    };
    std::fs::write(
        run.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "trained {} optimization steps in {} ms; final score {}; stop reason: {}",
        outcome.records.len(),
        total_wall_ms,
        outcome.final_score,
        outcome.stop_reason
    );
    Ok(())
}

#[derive(Serialize)]
struct QuadraticSummary {
    n: usize,
    lambda: f64,
    lambda_max: f64,
    partitions: usize,
    alpha: f64,
    m: usize,
    iterations: usize,
    batch_fraction: f64,
    seed: u64,
    optimizer: String,
    violations: usize,
    eta: f64,
    h_lambda: f64,
    h_lambda_max: f64,
    initial_gap: f64,
    final_gap: f64,
}

fn cmd_bench_quadratic(args: QuadraticArgs) -> Result<(), CliError> {
    let problem = make_quadratic(args.seed, args.n, args.lambda, args.lambda_max, args.partitions)?;
    let optimizer = match args.optimizer.as_str() {
        "lbfgs" => ConvexOptimizer::LbfgsFixedAlpha(args.alpha),
        "sgd" => ConvexOptimizer::Sgd(args.alpha),
        other => {
            return Err(CliError::Config(format!(
                "unknown optimizer {other:?}; expected lbfgs or sgd"
            )))
        }
    };
    let run = bench::run_convex_bench(
        &problem,
        &optimizer,
        args.m,
        args.iterations,
        args.batch_fraction,
        args.seed,
    )?;
    let check = check_convergence_bound(&problem, &run, args.alpha)?;

    std::fs::create_dir_all(&args.out)?;
    let mut csv = String::from("iteration,gap,bound,alpha,grad_norm\n");
    for (k, &gap) in run.gaps.iter().enumerate() {
        let alpha = run.alphas.get(k).map(|v| v.to_string()).unwrap_or_default();
        let grad_norm = run
            .grad_norms
            .get(k)
            .map(|v| v.to_string())
            .unwrap_or_default();
        csv.push_str(&format!(
            "{k},{gap},{bound},{alpha},{grad_norm}\n",
            bound = check.bounds[k]
        ));
    }
    std::fs::write(args.out.join("bench_quadratic.csv"), csv)?;

    let summary = QuadraticSummary {
        n: args.n,
        lambda: args.lambda,
        lambda_max: args.lambda_max,
        partitions: args.partitions,
        alpha: args.alpha,
        m: args.m,
        iterations: args.iterations,
        batch_fraction: args.batch_fraction,
        seed: args.seed,
        optimizer: args.optimizer,
        violations: check.violations,
        eta: run.eta,
        h_lambda: run.h_lambda,
        h_lambda_max: run.h_lambda_max,
        initial_gap: run.gaps[0],
        final_gap: *run.gaps.last().unwrap(),
    };
    std::fs::write(
        args.out.join("bench_quadratic_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "quadratic bench: violations = {}, initial gap {:.6e}, final gap {:.6e}",
        check.violations, summary.initial_gap, summary.final_gap
    );
    Ok(())
}

#[derive(Serialize)]
struct RosenbrockSummary {
    m: usize,
    max_iters: usize,
    grad_tol: f64,
    converged: bool,
    iterations: usize,
    final_value: f64,
    final_grad_norm: f64,
    x: Vec<f64>,
}

fn cmd_bench_rosenbrock(args: RosenbrockArgs) -> Result<(), CliError> {
    let result = lbfgs_minimize(
        bench::rosenbrock_eval,
        &[-1.2, 1.0],
        args.m,
        args.max_iters,
        args.grad_tol,
        &WolfeParams::bench(),
    )?;
    std::fs::create_dir_all(&args.out)?;
    let summary = RosenbrockSummary {
        m: args.m,
        max_iters: args.max_iters,
        grad_tol: args.grad_tol,
        converged: result.converged,
        iterations: result.iterations,
        final_value: result.f,
        final_grad_norm: result.grad_norm,
        x: result.x,
    };
    std::fs::write(
        args.out.join("bench_rosenbrock_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "rosenbrock: converged = {}, iterations = {}, grad norm = {:.3e}",
        summary.converged, summary.iterations, summary.final_grad_norm
    );
    if !summary.converged {
        return Err(CliError::Numerical(
            "rosenbrock run did not reach the gradient tolerance".into(),
        ));
    }
    Ok(())
}

fn cmd_bench_cost_ratio(args: CostRatioArgs) -> Result<(), CliError> {
    if [args.f, args.z, args.bs, args.b, args.m]
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
        || args.bs == 0.0
        || args.b == 0.0
    {
        return Err(CliError::Config("cost-ratio arguments must be positive".into()));
    }
    let ratio = cost_ratio(args.f, args.z, args.bs, args.b, args.m);
    println!("{ratio:.2}");
    Ok(())
}

#[derive(Serialize)]
struct OracleSummary {
    env: String,
    gamma: f64,
    tol: f64,
    step_reward: f64,
    goal_reward: f64,
    max_episode_steps: u32,
    rows: usize,
    checkpoint: Option<String>,
    layers: Option<Vec<usize>>,
    optimality_gap: Option<f64>,
}

fn cmd_oracle(args: OracleArgs) -> Result<(), CliError> {
    let (env, env_name) = config::load_env(
        args.env.as_deref(),
        args.env_file.as_deref(),
        args.step_reward,
        args.goal_reward,
        args.max_episode_steps,
    )?;
    let oracle = value_iteration(&env, args.gamma, args.tol);

    std::fs::create_dir_all(&args.out)?;
    let mut csv = String::from("state_x,state_y,action,q\n");
    for y in 0..env.height() {
        for x in 0..env.width() {
            for a in 0..NUM_ACTIONS {
                let q = oracle.get(qnrl_core::envs::Cell { x, y }, a);
                csv.push_str(&format!("{x},{y},{a},{q}\n"));
            }
        }
    }
    std::fs::write(args.out.join("qstar.csv"), csv)?;
    println!(
        "wrote optimal Q table: {} rows",
        env.width() * env.height() * NUM_ACTIONS
    );

    let mut summary = OracleSummary {
        env: env_name,
        gamma: args.gamma,
        tol: args.tol,
        step_reward: args.step_reward,
        goal_reward: args.goal_reward,
        max_episode_steps: args.max_episode_steps,
        rows: env.width() * env.height() * NUM_ACTIONS,
        checkpoint: args.checkpoint.as_ref().map(|p| p.display().to_string()),
        layers: None,
        optimality_gap: None,
    };

    let mut gap_failure = None;
    if let Some(ckpt_path) = &args.checkpoint {
        let w = checkpoint::load(ckpt_path)?;
        let hidden = match args.layers.as_deref() {
            Some(text) => config::parse_layers(text)?,
            None => vec![64],
        };
        let mut sizes = vec![env.num_cells()];
        sizes.extend(&hidden);
        sizes.push(NUM_ACTIONS);
        let spec = NetworkSpec::new(sizes.clone())?;
        if spec.num_params() != w.len() {
            return Err(CliError::Config(format!(
                "checkpoint holds {} parameters but the network needs {}",
                w.len(),
                spec.num_params()
            )));
        }
        let gap = trainer::q_optimality_gap(&spec, &w, &oracle, &env)?;
        println!("optimality gap: {gap}");
        summary.layers = Some(sizes);
        summary.optimality_gap = Some(gap);
        if let Some(threshold) = args.gap_threshold {
            if gap > threshold {
                gap_failure = Some(format!(
                    "optimality gap {gap} exceeds threshold {threshold}"
                ));
            }
        }
    }
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    if let Some(message) = gap_failure {
        return Err(CliError::Numerical(message));
    }
    Ok(())
}
