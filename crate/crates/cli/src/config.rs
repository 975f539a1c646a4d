//! Run configuration: defaults, a flat `key = value` file, and
//! command-line overrides, in that order of precedence. Unknown keys are
//! rejected rather than ignored, and every value is validated before any
//! computation starts.

use crate::CliError;
use qnrl_core::envs::GridWorld;
use qnrl_core::trainer::{OptimizerKind, TrainConfig};
use qnrl_core::NetworkSpec;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const BUILTIN_ENV: &str = "gridworld6";

/// Every tunable of a training run, before resolution.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainArgs {
    /// Flat key = value configuration file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in environment name (gridworld6).
    #[arg(long)]
    pub env: Option<String>,
    /// Grid layout file: '.' empty, '#' obstacle, 'S' start, 'G' goal.
    #[arg(long)]
    pub env_file: Option<PathBuf>,
    /// Hidden layer sizes, comma separated.
    #[arg(long)]
    pub layers: Option<String>,
    /// Experience memory capacity and optimization batch size.
    #[arg(long)]
    pub b: Option<usize>,
    /// Curvature-pair memory size.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eps_start: Option<f64>,
    #[arg(long)]
    pub eps_end: Option<f64>,
    #[arg(long)]
    pub eps_anneal_steps: Option<u64>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub test_eps: Option<f64>,
    #[arg(long)]
    pub test_interval: Option<u64>,
    /// Stop when the combined gradient norm falls below this.
    #[arg(long)]
    pub stop_grad_norm: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub c2: Option<f64>,
    #[arg(long)]
    pub alpha_init: Option<f64>,
    #[arg(long)]
    pub alpha_min: Option<f64>,
    #[arg(long)]
    pub max_backtracks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// lbfgs or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// SGD learning rate (sgd optimizer only).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub sgd_batch: Option<usize>,
    #[arg(long)]
    pub sgd_update_freq: Option<u64>,
    #[arg(long)]
    pub step_reward: Option<f64>,
    #[arg(long)]
    pub goal_reward: Option<f64>,
    #[arg(long)]
    pub max_episode_steps: Option<u32>,
    /// Output directory for train_log.csv, summary.json, checkpoint.bin.
    #[arg(long, default_value = "qnrl-out")]
    pub out: PathBuf,
}

/// Everything resolved and validated, ready to run.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub train: TrainConfig,
    pub spec: NetworkSpec,
    pub env: GridWorld,
    pub echo: ConfigEcho,
    pub out: PathBuf,
}

/// Effective configuration echoed into summary.json so a run can be
/// reproduced exactly.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub env: String,
    pub layers: Vec<usize>,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub max_episode_steps: u32,
    #[serde(flatten)]
    pub train: TrainConfig,
}

fn parse_key_value_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{}:{}: expected key = value, got {raw:?}",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("config key {key}: {e}")))
}

/// Folds a config file into the argument struct; explicit flags win.
fn apply_file(args: &mut TrainArgs, map: BTreeMap<String, String>) -> Result<(), CliError> {
    for (key, value) in map {
        match key.as_str() {
            "env" => {
                args.env.get_or_insert(value);
            }
            "env_file" => {
                args.env_file.get_or_insert(PathBuf::from(value));
            }
            "layers" => {
                args.layers.get_or_insert(value);
            }
            "b" => {
                args.b.get_or_insert(parse(&key, &value)?);
            }
            "m" => {
                args.m.get_or_insert(parse(&key, &value)?);
            }
            "gamma" => {
                args.gamma.get_or_insert(parse(&key, &value)?);
            }
            "eps_start" => {
                args.eps_start.get_or_insert(parse(&key, &value)?);
            }
            "eps_end" => {
                args.eps_end.get_or_insert(parse(&key, &value)?);
            }
            "eps_anneal_steps" => {
                args.eps_anneal_steps.get_or_insert(parse(&key, &value)?);
            }
            "total_steps" => {
                args.total_steps.get_or_insert(parse(&key, &value)?);
            }
            "test_eps" => {
                args.test_eps.get_or_insert(parse(&key, &value)?);
            }
            "test_interval" => {
                args.test_interval.get_or_insert(parse(&key, &value)?);
            }
            "stop_grad_norm" => {
                args.stop_grad_norm.get_or_insert(parse(&key, &value)?);
            }
            "c1" => {
                args.c1.get_or_insert(parse(&key, &value)?);
            }
            "c2" => {
                args.c2.get_or_insert(parse(&key, &value)?);
            }
            "alpha_init" => {
                args.alpha_init.get_or_insert(parse(&key, &value)?);
            }
            "alpha_min" => {
                args.alpha_min.get_or_insert(parse(&key, &value)?);
            }
            "max_backtracks" => {
                args.max_backtracks.get_or_insert(parse(&key, &value)?);
            }
            "seed" => {
                args.seed.get_or_insert(parse(&key, &value)?);
            }
            "optimizer" => {
                args.optimizer.get_or_insert(value);
            }
            "lr" => {
                args.lr.get_or_insert(parse(&key, &value)?);
            }
            "sgd_batch" => {
                args.sgd_batch.get_or_insert(parse(&key, &value)?);
            }
            "sgd_update_freq" => {
                args.sgd_update_freq.get_or_insert(parse(&key, &value)?);
            }
            "step_reward" => {
                args.step_reward.get_or_insert(parse(&key, &value)?);
            }
            "goal_reward" => {
                args.goal_reward.get_or_insert(parse(&key, &value)?);
            }
            "max_episode_steps" => {
                args.max_episode_steps.get_or_insert(parse(&key, &value)?);
            }
            "out" => {
                args.out = PathBuf::from(value);
            }
            other => {
                return Err(CliError::Config(format!("unknown configuration key {other:?}")));
            }
        }
    }
    Ok(())
}

pub fn parse_layers(text: &str) -> Result<Vec<usize>, CliError> {
    let hidden: Result<Vec<usize>, _> = text
        .split(',')
        .map(|part| part.trim().parse::<usize>())
        .collect();
    hidden.map_err(|e| CliError::Config(format!("bad layers value {text:?}: {e}")))
}

pub fn load_env(
    env: Option<&str>,
    env_file: Option<&Path>,
    step_reward: f64,
    goal_reward: f64,
    max_episode_steps: u32,
) -> Result<(GridWorld, String), CliError> {
    match (env, env_file) {
        (Some(_), Some(_)) => Err(CliError::Config(
            "choose either --env or --env-file, not both".into(),
        )),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read env file {}: {e}", path.display()))
            })?;
            let env = GridWorld::from_text(&text, step_reward, goal_reward, max_episode_steps)?;
            Ok((env, path.display().to_string()))
        }
        (name, None) => {
            let name = name.unwrap_or(BUILTIN_ENV);
            if name != BUILTIN_ENV {
                return Err(CliError::Config(format!(
                    "unknown environment {name:?}; built-in: {BUILTIN_ENV}"
                )));
            }
            let env = GridWorld::from_text(
                qnrl_core::envs::DEFAULT_6X6_LAYOUT,
                step_reward,
                goal_reward,
                max_episode_steps,
            )?;
            Ok((env, name.to_string()))
        }
    }
}

pub fn resolve(mut args: TrainArgs) -> Result<ResolvedRun, CliError> {
    if let Some(path) = args.config.take() {
        let map = parse_key_value_file(&path)?;
        apply_file(&mut args, map)?;
    }

    let step_reward = args.step_reward.unwrap_or(-0.01);
    let goal_reward = args.goal_reward.unwrap_or(1.0);
    let max_episode_steps = args.max_episode_steps.unwrap_or(200);
    let (env, env_name) = load_env(
        args.env.as_deref(),
        args.env_file.as_deref(),
        step_reward,
        goal_reward,
        max_episode_steps,
    )?;

    let hidden = match args.layers.as_deref() {
        Some(text) => parse_layers(text)?,
        None => vec![64],
    };
    let mut layer_sizes = vec![env.num_cells()];
    layer_sizes.extend(&hidden);
    layer_sizes.push(qnrl_core::envs::NUM_ACTIONS);
    let spec = NetworkSpec::new(layer_sizes.clone())?;

    let optimizer = match args.optimizer.as_deref() {
        None | Some("lbfgs") => OptimizerKind::Lbfgs,
        Some("sgd") => OptimizerKind::Sgd,
        Some(other) => {
            return Err(CliError::Config(format!(
                "unknown optimizer {other:?}; expected lbfgs or sgd"
            )))
        }
    };

    let defaults = TrainConfig::default();
    let total_steps = args.total_steps.unwrap_or(defaults.total_steps);
    let mut wolfe = defaults.wolfe;
    if let Some(v) = args.c1 {
        wolfe.c1 = v;
    }
    if let Some(v) = args.c2 {
        wolfe.c2 = v;
    }
    if let Some(v) = args.alpha_init {
        wolfe.alpha_init = v;
    }
    if let Some(v) = args.alpha_min {
        wolfe.alpha_min = v;
    }
    if let Some(v) = args.max_backtracks {
        wolfe.max_backtracks = v;
    }

    let train = TrainConfig {
        batch_size: args.b.unwrap_or(defaults.batch_size),
        lbfgs_memory: args.m.unwrap_or(defaults.lbfgs_memory),
        discount: args.gamma.unwrap_or(defaults.discount),
        eps_start: args.eps_start.unwrap_or(defaults.eps_start),
        eps_end: args.eps_end.unwrap_or(defaults.eps_end),
        // exploration anneals over the first half of the run by default
        eps_anneal_steps: args.eps_anneal_steps.unwrap_or(total_steps / 2),
        total_steps,
        test_eps: args.test_eps.unwrap_or(defaults.test_eps),
        test_interval: args.test_interval.unwrap_or(defaults.test_interval),
        grad_norm_stop_threshold: args
            .stop_grad_norm
            .unwrap_or(defaults.grad_norm_stop_threshold),
        wolfe,
        seed: args.seed.unwrap_or(defaults.seed),
        optimizer,
        sgd_learning_rate: args.lr.unwrap_or(defaults.sgd_learning_rate),
        sgd_batch: args.sgd_batch.unwrap_or(defaults.sgd_batch),
        sgd_update_freq: args.sgd_update_freq.unwrap_or(defaults.sgd_update_freq),
    };
    train.validate()?;

    let echo = ConfigEcho {
        env: env_name,
        layers: layer_sizes,
        step_reward,
        goal_reward,
        max_episode_steps,
        train: train.clone(),
    };
    Ok(ResolvedRun {
        train,
        spec,
        env,
        echo,
        out: args.out,
    })
}
