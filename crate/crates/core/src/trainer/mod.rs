//! PPO training of the shared agent model on GhostRun.

mod config;
mod gae;
mod metrics;
mod ppo;
mod rollout;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Action, EnvError, GhostRun, GridConfig};
use crate::model::AgentModel;
use crate::optim::OptimizerState;
use crate::seeds::{stream_seed, Stream};
use crate::tensor::TensorError;

pub use config::TrainConfig;
pub use gae::{compute_gae, normalize};
pub use metrics::{head_mean, metrics_header, tail_mean, MetricsTable, MetricsWriter, UpdateMetrics};
pub use ppo::{
    clipped_surrogate, compute_advantages, independence_penalty, mean_selection_kl, minibatch_loss,
    minibatch_slices, ppo_update, LossReport,
};
pub use rollout::{collect_rollout, RolloutBatch, Runner, StepRecord, Transition};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed batch: {0}")]
    Batch(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
}

impl TrainError {
    /// Numerical blow-ups, as opposed to configuration or I/O problems.
    pub fn is_divergence(&self) -> bool {
        matches!(self, TrainError::NonFinite(_) | TrainError::Tensor(TensorError::NonFinite { .. }))
    }
}

pub fn build_model(grid: &GridConfig, cfg: &TrainConfig, run_seed: u64) -> AgentModel {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(run_seed, Stream::Init));
    AgentModel::new(cfg.model_dims(grid.observation_len()), &mut rng)
}

pub struct TrainRun {
    pub metrics: Vec<UpdateMetrics>,
    pub model: AgentModel,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Alternates rollouts and PPO updates until `total_env_steps` joint steps
/// have been taken. `on_update` sees every metrics row as it is produced.
pub fn train(
    grid: &GridConfig,
    cfg: &TrainConfig,
    run_seed: u64,
    mut on_update: impl FnMut(&UpdateMetrics) -> std::io::Result<()>,
) -> Result<TrainRun, TrainError> {
    grid.validate()?;
    cfg.validate().map_err(TrainError::Config)?;
    let started = Instant::now();
    let mut model = build_model(grid, cfg, run_seed);
    let mut optimizer = OptimizerState::new(&model.params, cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(run_seed, Stream::Shuffle));
    let mut runner = Runner::new(grid, &model, run_seed)?;
    let mut metrics = Vec::new();
    let mut env_steps = 0;
    let mut update_idx = 0;
    while env_steps < cfg.total_env_steps {
        let mut batch = collect_rollout(&mut runner, &model, cfg.rollout_length)?;
        env_steps += batch.len();
        compute_advantages(&mut batch, cfg.gamma, cfg.gae_lambda, cfg.reward_scale)?;
        let losses = ppo_update(&batch, &mut model, &mut optimizer, cfg, &mut shuffle_rng)?;
        let (mean_return, std_return) = mean_std(&batch.episode_returns);
        let count = batch.transitions().count() as f64;
        let mut usage = vec![0.0; cfg.pool_size];
        let mut selector_entropy = 0.0;
        for t in batch.transitions() {
            usage[t.selection] += 1.0 / count;
            selector_entropy -= t.dist_with.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>() / count;
        }
        let row = UpdateMetrics {
            update_idx,
            env_steps,
            mean_return,
            std_return,
            mean_selection_kl: mean_selection_kl(&batch),
            selector_entropy,
            policy_usage: usage,
            channel_cost_per_step: batch.channel_cost.per_step(),
            loss_policy: losses.policy,
            loss_value: losses.value,
            loss_entropy: losses.entropy,
            loss_kl: losses.kl,
            wall_time_s: if cfg.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_update(&row).map_err(|e| TrainError::Config(format!("metrics sink failed: {e}")))?;
        metrics.push(row);
        update_idx += 1;
    }
    Ok(TrainRun { metrics, model })
}

/// Mean episode return of `model` acting stochastically.
pub fn evaluate_policy(model: &AgentModel, grid: &GridConfig, episodes: usize, seed: u64) -> Result<f64, TrainError> {
    let mut runner = Runner::new(grid, model, seed)?;
    let mut returns = Vec::with_capacity(episodes);
    while returns.len() < episodes {
        let batch = collect_rollout(&mut runner, model, grid.episode_length)?;
        returns.extend(batch.episode_returns);
    }
    returns.truncate(episodes);
    Ok(returns.iter().sum::<f64>() / episodes as f64)
}

/// Mean episode return when every agent always stays put.
pub fn scripted_stay_return(grid: &GridConfig, episodes: usize, seed: u64) -> Result<f64, TrainError> {
    let rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Environment) ^ grid.seed);
    let (mut env, _) = GhostRun::new(grid.clone(), rng)?;
    let stay = vec![Action::Stay; grid.n_agents];
    let mut total = 0.0;
    for e in 0..episodes {
        if e > 0 {
            env.reset()?;
        }
        loop {
            let out = env.step(&stay)?;
            total += out.reward;
            if out.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}
