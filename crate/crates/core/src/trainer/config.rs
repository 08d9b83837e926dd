use serde::{Deserialize, Serialize};

use crate::comm::ChannelKind;
use crate::model::ModelDims;
use crate::policy::Regularize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub lr: f64,
    pub ppo_epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Weight of the independence penalty.
    pub beta: f64,
    pub regularize: Regularize,
    pub total_env_steps: usize,
    pub rollout_length: usize,
    pub channel: ChannelKind,
    pub pool_size: usize,
    pub slots: usize,
    pub seed: u64,
    pub temperature: f64,
    pub max_grad_norm: f64,
    /// Multiplier applied to rewards before computing advantages and value
    /// targets. Reported returns are unscaled.
    pub reward_scale: f64,
    pub belief_width: usize,
    pub message_width: usize,
    pub key_width: usize,
    pub hidden: usize,
    /// Write measured wall time into the metrics; off keeps the CSV
    /// byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            lr: 3e-4,
            ppo_epochs: 4,
            minibatches: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            beta: 0.01,
            regularize: Regularize::Policy,
            total_env_steps: 200_000,
            rollout_length: 128,
            channel: ChannelKind::Saf,
            pool_size: 3,
            slots: 4,
            seed: 0,
            temperature: 1.0,
            max_grad_norm: 0.5,
            reward_scale: 0.01,
            belief_width: 32,
            message_width: 32,
            key_width: 32,
            hidden: 64,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let checks: [(bool, &str); 15] = [
            (self.gamma > 0.0 && self.gamma <= 1.0, "gamma must lie in (0, 1]"),
            ((0.0..=1.0).contains(&self.gae_lambda), "gae_lambda must lie in [0, 1]"),
            (self.clip_eps > 0.0, "clip_eps must be positive"),
            (self.lr > 0.0, "lr must be positive"),
            (self.ppo_epochs >= 1, "ppo_epochs must be at least 1"),
            (self.minibatches >= 1 && self.minibatches <= self.rollout_length, "minibatches must lie in [1, rollout_length]"),
            (self.beta >= 0.0, "beta must be nonnegative"),
            (self.rollout_length >= 1, "rollout_length must be positive"),
            (self.pool_size >= 1, "pool_size must be positive"),
            (self.slots >= 1, "slots must be positive"),
            (self.temperature > 0.0, "temperature must be positive"),
            (self.max_grad_norm > 0.0, "max_grad_norm must be positive"),
            (self.reward_scale > 0.0, "reward_scale must be positive"),
            (self.belief_width >= 1 && self.message_width >= 1 && self.key_width >= 1, "widths must be positive"),
            (self.hidden >= 1 && self.value_coef >= 0.0 && self.entropy_coef >= 0.0, "hidden and coefficients invalid"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(msg.to_string()),
            None => Ok(()),
        }
    }

    pub fn model_dims(&self, observation: usize) -> ModelDims {
        ModelDims {
            observation,
            belief: self.belief_width,
            message: self.message_width,
            key: self.key_width,
            hidden: self.hidden,
            n_slots: self.slots,
            pool_size: self.pool_size,
            channel: self.channel,
            regularize: self.regularize,
            temperature: self.temperature,
        }
    }
}
