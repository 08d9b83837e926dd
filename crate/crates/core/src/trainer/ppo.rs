use rand::seq::SliceRandom;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::model::{AgentModel, BatchInputs};
use crate::nn::{categorical_kl, entropy_rows, PROB_FLOOR};
use crate::optim::{adam_step, clip_grad_norm, OptimizerState};
use crate::policy::Regularize;
use crate::tensor::{Tensor, TensorError};

use super::gae::{compute_gae, normalize};
use super::{RolloutBatch, TrainConfig, TrainError};

/// Fills `advantages` and `returns` with per-agent GAE over the batch.
pub fn compute_advantages(
    batch: &mut RolloutBatch,
    gamma: f64,
    lambda: f64,
    reward_scale: f64,
) -> Result<(), TensorError> {
    let (t_len, n) = (batch.steps.len(), batch.n_agents);
    let rewards: Vec<f64> = batch.steps.iter().map(|s| s.reward * reward_scale).collect();
    let dones: Vec<bool> = batch.steps.iter().map(|s| s.done).collect();
    batch.advantages = vec![0.0; t_len * n];
    batch.returns = vec![0.0; t_len * n];
    for i in 0..n {
        let mut values: Vec<f64> = batch.steps.iter().map(|s| s.agents[i].value).collect();
        values.push(batch.bootstrap_values[i]);
        let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, lambda)?;
        for t in 0..t_len {
            batch.advantages[t * n + i] = adv[t];
            batch.returns[t * n + i] = ret[t];
        }
    }
    Ok(())
}

/// Mean KL over agents and steps: selection distributions in policy mode,
/// action distributions in action mode, zero when unregularized.
pub fn independence_penalty(batch: &RolloutBatch) -> Result<f64, TrainError> {
    let count = batch.transitions().count();
    if count == 0 {
        return Ok(0.0);
    }
    if batch.transitions().any(|t| t.dist_with.is_empty() || t.dist_prior.is_empty()) {
        return Err(TrainError::Batch("transition is missing selection distributions".into()));
    }
    let total: f64 = match batch.regularize {
        Regularize::Policy => {
            let mut sum = 0.0;
            for t in batch.transitions() {
                sum += categorical_kl(&t.dist_with, &t.dist_prior)?;
            }
            sum
        }
        Regularize::Action => batch.transitions().map(|t| t.action_kl).sum(),
        Regularize::None => 0.0,
    };
    Ok(total / count as f64)
}

/// Mean selection KL regardless of mode (reported as a metric).
pub fn mean_selection_kl(batch: &RolloutBatch) -> f64 {
    let count = batch.transitions().count();
    if count == 0 {
        return 0.0;
    }
    batch.transitions().map(|t| t.selection_kl).sum::<f64>() / count as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Raw independence penalty before weighting.
    pub penalty: f64,
    /// `beta * penalty` as it enters the loss.
    pub kl: f64,
    pub total: f64,
}

/// Clipped surrogate `-mean(min(ρA, clip(ρ, 1-ε, 1+ε)A))`.
pub fn clipped_surrogate(
    g: &mut Graph,
    new_log_probs: Var,
    old_log_probs: &[f64],
    advantages: &[f64],
    clip_eps: f64,
) -> Result<Var, TensorError> {
    let rows = old_log_probs.len();
    let old = g.constant(Tensor::new(rows, 1, old_log_probs.to_vec())?)?;
    let adv = g.constant(Tensor::new(rows, 1, advantages.to_vec())?)?;
    let diff = g.sub(new_log_probs, old)?;
    let ratio = g.exp(diff)?;
    let unclipped = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)?;
    let clipped = g.mul(clipped, adv)?;
    let surrogate = g.minimum(unclipped, clipped)?;
    let mean = g.mean(surrogate)?;
    g.scale(mean, -1.0)
}

/// Loss over the given steps, recomputed through the full differentiable
/// path with the stored slots and Gumbel noise.
pub fn minibatch_loss(
    g: &mut Graph,
    model: &AgentModel,
    batch: &RolloutBatch,
    steps: &[usize],
    advantages: &[f64],
    cfg: &TrainConfig,
) -> Result<(Var, LossReport), TrainError> {
    let n = batch.n_agents;
    let rows = steps.len() * n;
    let obs_w = model.dims.observation;
    let u = model.dims.pool_size;
    let mut obs = Vec::with_capacity(rows * obs_w);
    let mut noise = Vec::with_capacity(rows * u);
    let mut slots = Vec::new();
    let mut actions = Vec::with_capacity(rows);
    let mut old = Vec::with_capacity(rows);
    let mut adv = Vec::with_capacity(rows);
    let mut ret = Vec::with_capacity(rows);
    for &t in steps {
        let step = &batch.steps[t];
        if let Some(f) = &step.slots {
            slots.extend_from_slice(f.data());
        }
        for (i, tr) in step.agents.iter().enumerate() {
            obs.extend_from_slice(&tr.observation);
            noise.extend_from_slice(&tr.noise);
            actions.push(tr.action);
            old.push(tr.log_prob);
            adv.push(advantages[t * n + i]);
            ret.push(batch.returns[t * n + i]);
        }
    }
    let obs = Tensor::new(rows, obs_w, obs)?;
    let noise = Tensor::new(rows, u, noise)?;
    let slots = if slots.is_empty() {
        None
    } else {
        Some(Tensor::new(steps.len() * model.dims.n_slots, model.dims.message, slots)?)
    };
    let fv = model.forward(
        g,
        &BatchInputs { observations: &obs, slots: slots.as_ref(), noise: &noise, groups: steps.len() },
    )?;

    let picked = g.pick(fv.action_probs, &actions)?;
    let picked = g.clamp(picked, PROB_FLOOR, 1.0 + PROB_FLOOR)?;
    let log_probs = g.log(picked)?;
    let policy = clipped_surrogate(g, log_probs, &old, &adv, cfg.clip_eps)?;

    let targets = g.constant(Tensor::new(rows, 1, ret)?)?;
    let err = g.sub(fv.values, targets)?;
    let sq = g.mul(err, err)?;
    let value = g.mean(sq)?;

    let ent = entropy_rows(g, fv.action_probs)?;
    let entropy = g.mean(ent)?;

    let penalty = match batch.regularize {
        Regularize::Policy => {
            let kl = model.pool.selection_kl(g, &fv.selection)?;
            Some(g.mean(kl)?)
        }
        Regularize::Action => match model.action_kl(g, &fv)? {
            Some(kl) => Some(g.mean(kl)?),
            None => None,
        },
        Regularize::None => None,
    };

    let v_term = g.scale(value, cfg.value_coef)?;
    let e_term = g.scale(entropy, -cfg.entropy_coef)?;
    let mut total = g.add(policy, v_term)?;
    total = g.add(total, e_term)?;
    let mut report = LossReport {
        policy: g.value(policy).item(),
        value: g.value(value).item(),
        entropy: g.value(entropy).item(),
        ..LossReport::default()
    };
    if let Some(p) = penalty {
        let k_term = g.scale(p, cfg.beta)?;
        total = g.add(total, k_term)?;
        report.penalty = g.value(p).item();
        report.kl = g.value(k_term).item();
    }
    report.total = g.value(total).item();
    Ok((total, report))
}

/// Splits a shuffled step order into `parts` nearly equal minibatches.
pub fn minibatch_slices(order: &[usize], parts: usize) -> Vec<&[usize]> {
    let base = order.len() / parts;
    let extra = order.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        if len > 0 {
            out.push(&order[start..start + len]);
        }
        start += len;
    }
    out
}

/// PPO epochs over one batch. Returns the mean loss components over every
/// minibatch step taken.
pub fn ppo_update<R: Rng + ?Sized>(
    batch: &RolloutBatch,
    model: &mut AgentModel,
    optimizer: &mut OptimizerState,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossReport, TrainError> {
    if batch.advantages.len() != batch.len() * batch.n_agents {
        return Err(TrainError::Batch("advantages have not been computed".into()));
    }
    let advantages = normalize(&batch.advantages, 1e-8);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut sum = LossReport::default();
    let mut count = 0usize;
    for _ in 0..cfg.ppo_epochs {
        order.shuffle(rng);
        for steps in minibatch_slices(&order, cfg.minibatches) {
            let (report, mut grads) = {
                let mut g = Graph::new(&model.params);
                let (loss, report) = minibatch_loss(&mut g, model, batch, steps, &advantages, cfg)?;
                if !report.total.is_finite() {
                    return Err(TrainError::NonFinite(format!("loss {:?}", report)));
                }
                let grads = g.backward(loss)?.for_params(&model.params);
                (report, grads)
            };
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adam_step(&mut model.params, &grads, optimizer)?;
            sum.policy += report.policy;
            sum.value += report.value;
            sum.entropy += report.entropy;
            sum.penalty += report.penalty;
            sum.kl += report.kl;
            sum.total += report.total;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    Ok(LossReport {
        policy: sum.policy / c,
        value: sum.value / c,
        entropy: sum.entropy / c,
        penalty: sum.penalty / c,
        kl: sum.kl / c,
        total: sum.total / c,
    })
}
