mod common;

use common::*;
use rand::Rng;
use saf_marl::comm::ChannelKind;
use saf_marl::env::GridConfig;
use saf_marl::nn::categorical_kl;
use saf_marl::optim::{adam_step, clip_grad_norm, OptimizerState};
use saf_marl::policy::{PolicyPool, Regularize};
use saf_marl::trainer::{
    build_model, clipped_surrogate, collect_rollout, compute_advantages, compute_gae, independence_penalty,
    minibatch_loss, normalize, tail_mean, train, MetricsWriter, RolloutBatch, Runner, StepRecord, TrainConfig,
    Transition,
};
use saf_marl::{Graph, ParamSet, Tensor};

fn small_grid() -> GridConfig {
    GridConfig {
        grid_size: 6,
        n_agents: 2,
        n_ghosts: 2,
        n_trees: 1,
        n_obstacles: 1,
        episode_length: 10,
        ..GridConfig::default()
    }
}

fn small_train(channel: ChannelKind, pool_size: usize) -> TrainConfig {
    TrainConfig {
        channel,
        pool_size,
        slots: 2,
        belief_width: 6,
        message_width: 5,
        key_width: 5,
        hidden: 8,
        rollout_length: 16,
        total_env_steps: 32,
        ppo_epochs: 2,
        minibatches: 2,
        ..TrainConfig::default()
    }
}

fn rollout(channel: ChannelKind, pool: usize, seed: u64, length: usize) -> (saf_marl::model::AgentModel, RolloutBatch) {
    let grid = small_grid();
    let cfg = small_train(channel, pool);
    let model = build_model(&grid, &cfg, seed);
    let mut runner = Runner::new(&grid, &model, seed).unwrap();
    let mut batch = collect_rollout(&mut runner, &model, length).unwrap();
    compute_advantages(&mut batch, cfg.gamma, cfg.gae_lambda, cfg.reward_scale).unwrap();
    (model, batch)
}

#[test]
fn gae_matches_definition_on_random_instances() {
    let mut r = rng(100);
    for _ in 0..1000 {
        let t = r.random_range(1..=8);
        let rewards: Vec<f64> = (0..t).map(|_| r.random_range(-3.0..3.0)).collect();
        let values: Vec<f64> = (0..=t).map(|_| r.random_range(-5.0..5.0)).collect();
        let dones: Vec<bool> = (0..t).map(|_| r.random_bool(0.25)).collect();
        let gamma = r.random_range(0.5..=1.0);
        let lambda = r.random_range(0.0..=1.0);
        let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, lambda).unwrap();
        let oracle = brute_force_gae(&rewards, &values, &dones, gamma, lambda);
        for k in 0..t {
            assert!((adv[k] - oracle[k]).abs() <= 1e-12);
            assert!((ret[k] - (oracle[k] + values[k])).abs() <= 1e-12);
        }
    }
}

#[test]
fn batch_shape_and_replay() {
    let (_, one) = rollout(ChannelKind::Saf, 2, 1, 1);
    assert_eq!(one.transitions().count(), 2);
    let (_, a) = rollout(ChannelKind::Saf, 3, 5, 24);
    let (_, b) = rollout(ChannelKind::Saf, 3, 5, 24);
    assert_eq!(a, b);
    let (_, c) = rollout(ChannelKind::Saf, 3, 6, 24);
    assert_ne!(a.steps, c.steps);
}

#[test]
fn stored_selection_kl_matches_stored_distributions() {
    let (_, batch) = rollout(ChannelKind::Saf, 3, 2, 20);
    for t in batch.transitions() {
        let kl = categorical_kl(&t.dist_with, &t.dist_prior).unwrap();
        assert!((kl - t.selection_kl).abs() <= 1e-12);
    }
}

fn hand_transition(dist_with: Vec<f64>, dist_prior: Vec<f64>) -> Transition {
    Transition {
        observation: vec![0.0],
        state: vec![0.0],
        message: vec![0.0],
        selection: 0,
        dist_with,
        dist_prior,
        selection_kl: 0.0,
        action_kl: 0.0,
        noise: vec![0.0, 0.0],
        action: 0,
        log_prob: 0.0,
        value: 0.0,
        entropy: 0.0,
    }
}

#[test]
fn penalty_on_hand_built_batch() {
    let step = |a: Transition, b: Transition| StepRecord { agents: vec![a, b], slots: None, reward: -1.0, done: false };
    let mut batch = RolloutBatch {
        steps: vec![
            step(hand_transition(vec![0.7, 0.3], vec![0.5, 0.5]), hand_transition(vec![0.5, 0.5], vec![0.5, 0.5])),
            step(hand_transition(vec![0.9, 0.1], vec![0.2, 0.8]), hand_transition(vec![0.25, 0.75], vec![0.6, 0.4])),
        ],
        n_agents: 2,
        regularize: Regularize::Policy,
        bootstrap_values: vec![0.0, 0.0],
        advantages: Vec::new(),
        returns: Vec::new(),
        episode_returns: Vec::new(),
        channel_cost: Default::default(),
    };
    let kl = |p: [f64; 2], q: [f64; 2]| p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
    let by_hand = (kl([0.7, 0.3], [0.5, 0.5]) + 0.0 + kl([0.9, 0.1], [0.2, 0.8]) + kl([0.25, 0.75], [0.6, 0.4])) / 4.0;
    assert!((independence_penalty(&batch).unwrap() - by_hand).abs() <= 1e-10);

    batch.regularize = Regularize::None;
    assert_eq!(independence_penalty(&batch).unwrap(), 0.0);
    batch.regularize = Regularize::Policy;
    batch.steps[1].agents[0].dist_prior.clear();
    assert!(independence_penalty(&batch).is_err());
}

#[test]
fn null_channel_has_no_penalty() {
    let (_, batch) = rollout(ChannelKind::Null, 3, 3, 12);
    assert_eq!(independence_penalty(&batch).unwrap(), 0.0);
    assert!(batch.transitions().all(|t| t.message.iter().all(|&x| x == 0.0)));
}

#[test]
fn first_minibatch_reproduces_old_log_probs() {
    let (model, batch) = rollout(ChannelKind::Saf, 3, 4, 16);
    let cfg = small_train(ChannelKind::Saf, 3);
    let adv = normalize(&batch.advantages, 1e-8);
    let steps: Vec<usize> = (0..batch.len()).collect();
    let mut g = Graph::new(&model.params);
    let (_, report) = minibatch_loss(&mut g, &model, &batch, &steps, &adv, &cfg).unwrap();
    let mean_adv = adv.iter().sum::<f64>() / adv.len() as f64;
    assert!((report.policy + mean_adv).abs() <= 1e-12, "policy loss {} vs -mean(A) {}", report.policy, -mean_adv);
    // normalized advantages have zero mean, so the identity is checked with raw ones too
    let (_, raw) = minibatch_loss(&mut Graph::new(&model.params), &model, &batch, &steps, &batch.advantages, &cfg).unwrap();
    let mean_raw = batch.advantages.iter().sum::<f64>() / batch.advantages.len() as f64;
    assert!((raw.policy + mean_raw).abs() <= 1e-12);
}

#[test]
fn beta_enters_the_loss_additively() {
    let (model, batch) = rollout(ChannelKind::Saf, 3, 7, 16);
    let steps: Vec<usize> = (0..batch.len()).collect();
    let adv = normalize(&batch.advantages, 1e-8);
    let loss = |beta: f64| {
        let cfg = TrainConfig { beta, ..small_train(ChannelKind::Saf, 3) };
        minibatch_loss(&mut Graph::new(&model.params), &model, &batch, &steps, &adv, &cfg).unwrap().1
    };
    let plain = loss(0.0);
    let weighted = loss(0.3);
    assert!(weighted.penalty > 0.0);
    assert_eq!(plain.penalty, weighted.penalty);
    assert_eq!(plain.kl, 0.0);
    assert!((weighted.total - plain.total - 0.3 * weighted.penalty).abs() <= 1e-12);
    assert!((weighted.penalty - independence_penalty(&batch).unwrap()).abs() <= 1e-12);
}

#[test]
fn channel_parameters_receive_gradient() {
    for (channel, expect_flow) in [(ChannelKind::Saf, true), (ChannelKind::Pairwise, true), (ChannelKind::Null, false)] {
        let (model, batch) = rollout(channel, 3, 8, 16);
        let cfg = small_train(channel, 3);
        let steps: Vec<usize> = (0..batch.len()).collect();
        let adv = normalize(&batch.advantages, 1e-8);
        let mut g = Graph::new(&model.params);
        let (loss, _) = minibatch_loss(&mut g, &model, &batch, &steps, &adv, &cfg).unwrap();
        let grads = g.backward(loss).unwrap().for_params(&model.params);
        let names = model.channel_param_names();
        assert_eq!(names.is_empty(), !expect_flow, "{channel:?}");
        let mut flowing = 0;
        for id in model.params.ids() {
            let name = model.params.name(id);
            if names.iter().any(|n| n == name) && grads[id.0].data().iter().any(|&x| x != 0.0) {
                flowing += 1;
            }
        }
        assert_eq!(flowing > 0, expect_flow, "{channel:?}");
        if channel == ChannelKind::Saf {
            let write = model.params.find("saf.write.query.weight").expect("write projection");
            assert!(grads[write.0].data().iter().any(|&x| x != 0.0), "write path is cut");
        }
    }
}

#[test]
fn keys_move_after_one_update() {
    let grid = small_grid();
    let cfg = TrainConfig { total_env_steps: 16, ..small_train(ChannelKind::Saf, 3) };
    let before = build_model(&grid, &cfg, 11);
    let run = train(&grid, &cfg, 11, |_| Ok(())).unwrap();
    assert_eq!(run.metrics.len(), 1);
    let k0 = before.params.get(before.pool.keys);
    let k1 = run.model.params.get(run.model.pool.keys);
    assert!(k0.max_abs_diff(k1) > 0.0);
}

#[test]
fn zero_steps_give_no_metrics() {
    let cfg = TrainConfig { total_env_steps: 0, ..small_train(ChannelKind::Saf, 3) };
    let run = train(&small_grid(), &cfg, 0, |_| Ok(())).unwrap();
    assert!(run.metrics.is_empty());
}

fn metrics_bytes(seed: u64) -> Vec<u8> {
    let cfg = TrainConfig { total_env_steps: 64, ..small_train(ChannelKind::Saf, 3) };
    let mut w = MetricsWriter::new(Vec::new(), cfg.pool_size).unwrap();
    train(&small_grid(), &cfg, seed, |m| w.write(m)).unwrap();
    w.into_inner()
}

#[test]
fn metrics_replay_byte_identical() {
    let a = metrics_bytes(21);
    assert_eq!(a, metrics_bytes(21));
    assert_ne!(a, metrics_bytes(22));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 4);
}

/// `logits = [θ, 0]`: log-probs of `actions` as a column.
fn toy_log_probs(g: &mut Graph, theta: saf_marl::Var, actions: &[usize]) -> saf_marl::Var {
    let zero = g.constant(Tensor::zeros(1, 1)).unwrap();
    let logits = g.concat_cols(theta, zero).unwrap();
    let stacked = g.concat_rows(&vec![logits; actions.len()]).unwrap();
    let logp = g.log_softmax_rows(stacked).unwrap();
    g.pick(logp, actions).unwrap()
}

#[test]
fn single_parameter_ppo_step_matches_hand_roll() {
    let (theta0, theta_old, eps, lr, max_norm) = (0.3f64, -0.8f64, 0.2, 0.1, 0.5);
    let actions = [0usize, 1, 1, 0];
    let adv = [1.0, 0.7, -0.4, -0.9];
    let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
    let logp = |th: f64, a: usize| if a == 0 { sigma(th).ln() } else { (1.0 - sigma(th)).ln() };
    let dlogp = |th: f64, a: usize| if a == 0 { 1.0 - sigma(th) } else { -sigma(th) };
    let old: Vec<f64> = actions.iter().map(|&a| logp(theta_old, a)).collect();

    // by hand
    let mut grad = 0.0;
    let mut any_clipped = false;
    for i in 0..4 {
        let rho = (logp(theta0, actions[i]) - old[i]).exp();
        let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
        let active = (1.0 - eps..=1.0 + eps).contains(&rho) || rho * adv[i] < clipped * adv[i];
        any_clipped |= !active;
        if active {
            grad -= rho * adv[i] * dlogp(theta0, actions[i]) / 4.0;
        }
    }
    assert!(any_clipped);
    let grad = if grad.abs() > max_norm { grad * max_norm / grad.abs() } else { grad };
    let (b1, b2, adam_eps) = (0.9, 0.999, 1e-8);
    let m_hat = (1.0 - b1) * grad / (1.0 - b1);
    let v_hat = (1.0 - b2) * grad * grad / (1.0 - b2);
    let expected = theta0 - lr * m_hat / (v_hat.sqrt() + adam_eps);

    // library
    let mut params = ParamSet::new();
    let id = params.add("theta", Tensor::scalar(theta0));
    let mut state = OptimizerState::new(&params, lr);
    let mut grads = {
        let mut g = Graph::new(&params);
        let th = g.param(id);
        let lp = toy_log_probs(&mut g, th, &actions);
        let loss = clipped_surrogate(&mut g, lp, &old, &adv, eps).unwrap();
        g.backward(loss).unwrap().for_params(&params)
    };
    clip_grad_norm(&mut grads, max_norm);
    adam_step(&mut params, &grads, &mut state).unwrap();
    let got = params.get(id).item();
    assert!((got - expected).abs() <= 1e-8, "{got} vs {expected}");
    assert!(got != theta0);
}

#[test]
fn adam_follows_reference_recursion() {
    let mut params = ParamSet::new();
    let id = params.add("w", Tensor::new(1, 2, vec![0.5, -1.0]).unwrap());
    let mut state = OptimizerState::with_betas(&params, 0.01, 0.8, 0.95, 1e-6);
    let mut w = [0.5f64, -1.0];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    let mut r = rng(30);
    for t in 1..=20 {
        let g: Vec<f64> = (0..2).map(|_| r.random_range(-2.0..2.0)).collect();
        adam_step(&mut params, &[Tensor::new(1, 2, g.clone()).unwrap()], &mut state).unwrap();
        for j in 0..2 {
            m[j] = 0.8 * m[j] + 0.2 * g[j];
            v[j] = 0.95 * v[j] + 0.05 * g[j] * g[j];
            let mh = m[j] / (1.0 - 0.8f64.powi(t));
            let vh = v[j] / (1.0 - 0.95f64.powi(t));
            w[j] -= 0.01 * mh / (vh.sqrt() + 1e-6);
        }
    }
    assert!(max_abs(&rows(params.get(id)), &[w.to_vec()]) <= 1e-12);
}

#[test]
fn pool_actors_learn_distinct_modes() {
    let mut params = ParamSet::new();
    let mut r = rng(40);
    let pool = PolicyPool::new(&mut params, 2, 3, 3, 8, false, &mut r);
    let s = normal(&mut r, 1, 3);
    let z = |u: usize| if u == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
    let tv = |params: &ParamSet, r: &mut rand_chacha::ChaCha8Rng| {
        let a = pool.act(params, s.row(0), &z(0), r).unwrap().dist;
        let b = pool.act(params, s.row(0), &z(1), r).unwrap().dist;
        0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    };
    assert!(tv(&params, &mut r) < 0.05);
    let mut state = OptimizerState::new(&params, 0.05);
    for _ in 0..200 {
        let grads = {
            let mut g = Graph::new(&params);
            let sv = g.constant(Tensor::from_rows(&[s.row(0).to_vec(), s.row(0).to_vec()]).unwrap()).unwrap();
            let zv = g.constant(Tensor::from_rows(&[z(0), z(1)]).unwrap()).unwrap();
            let probs = pool.action_probs(&mut g, sv, zv, None).unwrap();
            let picked = g.pick(probs, &[0, 3]).unwrap();
            let logs = g.log(picked).unwrap();
            let mean = g.mean(logs).unwrap();
            let loss = g.scale(mean, -1.0).unwrap();
            g.backward(loss).unwrap().for_params(&params)
        };
        adam_step(&mut params, &grads, &mut state).unwrap();
    }
    assert!(tv(&params, &mut r) > 0.5);
}

#[test]
fn larger_beta_lowers_selection_kl() {
    let grid = small_grid();
    let mut lower = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let kl = |beta: f64| {
            let cfg = TrainConfig {
                beta,
                total_env_steps: 1600,
                rollout_length: 32,
                lr: 3e-3,
                ..small_train(ChannelKind::Saf, 3)
            };
            let run = train(&grid, &cfg, seed, |_| Ok(())).unwrap();
            let series: Vec<f64> = run.metrics.iter().map(|m| m.mean_selection_kl).collect();
            tail_mean(&series, 0.1)
        };
        let (free, penalized) = (kl(0.0), kl(0.1));
        detail.push((free, penalized));
        if penalized <= free {
            lower += 1;
        }
    }
    assert!(lower >= 4, "{detail:?}");
}

#[test]
fn soft_selection_dists_are_normalized() {
    let (_, batch) = rollout(ChannelKind::Saf, 4, 9, 10);
    for t in batch.transitions() {
        assert!((t.dist_with.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!((t.dist_prior.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(t.noise.len(), 4);
    }
}
