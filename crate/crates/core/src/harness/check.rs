//! Fast self-verification: gradients against finite differences, slot write
//! permutation invariance, channel cost counters, Gumbel sampling
//! frequencies and KL sanity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::comm::{channel_cost, ChannelKind, CostCounter, PairwiseChannel, SafChannel, SlotMemory};
use crate::graph::{Fault, Graph, ParamSet, Var};
use crate::nn::{categorical_kl, entropy_rows, gumbel_softmax_st, softmax_rows, Activation, Mlp};
use crate::policy::PolicyPool;
use crate::seeds::derive_seed;
use crate::tensor::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is essentially zero are judged on absolute error.
pub const FD_FLOOR: f64 = 1e-6;
pub const MAX_CHECK_PARAMS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Deliberate backward-pass bug, to confirm the gradient check notices.
    pub fault: Option<Fault>,
}

pub fn run_checks(opts: &CheckOptions) -> Vec<CheckOutcome> {
    vec![
        outcome("gradients", gradient_check(opts.seed, 20, opts.fault)),
        outcome("saf-write-permutation", permutation_check(opts.seed, 100)),
        outcome("channel-cost", cost_check(opts.seed)),
        outcome("gumbel-frequencies", gumbel_check(opts.seed, 100_000)),
        outcome("kl-properties", kl_check(opts.seed, 10_000)),
    ]
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome { name, passed: false, detail: format!("error: {e}") },
    }
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// A small end-to-end network: belief encoder, a channel, the pool's
/// selector on its soft path, mixed actors and the critic, reduced to a
/// scalar with fixed random weights.
pub struct CompositeNet {
    pub params: ParamSet,
    encoder: Mlp,
    saf: Option<SafChannel>,
    pairwise: Option<PairwiseChannel>,
    pool: PolicyPool,
    observations: Tensor,
    slots: Tensor,
    noise: Tensor,
    temperature: f64,
    groups: usize,
    actions: Vec<usize>,
    action_weights: Tensor,
    value_weights: Tensor,
    targets: Tensor,
}

impl CompositeNet {
    /// Random architecture with at most [`MAX_CHECK_PARAMS`] scalars.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let net = Self::sample(&mut rng);
            if net.params.num_scalars() <= MAX_CHECK_PARAMS {
                return net;
            }
        }
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let obs = rng.random_range(2..=4);
        let d_s = rng.random_range(2..=3);
        let d_m = rng.random_range(1..=3);
        let d_e = rng.random_range(1..=2);
        let hidden = 2;
        let l = rng.random_range(1..=3);
        let u = rng.random_range(2..=3);
        let n = rng.random_range(1..=3);
        let groups = rng.random_range(1..=2);
        let use_saf = rng.random_bool(0.5);
        let mut params = ParamSet::new();
        let encoder = Mlp::new(&mut params, "enc", &[obs, hidden, d_s], Activation::Tanh, 1.0, rng);
        let (saf, pairwise) = if use_saf {
            (Some(SafChannel::new(&mut params, d_s, d_m, d_e, l, hidden, rng)), None)
        } else {
            (None, Some(PairwiseChannel::new(&mut params, d_s, d_m, d_e, rng)))
        };
        let pool = PolicyPool::new(&mut params, u, d_s, d_m, hidden, false, rng);
        // larger than the usual tiny actor gain so action gradients are not negligible
        for id in params.ids().collect::<Vec<_>>() {
            if params.name(id).starts_with("pool.actor") {
                let t = params.get_mut(id);
                *t = t.map(|x| x * 50.0);
            }
        }
        let rows = n * groups;
        CompositeNet {
            encoder,
            saf,
            pairwise,
            pool,
            observations: normal_tensor(rows, obs, rng),
            slots: normal_tensor(groups * l, d_m, rng),
            noise: normal_tensor(rows, u, rng),
            temperature: rng.random_range(0.5..2.0),
            groups,
            actions: (0..rows).map(|_| rng.random_range(0..crate::env::Action::COUNT)).collect(),
            action_weights: normal_tensor(rows, 1, rng),
            value_weights: normal_tensor(rows, 1, rng),
            targets: normal_tensor(rows, 1, rng),
            params,
        }
    }

    pub fn loss(&self, g: &mut Graph) -> Result<Var> {
        let obs = g.constant(self.observations.clone())?;
        let s = self.encoder.forward(g, obs)?;
        let comm = match (&self.saf, &self.pairwise) {
            (Some(c), _) => {
                let slots = g.constant(self.slots.clone())?;
                c.communicate(g, s, slots, self.groups)?
            }
            (None, Some(c)) => c.communicate(g, s, self.groups)?,
            (None, None) => unreachable!("one channel is always present"),
        };
        let m = comm.messages;
        let sel = self.pool.select(g, s, m, &self.noise, self.temperature)?;
        let probs = self.pool.action_probs(g, s, sel.soft, None)?;
        let picked = g.pick(probs, &self.actions)?;
        let logp = g.log(picked)?;
        let aw = g.constant(self.action_weights.clone())?;
        let weighted = g.mul(logp, aw)?;
        let policy_term = g.sum(weighted)?;
        let entropy = entropy_rows(g, probs)?;
        let entropy = g.mean(entropy)?;
        let kl = self.pool.selection_kl(g, &sel)?;
        let kl = g.mean(kl)?;
        let v = self.pool.value(g, s, m)?;
        let target = g.constant(self.targets.clone())?;
        let err = g.sub(v, target)?;
        let sq = g.mul(err, err)?;
        let vw = g.constant(self.value_weights.clone())?;
        let sq = g.mul(sq, vw)?;
        let value_term = g.sum(sq)?;
        let mut loss = g.add(policy_term, value_term)?;
        let entropy = g.scale(entropy, -0.3)?;
        loss = g.add(loss, entropy)?;
        let kl = g.scale(kl, 0.7)?;
        g.add(loss, kl)
    }

    fn loss_value(&self) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let l = self.loss(&mut g)?;
        Ok(g.value(l).item())
    }

    /// Worst per-coordinate relative error between reverse-mode and central
    /// finite-difference gradients.
    pub fn max_relative_error(&mut self, fault: Option<Fault>) -> Result<f64> {
        let analytic = {
            let mut g = Graph::new(&self.params);
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            let l = self.loss(&mut g)?;
            g.backward(l)?.for_params(&self.params)
        };
        let mut worst: f64 = 0.0;
        for (pi, grad) in analytic.iter().enumerate() {
            for k in 0..grad.data().len() {
                let orig = self.params.tensors()[pi].data()[k];
                self.params.tensors_mut()[pi].data_mut()[k] = orig + FD_STEP;
                let plus = self.loss_value()?;
                self.params.tensors_mut()[pi].data_mut()[k] = orig - FD_STEP;
                let minus = self.loss_value()?;
                self.params.tensors_mut()[pi].data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let a = grad.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
                worst = worst.max(rel);
            }
        }
        Ok(worst)
    }
}

pub fn gradient_check(seed: u64, networks: usize, fault: Option<Fault>) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for i in 0..networks {
        let mut net = CompositeNet::random(derive_seed(seed, i as u64));
        largest = largest.max(net.params.num_scalars());
        worst = worst.max(net.max_relative_error(fault)?);
    }
    Ok((
        worst <= FD_TOLERANCE,
        format!("{networks} networks (<= {largest} params), max rel err {worst:.2e} (tol {FD_TOLERANCE:.0e})"),
    ))
}

pub fn permutation_check(seed: u64, cases: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1_000));
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..=8);
        let l = rng.random_range(1..=6);
        let d_m = rng.random_range(1..=6);
        let d_e = rng.random_range(1..=6);
        let mut params = ParamSet::new();
        let saf = SafChannel::new(&mut params, 3, d_m, d_e, l, 4, &mut rng);
        let slots = SlotMemory(normal_tensor(l, d_m, &mut rng));
        let messages = normal_tensor(n, d_m, &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled = Tensor::from_rows(&order.iter().map(|&i| messages.row(i).to_vec()).collect::<Vec<_>>())?;
        let a = saf.saf_write(&params, &slots, &messages)?;
        let b = saf.saf_write(&params, &slots, &shuffled)?;
        worst = worst.max(a.0.max_abs_diff(&b.0));
    }
    Ok((worst <= 1e-10, format!("{cases} cases, max abs diff {worst:.2e}")))
}

pub fn cost_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2_000));
    let mut params = ParamSet::new();
    let (d_s, d_m) = (4, 3);
    let saf = SafChannel::new(&mut params, d_s, d_m, 3, 2, 4, &mut rng);
    let pairwise = PairwiseChannel::new(&mut params, d_s, d_m, 3, &mut rng);
    let mut failures = Vec::new();
    for n in [2usize, 5, 15, 30] {
        let mut saf_cost = CostCounter::default();
        let mut pair_cost = CostCounter::default();
        let mut slots = normal_tensor(2, d_m, &mut rng);
        for _ in 0..3 {
            let mut g = Graph::new(&params);
            let s = g.constant(normal_tensor(n, d_s, &mut rng))?;
            let f = g.constant(slots.clone())?;
            let out = saf.communicate(&mut g, s, f, 1)?;
            saf_cost.record(out.cost_per_step);
            slots = g.value(out.slots.expect("saf keeps slots")).clone();
            pair_cost.record(pairwise.communicate(&mut g, s, 1)?.cost_per_step);
        }
        let (n64, expect_saf, expect_pair) = (n as u64, channel_cost(ChannelKind::Saf, n), channel_cost(ChannelKind::Pairwise, n));
        if saf_cost.per_step() != (2 * n64) as f64 || expect_saf != 2 * n64 {
            failures.push(format!("saf N={n}: {}", saf_cost.per_step()));
        }
        if pair_cost.per_step() != (n64 * (n64 - 1)) as f64 || expect_pair != n64 * (n64 - 1) {
            failures.push(format!("pairwise N={n}: {}", pair_cost.per_step()));
        }
    }
    if failures.is_empty() {
        Ok((true, "saf 2N, pairwise N(N-1) for N in {2, 5, 15, 30}".into()))
    } else {
        Ok((false, failures.join("; ")))
    }
}

pub fn gumbel_check(seed: u64, draws: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3_000));
    let logits = [1.2, -0.4, 0.3, 0.0];
    let target = softmax_rows(&Tensor::row_vector(logits.to_vec()));
    let mut counts = [0usize; 4];
    let mut one_hot = true;
    for _ in 0..draws {
        let d = gumbel_softmax_st(&logits, 1.0, &mut rng)?;
        one_hot &= d.hard.iter().filter(|&&x| x == 1.0).count() == 1 && d.hard.iter().all(|&x| x == 0.0 || x == 1.0);
        counts[d.index] += 1;
    }
    let tv = 0.5 * counts.iter().zip(target.data()).map(|(&c, &p)| (c as f64 / draws as f64 - p).abs()).sum::<f64>();
    Ok((tv <= 0.01 && one_hot, format!("{draws} draws, total variation {tv:.4}, one-hot {one_hot}")))
}

pub fn kl_check(seed: u64, pairs: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4_000));
    let mut min_kl = f64::INFINITY;
    let mut max_self: f64 = 0.0;
    for _ in 0..pairs {
        let k = rng.random_range(2..=6);
        let p = softmax_rows(&normal_tensor(1, k, &mut rng)).data().to_vec();
        let q = softmax_rows(&normal_tensor(1, k, &mut rng)).data().to_vec();
        min_kl = min_kl.min(categorical_kl(&p, &q)?);
        max_self = max_self.max(categorical_kl(&p, &p)?.abs());
    }
    let hand = categorical_kl(&[0.7, 0.3], &[0.5, 0.5])?;
    let passed = min_kl >= 0.0 && max_self <= 1e-12 && (hand - 0.082282).abs() <= 1e-5;
    Ok((passed, format!("min KL {min_kl:.2e}, max self-KL {max_self:.1e}, hand case {hand:.6}")))
}
