use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::comm::{reset_slots, ChannelKind, CostCounter, SlotMemory};
use crate::env::{Action, GhostRun, GridConfig, Observation};
use crate::graph::Graph;
use crate::model::{AgentModel, BatchInputs};
use crate::nn::{entropy_rows, sample_gumbel, softmax_rows, PROB_FLOOR};
use crate::policy::{sample_categorical, Regularize};
use crate::seeds::{stream_seed, Stream};
use crate::tensor::Tensor;

use super::TrainError;

/// One agent's record for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub state: Vec<f64>,
    pub message: Vec<f64>,
    pub selection: usize,
    /// `p(z | s, m)`
    pub dist_with: Vec<f64>,
    /// `p(z | s)`
    pub dist_prior: Vec<f64>,
    pub selection_kl: f64,
    /// KL between action distributions with and without the message; zero
    /// unless actors consume the message.
    pub action_kl: f64,
    /// Gumbel noise used for this selection, replayed during updates.
    pub noise: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub agents: Vec<Transition>,
    /// Facilitator slots before this step's write.
    pub slots: Option<Tensor>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub steps: Vec<StepRecord>,
    pub n_agents: usize,
    pub regularize: Regularize,
    pub bootstrap_values: Vec<f64>,
    /// Step-major, `T * N`.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub channel_cost: CostCounter,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.steps.iter().flat_map(|s| s.agents.iter())
    }
}

/// Persistent environment-side state carried across rollouts.
pub struct Runner {
    pub env: GhostRun<ChaCha8Rng>,
    pub observations: Vec<Observation>,
    pub slots: Option<SlotMemory>,
    pub episode_return: f64,
    policy_rng: ChaCha8Rng,
    slot_rng: ChaCha8Rng,
    channel: ChannelKind,
    n_slots: usize,
    d_m: usize,
}

impl Runner {
    pub fn new(grid: &GridConfig, model: &AgentModel, run_seed: u64) -> Result<Self, TrainError> {
        let env_rng = ChaCha8Rng::seed_from_u64(stream_seed(run_seed, Stream::Environment) ^ grid.seed);
        let (env, observations) = GhostRun::new(grid.clone(), env_rng)?;
        let mut runner = Runner {
            env,
            observations,
            slots: None,
            episode_return: 0.0,
            policy_rng: ChaCha8Rng::seed_from_u64(stream_seed(run_seed, Stream::Policy)),
            slot_rng: ChaCha8Rng::seed_from_u64(stream_seed(run_seed, Stream::Slots)),
            channel: model.dims.channel,
            n_slots: model.dims.n_slots,
            d_m: model.dims.message,
        };
        runner.fresh_slots();
        Ok(runner)
    }

    fn fresh_slots(&mut self) {
        self.slots = (self.channel == ChannelKind::Saf).then(|| reset_slots(self.n_slots, self.d_m, &mut self.slot_rng));
    }

    fn observation_tensor(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.observations.iter().map(|o| o.0.clone()).collect();
        Tensor::from_rows(&rows).expect("equal observation widths")
    }
}

/// Runs `length` joint steps: belief encoding, channel round, policy
/// selection and action for every agent, then the environment transition.
pub fn collect_rollout(runner: &mut Runner, model: &AgentModel, length: usize) -> Result<RolloutBatch, TrainError> {
    let n = runner.env.config.n_agents;
    let u = model.dims.pool_size;
    let mut steps = Vec::with_capacity(length);
    let mut episode_returns = Vec::new();
    let mut cost = CostCounter::default();
    for _ in 0..length {
        let obs = runner.observation_tensor();
        let noise = Tensor::new(n, u, sample_gumbel(n * u, &mut runner.policy_rng))?;
        let slots_before = runner.slots.as_ref().map(|s| s.0.clone());
        let mut g = Graph::new(&model.params);
        let fv = model.forward(
            &mut g,
            &BatchInputs { observations: &obs, slots: slots_before.as_ref(), noise: &noise, groups: 1 },
        )?;
        let sel_kl = model.pool.selection_kl(&mut g, &fv.selection)?;
        let act_kl = model.action_kl(&mut g, &fv)?;
        let entropy = entropy_rows(&mut g, fv.action_probs)?;
        cost.record(fv.comm.cost_per_step);

        let probs = g.value(fv.action_probs);
        let dist_with = softmax_rows(g.value(fv.selection.logits_with));
        let dist_prior = softmax_rows(g.value(fv.selection.logits_prior));
        let mut agents = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let row = probs.row(i);
            let action = sample_categorical(row, &mut runner.policy_rng);
            actions.push(Action::from_index(action).expect("action index"));
            agents.push(Transition {
                observation: obs.row(i).to_vec(),
                state: g.value(fv.states).row(i).to_vec(),
                message: g.value(fv.comm.messages).row(i).to_vec(),
                selection: fv.selection.indices[i],
                dist_with: dist_with.row(i).to_vec(),
                dist_prior: dist_prior.row(i).to_vec(),
                selection_kl: g.value(sel_kl).data()[i],
                action_kl: act_kl.map_or(0.0, |v| g.value(v).data()[i]),
                noise: noise.row(i).to_vec(),
                action,
                log_prob: row[action].clamp(PROB_FLOOR, 1.0 + PROB_FLOOR).ln(),
                value: g.value(fv.values).data()[i],
                entropy: g.value(entropy).data()[i],
            });
        }
        let next_slots = fv.comm.slots.map(|v| SlotMemory(g.value(v).clone()));
        drop(g);

        let outcome = runner.env.step(&actions)?;
        runner.episode_return += outcome.reward;
        steps.push(StepRecord { agents, slots: slots_before, reward: outcome.reward, done: outcome.done });
        if outcome.done {
            episode_returns.push(runner.episode_return);
            runner.episode_return = 0.0;
            runner.observations = runner.env.reset()?;
            runner.fresh_slots();
        } else {
            runner.observations = outcome.observations;
            runner.slots = next_slots;
        }
    }

    let bootstrap_values = bootstrap(runner, model)?;
    Ok(RolloutBatch {
        steps,
        n_agents: n,
        regularize: model.dims.regularize,
        bootstrap_values,
        advantages: Vec::new(),
        returns: Vec::new(),
        episode_returns,
        channel_cost: cost,
    })
}

/// Critic values at the runner's current (not yet acted on) step.
fn bootstrap(runner: &Runner, model: &AgentModel) -> Result<Vec<f64>, TrainError> {
    let obs = runner.observation_tensor();
    let noise = Tensor::zeros(obs.rows(), model.dims.pool_size);
    let slots = runner.slots.as_ref().map(|s| s.0.clone());
    let mut g = Graph::new(&model.params);
    let fv = model.forward(&mut g, &BatchInputs { observations: &obs, slots: slots.as_ref(), noise: &noise, groups: 1 })?;
    Ok(g.value(fv.values).data().to_vec())
}
