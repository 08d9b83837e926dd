//! The full agent architecture shared by every agent: belief encoder,
//! communication channel, policy pool and critic.

use rand::Rng;

use crate::comm::{Channel, ChannelKind, CommOutput, PairwiseChannel, SafChannel};
use crate::graph::{Graph, ParamSet, Var};
use crate::nn::{kl_prob_rows, Activation, Mlp};
use crate::policy::{PolicyPool, Regularize, SelectionVars};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub observation: usize,
    pub belief: usize,
    pub message: usize,
    pub key: usize,
    pub hidden: usize,
    pub n_slots: usize,
    pub pool_size: usize,
    pub channel: ChannelKind,
    pub regularize: Regularize,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct AgentModel {
    pub dims: ModelDims,
    pub params: ParamSet,
    pub encoder: Mlp,
    pub channel: Channel,
    pub pool: PolicyPool,
}

/// One or more stacked steps; rows are grouped step-major, `N` agents each.
pub struct BatchInputs<'a> {
    pub observations: &'a Tensor,
    /// Slot state before this step's write, `groups * l` rows (SAF only).
    pub slots: Option<&'a Tensor>,
    /// Frozen Gumbel noise, one row per agent.
    pub noise: &'a Tensor,
    pub groups: usize,
}

pub struct ForwardVars {
    pub states: Var,
    pub comm: CommOutput,
    pub selection: SelectionVars,
    pub action_probs: Var,
    /// Action distribution with the message zeroed (action mode only).
    pub prior_action_probs: Option<Var>,
    pub values: Var,
}

impl AgentModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let encoder = Mlp::new(
            &mut params,
            "belief",
            &[dims.observation, dims.hidden, dims.belief],
            Activation::Tanh,
            1.0,
            rng,
        );
        let channel = match dims.channel {
            ChannelKind::Saf => Channel::Saf(SafChannel::new(
                &mut params,
                dims.belief,
                dims.message,
                dims.key,
                dims.n_slots,
                dims.hidden,
                rng,
            )),
            ChannelKind::Pairwise => {
                Channel::Pairwise(PairwiseChannel::new(&mut params, dims.belief, dims.message, dims.key, rng))
            }
            ChannelKind::Null => Channel::Null { d_m: dims.message },
        };
        let pool = PolicyPool::new(
            &mut params,
            dims.pool_size,
            dims.belief,
            dims.message,
            dims.hidden,
            dims.regularize == Regularize::Action,
            rng,
        );
        AgentModel { dims, params, encoder, channel, pool }
    }

    /// Builds the whole forward pass for `inputs` on `g`, which must borrow
    /// `self.params`.
    pub fn forward(&self, g: &mut Graph, inputs: &BatchInputs) -> Result<ForwardVars> {
        let obs = inputs.observations;
        if obs.cols() != self.dims.observation {
            return Err(TensorError::Invalid(format!(
                "observation width {} != {}",
                obs.cols(),
                self.dims.observation
            )));
        }
        if inputs.noise.shape() != (obs.rows(), self.dims.pool_size) {
            return Err(TensorError::ShapeMismatch { op: "forward noise", left: obs.shape(), right: inputs.noise.shape() });
        }
        let o = g.constant(obs.clone())?;
        let states = self.encoder.forward(g, o)?;
        let slots = match (inputs.slots, self.dims.channel) {
            (Some(f), ChannelKind::Saf) => Some(g.constant(f.clone())?),
            (None, ChannelKind::Saf) => return Err(TensorError::Invalid("saf forward needs slots".into())),
            _ => None,
        };
        let comm = self.channel.communicate(g, states, slots, inputs.groups)?;
        let m = comm.messages;
        let selection = self.pool.select(g, states, m, inputs.noise, self.dims.temperature)?;
        let (action_probs, prior_action_probs) = if self.pool.message_to_actor {
            let with = self.pool.action_probs(g, states, selection.z, Some(m))?;
            let zero = g.constant(Tensor::zeros(obs.rows(), self.dims.message))?;
            let prior = self.pool.action_probs(g, states, selection.z, Some(zero))?;
            (with, Some(prior))
        } else {
            (self.pool.action_probs(g, states, selection.z, None)?, None)
        };
        let values = self.pool.value(g, states, m)?;
        Ok(ForwardVars { states, comm, selection, action_probs, prior_action_probs, values })
    }

    /// Per-row KL between action distributions with and without the message.
    pub fn action_kl(&self, g: &mut Graph, fv: &ForwardVars) -> Result<Option<Var>> {
        match fv.prior_action_probs {
            Some(prior) => Ok(Some(kl_prob_rows(g, fv.action_probs, prior)?)),
            None => Ok(None),
        }
    }

    pub fn saf(&self) -> Option<&SafChannel> {
        match &self.channel {
            Channel::Saf(c) => Some(c),
            _ => None,
        }
    }

    /// Names of the parameters that belong to the communication channel.
    pub fn channel_param_names(&self) -> Vec<String> {
        self.params
            .ids()
            .map(|id| self.params.name(id).to_string())
            .filter(|n| n.starts_with("saf.") || n.starts_with("pairwise."))
            .collect()
    }
}
