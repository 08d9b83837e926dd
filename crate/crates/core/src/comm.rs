//! Communication channels between agents.
//!
//! * [`SafChannel`]: a facilitator holding `l` slot vectors. Each step agents
//!   encode messages, the slots compete to attend over those messages (write),
//!   attend over each other with a residual (self-attention), and every agent
//!   reads the slots back with a query built from its own belief state.
//! * [`PairwiseChannel`]: every agent attends over every agent's state.
//! * Null: no communication, all-zero messages.
//!
//! Graph-level methods take `groups` stacked time steps so a whole minibatch
//! of steps is processed at once; each group is an independent step.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, ParamSet, Var};
use crate::nn::{attention, Activation, Linear, Mlp};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Saf,
    Pairwise,
    Null,
}

/// Point-to-point messages per environment step.
pub fn channel_cost(kind: ChannelKind, n_agents: usize) -> u64 {
    let n = n_agents as u64;
    match kind {
        ChannelKind::Saf => 2 * n,
        ChannelKind::Pairwise => n * n.saturating_sub(1),
        ChannelKind::Null => 0,
    }
}

/// The facilitator's slot state, `l x d_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotMemory(pub Tensor);

impl SlotMemory {
    pub fn n_slots(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }
}

/// Fresh slots with entries drawn from `Normal(0, 1/√d_m)`.
pub fn reset_slots<R: Rng + ?Sized>(n_slots: usize, d_m: usize, rng: &mut R) -> SlotMemory {
    let normal = Normal::new(0.0, 1.0 / (d_m as f64).sqrt()).expect("valid std");
    let data = (0..n_slots * d_m).map(|_| normal.sample(rng)).collect();
    SlotMemory(Tensor::new(n_slots, d_m, data).expect("shape"))
}

/// Query, key and value projections of one attention block (no biases).
#[derive(Clone, Debug)]
pub struct Projections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl Projections {
    fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        (q_in, kv_in): (usize, usize),
        d_e: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Self {
        Projections {
            query: Linear::new(params, &format!("{name}.query"), q_in, d_e, false, 1.0, rng),
            key: Linear::new(params, &format!("{name}.key"), kv_in, d_e, false, 1.0, rng),
            value: Linear::new(params, &format!("{name}.value"), kv_in, d_v, false, 1.0, rng),
        }
    }

    /// `softmax(q_src·Wq (kv_src·Wk)ᵀ/√d_e) kv_src·Wv` per group.
    fn apply(&self, g: &mut Graph, q_src: Var, kv_src: Var, groups: usize) -> Result<(Var, Var)> {
        let q = self.query.forward(g, q_src)?;
        let k = self.key.forward(g, kv_src)?;
        let v = self.value.forward(g, kv_src)?;
        attention(g, q, k, v, groups)
    }
}

#[derive(Clone, Debug)]
pub struct SafChannel {
    pub n_slots: usize,
    pub d_m: usize,
    pub d_e: usize,
    pub encoder: Mlp,
    pub write: Projections,
    pub self_attn: Projections,
    pub read: Projections,
}

/// Output of one communication round over `groups` steps.
pub struct CommOutput {
    /// Incoming message per agent row.
    pub messages: Var,
    /// Updated slots (SAF only).
    pub slots: Option<Var>,
    /// Read attention, `N x l` per group (SAF only).
    pub read_weights: Option<Var>,
    /// Write attention, `l x N` per group (SAF only).
    pub write_weights: Option<Var>,
    /// Messages exchanged per step, counted from the tensors actually moved.
    pub cost_per_step: u64,
}

impl SafChannel {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        d_s: usize,
        d_m: usize,
        d_e: usize,
        n_slots: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        SafChannel {
            n_slots,
            d_m,
            d_e,
            encoder: Mlp::new(params, "saf.encoder", &[d_s, hidden, d_m], Activation::Identity, 1.0, rng),
            write: Projections::new(params, "saf.write", (d_m, d_m), d_e, d_m, rng),
            self_attn: Projections::new(params, "saf.self", (d_m, d_m), d_e, d_m, rng),
            read: Projections::new(params, "saf.read", (d_s, d_m), d_e, d_m, rng),
        }
    }

    /// Outgoing message per agent state row.
    pub fn encode(&self, g: &mut Graph, states: Var) -> Result<Var> {
        self.encoder.forward(g, states)
    }

    /// Slots compete over agent messages; the result replaces the slots.
    pub fn write_only(&self, g: &mut Graph, slots: Var, messages: Var, groups: usize) -> Result<(Var, Var)> {
        if g.value(messages).rows() == 0 {
            return Err(TensorError::Invalid("saf write needs at least one message".into()));
        }
        self.write.apply(g, slots, messages, groups)
    }

    /// `F ← F + attn(F)` over slot rows.
    pub fn self_attend(&self, g: &mut Graph, slots: Var, groups: usize) -> Result<Var> {
        let (update, _) = self.self_attn.apply(g, slots, slots, groups)?;
        g.add(slots, update)
    }

    /// Write followed by slot self-attention. Returns new slots and the
    /// write weights.
    pub fn write(&self, g: &mut Graph, slots: Var, messages: Var, groups: usize) -> Result<(Var, Var)> {
        let (written, weights) = self.write_only(g, slots, messages, groups)?;
        Ok((self.self_attend(g, written, groups)?, weights))
    }

    /// Each agent reads the slots with a query from its own state. Returns
    /// `(messages, weights)`.
    pub fn read(&self, g: &mut Graph, slots: Var, states: Var, groups: usize) -> Result<(Var, Var)> {
        self.read.apply(g, states, slots, groups)
    }

    pub fn communicate(&self, g: &mut Graph, states: Var, slots: Var, groups: usize) -> Result<CommOutput> {
        let outgoing = self.encode(g, states)?;
        let (new_slots, write_weights) = self.write(g, slots, outgoing, groups)?;
        let (messages, read_weights) = self.read(g, new_slots, states, groups)?;
        let per_group = |v: Var| (g.value(v).rows() / groups) as u64;
        let cost = per_group(outgoing) + per_group(messages);
        Ok(CommOutput {
            messages,
            slots: Some(new_slots),
            read_weights: Some(read_weights),
            write_weights: Some(write_weights),
            cost_per_step: cost,
        })
    }

    /// Eager write + self-attend on plain tensors.
    pub fn saf_write(&self, params: &ParamSet, slots: &SlotMemory, messages: &Tensor) -> Result<SlotMemory> {
        let mut g = Graph::new(params);
        let f = g.constant(slots.0.clone())?;
        let m = g.constant(messages.clone())?;
        let (out, _) = self.write(&mut g, f, m, 1)?;
        Ok(SlotMemory(g.value(out).clone()))
    }

    /// Eager read; returns `(messages, weights)`.
    pub fn saf_read(&self, params: &ParamSet, slots: &SlotMemory, states: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(params);
        let f = g.constant(slots.0.clone())?;
        let s = g.constant(states.clone())?;
        let (m, w) = self.read(&mut g, f, s, 1)?;
        Ok((g.value(m).clone(), g.value(w).clone()))
    }

    pub fn encode_message(&self, params: &ParamSet, state: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(params);
        let s = g.constant(Tensor::row_vector(state.to_vec()))?;
        let m = self.encode(&mut g, s)?;
        Ok(g.value(m).data().to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct PairwiseChannel {
    pub d_m: usize,
    pub attn: Projections,
}

impl PairwiseChannel {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, d_s: usize, d_m: usize, d_e: usize, rng: &mut R) -> Self {
        PairwiseChannel { d_m, attn: Projections::new(params, "pairwise", (d_s, d_s), d_e, d_m, rng) }
    }

    pub fn communicate(&self, g: &mut Graph, states: Var, groups: usize) -> Result<CommOutput> {
        let (messages, weights) = self.attn.apply(g, states, states, groups)?;
        let n = (g.value(states).rows() / groups) as u64;
        // every agent receives from every other agent
        let cost = n * n.saturating_sub(1);
        Ok(CommOutput { messages, slots: None, read_weights: Some(weights), write_weights: None, cost_per_step: cost })
    }

    pub fn pairwise_communicate(&self, params: &ParamSet, states: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(params);
        let s = g.constant(states.clone())?;
        let out = self.communicate(&mut g, s, 1)?;
        Ok(g.value(out.messages).clone())
    }
}

#[derive(Clone, Debug)]
pub enum Channel {
    Saf(SafChannel),
    Pairwise(PairwiseChannel),
    Null { d_m: usize },
}

impl Channel {
    pub fn kind(&self) -> ChannelKind {
        match self {
            Channel::Saf(_) => ChannelKind::Saf,
            Channel::Pairwise(_) => ChannelKind::Pairwise,
            Channel::Null { .. } => ChannelKind::Null,
        }
    }

    pub fn d_m(&self) -> usize {
        match self {
            Channel::Saf(c) => c.d_m,
            Channel::Pairwise(c) => c.d_m,
            Channel::Null { d_m } => *d_m,
        }
    }

    /// `slots` must be provided for the SAF channel and is ignored otherwise.
    pub fn communicate(&self, g: &mut Graph, states: Var, slots: Option<Var>, groups: usize) -> Result<CommOutput> {
        match self {
            Channel::Saf(c) => {
                let slots = slots.ok_or_else(|| TensorError::Invalid("saf channel needs slot state".into()))?;
                c.communicate(g, states, slots, groups)
            }
            Channel::Pairwise(c) => c.communicate(g, states, groups),
            Channel::Null { d_m } => {
                let rows = g.value(states).rows();
                let messages = g.constant(Tensor::zeros(rows, *d_m))?;
                Ok(CommOutput { messages, slots: None, read_weights: None, write_weights: None, cost_per_step: 0 })
            }
        }
    }
}

/// Zero message per agent, always `d_m` wide.
pub fn null_communicate(states: &Tensor, d_m: usize) -> Tensor {
    Tensor::zeros(states.rows(), d_m)
}

/// Running tally of channel traffic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostCounter {
    pub messages: u64,
    pub steps: u64,
}

impl CostCounter {
    pub fn record(&mut self, per_step: u64) {
        self.messages += per_step;
        self.steps += 1;
    }

    pub fn per_step(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.messages as f64 / self.steps as f64
        }
    }
}
