//! Multi-agent PPO laboratory built around a stateful slot-memory
//! facilitator, a shared pool of policies selected with straight-through
//! Gumbel-softmax, and a KL penalty that discourages policy choice from
//! depending on the facilitator's message.

pub mod comm;
pub mod env;
pub mod graph;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod policy;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use graph::{Graph, ParamId, ParamSet, Var};
pub use tensor::{Tensor, TensorError};
