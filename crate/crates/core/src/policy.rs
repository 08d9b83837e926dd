//! Shared policy pool: `U` actor networks with learned signature keys, a
//! selector that picks one actor per agent and step with straight-through
//! Gumbel-softmax, and a critic.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::graph::{Graph, ParamId, ParamSet, Var};
use crate::nn::{self, entropy_rows, gumbel_softmax_st_rows, kl_prob_rows, kl_rows, Activation, Mlp};
use crate::tensor::{Result, Tensor, TensorError};

/// What the independence penalty regularizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularize {
    /// KL between policy-selection distributions with and without the message.
    Policy,
    /// Actors also see the message; KL between action distributions.
    Action,
    None,
}

/// `Normal(0, 1/√d_m)` key matrix, `U x d_m`.
pub fn init_keys<R: Rng + ?Sized>(pool_size: usize, d_m: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (d_m as f64).sqrt()).expect("valid std");
    Tensor::new(pool_size, d_m, (0..pool_size * d_m).map(|_| normal.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Debug)]
pub struct PolicyPool {
    pub size: usize,
    pub d_s: usize,
    pub d_m: usize,
    pub keys: ParamId,
    pub selector: Mlp,
    pub actors: Vec<Mlp>,
    pub critic: Mlp,
    pub message_to_actor: bool,
}

/// Graph handles for one batch of selections.
pub struct SelectionVars {
    /// Straight-through one-hot choice, `R x U`.
    pub z: Var,
    pub soft: Var,
    pub logits_with: Var,
    pub logits_prior: Var,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySelection {
    pub index: usize,
    pub z: Vec<f64>,
    /// `p(z | s, m)`
    pub dist_with: Vec<f64>,
    /// `p(z | s)`, the same selector with the message zeroed
    pub dist_prior: Vec<f64>,
    pub logits: Vec<f64>,
    /// Noisy relaxed distribution of this draw.
    pub soft: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionOutput {
    pub action: usize,
    pub log_prob: f64,
    pub entropy: f64,
    pub dist: Vec<f64>,
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl PolicyPool {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        size: usize,
        d_s: usize,
        d_m: usize,
        hidden: usize,
        message_to_actor: bool,
        rng: &mut R,
    ) -> Self {
        let keys = params.add("pool.keys", init_keys(size, d_m, rng));
        let selector = Mlp::new(params, "pool.selector", &[d_s + d_m, hidden, d_m], Activation::Identity, 1.0, rng);
        let actor_in = if message_to_actor { d_s + d_m } else { d_s };
        let actors = (0..size)
            .map(|u| Mlp::new(params, &format!("pool.actor{u}"), &[actor_in, hidden, Action::COUNT], Activation::Identity, 0.01, rng))
            .collect();
        let critic = Mlp::new(params, "critic", &[d_s + d_m, hidden, 1], Activation::Identity, 1.0, rng);
        PolicyPool { size, d_s, d_m, keys, selector, actors, critic, message_to_actor }
    }

    fn check_widths(&self, g: &Graph, s: Var, m: Var) -> Result<()> {
        let (ts, tm) = (g.value(s), g.value(m));
        if ts.cols() != self.d_s || tm.cols() != self.d_m || ts.rows() != tm.rows() {
            return Err(TensorError::ShapeMismatch { op: "policy_pool", left: ts.shape(), right: tm.shape() });
        }
        Ok(())
    }

    /// `g_psel(s, m) · Kᵀ / √d_m`, `R x U`.
    pub fn selection_logits(&self, g: &mut Graph, s: Var, m: Var) -> Result<Var> {
        self.check_widths(g, s, m)?;
        let input = g.concat_cols(s, m)?;
        let query = self.selector.forward(g, input)?;
        let keys = g.param(self.keys);
        let scores = g.block_matmul(query, keys, 1, true)?;
        g.scale(scores, 1.0 / (self.d_m as f64).sqrt())
    }

    /// Selection with frozen Gumbel `noise` (`R x U`).
    pub fn select(&self, g: &mut Graph, s: Var, m: Var, noise: &Tensor, temperature: f64) -> Result<SelectionVars> {
        let logits_with = self.selection_logits(g, s, m)?;
        let rows = g.value(m).rows();
        let zero = g.constant(Tensor::zeros(rows, self.d_m))?;
        let logits_prior = self.selection_logits(g, s, zero)?;
        let (z, soft, indices) = gumbel_softmax_st_rows(g, logits_with, noise, temperature)?;
        Ok(SelectionVars { z, soft, logits_with, logits_prior, indices })
    }

    /// Per-row `KL(p(z|s,m) ‖ p(z|s))`.
    pub fn selection_kl(&self, g: &mut Graph, sel: &SelectionVars) -> Result<Var> {
        kl_rows(g, sel.logits_with, sel.logits_prior)
    }

    /// `Σ_u z_u π_u(a | s[, m])`, `R x |A|`. With a one-hot `z` this is
    /// exactly the chosen actor's distribution.
    pub fn action_probs(&self, g: &mut Graph, s: Var, z: Var, m: Option<Var>) -> Result<Var> {
        let input = match (self.message_to_actor, m) {
            (false, None) => s,
            (true, Some(m)) => g.concat_cols(s, m)?,
            (false, Some(_)) => {
                return Err(TensorError::Invalid("actors do not take messages when regularizing policy selection".into()))
            }
            (true, None) => return Err(TensorError::Invalid("actors require the message in action mode".into())),
        };
        if g.value(z).cols() != self.size {
            return Err(TensorError::Invalid(format!("selection width {} != pool size {}", g.value(z).cols(), self.size)));
        }
        let mut mix: Option<Var> = None;
        for (u, actor) in self.actors.iter().enumerate() {
            let logits = actor.forward(g, input)?;
            let probs = g.softmax_rows(logits)?;
            let zu = g.slice_cols(z, u, 1)?;
            let weighted = g.mul_col(probs, zu)?;
            mix = Some(match mix {
                Some(acc) => g.add(acc, weighted)?,
                None => weighted,
            });
        }
        Ok(mix.expect("pool is nonempty"))
    }

    pub fn value(&self, g: &mut Graph, s: Var, m: Var) -> Result<Var> {
        self.check_widths(g, s, m)?;
        let input = g.concat_cols(s, m)?;
        self.critic.forward(g, input)
    }

    /// Eager single-agent selection.
    pub fn select_policy<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        s: &[f64],
        m: &[f64],
        temperature: f64,
        rng: &mut R,
    ) -> Result<PolicySelection> {
        let noise = Tensor::row_vector(nn::sample_gumbel(self.size, rng));
        let mut g = Graph::new(params);
        let sv = g.constant(Tensor::row_vector(s.to_vec()))?;
        let mv = g.constant(Tensor::row_vector(m.to_vec()))?;
        let sel = self.select(&mut g, sv, mv, &noise, temperature)?;
        let logits = g.value(sel.logits_with).data().to_vec();
        Ok(PolicySelection {
            index: sel.indices[0],
            z: g.value(sel.z).data().to_vec(),
            dist_with: nn::softmax_rows(g.value(sel.logits_with)).into_data(),
            dist_prior: nn::softmax_rows(g.value(sel.logits_prior)).into_data(),
            logits,
            soft: g.value(sel.soft).data().to_vec(),
        })
    }

    fn act_inner<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        s: &[f64],
        z: &[f64],
        m: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<ActionOutput> {
        let ones = z.iter().filter(|&&v| v == 1.0).count();
        if z.len() != self.size || ones != 1 || z.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TensorError::Invalid(format!("z must be one-hot of width {}", self.size)));
        }
        let mut g = Graph::new(params);
        let sv = g.constant(Tensor::row_vector(s.to_vec()))?;
        let zv = g.constant(Tensor::row_vector(z.to_vec()))?;
        let mv = match m {
            Some(m) => Some(g.constant(Tensor::row_vector(m.to_vec()))?),
            None => None,
        };
        let probs = self.action_probs(&mut g, sv, zv, mv)?;
        let h = entropy_rows(&mut g, probs)?;
        let dist = g.value(probs).data().to_vec();
        let action = sample_categorical(&dist, rng);
        Ok(ActionOutput { action, log_prob: dist[action].ln(), entropy: g.value(h).item(), dist })
    }

    /// Acts from `(s, z)` only.
    pub fn act<R: Rng + ?Sized>(&self, params: &ParamSet, s: &[f64], z: &[f64], rng: &mut R) -> Result<ActionOutput> {
        self.act_inner(params, s, z, None, rng)
    }

    /// Acts from `(s, z, m)`; also returns the KL between the action
    /// distributions with `m` and with `m = 0`.
    pub fn act_with_message<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        s: &[f64],
        z: &[f64],
        m: &[f64],
        rng: &mut R,
    ) -> Result<(ActionOutput, f64)> {
        if !self.message_to_actor {
            return Err(TensorError::Invalid("act_with_message requires action-regularization mode".into()));
        }
        let out = self.act_inner(params, s, z, Some(m), rng)?;
        let mut g = Graph::new(params);
        let sv = g.constant(Tensor::row_vector(s.to_vec()))?;
        let zv = g.constant(Tensor::row_vector(z.to_vec()))?;
        let zero = g.constant(Tensor::zeros(1, self.d_m))?;
        let prior = self.action_probs(&mut g, sv, zv, Some(zero))?;
        let with = g.constant(Tensor::row_vector(out.dist.clone()))?;
        let kl = kl_prob_rows(&mut g, with, prior)?;
        let kl = g.value(kl).item();
        Ok((out, kl))
    }

    pub fn state_value(&self, params: &ParamSet, s: &[f64], m: &[f64]) -> Result<f64> {
        let mut g = Graph::new(params);
        let sv = g.constant(Tensor::row_vector(s.to_vec()))?;
        let mv = g.constant(Tensor::row_vector(m.to_vec()))?;
        let v = self.value(&mut g, sv, mv)?;
        Ok(g.value(v).item())
    }
}
