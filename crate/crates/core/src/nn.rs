//! Layers and stochastic operators built on the graph: linear layers, MLPs,
//! scaled dot-product attention, straight-through Gumbel-softmax and the
//! categorical KL divergence.

use rand::Rng;

use crate::graph::{Graph, ParamId, ParamSet, Var};
use crate::tensor::{softmax_rows_slice, Result, Tensor, TensorError};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Bounds for the uniform draw feeding the Gumbel double log.
pub const GUMBEL_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Weights uniform in `±gain/√inputs`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain / (inputs.max(1) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-bound..=bound)).collect();
        let weight = params.add(format!("{name}.weight"), Tensor::new(inputs, outputs, data).expect("shape"));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(1, outputs)));
        Linear { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Fully connected stack with tanh between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: Activation,
}

impl Mlp {
    /// `widths` lists input, hidden and output widths. The last layer's
    /// weights are scaled by `output_gain`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        output: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { output_gain } else { 1.0 };
                Linear::new(params, &format!("{name}.{i}"), w[0], w[1], true, gain, rng)
            })
            .collect();
        Mlp { layers, output }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.inputs() {
            return Err(TensorError::Invalid(format!("MLP expects width {}, got {cols}", self.inputs())));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() || self.output == Activation::Tanh {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// Graph form of `softmax(Q Kᵀ / √d_e) V` applied independently to `groups`
/// equal row blocks. Returns `(out, weights)`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, groups: usize) -> Result<(Var, Var)> {
    let d_e = g.value(q).cols();
    if d_e == 0 {
        return Err(TensorError::Invalid("attention key width must be positive".into()));
    }
    let scores = g.block_matmul(q, k, groups, true)?;
    let scores = g.scale(scores, 1.0 / (d_e as f64).sqrt())?;
    let weights = g.softmax_rows(scores)?;
    let out = g.block_matmul(weights, v, groups, false)?;
    Ok((out, weights))
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    Tensor::new(x.rows(), x.cols(), softmax_rows_slice(x.data(), x.cols())).expect("shape")
}

/// Eager `softmax(Q Kᵀ / √d_e) V`, returning `(out, weights)`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(TensorError::ShapeMismatch { op: "attention", left: q.shape(), right: k.shape() });
    }
    if k.rows() != v.rows() {
        return Err(TensorError::ShapeMismatch { op: "attention", left: k.shape(), right: v.shape() });
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = q.matmul(&k.transpose())?.map(|s| s * scale);
    let weights = softmax_rows(&scores);
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Standard Gumbel noise from a clamped uniform draw.
pub fn sample_gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
            -(-u.ln()).ln()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelDraw {
    pub index: usize,
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

/// Straight-through Gumbel-softmax with caller-supplied noise.
pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], temperature: f64) -> Result<GumbelDraw> {
    if !(temperature > 0.0) {
        return Err(TensorError::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    if logits.len() != noise.len() || logits.is_empty() {
        return Err(TensorError::Invalid("logits and noise must be equal, nonzero length".into()));
    }
    let perturbed: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / temperature).collect();
    let soft = softmax_rows_slice(&perturbed, perturbed.len());
    let index = argmax(&soft);
    Ok(GumbelDraw { index, hard: one_hot(index, logits.len()), soft })
}

pub fn gumbel_softmax_st<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<GumbelDraw> {
    let noise = sample_gumbel(logits.len(), rng);
    gumbel_softmax_with_noise(logits, &noise, temperature)
}

/// Graph form over the rows of `logits` with frozen `noise`. Returns the
/// straight-through selection (hard forward, soft backward), the soft
/// relaxation and the selected indices.
pub fn gumbel_softmax_st_rows(
    g: &mut Graph,
    logits: Var,
    noise: &Tensor,
    temperature: f64,
) -> Result<(Var, Var, Vec<usize>)> {
    if !(temperature > 0.0) {
        return Err(TensorError::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    let noise_var = g.constant(noise.clone())?;
    let perturbed = g.add(logits, noise_var)?;
    let perturbed = g.scale(perturbed, 1.0 / temperature)?;
    let soft = g.softmax_rows(perturbed)?;
    let st = g.value(soft);
    let cols = st.cols();
    let mut hard = Tensor::zeros(st.rows(), cols);
    let mut indices = Vec::with_capacity(st.rows());
    for r in 0..st.rows() {
        let i = argmax(st.row(r));
        hard.set(r, i, 1.0);
        indices.push(i);
    }
    let z = g.straight_through(soft, hard)?;
    Ok((z, soft, indices))
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (total - 1.0).abs() > 1e-6 {
        return Err(TensorError::Invalid(format!("{what} is not a probability vector (sum {total})")));
    }
    Ok(())
}

/// `Σ p ln(p / q)` in nats with `q` floored at [`PROB_FLOOR`]; zero-mass
/// terms of `p` contribute nothing.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(TensorError::Invalid("distributions must have equal, nonzero length".into()));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pu, _)| pu > 0.0)
        .map(|(&pu, &qu)| pu * (pu.ln() - qu.max(PROB_FLOOR).ln()))
        .sum())
}

/// Per-row `KL(softmax(p_logits) ‖ softmax(q_logits))` as an `R x 1` column.
pub fn kl_rows(g: &mut Graph, p_logits: Var, q_logits: Var) -> Result<Var> {
    let log_p = g.log_softmax_rows(p_logits)?;
    let p = g.exp(log_p)?;
    let log_q = g.log_softmax_rows(q_logits)?;
    let log_q = g.clamp(log_q, PROB_FLOOR.ln(), f64::INFINITY)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    g.row_sum(terms)
}

/// Per-row KL between explicit probability rows, with the same flooring.
pub fn kl_prob_rows(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let p_safe = g.clamp(p, PROB_FLOOR, 1.0 + PROB_FLOOR)?;
    let log_p = g.log(p_safe)?;
    let q_safe = g.clamp(q, PROB_FLOOR, 1.0 + PROB_FLOOR)?;
    let log_q = g.log(q_safe)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    g.row_sum(terms)
}

/// Per-row entropy of probability rows, `R x 1`.
pub fn entropy_rows(g: &mut Graph, p: Var) -> Result<Var> {
    let p_safe = g.clamp(p, PROB_FLOOR, 1.0 + PROB_FLOOR)?;
    let log_p = g.log(p_safe)?;
    let terms = g.mul(p, log_p)?;
    let neg = g.scale(terms, -1.0)?;
    g.row_sum(neg)
}
