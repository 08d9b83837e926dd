//! Adam with bias correction, and global-norm gradient clipping.

use crate::graph::ParamSet;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        OptimizerState { lr, beta1, beta2, eps, step: 0, first: zeros.clone(), second: zeros }
    }
}

pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(TensorError::Invalid(format!(
            "adam: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.tensors().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch { op: "adam_step", left: p.shape(), right: g.shape() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(value));
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = single(1.5);
        let mut st = OptimizerState::new(&ps, 0.1);
        for _ in 0..5 {
            adam_step(&mut ps, &[Tensor::scalar(0.0)], &mut st).unwrap();
        }
        assert_eq!(ps.tensors()[0].item(), 1.5);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn matches_reference_recursion() {
        let mut ps = single(0.0);
        let mut st = OptimizerState::new(&ps, 0.1);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            adam_step(&mut ps, &[Tensor::scalar(1.0)], &mut st).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((ps.tensors()[0].item() - w).abs() < 1e-10);
        // each step moves by almost exactly lr when the gradient is constant
        assert!((w + 0.3).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut ps = single(0.0);
        let mut st = OptimizerState::new(&ps, 0.01);
        let mut prev = 0.0;
        for _ in 0..500 {
            adam_step(&mut ps, &[Tensor::scalar(-3.0)], &mut st).unwrap();
            let now = ps.tensors()[0].item();
            assert!(((now - prev) - 0.01).abs() < 1e-6);
            prev = now;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut ps = single(0.0);
        let mut st = OptimizerState::new(&ps, 0.1);
        assert!(adam_step(&mut ps, &[Tensor::zeros(2, 1)], &mut st).is_err());
        assert!(adam_step(&mut ps, &[], &mut st).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::row_vector(vec![3.0, 4.0]), Tensor::scalar(12.0)];
        let before = clip_grad_norm(&mut g, 0.5);
        assert!((before - 13.0).abs() < 1e-12);
        assert!((global_norm(&g) - 0.5).abs() < 1e-12);
        let mut small = vec![Tensor::scalar(0.1)];
        clip_grad_norm(&mut small, 0.5);
        assert_eq!(small[0].item(), 0.1);
    }
}
