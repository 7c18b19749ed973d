//! Adam and gradient clipping over plain parameter tensors.

use super::{Element, Tensor};

/// Adam with bias correction. Moment buffers are lazily sized from the
/// parameter list on the first step and kept in parameter order, so the
/// same ordering must be used on every call (and when checkpointing).
pub struct Adam<E: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Rebuilds an optimizer from checkpointed state.
    pub fn restore(lr: f64, t: u64, m: Vec<Vec<E>>, v: Vec<Vec<E>>) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t, m, v }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<E>], &[Vec<E>]) {
        (&self.m, &self.v)
    }

    /// One update over every parameter that has a gradient buffer.
    pub fn step(&mut self, params: &mut [&mut Tensor<E>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
            self.v = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed size");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (E::from_f64(self.beta1), E::from_f64(self.beta2));
        let (nb1, nb2) = (E::from_f64(1.0 - self.beta1), E::from_f64(1.0 - self.beta2));
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        let (ibc1, ibc2) = (E::from_f64(1.0 / bc1), E::from_f64(1.0 / bc2));
        for (idx, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad().map(<[E]>::to_vec) else { continue };
            debug_assert_eq!(grad.len(), self.m[idx].len(), "parameter {idx} resized");
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (i, (&g, x)) in grad.iter().zip(p.data_mut()).enumerate() {
                m[i] = b1 * m[i] + nb1 * g;
                v[i] = b2 * v[i] + nb2 * g * g;
                let m_hat = m[i] * ibc1;
                let v_hat = v[i] * ibc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// L2 norm over the concatenation of all gradient buffers.
pub fn global_grad_norm<E: Element>(params: &[&Tensor<E>]) -> f64 {
    let mut acc = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for &v in g {
                let v = v.to_f64();
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<E: Element>(params: &mut [&mut Tensor<E>], max_norm: f64) -> f64 {
    let mut acc = 0.0f64;
    for p in params.iter() {
        if let Some(g) = p.grad() {
            for &v in g {
                let v = v.to_f64();
                acc += v * v;
            }
        }
    }
    let norm = acc.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                for v in g {
                    *v *= scale;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn adam_first_steps_with_unit_gradient() {
        // With a constant gradient of 1, bias correction makes every early
        // step move the parameter by almost exactly -lr.
        let mut p = Tensor::<f64>::zeros(vec![1]).with_grad();
        let mut opt = Adam::new(1e-5);
        p.set_grad(vec![1.0]);
        opt.step(&mut [&mut p]);
        assert_abs_diff_eq!(p.data()[0], -1e-5, epsilon = 1e-9);
        p.set_grad(vec![1.0]);
        opt.step(&mut [&mut p]);
        assert_abs_diff_eq!(p.data()[0], -2e-5, epsilon = 1e-9);
        assert_eq!(opt.timestep(), 2);
    }

    #[test]
    fn adam_skips_parameters_without_gradients() {
        let mut a = Tensor::<f32>::zeros(vec![2]).with_grad();
        let mut b = Tensor::<f32>::full(vec![2], 7.0);
        a.set_grad(vec![1.0, 1.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut a, &mut b]);
        assert_eq!(b.data(), &[7.0, 7.0]);
        assert!(a.data()[0] < 0.0);
    }

    #[test]
    fn clip_scales_gradients_to_max_norm() {
        let mut p = Tensor::<f32>::zeros(vec![2]).with_grad();
        p.set_grad(vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut [&mut p], 1.0);
        assert_abs_diff_eq!(norm, 5.0, epsilon = 1e-6);
        let g = p.grad().unwrap();
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 0.8, epsilon = 1e-6);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut p = Tensor::<f32>::zeros(vec![2]).with_grad();
        p.set_grad(vec![0.003, 0.004]);
        let norm = clip_global_norm(&mut [&mut p], 0.01);
        assert_abs_diff_eq!(norm, 0.005, epsilon = 1e-8);
        assert_eq!(p.grad().unwrap(), &[0.003, 0.004]);
    }
}
