//! Shared helpers for integration tests.

#![allow(dead_code)]

pub mod gradchecks;

use efx::tensor::{Element, Graph, Tensor, Var};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with i.i.d. uniform values in `[lo, hi)`.
pub fn rand_tensor<E: Element>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| E::from_f64(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Verifies reverse-mode gradients of `build` against central differences.
///
/// `build` receives one graph leaf per input tensor and must return a scalar.
/// Every input element is perturbed by `h` in both directions; the resulting
/// slope must match the analytic gradient to `tol` (relative to magnitude).
pub fn grad_check(
    inputs: &[Tensor<f64>],
    tol: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) {
    let h = 1e-5;

    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.data().to_vec(), t.shape().to_vec(), true).unwrap())
        .collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).len(), 1, "grad_check losses must be scalar");
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| g.grad(v).expect("input missing gradient").to_vec()).collect();

    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.leaf(t.data().to_vec(), t.shape().to_vec(), false).unwrap())
            .collect();
        let loss = build(&mut g, &vars);
        g.value(loss)[0]
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = eval(&work);
            work[ti].data_mut()[ei] = orig - h;
            let down = eval(&work);
            work[ti].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[ti][ei];
            let scale = 1.0f64.max(fd.abs()).max(an.abs());
            assert!(
                (fd - an).abs() <= tol * scale,
                "input {ti} element {ei}: finite difference {fd} vs analytic {an}"
            );
        }
    }
}
