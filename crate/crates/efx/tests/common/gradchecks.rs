//! Finite-difference verification of every differentiable op, shared
//! between the per-op test target and the acceptance sweep.

use super::{grad_check, rand_tensor, rng};
use efx::tensor::{Graph, PaddingMode, Tensor, Var};

const TOL: f64 = 1e-6;

/// Dot the value against a fixed pseudo-random probe so every output element
/// influences the loss with a distinct weight.
fn probe_loss(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let shape = g.shape(v).to_vec();
    let probe = rand_tensor::<f64>(&mut rng(seed), &shape, -1.0, 1.0);
    let p = g.leaf(probe.data().to_vec(), shape, false).unwrap();
    let prod = g.mul(v, p).unwrap();
    g.sum_all(prod)
}

pub fn elementwise_binary_same_shape() {
    let mut r = rng(1);
    let a = rand_tensor::<f64>(&mut r, &[2, 3, 4], 0.5, 2.0);
    let b = rand_tensor::<f64>(&mut r, &[2, 3, 4], 0.5, 2.0);
    for op in 0..4 {
        grad_check(&[a.clone(), b.clone()], TOL, |g, vars| {
            let y = match op {
                0 => g.add(vars[0], vars[1]).unwrap(),
                1 => g.sub(vars[0], vars[1]).unwrap(),
                2 => g.mul(vars[0], vars[1]).unwrap(),
                _ => g.div(vars[0], vars[1]).unwrap(),
            };
            probe_loss(g, y, 10 + op as u64)
        });
    }
}

pub fn elementwise_binary_broadcast() {
    let mut r = rng(2);
    let a = rand_tensor::<f64>(&mut r, &[3, 2, 2], 0.5, 2.0);
    let b = rand_tensor::<f64>(&mut r, &[1, 2, 2], 0.5, 2.0);
    let c = rand_tensor::<f64>(&mut r, &[3, 1, 1], 0.5, 2.0);
    for op in 0..4 {
        grad_check(&[a.clone(), b.clone()], TOL, |g, vars| {
            let y = match op {
                0 => g.add(vars[0], vars[1]).unwrap(),
                1 => g.sub(vars[0], vars[1]).unwrap(),
                2 => g.mul(vars[0], vars[1]).unwrap(),
                _ => g.div(vars[0], vars[1]).unwrap(),
            };
            probe_loss(g, y, 20 + op as u64)
        });
        grad_check(&[a.clone(), c.clone()], TOL, |g, vars| {
            let y = match op {
                0 => g.add(vars[0], vars[1]).unwrap(),
                1 => g.sub(vars[0], vars[1]).unwrap(),
                2 => g.mul(vars[0], vars[1]).unwrap(),
                _ => g.div(vars[0], vars[1]).unwrap(),
            };
            probe_loss(g, y, 30 + op as u64)
        });
    }
}

pub fn scalar_ops_and_activations() {
    let mut r = rng(3);
    // Keep magnitudes >= 0.1 so relu/leaky_relu are differentiable at
    // every perturbed point.
    let pos = rand_tensor::<f64>(&mut r, &[2, 3], 0.1, 1.5);
    let mixed_data: Vec<f64> =
        pos.data().iter().enumerate().map(|(i, &v)| if i % 2 == 0 { v } else { -v }).collect();
    let mixed = Tensor::new(vec![2, 3], mixed_data).unwrap();

    grad_check(&[mixed.clone()], TOL, |g, v| {
        let y = g.add_scalar(v[0], 0.7);
        probe_loss(g, y, 40)
    });
    grad_check(&[mixed.clone()], TOL, |g, v| {
        let y = g.mul_scalar(v[0], -1.3);
        probe_loss(g, y, 41)
    });
    grad_check(&[mixed.clone()], TOL, |g, v| {
        let y = g.relu(v[0]);
        probe_loss(g, y, 42)
    });
    grad_check(&[mixed.clone()], TOL, |g, v| {
        let y = g.leaky_relu(v[0], 0.2);
        probe_loss(g, y, 43)
    });
    grad_check(&[mixed.clone()], TOL, |g, v| {
        let y = g.sigmoid(v[0]);
        probe_loss(g, y, 44)
    });
    grad_check(&[mixed], TOL, |g, v| {
        let y = g.tanh(v[0]);
        probe_loss(g, y, 45)
    });
    // ln_clamped: probe strictly inside (eps, 1-eps).
    let probs = rand_tensor::<f64>(&mut r, &[4], 0.05, 0.95);
    grad_check(&[probs], TOL, |g, v| {
        let y = g.ln_clamped(v[0], 1e-7);
        probe_loss(g, y, 46)
    });
}

pub fn softmax_over_leading_axis() {
    let mut r = rng(4);
    let x = rand_tensor::<f64>(&mut r, &[5, 2, 2], -2.0, 2.0);
    grad_check(&[x], TOL, |g, v| {
        let y = g.softmax0(v[0]);
        probe_loss(g, y, 50)
    });
}

pub fn conv2d_symmetric_stride1() {
    let mut r = rng(5);
    let x = rand_tensor::<f64>(&mut r, &[2, 5, 6], -1.0, 1.0);
    let w = rand_tensor::<f64>(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let b = rand_tensor::<f64>(&mut r, &[3], -0.5, 0.5);
    grad_check(&[x, w, b], TOL, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, PaddingMode::Symmetric).unwrap();
        probe_loss(g, y, 60)
    });
}

pub fn conv2d_zero_stride2() {
    let mut r = rng(6);
    let x = rand_tensor::<f64>(&mut r, &[2, 6, 6], -1.0, 1.0);
    let w = rand_tensor::<f64>(&mut r, &[2, 2, 5, 5], -0.5, 0.5);
    grad_check(&[x, w], TOL, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 2, PaddingMode::Zero).unwrap();
        probe_loss(g, y, 61)
    });
}

pub fn conv2d_rectangular_kernel() {
    let mut r = rng(7);
    let x = rand_tensor::<f64>(&mut r, &[1, 4, 5], -1.0, 1.0);
    let w = rand_tensor::<f64>(&mut r, &[1, 1, 1, 3], -1.0, 1.0);
    grad_check(&[x, w], TOL, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, PaddingMode::Symmetric).unwrap();
        probe_loss(g, y, 62)
    });
}

pub fn pooling_and_upsampling() {
    let mut r = rng(8);
    let x = rand_tensor::<f64>(&mut r, &[2, 4, 4], -1.0, 1.0);
    grad_check(&[x.clone()], TOL, |g, v| {
        let y = g.avg_pool2(v[0]).unwrap();
        probe_loss(g, y, 70)
    });
    grad_check(&[x.clone()], TOL, |g, v| {
        let y = g.upsample2(v[0]).unwrap();
        probe_loss(g, y, 71)
    });
    grad_check(&[x], TOL, |g, v| {
        let y = g.global_avg_pool(v[0]).unwrap();
        probe_loss(g, y, 72)
    });
}

pub fn matmul_and_gram() {
    let mut r = rng(9);
    let a = rand_tensor::<f64>(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor::<f64>(&mut r, &[4, 2], -1.0, 1.0);
    grad_check(&[a, b], TOL, |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        probe_loss(g, y, 80)
    });
    let f = rand_tensor::<f64>(&mut r, &[3, 2, 4], -1.0, 1.0);
    grad_check(&[f], TOL, |g, v| {
        let y = g.gram(v[0]).unwrap();
        probe_loss(g, y, 81)
    });
}

pub fn reductions_and_reshapes() {
    let mut r = rng(10);
    let x = rand_tensor::<f64>(&mut r, &[2, 3, 2], -1.0, 1.0);
    grad_check(&[x.clone()], TOL, |g, v| g.sum_all(v[0]));
    grad_check(&[x.clone()], TOL, |g, v| g.mean_all(v[0]));
    grad_check(&[x.clone()], TOL, |g, v| {
        let y = g.reshape(v[0], vec![3, 4]).unwrap();
        probe_loss(g, y, 90)
    });
    let vec_in = rand_tensor::<f64>(&mut r, &[3], -1.0, 1.0);
    grad_check(&[vec_in], TOL, |g, v| {
        let y = g.tile_spatial(v[0], 2, 3).unwrap();
        probe_loss(g, y, 91)
    });
}

pub fn concat_and_narrow() {
    let mut r = rng(11);
    let a = rand_tensor::<f64>(&mut r, &[2, 2, 2], -1.0, 1.0);
    let b = rand_tensor::<f64>(&mut r, &[3, 2, 2], -1.0, 1.0);
    grad_check(&[a, b], TOL, |g, v| {
        let y = g.concat0(&[v[0], v[1]]).unwrap();
        let n = g.narrow0(y, 1, 3).unwrap();
        probe_loss(g, n, 100)
    });
}

pub fn apply_kernels_both_inputs() {
    let mut r = rng(12);
    let img = rand_tensor::<f64>(&mut r, &[2, 4, 5], 0.0, 1.0);
    let field = rand_tensor::<f64>(&mut r, &[9, 4, 5], 0.01, 1.0);
    grad_check(&[img, field], TOL, |g, v| {
        // Normalize the field on-graph as the real pipeline does.
        let sm = g.softmax0(v[1]);
        let y = g.apply_kernels(v[0], sm, 1).unwrap();
        probe_loss(g, y, 110)
    });
}

pub fn warp_image_and_flow() {
    let mut r = rng(13);
    let img = rand_tensor::<f64>(&mut r, &[2, 5, 5], 0.0, 1.0);
    // Fractional offsets keep the bilinear surface smooth at every
    // perturbed sample point.
    let flow = rand_tensor::<f64>(&mut r, &[2, 5, 5], -0.45, 0.45);
    grad_check(&[img, flow], 1e-5, |g, v| {
        let y = g.warp(v[0], v[1]).unwrap();
        probe_loss(g, y, 120)
    });
}

pub fn composite_expression_through_many_ops() {
    // One deep chain mixing conv, activation, pooling, gram, and arithmetic,
    // as a smoke test that gradients survive composition.
    let mut r = rng(14);
    let x = rand_tensor::<f64>(&mut r, &[2, 4, 4], -1.0, 1.0);
    let w = rand_tensor::<f64>(&mut r, &[4, 2, 3, 3], -0.4, 0.4);
    grad_check(&[x, w], TOL, |g, v| {
        let c = g.conv2d(v[0], v[1], None, 1, PaddingMode::Symmetric).unwrap();
        let a = g.leaky_relu(c, 0.2);
        let p = g.avg_pool2(a).unwrap();
        let gm = g.gram(p).unwrap();
        let sq = g.mul(gm, gm).unwrap();
        g.mean_all(sq)
    });
}

pub fn style_extractor_is_differentiable() {
    let mut r = rng(15);
    let frame = rand_tensor::<f64>(&mut r, &[3, 8, 8], 0.05, 0.95);
    let net = efx::features::StyleFeatureNet::<f64>::new(efx::features::StyleNetConfig {
        seed: 11,
        stage_channels: vec![4, 6],
        kernel: 3,
    });
    grad_check(&[frame], 1e-4, |g, v| {
        let feats = net.features_on_graph(g, v[0]).unwrap();
        let mut acc = probe_loss(g, feats[0], 130);
        let f1 = probe_loss(g, feats[1], 131);
        acc = g.add(acc, f1).unwrap();
        acc
    });
}

pub fn flow_extractor_is_differentiable_wrt_both_frames() {
    let mut r = rng(16);
    let a = rand_tensor::<f64>(&mut r, &[3, 8, 8], 0.2, 0.8);
    let b = rand_tensor::<f64>(&mut r, &[3, 8, 8], 0.2, 0.8);
    let solver = efx::features::FlowSolver::new(efx::features::FlowSolverConfig {
        scales: 2,
        iterations: 3,
        alpha_sq: 0.1,
        max_displacement: 8.0,
    });
    grad_check(&[a, b], 1e-4, |g, v| {
        let levels = solver.flow_on_graph(g, v[0], v[1]).unwrap();
        let mut acc = probe_loss(g, levels[0], 140);
        let l1 = probe_loss(g, levels[1], 141);
        acc = g.add(acc, l1).unwrap();
        acc
    });
}

pub fn every_loss_is_differentiable_wrt_generated_frames() {
    use efx::features::{FlowSolver, FlowSolverConfig, StyleFeatureNet, StyleNetConfig};
    use efx::losses::{
        content_loss, flow_loss, generator_adversarial, mse_loss, style_loss, Discriminator,
        DiscriminatorConfig, FlowLossMode,
    };
    use rand::SeedableRng;

    let net = StyleFeatureNet::<f64>::new(StyleNetConfig {
        seed: 31,
        stage_channels: vec![4, 6],
        kernel: 3,
    });
    let solver = FlowSolver::new(FlowSolverConfig {
        scales: 2,
        iterations: 3,
        alpha_sq: 0.1,
        max_displacement: 8.0,
    });
    let mut drng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
    let disc = Discriminator::<f64>::new(&mut drng, DiscriminatorConfig::narrow(3));

    let mut r = rng(33);
    let y = rand_tensor::<f64>(&mut r, &[3, 8, 8], 0.1, 0.9);
    let y_prev = rand_tensor::<f64>(&mut r, &[3, 8, 8], 0.1, 0.9);
    let s = rand_tensor::<f64>(&mut r, &[3, 8, 8], 0.1, 0.9);
    let s_prev = rand_tensor::<f64>(&mut r, &[3, 8, 8], 0.1, 0.9);

    grad_check(&[y.clone(), s.clone()], 1e-4, |g, v| mse_loss(g, v[0], v[1]).unwrap());
    grad_check(&[y.clone(), s.clone()], 1e-4, |g, v| {
        style_loss(g, &net, v[0], v[1]).unwrap()
    });
    grad_check(&[y.clone(), s.clone()], 1e-4, |g, v| {
        content_loss(g, &net, v[0], v[1]).unwrap()
    });
    for mode in [FlowLossMode::Direct, FlowLossMode::Gram] {
        grad_check(
            &[y_prev.clone(), y.clone(), s_prev.clone(), s.clone()],
            1e-4,
            |g, v| flow_loss(g, &solver, (v[0], v[1]), (v[2], v[3]), mode).unwrap(),
        );
    }
    grad_check(&[y.clone()], 1e-4, |g, v| generator_adversarial(g, &disc, v[0]).unwrap());
}

/// End-to-end: finite differences over EVERY model parameter for a T=3
/// teacher-free rollout with an MSE loss on 8x8 frames. Recurrence depth
/// loosens the tolerance to 1e-3 relative.
pub fn predictor_rollout_end_to_end_gradient() {
    use efx::nn::ParamOwner;
    use efx::predictor::{ArchConfig, BroadEffect, EffectCategory, OutputMode, PredictorModel};
    use efx::tensor::{Graph, Tensor};

    let arch = ArchConfig {
        image_size: 8,
        enc_channels: vec![2, 3, 4],
        stage_kernel: 3,
        lstm_kernel: 3,
        head_kernel: 3,
        embed_dim: 2,
        kappa: 1,
        num_categories: 2,
        output_mode: OutputMode::Kernels,
        seed: 91,
    };
    let mut model = PredictorModel::<f64>::new(arch).unwrap();
    let cat = EffectCategory::new(BroadEffect::Melt, 1).unwrap();
    let frames: Vec<Tensor<f64>> = (0..4)
        .map(|i| {
            Tensor::new(
                vec![3, 8, 8],
                (0..192)
                    .map(|j| 0.5 + 0.4 * ((i * 57 + j) as f64 * 0.811).sin())
                    .collect(),
            )
            .unwrap()
        })
        .collect();

    // Builds the full rollout graph and returns (loss value, graph, bound).
    let run = |model: &PredictorModel<f64>| {
        let mut g = Graph::<f64>::new();
        let bound = model.bind(&mut g);
        let state0 = model.init_state(1).unwrap().pop().unwrap();
        let mut state = model.bind_state(&mut g, &state0);
        let mut prev = g.leaf(frames[0].data().to_vec(), vec![3, 8, 8], false).unwrap();
        let mut loss = g.scalar(0.0);
        for t in 1..=3 {
            let out = bound.step(&mut g, prev, &cat, &state).unwrap();
            let y = model.apply_step_output(&mut g, prev, &out).unwrap();
            let target = g.leaf(frames[t].data().to_vec(), vec![3, 8, 8], false).unwrap();
            let term = efx::losses::mse_loss(&mut g, y, target).unwrap();
            loss = g.add(loss, term).unwrap();
            state = out.state;
            prev = y;
        }
        let value = g.value(loss)[0];
        (value, g, bound, loss)
    };

    // Analytic gradients.
    let (_, mut g, bound, loss) = run(&model);
    g.backward(loss).unwrap();
    bound.read_grads(&g, &mut model);
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad().expect("trainable").to_vec()))
        .collect();

    // Central differences, every coordinate of every parameter.
    let h = 1e-5;
    let mut checked = 0usize;
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for k in 0..grads.len() {
            let orig = {
                let mut params = model.params_mut();
                let v = params[pi].1.data()[k];
                params[pi].1.data_mut()[k] = v + h;
                v
            };
            let (up, ..) = run(&model);
            model.params_mut()[pi].1.data_mut()[k] = orig - h;
            let (down, ..) = run(&model);
            model.params_mut()[pi].1.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[k];
            let scale = 1.0_f64.max(fd.abs()).max(an.abs());
            assert!(
                (fd - an).abs() / scale < 1e-3,
                "{name}[{k}]: analytic {an} vs finite-diff {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > 1000, "expected to sweep every parameter, got {checked}");
}

/// Runs every finite-difference check once; returns how many ran.
pub fn run_all() -> usize {
    elementwise_binary_same_shape();
    elementwise_binary_broadcast();
    scalar_ops_and_activations();
    softmax_over_leading_axis();
    conv2d_symmetric_stride1();
    conv2d_zero_stride2();
    conv2d_rectangular_kernel();
    pooling_and_upsampling();
    matmul_and_gram();
    reductions_and_reshapes();
    concat_and_narrow();
    apply_kernels_both_inputs();
    warp_image_and_flow();
    composite_expression_through_many_ops();
    style_extractor_is_differentiable();
    flow_extractor_is_differentiable_wrt_both_frames();
    every_loss_is_differentiable_wrt_generated_frames();
    predictor_rollout_end_to_end_gradient();
    18
}
