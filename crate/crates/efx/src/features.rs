//! Frozen feature extractors used only inside losses.
//!
//! Two extractors stand in for large pretrained networks:
//!
//! * [`StyleFeatureNet`] — a fixed, randomly initialized stack of bias-free
//!   conv + relu + 2×2 average-pool stages. Its activations feed the content
//!   and style (Gram) losses. Random conv features are statistically rich
//!   enough for Gram-style texture matching, and a fixed seed makes every
//!   run reproducible.
//! * [`FlowSolver`] — a differentiable coarse-to-fine brightness-constancy
//!   solver (Horn–Schunck-style Jacobi iterations, unrolled on the graph)
//!   whose per-scale flows play the role of "flow features". Gradients pass
//!   through to both input frames.
//!
//! Neither extractor is ever trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::Conv2dLayer;
use crate::tensor::{Element, Graph, PaddingMode, Tensor, Var};
use crate::{Error, Result};

/// Architecture + seed for [`StyleFeatureNet`]. Deterministic per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleNetConfig {
    pub seed: u64,
    /// Output channels of each stage, in order.
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for StyleNetConfig {
    fn default() -> Self {
        StyleNetConfig { seed: 7001, stage_channels: vec![8, 16, 32, 64, 64], kernel: 3 }
    }
}

/// Frozen random conv network for style/content features.
///
/// Stage `l` computes `pool2(relu(conv_l(x)))` with bias-free 3×3 convs and
/// symmetric padding, so a zero frame produces all-zero activations and
/// shifting the input by the pool stride shifts stage-1 features by one
/// pixel (away from borders). Feature maps for an `H×W` input have spatial
/// size `H/2^l × W/2^l`, which requires `H` and `W` divisible by `2^L`.
pub struct StyleFeatureNet<E: Element> {
    stages: Vec<Conv2dLayer<E>>,
    config: StyleNetConfig,
}

impl<E: Element> StyleFeatureNet<E> {
    pub fn new(config: StyleNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut in_ch = 3;
        for &out_ch in &config.stage_channels {
            stages.push(Conv2dLayer::new(
                &mut rng,
                in_ch,
                out_ch,
                config.kernel,
                1,
                PaddingMode::Symmetric,
                false,
                false,
            ));
            in_ch = out_ch;
        }
        StyleFeatureNet { stages, config }
    }

    pub fn config(&self) -> &StyleNetConfig {
        &self.config
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Features of every stage, differentiable w.r.t. `frame`.
    pub fn features_on_graph(&self, g: &mut Graph<E>, frame: Var) -> Result<Vec<Var>> {
        let shape = g.shape(frame).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::contract(
                "style_features",
                format!("expected a (3, H, W) frame, got {shape:?}"),
            ));
        }
        let mut x = frame;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let bound = stage.bind(g);
            let pre = bound.apply(g, x)?;
            let act = g.relu(pre);
            x = g.avg_pool2(act)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Detached features for inspection and evaluation.
    pub fn features(&self, frame: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let mut g = Graph::new();
        let x = g.leaf(frame.data().to_vec(), frame.shape().to_vec(), false)?;
        let vars = self.features_on_graph(&mut g, x)?;
        Ok(vars.into_iter().map(|v| g.detach(v)).collect())
    }
}

/// Dense 2-D displacement field in pixels.
///
/// Positive `u` points rightward, positive `v` downward; a frame pair where
/// content moved one pixel down has `v ≈ +1`. Values must be finite; the
/// flow solver additionally clamps its outputs to the configured maximum
/// displacement before constructing fields.
#[derive(Debug, Clone)]
pub struct FlowField<E: Element> {
    u: Tensor<E>,
    v: Tensor<E>,
}

impl<E: Element> FlowField<E> {
    pub fn new(u: Tensor<E>, v: Tensor<E>) -> Result<Self> {
        if u.shape() != v.shape() || u.shape().len() != 2 {
            return Err(Error::contract(
                "flow_field",
                format!("u and v must share an (H, W) shape, got {:?} / {:?}", u.shape(), v.shape()),
            ));
        }
        let finite = |t: &Tensor<E>| t.data().iter().all(|x| Element::to_f64(*x).is_finite());
        if !finite(&u) || !finite(&v) {
            return Err(Error::contract("flow_field", "non-finite displacement"));
        }
        Ok(FlowField { u, v })
    }

    /// Builds a field from a stacked `(2, H, W)` tensor (`u` first), clamping
    /// displacements into `[-max_disp, max_disp]`.
    pub fn from_stacked(stacked: &Tensor<E>, max_disp: f64) -> Result<Self> {
        let shape = stacked.shape();
        if shape.len() != 3 || shape[0] != 2 {
            return Err(Error::contract(
                "flow_field",
                format!("expected a (2, H, W) tensor, got {shape:?}"),
            ));
        }
        let (h, w) = (shape[1], shape[2]);
        let plane = h * w;
        let clamp = |x: &E| {
            let x = Element::to_f64(*x);
            E::from_f64(x.clamp(-max_disp, max_disp))
        };
        let u: Vec<E> = stacked.data()[..plane].iter().map(clamp).collect();
        let v: Vec<E> = stacked.data()[plane..].iter().map(clamp).collect();
        FlowField::new(Tensor::new(vec![h, w], u)?, Tensor::new(vec![h, w], v)?)
    }

    pub fn height(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn u(&self) -> &Tensor<E> {
        &self.u
    }

    pub fn v(&self) -> &Tensor<E> {
        &self.v
    }

    /// Stacks to a `(2, H, W)` tensor, `u` first.
    pub fn to_stacked(&self) -> Tensor<E> {
        let mut data = self.u.data().to_vec();
        data.extend_from_slice(self.v.data());
        Tensor::new(vec![2, self.height(), self.width()], data)
            .expect("u and v share a validated shape")
    }

    /// Mean absolute component error against another field of equal size.
    pub fn mean_abs_diff(&self, other: &FlowField<E>) -> Result<f64> {
        if self.u.shape() != other.u.shape() {
            return Err(Error::contract("flow_field", "size mismatch in mean_abs_diff"));
        }
        let n = (2 * self.u.numel()) as f64;
        let sum = |a: &Tensor<E>, b: &Tensor<E>| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (Element::to_f64(*x) - Element::to_f64(*y)).abs())
                .sum::<f64>()
        };
        Ok((sum(&self.u, &other.u) + sum(&self.v, &other.v)) / n)
    }
}

/// Per-scale flow fields; index `s` has spatial size `H/2^s × W/2^s`, so
/// index 0 is the final full-resolution flow.
#[derive(Debug, Clone)]
pub struct FlowFeaturePyramid<E: Element> {
    levels: Vec<FlowField<E>>,
}

impl<E: Element> FlowFeaturePyramid<E> {
    pub fn levels(&self) -> &[FlowField<E>] {
        &self.levels
    }

    pub fn finest(&self) -> &FlowField<E> {
        &self.levels[0]
    }
}

/// Solver hyperparameters. The defaults are tuned so that small rigid
/// translations of smooth content are recovered within a quarter pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSolverConfig {
    pub scales: usize,
    pub iterations: usize,
    /// Smoothness weight α² in the Jacobi update denominator.
    pub alpha_sq: f64,
    /// Detached outputs are clamped to this displacement magnitude.
    pub max_displacement: f64,
}

impl Default for FlowSolverConfig {
    fn default() -> Self {
        FlowSolverConfig { scales: 3, iterations: 20, alpha_sq: 0.1, max_displacement: 8.0 }
    }
}

/// Unrolled coarse-to-fine brightness-constancy flow solver.
///
/// Frames are converted to luma (0.299 R + 0.587 G + 0.114 B), downsampled
/// `scales − 1` times by 2×2 average pooling, and each level runs a fixed
/// number of Jacobi iterations on the incremental flow around the upsampled
/// coarser estimate. Every step is an ordinary graph op, so the result is
/// differentiable w.r.t. both frames and fully deterministic.
pub struct FlowSolver {
    config: FlowSolverConfig,
}

/// Fixed convolution kernels bound onto one graph.
struct FlowKernels {
    dx: Var,
    dy: Var,
    neighbor: Var,
}

impl FlowSolver {
    pub fn new(config: FlowSolverConfig) -> Self {
        FlowSolver { config }
    }

    pub fn config(&self) -> &FlowSolverConfig {
        &self.config
    }

    fn kernels<E: Element>(g: &mut Graph<E>) -> Result<FlowKernels> {
        let dx = g.leaf(
            [-0.5, 0.0, 0.5].iter().map(|&x| E::from_f64(x)).collect(),
            vec![1, 1, 1, 3],
            false,
        )?;
        let dy = g.leaf(
            [-0.5, 0.0, 0.5].iter().map(|&x| E::from_f64(x)).collect(),
            vec![1, 1, 3, 1],
            false,
        )?;
        let sixth = 1.0 / 6.0;
        let twelfth = 1.0 / 12.0;
        let neighbor = g.leaf(
            [twelfth, sixth, twelfth, sixth, 0.0, sixth, twelfth, sixth, twelfth]
                .iter()
                .map(|&x| E::from_f64(x))
                .collect(),
            vec![1, 1, 3, 3],
            false,
        )?;
        Ok(FlowKernels { dx, dy, neighbor })
    }

    fn luma<E: Element>(g: &mut Graph<E>, frame: Var) -> Result<Var> {
        let shape = g.shape(frame).to_vec();
        if shape.len() != 3 {
            return Err(Error::contract(
                "flow_features",
                format!("expected a (C, H, W) frame, got {shape:?}"),
            ));
        }
        match shape[0] {
            1 => Ok(frame),
            3 => {
                let r = g.narrow0(frame, 0, 1)?;
                let gr = g.narrow0(frame, 1, 1)?;
                let b = g.narrow0(frame, 2, 1)?;
                let r = g.mul_scalar(r, 0.299);
                let gr = g.mul_scalar(gr, 0.587);
                let b = g.mul_scalar(b, 0.114);
                let rg = g.add(r, gr)?;
                g.add(rg, b)
            }
            c => Err(Error::contract(
                "flow_features",
                format!("expected 1 or 3 channels, got {c}"),
            )),
        }
    }

    /// One pyramid level: Jacobi iterations on the incremental flow around
    /// `(init_u, init_v)`. Returns the refined `(u, v)`.
    fn solve_level<E: Element>(
        &self,
        g: &mut Graph<E>,
        a: Var,
        b: Var,
        init_u: Var,
        init_v: Var,
        kernels: &FlowKernels,
    ) -> Result<(Var, Var)> {
        let flow = g.concat0(&[init_u, init_v])?;
        let b_warp = g.warp(b, flow)?;
        let sum_ab = g.add(a, b_warp)?;
        let avg_ab = g.mul_scalar(sum_ab, 0.5);
        let ix = g.conv2d(avg_ab, kernels.dx, None, 1, PaddingMode::Symmetric)?;
        let iy = g.conv2d(avg_ab, kernels.dy, None, 1, PaddingMode::Symmetric)?;
        let neg_a = g.mul_scalar(a, -1.0);
        let it = g.add(b_warp, neg_a)?;
        let ix2 = g.mul(ix, ix)?;
        let iy2 = g.mul(iy, iy)?;
        let grad_sq = g.add(ix2, iy2)?;
        let denom = g.add_scalar(grad_sq, self.config.alpha_sq);

        let shape = g.shape(a).to_vec();
        let zeros = vec![E::from_f64(0.0); shape.iter().product()];
        let mut du = g.leaf(zeros.clone(), shape.clone(), false)?;
        let mut dv = g.leaf(zeros, shape, false)?;
        for _ in 0..self.config.iterations {
            let du_bar = g.conv2d(du, kernels.neighbor, None, 1, PaddingMode::Symmetric)?;
            let dv_bar = g.conv2d(dv, kernels.neighbor, None, 1, PaddingMode::Symmetric)?;
            let ix_du = g.mul(ix, du_bar)?;
            let iy_dv = g.mul(iy, dv_bar)?;
            let data_term = g.add(ix_du, iy_dv)?;
            let residual = g.add(data_term, it)?;
            let scaled = g.div(residual, denom)?;
            let step_u = g.mul(ix, scaled)?;
            let step_v = g.mul(iy, scaled)?;
            let neg_u = g.mul_scalar(step_u, -1.0);
            let neg_v = g.mul_scalar(step_v, -1.0);
            du = g.add(du_bar, neg_u)?;
            dv = g.add(dv_bar, neg_v)?;
        }
        let u = g.add(init_u, du)?;
        let v = g.add(init_v, dv)?;
        Ok((u, v))
    }

    /// Per-scale flows as graph vars; index 0 is full resolution, index `s`
    /// has spatial size `H/2^s × W/2^s`, each shaped `(2, H_s, W_s)` with
    /// `u` in channel 0 and `v` in channel 1.
    pub fn flow_on_graph<E: Element>(
        &self,
        g: &mut Graph<E>,
        frame_a: Var,
        frame_b: Var,
    ) -> Result<Vec<Var>> {
        if g.shape(frame_a) != g.shape(frame_b) {
            return Err(Error::contract(
                "flow_features",
                format!(
                    "frame shapes differ: {:?} vs {:?}",
                    g.shape(frame_a),
                    g.shape(frame_b)
                ),
            ));
        }
        let scales = self.config.scales.max(1);
        let (h, w) = {
            let s = g.shape(frame_a);
            (s[1], s[2])
        };
        let down = 1 << (scales - 1);
        if h % down != 0 || w % down != 0 || h / down < 3 || w / down < 3 {
            return Err(Error::contract(
                "flow_features",
                format!("{h}x{w} frames do not support {scales} pyramid scales"),
            ));
        }

        let kernels = Self::kernels(g)?;
        let a0 = Self::luma(g, frame_a)?;
        let b0 = Self::luma(g, frame_b)?;
        let mut a_levels = vec![a0];
        let mut b_levels = vec![b0];
        for s in 1..scales {
            let a_prev = a_levels[s - 1];
            let b_prev = b_levels[s - 1];
            a_levels.push(g.avg_pool2(a_prev)?);
            b_levels.push(g.avg_pool2(b_prev)?);
        }

        let coarse_shape = g.shape(a_levels[scales - 1]).to_vec();
        let zeros = vec![E::from_f64(0.0); coarse_shape.iter().product()];
        let mut u = g.leaf(zeros.clone(), coarse_shape.clone(), false)?;
        let mut v = g.leaf(zeros, coarse_shape, false)?;

        let mut per_scale = vec![None; scales];
        for s in (0..scales).rev() {
            if s < scales - 1 {
                let u_up = g.upsample2(u)?;
                let v_up = g.upsample2(v)?;
                u = g.mul_scalar(u_up, 2.0);
                v = g.mul_scalar(v_up, 2.0);
            }
            let (u_new, v_new) = self.solve_level(g, a_levels[s], b_levels[s], u, v, &kernels)?;
            u = u_new;
            v = v_new;
            per_scale[s] = Some(g.concat0(&[u, v])?);
        }
        Ok(per_scale.into_iter().map(|v| v.expect("every scale solved")).collect())
    }

    /// Detached pyramid for evaluation and data generation; outputs are
    /// clamped to the configured maximum displacement.
    pub fn flow_features<E: Element>(
        &self,
        frame_a: &Tensor<E>,
        frame_b: &Tensor<E>,
    ) -> Result<FlowFeaturePyramid<E>> {
        let mut g = Graph::new();
        let a = g.leaf(frame_a.data().to_vec(), frame_a.shape().to_vec(), false)?;
        let b = g.leaf(frame_b.data().to_vec(), frame_b.shape().to_vec(), false)?;
        let vars = self.flow_on_graph(&mut g, a, b)?;
        let levels = vars
            .into_iter()
            .map(|v| {
                let stacked = g.detach(v);
                FlowField::from_stacked(&stacked, self.config.max_displacement)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowFeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_blob(h: usize, w: usize, cy: f64, cx: f64, sigma: f64) -> Vec<f64> {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                data.push(0.05 + 0.9 * (-r2 / (2.0 * sigma * sigma)).exp());
            }
        }
        data
    }

    fn blob_frame(h: usize, w: usize, cy: f64, cx: f64, sigma: f64) -> Tensor<f64> {
        let plane = gaussian_blob(h, w, cy, cx, sigma);
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let gain = 1.0 - 0.1 * c as f64;
            data.extend(plane.iter().map(|&p| p * gain));
        }
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    /// Mean (u, v) over pixels where the blob is clearly present.
    fn support_mean(field: &FlowField<f64>, frame: &Tensor<f64>) -> (f64, f64) {
        let (h, w) = (field.height(), field.width());
        let plane = &frame.data()[..h * w];
        let max = plane.iter().cloned().fold(f64::MIN, f64::max);
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut n = 0usize;
        for i in 0..h * w {
            if plane[i] > 0.5 * max {
                su += field.u().data()[i];
                sv += field.v().data()[i];
                n += 1;
            }
        }
        assert!(n > 20, "support region too small: {n}");
        (su / n as f64, sv / n as f64)
    }

    #[test]
    fn style_zero_frame_gives_zero_features() {
        let net = StyleFeatureNet::<f32>::new(StyleNetConfig::default());
        let frame = Tensor::zeros(vec![3, 32, 32]);
        for feat in net.features(&frame).unwrap() {
            assert!(feat.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn style_features_are_deterministic_per_seed() {
        let net1 = StyleFeatureNet::<f32>::new(StyleNetConfig::default());
        let net2 = StyleFeatureNet::<f32>::new(StyleNetConfig::default());
        let other = StyleFeatureNet::<f32>::new(StyleNetConfig {
            seed: 9,
            ..StyleNetConfig::default()
        });
        let frame = Tensor::from_f64_slice(
            vec![3, 32, 32],
            &(0..3 * 1024).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect::<Vec<_>>(),
        )
        .unwrap();
        let f1 = net1.features(&frame).unwrap();
        let f2 = net2.features(&frame).unwrap();
        let f3 = other.features(&frame).unwrap();
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(a.data(), b.data());
        }
        assert_ne!(f1[0].data(), f3[0].data());
    }

    #[test]
    fn style_feature_shapes_follow_stage_downsampling() {
        let net = StyleFeatureNet::<f32>::new(StyleNetConfig::default());
        let frame = Tensor::zeros(vec![3, 32, 32]);
        let feats = net.features(&frame).unwrap();
        let expect: Vec<Vec<usize>> = vec![
            vec![8, 16, 16],
            vec![16, 8, 8],
            vec![32, 4, 4],
            vec![64, 2, 2],
            vec![64, 1, 1],
        ];
        let got: Vec<Vec<usize>> = feats.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn style_features_shift_with_input() {
        // Two 16x16 crops of one 24x24 field, offset by the pool stride (2):
        // stage-1 features must match shifted by 1 away from borders.
        let big: Vec<f64> =
            (0..3 * 24 * 24).map(|i| ((i as f64 * 0.61).sin() * 0.5 + 0.5) * 0.9).collect();
        let crop = |oy: usize| {
            let mut data = Vec::with_capacity(3 * 16 * 16);
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        data.push(big[c * 24 * 24 + (y + oy) * 24 + (x + 4)]);
                    }
                }
            }
            Tensor::<f64>::new(vec![3, 16, 16], data).unwrap()
        };
        let net = StyleFeatureNet::<f64>::new(StyleNetConfig {
            stage_channels: vec![8],
            ..StyleNetConfig::default()
        });
        let fa = &net.features(&crop(2)).unwrap()[0];
        let fb = &net.features(&crop(4)).unwrap()[0];
        // fb's crop starts two rows lower, so fb(y) == fa(y + 1) in the interior.
        let (c, h, w) = (fa.shape()[0], fa.shape()[1], fa.shape()[2]);
        for ch in 0..c {
            for y in 2..h - 3 {
                for x in 2..w - 2 {
                    let a = fa.data()[ch * h * w + (y + 1) * w + x];
                    let b = fb.data()[ch * h * w + y * w + x];
                    assert!((a - b).abs() < 1e-9, "mismatch at ({ch},{y},{x}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn flow_of_identical_frames_is_zero() {
        let frame = blob_frame(32, 32, 16.0, 16.0, 6.0);
        let solver = FlowSolver::new(FlowSolverConfig::default());
        let pyramid = solver.flow_features(&frame, &frame).unwrap();
        for level in pyramid.levels() {
            for &x in level.u().data().iter().chain(level.v().data()) {
                assert!(x.abs() < 1e-6, "nonzero flow {x}");
            }
        }
    }

    #[test]
    fn flow_recovers_one_pixel_downward_shift() {
        let a = blob_frame(64, 64, 32.0, 32.0, 5.0);
        let b = blob_frame(64, 64, 33.0, 32.0, 5.0);
        let solver = FlowSolver::new(FlowSolverConfig::default());
        let pyramid = solver.flow_features(&a, &b).unwrap();
        let (mu, mv) = support_mean(pyramid.finest(), &a);
        assert!(mu.abs() <= 0.25, "mean u {mu} should be ~0");
        assert!((mv - 1.0).abs() <= 0.25, "mean v {mv} should be ~1");
    }

    #[test]
    fn flow_recovers_two_pixel_shift_through_pyramid() {
        let a = blob_frame(64, 64, 31.0, 32.0, 5.0);
        let b = blob_frame(64, 64, 33.0, 32.0, 5.0);
        let solver = FlowSolver::new(FlowSolverConfig::default());
        let pyramid = solver.flow_features(&a, &b).unwrap();
        let (mu, mv) = support_mean(pyramid.finest(), &a);
        assert!(mu.abs() <= 0.25, "mean u {mu} should be ~0");
        assert!((mv - 2.0).abs() <= 0.25, "mean v {mv} should be ~2");
    }

    #[test]
    fn flow_is_approximately_antisymmetric() {
        let a = blob_frame(64, 64, 32.0, 32.0, 10.0);
        let b = blob_frame(64, 64, 33.0, 32.0, 10.0);
        let solver = FlowSolver::new(FlowSolverConfig::default());
        let fwd = solver.flow_features(&a, &b).unwrap();
        let bwd = solver.flow_features(&b, &a).unwrap();
        let (fu, fv) = (fwd.finest().u().data(), fwd.finest().v().data());
        let (bu, bv) = (bwd.finest().u().data(), bwd.finest().v().data());
        let n = (2 * fu.len()) as f64;
        let mut sum = 0.0;
        for i in 0..fu.len() {
            sum += (fu[i] + bu[i]).abs() + (fv[i] + bv[i]).abs();
        }
        assert!(sum / n < 0.3, "antisymmetry residual {}", sum / n);
    }

    #[test]
    fn pyramid_shapes_halve_per_scale() {
        let a = blob_frame(32, 32, 16.0, 16.0, 5.0);
        let solver = FlowSolver::new(FlowSolverConfig::default());
        let pyramid = solver.flow_features(&a, &a).unwrap();
        assert_eq!(pyramid.levels().len(), 3);
        for (s, level) in pyramid.levels().iter().enumerate() {
            assert_eq!(level.height(), 32 >> s);
            assert_eq!(level.width(), 32 >> s);
        }
    }

    #[test]
    fn flow_rejects_mismatched_and_undivisible_shapes() {
        let solver = FlowSolver::new(FlowSolverConfig::default());
        let a = Tensor::<f32>::zeros(vec![3, 32, 32]);
        let b = Tensor::<f32>::zeros(vec![3, 16, 16]);
        assert!(solver.flow_features(&a, &b).is_err());
        let odd = Tensor::<f32>::zeros(vec![3, 30, 30]);
        assert!(solver.flow_features(&odd, &odd).is_err());
    }
}
