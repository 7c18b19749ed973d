//! Training objectives: pixel MSE, content and style (Gram) terms, optical
//! flow terms (direct and Gram variants), the two adversarial losses with
//! their discriminators, and the five named combinations used for training.
//!
//! All losses are ordinary graph expressions, so one `backward` call on the
//! weighted total propagates through the feature extractors (frozen), the
//! pixel transformer, and the predictor.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::features::{FlowSolver, StyleFeatureNet};
use crate::nn::{with_prefix, BoundConv, BoundDense, Conv2dLayer, Dense, ParamOwner};
use crate::tensor::{Element, Graph, PaddingMode, Tensor, Var};
use crate::{Error, Result};

/// Probability clamp inside every `log` of the adversarial losses.
pub const ADV_EPS: f64 = 1e-7;

/// Mean squared difference between two equal-shape vars.
pub fn mse_loss<E: Element>(g: &mut Graph<E>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Style term: squared Frobenius distance between Gram matrices of every
/// extractor stage, summed over stages.
pub fn style_loss<E: Element>(
    g: &mut Graph<E>,
    net: &StyleFeatureNet<E>,
    generated: Var,
    target: Var,
) -> Result<Var> {
    let fy = net.features_on_graph(g, generated)?;
    let fs = net.features_on_graph(g, target)?;
    let mut total = g.scalar(0.0);
    for (y, s) in fy.into_iter().zip(fs) {
        let gy = g.gram(y)?;
        let gs = g.gram(s)?;
        let d = g.sub(gy, gs)?;
        let sq = g.mul(d, d)?;
        let frob = g.sum_all(sq);
        total = g.add(total, frob)?;
    }
    Ok(total)
}

/// Content term: per-stage mean squared feature difference, summed over
/// stages.
pub fn content_loss<E: Element>(
    g: &mut Graph<E>,
    net: &StyleFeatureNet<E>,
    generated: Var,
    target: Var,
) -> Result<Var> {
    let fy = net.features_on_graph(g, generated)?;
    let fs = net.features_on_graph(g, target)?;
    let mut total = g.scalar(0.0);
    for (y, s) in fy.into_iter().zip(fs) {
        let d = g.sub(y, s)?;
        let sq = g.mul(d, d)?;
        let mse = g.mean_all(sq);
        total = g.add(total, mse)?;
    }
    Ok(total)
}

/// Which distance the flow term uses per pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowLossMode {
    /// Mean squared difference of the flow maps.
    Direct,
    /// Squared Frobenius distance of their 2×2 Gram matrices (u, v as
    /// channels), which compares motion statistics rather than placement.
    Gram,
}

impl fmt::Display for FlowLossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowLossMode::Direct => "direct",
            FlowLossMode::Gram => "gram",
        })
    }
}

impl FromStr for FlowLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(FlowLossMode::Direct),
            "gram" => Ok(FlowLossMode::Gram),
            other => Err(Error::Config(format!("unknown flow loss mode {other:?}"))),
        }
    }
}

/// Flow term between a generated frame pair and a source frame pair,
/// summed over pyramid levels.
pub fn flow_loss<E: Element>(
    g: &mut Graph<E>,
    solver: &FlowSolver,
    generated_pair: (Var, Var),
    target_pair: (Var, Var),
    mode: FlowLossMode,
) -> Result<Var> {
    let ly = solver.flow_on_graph(g, generated_pair.0, generated_pair.1)?;
    let ls = solver.flow_on_graph(g, target_pair.0, target_pair.1)?;
    let mut total = g.scalar(0.0);
    for (y, s) in ly.into_iter().zip(ls) {
        let level = match mode {
            FlowLossMode::Direct => {
                let d = g.sub(y, s)?;
                let sq = g.mul(d, d)?;
                g.mean_all(sq)
            }
            FlowLossMode::Gram => {
                let gy = g.gram(y)?;
                let gs = g.gram(s)?;
                let d = g.sub(gy, gs)?;
                let sq = g.mul(d, d)?;
                g.sum_all(sq)
            }
        };
        total = g.add(total, level)?;
    }
    Ok(total)
}

/// Discriminator architecture. `channels` are the conv widths in order;
/// every conv has stride 2 and leaky-ReLU slope 0.2.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl DiscriminatorConfig {
    /// Frame discriminator over RGB frames.
    pub fn appearance() -> Self {
        DiscriminatorConfig { in_channels: 3, channels: vec![32, 64, 128, 256], kernel: 3 }
    }

    /// Flow discriminator over 2-channel full-resolution flow maps.
    pub fn flow() -> Self {
        DiscriminatorConfig { in_channels: 2, channels: vec![32, 64, 128, 256], kernel: 3 }
    }

    /// Narrow variant for tests and tiny images.
    pub fn narrow(in_channels: usize) -> Self {
        DiscriminatorConfig { in_channels, channels: vec![8, 16], kernel: 3 }
    }
}

/// Strided conv stack with a scalar sigmoid head; output is a probability
/// strictly inside (0, 1).
pub struct Discriminator<E: Element> {
    convs: Vec<Conv2dLayer<E>>,
    head: Dense<E>,
    config: DiscriminatorConfig,
}

impl<E: Element> Discriminator<E> {
    pub fn new(rng: &mut ChaCha8Rng, config: DiscriminatorConfig) -> Self {
        let mut convs = Vec::with_capacity(config.channels.len());
        let mut in_ch = config.in_channels;
        for &out_ch in &config.channels {
            convs.push(Conv2dLayer::new(
                rng,
                in_ch,
                out_ch,
                config.kernel,
                2,
                PaddingMode::Zero,
                true,
                true,
            ));
            in_ch = out_ch;
        }
        let head = Dense::new(rng, in_ch, 1);
        Discriminator { convs, head, config }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Binds the parameters once so repeated forwards share leaves and
    /// gradients accumulate onto them (required for discriminator updates).
    pub fn bind(&self, g: &mut Graph<E>) -> BoundDiscriminator {
        BoundDiscriminator {
            convs: self.convs.iter().map(|c| c.bind(g)).collect(),
            head: self.head.bind(g),
            in_channels: self.config.in_channels,
        }
    }

    pub fn read_grads(&mut self, g: &Graph<E>, bound: &BoundDiscriminator) {
        for (conv, b) in self.convs.iter_mut().zip(&bound.convs) {
            conv.read_grads(g, b);
        }
        self.head.read_grads(g, &bound.head);
    }

    /// Scalar probability that `x` is real (binds parameters afresh; use
    /// [`Discriminator::bind`] when the gradients must be read back).
    pub fn forward_on_graph(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let bound = self.bind(g);
        bound.forward(g, x)
    }
}

/// Graph-bound discriminator parameters.
pub struct BoundDiscriminator {
    convs: Vec<BoundConv>,
    head: BoundDense,
    in_channels: usize,
}

impl BoundDiscriminator {
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::contract(
                "discriminator",
                format!("expected ({}, H, W) input, got {shape:?}", self.in_channels),
            ));
        }
        let mut h = x;
        for bound in &self.convs {
            let pre = bound.apply(g, h)?;
            h = g.leaky_relu(pre, 0.2);
        }
        let pooled = g.global_avg_pool(h)?;
        let c = g.shape(pooled)[0];
        let row = g.reshape(pooled, vec![1, c])?;
        let logit = self.head.apply(g, row)?;
        let prob = g.sigmoid(logit);
        // Shape [1], matching the scalar convention of the loss terms.
        g.reshape(prob, vec![1])
    }
}

impl<E: Element> ParamOwner<E> for Discriminator<E> {
    fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut v = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            v.extend(with_prefix(&format!("conv{i}"), conv.params()));
        }
        v.extend(with_prefix("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut v = Vec::new();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            v.extend(with_prefix(&format!("conv{i}"), conv.params_mut()));
        }
        v.extend(with_prefix("head", self.head.params_mut()));
        v
    }
}

/// Binary cross-entropy pair for one (real, fake) input duo:
/// `d_loss = −[ln D(real) + ln(1 − D(fake))]/2` and the non-saturating
/// generator surrogate `g_loss = −ln D(fake)`. Probabilities are clamped by
/// [`ADV_EPS`] inside the logs.
pub fn adversarial_losses<E: Element>(
    g: &mut Graph<E>,
    d: &Discriminator<E>,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    let bound = d.bind(g);
    adversarial_losses_on(g, &bound, real, fake)
}

/// [`adversarial_losses`] against an already-bound discriminator, so the
/// caller can read parameter gradients back after `backward`.
pub fn adversarial_losses_on<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundDiscriminator,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    let p_real = bound.forward(g, real)?;
    let p_fake = bound.forward(g, fake)?;
    let ln_real = g.ln_clamped(p_real, ADV_EPS);
    let neg_fake = g.mul_scalar(p_fake, -1.0);
    let one_minus = g.add_scalar(neg_fake, 1.0);
    let ln_not_fake = g.ln_clamped(one_minus, ADV_EPS);
    let sum = g.add(ln_real, ln_not_fake)?;
    let d_loss = g.mul_scalar(sum, -0.5);
    let ln_fake = g.ln_clamped(p_fake, ADV_EPS);
    let g_loss = g.mul_scalar(ln_fake, -1.0);
    Ok((d_loss, g_loss))
}

/// Generator-side adversarial term alone: `−ln D(fake)`.
pub fn generator_adversarial<E: Element>(
    g: &mut Graph<E>,
    d: &Discriminator<E>,
    fake: Var,
) -> Result<Var> {
    let p_fake = d.forward_on_graph(g, fake)?;
    let ln_fake = g.ln_clamped(p_fake, ADV_EPS);
    Ok(g.mul_scalar(ln_fake, -1.0))
}

/// The five named objective combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Pixel MSE only.
    Mse,
    /// Pixel MSE plus an appearance-discriminator term.
    MseGan,
    /// Appearance and flow discriminators, no reconstruction term.
    Gan,
    /// Content + style feature terms.
    ContentStyle,
    /// Gram-flow + style terms.
    OpticalFlowStyle,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Mse,
        LossKind::MseGan,
        LossKind::Gan,
        LossKind::ContentStyle,
        LossKind::OpticalFlowStyle,
    ];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossKind::Mse => "MSE",
            LossKind::MseGan => "MSE+GAN",
            LossKind::Gan => "GAN",
            LossKind::ContentStyle => "C+S",
            LossKind::OpticalFlowStyle => "OF+S",
        };
        f.write_str(s)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MSE" => Ok(LossKind::Mse),
            "MSE+GAN" => Ok(LossKind::MseGan),
            "GAN" => Ok(LossKind::Gan),
            "C+S" => Ok(LossKind::ContentStyle),
            "OF+S" => Ok(LossKind::OpticalFlowStyle),
            other => Err(Error::Config(format!(
                "unknown loss kind {other:?}; expected MSE, MSE+GAN, GAN, C+S, or OF+S"
            ))),
        }
    }
}

/// Active terms with their weights. Weights must be nonnegative and the
/// kind decides which terms contribute.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub w_mse: f64,
    pub w_content: f64,
    pub w_style: f64,
    pub w_flow: f64,
    pub w_adversarial: f64,
    pub flow_mode: FlowLossMode,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            w_mse: 1.0,
            w_content: 1.0,
            w_style: 1.0,
            w_flow: 1.0,
            w_adversarial: 0.1,
            flow_mode: FlowLossMode::Gram,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws =
            [self.w_mse, self.w_content, self.w_style, self.w_flow, self.w_adversarial];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn uses_mse(&self) -> bool {
        matches!(self.kind, LossKind::Mse | LossKind::MseGan)
    }

    pub fn uses_content(&self) -> bool {
        self.kind == LossKind::ContentStyle
    }

    pub fn uses_style(&self) -> bool {
        matches!(self.kind, LossKind::ContentStyle | LossKind::OpticalFlowStyle)
    }

    pub fn uses_flow(&self) -> bool {
        self.kind == LossKind::OpticalFlowStyle
    }

    pub fn uses_appearance_d(&self) -> bool {
        matches!(self.kind, LossKind::MseGan | LossKind::Gan)
    }

    pub fn uses_flow_d(&self) -> bool {
        self.kind == LossKind::Gan
    }
}

/// Shared read-only pieces the total loss needs.
pub struct LossContext<'a, E: Element> {
    pub style_net: &'a StyleFeatureNet<E>,
    pub flow_solver: &'a FlowSolver,
    pub d_appearance: Option<&'a Discriminator<E>>,
    pub d_flow: Option<&'a Discriminator<E>>,
}

/// Weighted total over frames `1..T−1` plus the weighted per-term
/// breakdown (the breakdown vars sum to the total).
///
/// `generated` holds `y_1..y_{T−1}`; `source` holds `s_0..s_{T−1}` bound on
/// the same graph (usually as constants). Terms are averaged over frames so
/// magnitudes do not scale with sequence length. Flow terms pair
/// consecutive frames with `y_0 := s_0`.
pub fn total_loss<E: Element>(
    g: &mut Graph<E>,
    config: &LossConfig,
    generated: &[Var],
    source: &[Var],
    ctx: &LossContext<'_, E>,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    config.validate()?;
    if generated.is_empty() || source.len() != generated.len() + 1 {
        return Err(Error::contract(
            "total_loss",
            format!(
                "need source length = generated length + 1, got {} and {}",
                source.len(),
                generated.len()
            ),
        ));
    }
    if config.uses_appearance_d() && ctx.d_appearance.is_none() {
        return Err(Error::Config(format!(
            "loss kind {} needs an appearance discriminator",
            config.kind
        )));
    }
    if config.uses_flow_d() && ctx.d_flow.is_none() {
        return Err(Error::Config(format!(
            "loss kind {} needs a flow discriminator",
            config.kind
        )));
    }

    let n = generated.len();
    let inv_n = 1.0 / n as f64;
    let mut breakdown: Vec<(&'static str, Var)> = Vec::new();
    let mut add_term = |g: &mut Graph<E>,
                        name: &'static str,
                        weight: f64,
                        frames: Result<Vec<Var>>|
     -> Result<()> {
        let frames = frames?;
        let mut acc = g.scalar(0.0);
        for f in frames {
            acc = g.add(acc, f)?;
        }
        let mean = g.mul_scalar(acc, inv_n);
        let weighted = g.mul_scalar(mean, weight);
        breakdown.push((name, weighted));
        Ok(())
    };

    if config.uses_mse() {
        let per_frame = (0..n)
            .map(|i| mse_loss(g, generated[i], source[i + 1]))
            .collect::<Result<Vec<_>>>();
        add_term(g, "mse", config.w_mse, per_frame)?;
    }
    if config.uses_content() {
        let per_frame = (0..n)
            .map(|i| content_loss(g, ctx.style_net, generated[i], source[i + 1]))
            .collect::<Result<Vec<_>>>();
        add_term(g, "content", config.w_content, per_frame)?;
    }
    if config.uses_style() {
        let per_frame = (0..n)
            .map(|i| style_loss(g, ctx.style_net, generated[i], source[i + 1]))
            .collect::<Result<Vec<_>>>();
        add_term(g, "style", config.w_style, per_frame)?;
    }
    if config.uses_flow() {
        let per_frame = (0..n)
            .map(|i| {
                let y_prev = if i == 0 { source[0] } else { generated[i - 1] };
                flow_loss(
                    g,
                    ctx.flow_solver,
                    (y_prev, generated[i]),
                    (source[i], source[i + 1]),
                    config.flow_mode,
                )
            })
            .collect::<Result<Vec<_>>>();
        add_term(g, "flow", config.w_flow, per_frame)?;
    }
    if config.uses_appearance_d() {
        let d = ctx.d_appearance.expect("checked above");
        let per_frame = (0..n)
            .map(|i| generator_adversarial(g, d, generated[i]))
            .collect::<Result<Vec<_>>>();
        add_term(g, "adv_appearance", config.w_adversarial, per_frame)?;
    }
    if config.uses_flow_d() {
        let d = ctx.d_flow.expect("checked above");
        let solver = ctx.flow_solver;
        let per_frame = (0..n)
            .map(|i| {
                let y_prev = if i == 0 { source[0] } else { generated[i - 1] };
                let levels = solver.flow_on_graph(g, y_prev, generated[i])?;
                generator_adversarial(g, d, levels[0])
            })
            .collect::<Result<Vec<_>>>();
        add_term(g, "adv_flow", config.w_adversarial, per_frame)?;
    }

    let mut total = g.scalar(0.0);
    for &(_, term) in &breakdown {
        total = g.add(total, term)?;
    }
    Ok((total, breakdown))
}
