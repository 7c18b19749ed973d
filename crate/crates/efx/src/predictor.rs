//! The per-frame predictor: an hourglass conv-LSTM network that consumes
//! the previous frame plus a fine-grained effect category and emits the
//! pixel-transformer parameters (per-pixel kernel logits and a background
//! mask logit map), carrying recurrent state across the rollout.
//!
//! Layout: three stride-2 encoder convs, a bottleneck conv-LSTM conditioned
//! on a spatially tiled category embedding, and three decoder stages of
//! nearest-neighbor upsample + conv. A conv-LSTM follows every intermediate
//! stage, so state has seven cells. All convs use symmetric padding.
//!
//! For training, bind the model once on a graph and call
//! [`BoundPredictor::step`] per frame so gradients accumulate through time.
//! For inference, [`PredictorModel::rollout`] runs each step on a fresh
//! graph with detached state.

use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{he_uniform, with_prefix, BoundConv, BoundLstm, Conv2dLayer, ConvLstm, ParamOwner};
use crate::tensor::{Element, Graph, PaddingMode, Tensor, Var};
use crate::transform;
use crate::{Error, Result};

/// Fine sub-types per broad effect in the synthetic regime.
pub const FINE_PER_BROAD: usize = 3;

/// The four broad synthetic effect families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BroadEffect {
    Melt,
    Bloom,
    Swirl,
    Shrink,
}

impl BroadEffect {
    pub const ALL: [BroadEffect; 4] =
        [BroadEffect::Melt, BroadEffect::Bloom, BroadEffect::Swirl, BroadEffect::Shrink];

    pub fn index(self) -> usize {
        match self {
            BroadEffect::Melt => 0,
            BroadEffect::Bloom => 1,
            BroadEffect::Swirl => 2,
            BroadEffect::Shrink => 3,
        }
    }
}

impl fmt::Display for BroadEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BroadEffect::Melt => "melt",
            BroadEffect::Bloom => "bloom",
            BroadEffect::Swirl => "swirl",
            BroadEffect::Shrink => "shrink",
        };
        f.write_str(s)
    }
}

impl FromStr for BroadEffect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "melt" => Ok(BroadEffect::Melt),
            "bloom" => Ok(BroadEffect::Bloom),
            "swirl" => Ok(BroadEffect::Swirl),
            "shrink" => Ok(BroadEffect::Shrink),
            other => Err(Error::Config(format!(
                "unknown effect {other:?}; expected melt, bloom, swirl, or shrink"
            ))),
        }
    }
}

/// A broad effect plus a fine sub-type index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EffectCategory {
    broad: BroadEffect,
    fine: usize,
}

impl EffectCategory {
    pub fn new(broad: BroadEffect, fine: usize) -> Result<Self> {
        if fine >= FINE_PER_BROAD {
            return Err(Error::contract(
                "effect_category",
                format!("fine id {fine} out of range for {broad} (< {FINE_PER_BROAD})"),
            ));
        }
        Ok(EffectCategory { broad, fine })
    }

    pub fn broad(&self) -> BroadEffect {
        self.broad
    }

    pub fn fine(&self) -> usize {
        self.fine
    }

    /// Row index into the embedding table.
    pub fn global_id(&self) -> usize {
        self.broad.index() * FINE_PER_BROAD + self.fine
    }

    /// Inverse of [`EffectCategory::global_id`].
    pub fn from_global_id(id: usize) -> Result<Self> {
        let broad = *BroadEffect::ALL
            .get(id / FINE_PER_BROAD)
            .ok_or_else(|| Error::contract("effect_category", format!("global id {id} too large")))?;
        EffectCategory::new(broad, id % FINE_PER_BROAD)
    }

    /// Every category in global-id order.
    pub fn all() -> Vec<EffectCategory> {
        (0..BroadEffect::ALL.len() * FINE_PER_BROAD)
            .map(|id| EffectCategory::from_global_id(id).expect("ids in range"))
            .collect()
    }
}

impl fmt::Display for EffectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.broad, self.fine)
    }
}

/// What the network predicts per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    /// Kernel + mask logits driving the pixel transformer (the method).
    Kernels,
    /// Direct RGB via sigmoid — the no-transformer ablation that can leak
    /// content memorized in the weights.
    DirectRgb,
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputMode::Kernels => "kernels",
            OutputMode::DirectRgb => "direct-rgb",
        })
    }
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kernels" => Ok(OutputMode::Kernels),
            "direct-rgb" | "rgb" => Ok(OutputMode::DirectRgb),
            other => Err(Error::Config(format!(
                "unknown output mode {other:?}; expected kernels or direct-rgb"
            ))),
        }
    }
}

/// Architecture hyperparameters; everything is overridable from the config
/// file, with defaults sized for 64×64 frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Frames are square `image_size × image_size`.
    pub image_size: usize,
    pub enc_channels: Vec<usize>,
    /// Kernel size of encoder/decoder stage convs.
    pub stage_kernel: usize,
    /// Kernel size of the conv-LSTM gate convs.
    pub lstm_kernel: usize,
    /// Kernel size of the output heads.
    pub head_kernel: usize,
    pub embed_dim: usize,
    /// Transformer neighborhood radius; kernel head emits `(2κ+1)²` logits.
    pub kappa: usize,
    pub num_categories: usize,
    pub output_mode: OutputMode,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 64,
            enc_channels: vec![32, 64, 128],
            stage_kernel: 5,
            lstm_kernel: 3,
            head_kernel: 3,
            embed_dim: 8,
            kappa: 2,
            num_categories: BroadEffect::ALL.len() * FINE_PER_BROAD,
            output_mode: OutputMode::Kernels,
            seed: 42,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.enc_channels.len();
        if stages == 0 {
            return Err(Error::Config("need at least one encoder stage".into()));
        }
        let down = 1 << stages;
        if self.image_size % down != 0 || self.image_size / down < 1 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by 2^{stages}",
                self.image_size
            )));
        }
        for k in [self.stage_kernel, self.lstm_kernel, self.head_kernel] {
            if k % 2 == 0 || k == 0 {
                return Err(Error::Config(format!("kernel sizes must be odd, got {k}")));
            }
        }
        if self.embed_dim == 0 || self.num_categories == 0 {
            return Err(Error::Config("embedding table must be non-empty".into()));
        }
        if self.kappa == 0 {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        Ok(())
    }

    fn kernel_taps(&self) -> usize {
        (2 * self.kappa + 1) * (2 * self.kappa + 1)
    }

    /// Cell count: one LSTM per encoder stage and per decoder stage, plus
    /// the bottleneck.
    pub fn num_lstm_cells(&self) -> usize {
        2 * self.enc_channels.len() + 1
    }
}

/// Per-cell `(hidden, cell)` tensors, zero at rollout start.
#[derive(Debug, Clone)]
pub struct RecurrentState<E: Element> {
    cells: Vec<(Tensor<E>, Tensor<E>)>,
}

impl<E: Element> RecurrentState<E> {
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[(Tensor<E>, Tensor<E>)] {
        &self.cells
    }
}

/// Graph-side recurrent state.
#[derive(Debug, Clone)]
pub struct StateVars {
    cells: Vec<(Var, Var)>,
}

impl StateVars {
    pub fn cells(&self) -> &[(Var, Var)] {
        &self.cells
    }
}

/// One predictor step's outputs on a graph.
pub struct StepVars {
    /// `(taps, H, W)` kernel logits (kernel mode only).
    pub kernel_logits: Option<Var>,
    /// `(1, H, W)` mask logits (kernel mode only).
    pub mask_logits: Option<Var>,
    /// `(3, H, W)` RGB logits (direct-RGB mode only).
    pub rgb_logits: Option<Var>,
    pub state: StateVars,
}

/// The full model with owned parameters.
pub struct PredictorModel<E: Element> {
    arch: ArchConfig,
    enc_convs: Vec<Conv2dLayer<E>>,
    enc_lstms: Vec<ConvLstm<E>>,
    bottleneck: ConvLstm<E>,
    dec_convs: Vec<Conv2dLayer<E>>,
    dec_lstms: Vec<ConvLstm<E>>,
    kernel_head: Option<Conv2dLayer<E>>,
    mask_head: Option<Conv2dLayer<E>>,
    rgb_head: Option<Conv2dLayer<E>>,
    embedding: Tensor<E>,
}

impl<E: Element> PredictorModel<E> {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let k = arch.stage_kernel;
        let lk = arch.lstm_kernel;
        let sym = PaddingMode::Symmetric;

        let mut enc_convs = Vec::new();
        let mut enc_lstms = Vec::new();
        let mut in_ch = 3;
        for &out_ch in &arch.enc_channels {
            enc_convs.push(Conv2dLayer::new(&mut rng, in_ch, out_ch, k, 2, sym, true, true));
            enc_lstms.push(ConvLstm::new(&mut rng, out_ch, out_ch, lk));
            in_ch = out_ch;
        }

        let deep = *arch.enc_channels.last().expect("validated non-empty");
        let bottleneck = ConvLstm::new(&mut rng, deep + arch.embed_dim, deep, lk);

        // Decoder mirrors the encoder; the last stage keeps the narrowest
        // width at full resolution for the heads.
        let mut dec_out = Vec::new();
        for i in (0..arch.enc_channels.len()).rev() {
            dec_out.push(if i == 0 { arch.enc_channels[0] } else { arch.enc_channels[i - 1] });
        }
        let mut dec_convs = Vec::new();
        let mut dec_lstms = Vec::new();
        let mut ch = deep;
        for &out_ch in &dec_out {
            dec_convs.push(Conv2dLayer::new(&mut rng, ch, out_ch, k, 1, sym, true, true));
            dec_lstms.push(ConvLstm::new(&mut rng, out_ch, out_ch, lk));
            ch = out_ch;
        }

        let hk = arch.head_kernel;
        let (kernel_head, mask_head, rgb_head) = match arch.output_mode {
            OutputMode::Kernels => (
                Some(Conv2dLayer::new(&mut rng, ch, arch.kernel_taps(), hk, 1, sym, true, true)),
                Some(Conv2dLayer::new(&mut rng, ch, 1, hk, 1, sym, true, true)),
                None,
            ),
            OutputMode::DirectRgb => (
                None,
                None,
                Some(Conv2dLayer::new(&mut rng, ch, 3, hk, 1, sym, true, true)),
            ),
        };

        let embedding =
            he_uniform::<E>(&mut rng, &[arch.num_categories, arch.embed_dim], arch.embed_dim)
                .with_grad();

        Ok(PredictorModel {
            arch,
            enc_convs,
            enc_lstms,
            bottleneck,
            dec_convs,
            dec_lstms,
            kernel_head,
            mask_head,
            rgb_head,
            embedding,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// All-zero recurrent states, one per batch sample.
    pub fn init_state(&self, batch: usize) -> Result<Vec<RecurrentState<E>>> {
        if batch < 1 {
            return Err(Error::contract("init_state", "batch must be at least 1"));
        }
        let mut sizes = Vec::new();
        let mut hw = self.arch.image_size;
        for lstm in &self.enc_lstms {
            hw /= 2;
            sizes.push((lstm, hw));
        }
        sizes.push((&self.bottleneck, hw));
        for lstm in &self.dec_lstms {
            hw *= 2;
            sizes.push((lstm, hw));
        }
        let one = RecurrentState {
            cells: sizes.iter().map(|(lstm, hw)| lstm.zero_state(*hw, *hw)).collect(),
        };
        Ok(vec![one; batch])
    }

    /// Binds every parameter onto `g` for repeated stepping.
    pub fn bind(&self, g: &mut Graph<E>) -> BoundPredictor {
        BoundPredictor {
            enc_convs: self.enc_convs.iter().map(|c| c.bind(g)).collect(),
            enc_lstms: self.enc_lstms.iter().map(|c| c.bind(g)).collect(),
            bottleneck: self.bottleneck.bind(g),
            dec_convs: self.dec_convs.iter().map(|c| c.bind(g)).collect(),
            dec_lstms: self.dec_lstms.iter().map(|c| c.bind(g)).collect(),
            kernel_head: self.kernel_head.as_ref().map(|h| h.bind(g)),
            mask_head: self.mask_head.as_ref().map(|h| h.bind(g)),
            rgb_head: self.rgb_head.as_ref().map(|h| h.bind(g)),
            embedding: g.bind(&self.embedding),
            arch: self.arch.clone(),
        }
    }

    pub fn bind_state(&self, g: &mut Graph<E>, state: &RecurrentState<E>) -> StateVars {
        StateVars {
            cells: state.cells.iter().map(|(h, c)| (g.bind(h), g.bind(c))).collect(),
        }
    }

    /// One detached kernel-mode step (runs its own graph).
    pub fn step(
        &self,
        frame: &Tensor<E>,
        category: &EffectCategory,
        state: &RecurrentState<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, RecurrentState<E>)> {
        if self.arch.output_mode != OutputMode::Kernels {
            return Err(Error::contract(
                "predictor_step",
                "model is configured for direct-RGB output; use step_rgb",
            ));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let f = g.leaf(frame.data().to_vec(), frame.shape().to_vec(), false)?;
        let sv = self.bind_state(&mut g, state);
        let out = bound.step(&mut g, f, category, &sv)?;
        let kernel = g.detach(out.kernel_logits.expect("kernel mode emits kernel logits"));
        let mask = g.detach(out.mask_logits.expect("kernel mode emits mask logits"));
        let new_state = RecurrentState {
            cells: out
                .state
                .cells
                .iter()
                .map(|(h, c)| (g.detach(*h), g.detach(*c)))
                .collect(),
        };
        Ok((kernel, mask, new_state))
    }

    /// Detached direct-RGB ablation step.
    pub fn step_rgb(
        &self,
        frame: &Tensor<E>,
        category: &EffectCategory,
        state: &RecurrentState<E>,
    ) -> Result<(Tensor<E>, RecurrentState<E>)> {
        if self.arch.output_mode != OutputMode::DirectRgb {
            return Err(Error::contract(
                "predictor_step",
                "model is configured for kernel output; use step",
            ));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let f = g.leaf(frame.data().to_vec(), frame.shape().to_vec(), false)?;
        let sv = self.bind_state(&mut g, state);
        let out = bound.step(&mut g, f, category, &sv)?;
        let rgb = g.detach(out.rgb_logits.expect("rgb mode emits rgb logits"));
        let new_state = RecurrentState {
            cells: out
                .state
                .cells
                .iter()
                .map(|(h, c)| (g.detach(*h), g.detach(*c)))
                .collect(),
        };
        Ok((rgb, new_state))
    }

    /// Applies one predicted step to `prev`, yielding the next frame var.
    pub fn apply_step_output(
        &self,
        g: &mut Graph<E>,
        prev: Var,
        out: &StepVars,
    ) -> Result<Var> {
        match self.arch.output_mode {
            OutputMode::Kernels => {
                let (y, _, _) = transform::transform_on_graph(
                    g,
                    prev,
                    out.kernel_logits.expect("kernel mode"),
                    out.mask_logits.expect("kernel mode"),
                    self.arch.kappa,
                )?;
                Ok(y)
            }
            OutputMode::DirectRgb => Ok(g.sigmoid(out.rgb_logits.expect("rgb mode"))),
        }
    }

    /// Autoregressive generation of `t` frames from `first_frame`.
    ///
    /// At each step the conditioning frame is the ground-truth previous
    /// frame with probability `tf_prob` (drawn from `rng`), else the
    /// model's own previous output. `teacher` must hold at least `t` frames
    /// (`s_0` first) whenever `tf_prob > 0`. Outputs are clamped to [0, 1].
    pub fn rollout(
        &self,
        first_frame: &Tensor<E>,
        category: &EffectCategory,
        t: usize,
        teacher: Option<&[Tensor<E>]>,
        tf_prob: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor<E>>> {
        if t < 1 {
            return Err(Error::contract("rollout", "need at least one step"));
        }
        if tf_prob > 0.0 && teacher.map(|f| f.len() < t).unwrap_or(true) {
            return Err(Error::contract(
                "rollout",
                format!("teacher forcing needs at least {t} ground-truth frames"),
            ));
        }
        let mut state = self.init_state(1)?.pop().expect("one state");
        let mut prev = first_frame.clone();
        let mut frames = Vec::with_capacity(t);
        for i in 0..t {
            let use_teacher = tf_prob > 0.0 && rng.random_bool(tf_prob.clamp(0.0, 1.0));
            if use_teacher {
                prev = teacher.expect("checked above")[i].clone();
            }
            let mut g = Graph::new();
            let bound = self.bind(&mut g);
            let f = g.leaf(prev.data().to_vec(), prev.shape().to_vec(), false)?;
            let sv = self.bind_state(&mut g, &state);
            let out = bound.step(&mut g, f, category, &sv)?;
            let y = self.apply_step_output(&mut g, f, &out)?;
            let mut frame = g.detach(y);
            for v in frame.data_mut() {
                let x = Element::to_f64(*v);
                *v = E::from_f64(x.clamp(0.0, 1.0));
            }
            state = RecurrentState {
                cells: out
                    .state
                    .cells
                    .iter()
                    .map(|(h, c)| (g.detach(*h), g.detach(*c)))
                    .collect(),
            };
            prev = frame.clone();
            frames.push(frame);
        }
        Ok(frames)
    }
}

impl<E: Element> ParamOwner<E> for PredictorModel<E> {
    fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut v = Vec::new();
        for (i, (conv, lstm)) in self.enc_convs.iter().zip(&self.enc_lstms).enumerate() {
            v.extend(with_prefix(&format!("enc{i}.conv"), conv.params()));
            v.extend(with_prefix(&format!("enc{i}.lstm"), lstm.params()));
        }
        v.extend(with_prefix("bottleneck", self.bottleneck.params()));
        for (i, (conv, lstm)) in self.dec_convs.iter().zip(&self.dec_lstms).enumerate() {
            v.extend(with_prefix(&format!("dec{i}.conv"), conv.params()));
            v.extend(with_prefix(&format!("dec{i}.lstm"), lstm.params()));
        }
        if let Some(h) = &self.kernel_head {
            v.extend(with_prefix("head.kernel", h.params()));
        }
        if let Some(h) = &self.mask_head {
            v.extend(with_prefix("head.mask", h.params()));
        }
        if let Some(h) = &self.rgb_head {
            v.extend(with_prefix("head.rgb", h.params()));
        }
        v.push(("embed.weight".to_string(), &self.embedding));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut v = Vec::new();
        for (i, (conv, lstm)) in
            self.enc_convs.iter_mut().zip(&mut self.enc_lstms).enumerate()
        {
            v.extend(with_prefix(&format!("enc{i}.conv"), conv.params_mut()));
            v.extend(with_prefix(&format!("enc{i}.lstm"), lstm.params_mut()));
        }
        v.extend(with_prefix("bottleneck", self.bottleneck.params_mut()));
        for (i, (conv, lstm)) in
            self.dec_convs.iter_mut().zip(&mut self.dec_lstms).enumerate()
        {
            v.extend(with_prefix(&format!("dec{i}.conv"), conv.params_mut()));
            v.extend(with_prefix(&format!("dec{i}.lstm"), lstm.params_mut()));
        }
        if let Some(h) = &mut self.kernel_head {
            v.extend(with_prefix("head.kernel", h.params_mut()));
        }
        if let Some(h) = &mut self.mask_head {
            v.extend(with_prefix("head.mask", h.params_mut()));
        }
        if let Some(h) = &mut self.rgb_head {
            v.extend(with_prefix("head.rgb", h.params_mut()));
        }
        v.push(("embed.weight".to_string(), &mut self.embedding));
        v
    }
}

/// All model parameters bound onto one graph.
pub struct BoundPredictor {
    enc_convs: Vec<BoundConv>,
    enc_lstms: Vec<BoundLstm>,
    bottleneck: BoundLstm,
    dec_convs: Vec<BoundConv>,
    dec_lstms: Vec<BoundLstm>,
    kernel_head: Option<BoundConv>,
    mask_head: Option<BoundConv>,
    rgb_head: Option<BoundConv>,
    embedding: Var,
    arch: ArchConfig,
}

impl BoundPredictor {
    /// One recurrence step on the graph.
    pub fn step<E: Element>(
        &self,
        g: &mut Graph<E>,
        frame: Var,
        category: &EffectCategory,
        state: &StateVars,
    ) -> Result<StepVars> {
        let shape = g.shape(frame).to_vec();
        let hw = self.arch.image_size;
        if shape != [3, hw, hw] {
            return Err(Error::contract(
                "predictor_step",
                format!("expected a (3, {hw}, {hw}) frame, got {shape:?}"),
            ));
        }
        let id = category.global_id();
        if id >= self.arch.num_categories {
            return Err(Error::contract(
                "predictor_step",
                format!("category id {id} outside embedding table ({})", self.arch.num_categories),
            ));
        }
        if state.cells.len() != self.arch.num_lstm_cells() {
            return Err(Error::contract(
                "predictor_step",
                format!(
                    "state has {} cells, architecture has {}",
                    state.cells.len(),
                    self.arch.num_lstm_cells()
                ),
            ));
        }

        let mut new_cells = Vec::with_capacity(state.cells.len());
        let mut cell_idx = 0;
        let mut x = frame;
        for (conv, lstm) in self.enc_convs.iter().zip(&self.enc_lstms) {
            let pre = conv.apply(g, x)?;
            let (h, c) = lstm.step(g, pre, state.cells[cell_idx])?;
            new_cells.push((h, c));
            cell_idx += 1;
            x = h;
        }

        let row = g.narrow0(self.embedding, id, 1)?;
        let vec = g.reshape(row, vec![self.arch.embed_dim])?;
        let (bh, bw) = {
            let s = g.shape(x);
            (s[1], s[2])
        };
        let tiled = g.tile_spatial(vec, bh, bw)?;
        let conditioned = g.concat0(&[x, tiled])?;
        let (h, c) = self.bottleneck.step(g, conditioned, state.cells[cell_idx])?;
        new_cells.push((h, c));
        cell_idx += 1;
        x = h;

        for (conv, lstm) in self.dec_convs.iter().zip(&self.dec_lstms) {
            let up = g.upsample2(x)?;
            let pre = conv.apply(g, up)?;
            let (h, c) = lstm.step(g, pre, state.cells[cell_idx])?;
            new_cells.push((h, c));
            cell_idx += 1;
            x = h;
        }

        let kernel_logits = match &self.kernel_head {
            Some(head) => Some(head.apply(g, x)?),
            None => None,
        };
        let mask_logits = match &self.mask_head {
            Some(head) => Some(head.apply(g, x)?),
            None => None,
        };
        let rgb_logits = match &self.rgb_head {
            Some(head) => Some(head.apply(g, x)?),
            None => None,
        };
        Ok(StepVars { kernel_logits, mask_logits, rgb_logits, state: StateVars { cells: new_cells } })
    }

    /// Reads parameter gradients off `g` into the owning model. Order and
    /// structure must match the model this was bound from.
    pub fn read_grads<E: Element>(&self, g: &Graph<E>, model: &mut PredictorModel<E>) {
        for (i, conv) in model.enc_convs.iter_mut().enumerate() {
            conv.read_grads(g, &self.enc_convs[i]);
        }
        for (i, lstm) in model.enc_lstms.iter_mut().enumerate() {
            lstm.read_grads(g, &self.enc_lstms[i]);
        }
        model.bottleneck.read_grads(g, &self.bottleneck);
        for (i, conv) in model.dec_convs.iter_mut().enumerate() {
            conv.read_grads(g, &self.dec_convs[i]);
        }
        for (i, lstm) in model.dec_lstms.iter_mut().enumerate() {
            lstm.read_grads(g, &self.dec_lstms[i]);
        }
        if let (Some(head), Some(bound)) = (model.kernel_head.as_mut(), &self.kernel_head) {
            head.read_grads(g, bound);
        }
        if let (Some(head), Some(bound)) = (model.mask_head.as_mut(), &self.mask_head) {
            head.read_grads(g, bound);
        }
        if let (Some(head), Some(bound)) = (model.rgb_head.as_mut(), &self.rgb_head) {
            head.read_grads(g, bound);
        }
        g.read_grad_into(self.embedding, &mut model.embedding);
    }
}
