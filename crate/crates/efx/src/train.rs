//! Training loop: teacher-forced BPTT rollouts, Adam with global-norm
//! clipping, alternating generator/discriminator updates with annealed
//! discriminator input noise, CSV logging, and deterministic resume.
//!
//! Determinism discipline: every random decision of iteration `i` is drawn
//! from a fresh generator seeded by `(config seed, i, stream)`. Resuming
//! from a checkpoint therefore replays exactly the choices the
//! uninterrupted run would have made.

use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::eval::{clip_metrics, ClipMetrics};
use crate::features::{FlowSolver, StyleFeatureNet};
use crate::io::checkpoint::{Checkpoint, CheckpointElement};
use crate::losses::{
    adversarial_losses_on, total_loss, Discriminator, DiscriminatorConfig, LossContext,
};
use crate::nn::ParamOwner;
use crate::predictor::{EffectCategory, PredictorModel};
use crate::synth::{make_split, sample_sequence, VideoClip};
use crate::tensor::optim::{clip_global_norm, global_grad_norm, Adam};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

pub const TRAIN_LOG_HEADER: &str = "iter,term,value,grad_norm_pre,grad_norm_post,tf_prob";
pub const VAL_LOG_HEADER: &str = "iter,mse,psnr_db,ssim";

/// Probability of conditioning on the ground-truth previous frame:
/// `900/(900 + e^(itr/900))` before `tf_warmup`, zero afterwards.
pub fn teacher_forcing_prob(itr: u64, tf_warmup: u64) -> f64 {
    if itr >= tf_warmup {
        return 0.0;
    }
    900.0 / (900.0 + (itr as f64 / 900.0).exp())
}

/// One training sample: `sequence_length` frames plus the effect label.
pub type TrainSample<E> = (Vec<Tensor<E>>, EffectCategory);

/// Everything `train_step` reads and writes, checkpointable as a unit.
pub struct TrainState<E: Element> {
    pub config: RunConfig,
    pub model: PredictorModel<E>,
    pub style_net: StyleFeatureNet<E>,
    pub flow_solver: FlowSolver,
    pub d_appearance: Option<Discriminator<E>>,
    pub d_flow: Option<Discriminator<E>>,
    adam: Adam<E>,
    adam_d_appearance: Option<Adam<E>>,
    adam_d_flow: Option<Adam<E>>,
    pub iteration: u64,
}

/// Scalar record of one step; `terms` are batch means of the weighted
/// loss breakdown and sum to `total`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub tf_prob: f64,
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
}

impl StepReport {
    /// One CSV row per loss term.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (name, value) in &self.terms {
            out.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e},{:.6}\n",
                self.iteration, name, value, self.grad_norm_pre, self.grad_norm_post, self.tf_prob
            ));
        }
        out
    }
}

const STREAM_DATA: u64 = 1;
const STREAM_STEP: u64 = 2;
const STREAM_VAL: u64 = 3;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stateless per-(seed, iteration, stream) generator.
pub fn derive_rng(seed: u64, iteration: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(iteration ^ splitmix(stream))))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn noised<E: Element>(frame: &Tensor<E>, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let mut out = frame.clone();
    for v in out.data_mut() {
        let x = Element::to_f64(*v) + sigma * gaussian(rng);
        *v = E::from_f64(x);
    }
    out
}

impl<E: Element> TrainState<E> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = PredictorModel::new(config.arch.clone())?;
        let style_net = StyleFeatureNet::new(config.style.clone());
        let flow_solver = FlowSolver::new(config.flow.clone());
        let mut d_rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0xD15C);
        let d_appearance = config
            .loss
            .uses_appearance_d()
            .then(|| Discriminator::new(&mut d_rng, DiscriminatorConfig::appearance()));
        let d_flow = config
            .loss
            .uses_flow_d()
            .then(|| Discriminator::new(&mut d_rng, DiscriminatorConfig::flow()));
        let lr = config.train.lr;
        Ok(TrainState {
            adam: Adam::new(lr),
            adam_d_appearance: d_appearance.as_ref().map(|_| Adam::new(lr)),
            adam_d_flow: d_flow.as_ref().map(|_| Adam::new(lr)),
            config,
            model,
            style_net,
            flow_solver,
            d_appearance,
            d_flow,
            iteration: 0,
        })
    }

    fn loss_context(&self) -> LossContext<'_, E> {
        LossContext {
            style_net: &self.style_net,
            flow_solver: &self.flow_solver,
            d_appearance: self.d_appearance.as_ref(),
            d_flow: self.d_flow.as_ref(),
        }
    }

    /// Discriminator input noise σ for the current iteration, annealed
    /// linearly from `noise_std` to zero over the configured run length.
    pub fn noise_sigma(&self) -> f64 {
        let total = self.config.train.iterations.max(1) as f64;
        let progress = (self.iteration as f64 / total).min(1.0);
        self.config.train.noise_std * (1.0 - progress)
    }

    /// One optimization step over a batch: teacher-forced rollouts, the
    /// weighted loss, clipped generator update, then one update per active
    /// discriminator on noised inputs.
    pub fn train_step(&mut self, batch: &[TrainSample<E>]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::contract("train_step", "empty batch"));
        }
        let t = self.config.train.sequence_length;
        let tf_prob = teacher_forcing_prob(self.iteration, self.config.train.tf_warmup as u64);
        let mut rng = derive_rng(self.config.train.seed, self.iteration, STREAM_STEP);
        let inv_batch = 1.0 / batch.len() as f64;

        let mut term_values: Vec<(&'static str, f64)> = Vec::new();
        let mut total_value = 0.0;
        // Detached copies for the discriminator updates.
        let mut fake_frames: Vec<Vec<Tensor<E>>> = Vec::with_capacity(batch.len());

        self.model.zero_grads();
        for (frames, category) in batch {
            if frames.len() != t {
                return Err(Error::contract(
                    "train_step",
                    format!("clips must have {t} frames, got {}", frames.len()),
                ));
            }
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g);
            let init = self.model.init_state(1)?.remove(0);
            let mut state = self.model.bind_state(&mut g, &init);
            let source: Vec<Var> = frames
                .iter()
                .map(|f| g.leaf(f.data().to_vec(), f.shape().to_vec(), false))
                .collect::<Result<_>>()?;
            let mut generated: Vec<Var> = Vec::with_capacity(t - 1);
            let mut prev = source[0];
            for i in 0..t - 1 {
                let out = bound.step(&mut g, prev, category, &state)?;
                let y = self.model.apply_step_output(&mut g, prev, &out)?;
                generated.push(y);
                state = out.state;
                prev = if rng.random_bool(tf_prob) { source[i + 1] } else { y };
            }
            let ctx = self.loss_context();
            let (total, breakdown) = total_loss(&mut g, &self.config.loss, &generated, &source, &ctx)?;
            let sample_total = Element::to_f64(g.value(total)[0]);
            if !sample_total.is_finite() {
                let dump: Vec<String> = breakdown
                    .iter()
                    .map(|(name, v)| format!("{name}={}", Element::to_f64(g.value(*v)[0])))
                    .collect();
                return Err(Error::Train {
                    iteration: self.iteration,
                    detail: format!("non-finite loss; breakdown: {}", dump.join(", ")),
                });
            }
            total_value += sample_total * inv_batch;
            for (name, v) in &breakdown {
                let value = Element::to_f64(g.value(*v)[0]) * inv_batch;
                match term_values.iter_mut().find(|(n, _)| n == name) {
                    Some((_, acc)) => *acc += value,
                    None => term_values.push((name, value)),
                }
            }
            let scaled = g.mul_scalar(total, inv_batch);
            g.backward(scaled)?;
            bound.read_grads(&g, &mut self.model);
            fake_frames.push(generated.iter().map(|y| g.detach(*y)).collect());
        }

        let mut params = self.model.params_mut();
        let mut refs: Vec<&mut Tensor<E>> = params.iter_mut().map(|(_, p)| &mut **p).collect();
        let grad_norm_pre = clip_global_norm(&mut refs, self.config.train.clip_norm);
        let grad_norm_post = {
            let views: Vec<&Tensor<E>> = refs.iter().map(|p| &**p).collect();
            global_grad_norm(&views)
        };
        self.adam.step(&mut refs);
        drop(params);

        let sigma = self.noise_sigma();
        if self.d_appearance.is_some() {
            self.update_appearance_d(batch, &fake_frames, sigma, &mut rng)?;
        }
        if self.d_flow.is_some() {
            self.update_flow_d(batch, &fake_frames, sigma, &mut rng)?;
        }

        let report = StepReport {
            iteration: self.iteration,
            tf_prob,
            terms: term_values,
            total: total_value,
            grad_norm_pre,
            grad_norm_post,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// One update of the appearance discriminator: per sample, one random
    /// (real frame, generated frame) pair, both noised.
    fn update_appearance_d(
        &mut self,
        batch: &[TrainSample<E>],
        fake_frames: &[Vec<Tensor<E>>],
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let d = self.d_appearance.as_mut().expect("caller checked");
        let mut g = Graph::new();
        let bound = d.bind(&mut g);
        let mut loss_acc: Option<Var> = None;
        for ((frames, _), fakes) in batch.iter().zip(fake_frames) {
            let j = rng.random_range(0..fakes.len());
            let real = noised(&frames[j + 1], sigma, rng);
            let fake = noised(&fakes[j], sigma, rng);
            let real_v = g.bind(&real);
            let fake_v = g.bind(&fake);
            let (d_loss, _) = adversarial_losses_on(&mut g, &bound, real_v, fake_v)?;
            loss_acc = Some(match loss_acc {
                Some(acc) => g.add(acc, d_loss)?,
                None => d_loss,
            });
        }
        let loss = g.mul_scalar(loss_acc.expect("non-empty batch"), 1.0 / batch.len() as f64);
        if !Element::to_f64(g.value(loss)[0]).is_finite() {
            return Err(Error::Train {
                iteration: self.iteration,
                detail: "non-finite appearance discriminator loss".into(),
            });
        }
        g.backward(loss)?;
        d.zero_grads();
        d.read_grads(&g, &bound);
        let mut params = d.params_mut();
        let mut refs: Vec<&mut Tensor<E>> = params.iter_mut().map(|(_, p)| &mut **p).collect();
        self.adam_d_appearance.as_mut().expect("paired with d").step(&mut refs);
        Ok(())
    }

    /// One update of the flow discriminator on solver flows of one random
    /// consecutive pair per sample (frames noised before the solver).
    fn update_flow_d(
        &mut self,
        batch: &[TrainSample<E>],
        fake_frames: &[Vec<Tensor<E>>],
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let d = self.d_flow.as_mut().expect("caller checked");
        let solver = &self.flow_solver;
        let mut g = Graph::new();
        let bound = d.bind(&mut g);
        let mut loss_acc: Option<Var> = None;
        for ((frames, _), fakes) in batch.iter().zip(fake_frames) {
            let j = rng.random_range(0..fakes.len());
            let real_a = noised(&frames[j], sigma, rng);
            let real_b = noised(&frames[j + 1], sigma, rng);
            let fake_a = noised(if j == 0 { &frames[0] } else { &fakes[j - 1] }, sigma, rng);
            let fake_b = noised(&fakes[j], sigma, rng);
            let ra = g.bind(&real_a);
            let rb = g.bind(&real_b);
            let fa = g.bind(&fake_a);
            let fb = g.bind(&fake_b);
            let real_flow = solver.flow_on_graph(&mut g, ra, rb)?[0];
            let fake_flow = solver.flow_on_graph(&mut g, fa, fb)?[0];
            let (d_loss, _) = adversarial_losses_on(&mut g, &bound, real_flow, fake_flow)?;
            loss_acc = Some(match loss_acc {
                Some(acc) => g.add(acc, d_loss)?,
                None => d_loss,
            });
        }
        let loss = g.mul_scalar(loss_acc.expect("non-empty batch"), 1.0 / batch.len() as f64);
        if !Element::to_f64(g.value(loss)[0]).is_finite() {
            return Err(Error::Train {
                iteration: self.iteration,
                detail: "non-finite flow discriminator loss".into(),
            });
        }
        g.backward(loss)?;
        d.zero_grads();
        d.read_grads(&g, &bound);
        let mut params = d.params_mut();
        let mut refs: Vec<&mut Tensor<E>> = params.iter_mut().map(|(_, p)| &mut **p).collect();
        self.adam_d_flow.as_mut().expect("paired with d").step(&mut refs);
        Ok(())
    }

    /// Free-run rollouts against up to four validation clips.
    pub fn validate_on(&self, clips: &[VideoClip<E>]) -> Result<ClipMetrics> {
        if clips.is_empty() {
            return Err(Error::contract("validate_on", "no validation clips"));
        }
        let t = self.config.train.sequence_length;
        let mut rng = derive_rng(self.config.train.seed, self.iteration, STREAM_VAL);
        let mut acc = ClipMetrics { mse: 0.0, psnr: 0.0, ssim: 0.0 };
        let count = clips.len().min(4);
        for clip in &clips[..count] {
            let window = sample_sequence(clip, t, 1, 0, false, false)?;
            let generated = self.model.rollout(
                &window.frames()[0],
                &clip.category(),
                t - 1,
                None,
                0.0,
                &mut rng,
            )?;
            let gen_clip = VideoClip::new(generated, clip.category(), t - 1)?;
            let src_clip =
                VideoClip::new(window.frames()[1..].to_vec(), clip.category(), t - 1)?;
            let m = clip_metrics(&gen_clip, &src_clip)?;
            acc.mse += m.mse;
            acc.psnr += m.psnr;
            acc.ssim += m.ssim;
        }
        let n = count as f64;
        Ok(ClipMetrics { mse: acc.mse / n, psnr: acc.psnr / n, ssim: acc.ssim / n })
    }
}

impl<E: CheckpointElement> TrainState<E> {
    /// Serializes config, parameters, optimizer moments, and counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.config.serialize());
        ckpt.push_u64s("iteration", &[self.iteration]);
        push_params(&mut ckpt, "model", &self.model, &self.adam);
        if let (Some(d), Some(adam)) = (&self.d_appearance, &self.adam_d_appearance) {
            push_params(&mut ckpt, "d_appearance", d, adam);
        }
        if let (Some(d), Some(adam)) = (&self.d_flow, &self.adam_d_flow) {
            push_params(&mut ckpt, "d_flow", d, adam);
        }
        ckpt
    }

    /// Rebuilds a state that continues exactly where `to_checkpoint` left
    /// off. The config snapshot inside the checkpoint is authoritative.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (config, _) = RunConfig::parse(&ckpt.config_text)?;
        let mut state = TrainState::new(config)?;
        state.iteration = ckpt.u64s("iteration")?[0];
        state.adam = restore_params(ckpt, "model", &mut state.model, state.config.train.lr)?;
        if let Some(d) = state.d_appearance.as_mut() {
            state.adam_d_appearance =
                Some(restore_params(ckpt, "d_appearance", d, state.config.train.lr)?);
        }
        if let Some(d) = state.d_flow.as_mut() {
            state.adam_d_flow = Some(restore_params(ckpt, "d_flow", d, state.config.train.lr)?);
        }
        Ok(state)
    }
}

fn push_params<E: CheckpointElement>(
    ckpt: &mut Checkpoint,
    prefix: &str,
    owner: &impl ParamOwner<E>,
    adam: &Adam<E>,
) {
    for (name, tensor) in owner.params() {
        ckpt.push_tensor(&format!("{prefix}.{name}"), tensor);
    }
    ckpt.push_u64s(&format!("adam.{prefix}.t"), &[adam.timestep()]);
    let (m, v) = adam.moments();
    if !m.is_empty() {
        for ((name, tensor), (mi, vi)) in owner.params().iter().zip(m.iter().zip(v)) {
            let dims = tensor.shape().to_vec();
            ckpt.push_entry(
                &format!("adam.{prefix}.m.{name}"),
                crate::io::Entry { dims: dims.clone(), data: E::pack(mi) },
            );
            ckpt.push_entry(
                &format!("adam.{prefix}.v.{name}"),
                crate::io::Entry { dims, data: E::pack(vi) },
            );
        }
    }
}

fn restore_params<E: CheckpointElement>(
    ckpt: &Checkpoint,
    prefix: &str,
    owner: &mut impl ParamOwner<E>,
    lr: f64,
) -> Result<Adam<E>> {
    for (name, tensor) in owner.params_mut() {
        let full = format!("{prefix}.{name}");
        let loaded = ckpt.tensor::<E>(&full)?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {full:?}: shape {:?} does not match the configured {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(loaded.data());
    }
    let t = ckpt.u64s(&format!("adam.{prefix}.t"))?[0];
    if t == 0 {
        return Ok(Adam::new(lr));
    }
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, _) in owner.params() {
        m.push(ckpt.tensor::<E>(&format!("adam.{prefix}.m.{name}"))?.data().to_vec());
        v.push(ckpt.tensor::<E>(&format!("adam.{prefix}.v.{name}"))?.data().to_vec());
    }
    Ok(Adam::restore(lr, t, m, v))
}

/// Draws one batch for iteration `iteration`: random clips, random window
/// starts (skip 1), random flips.
pub fn sample_batch<E: Element>(
    clips: &[VideoClip<E>],
    config: &RunConfig,
    iteration: u64,
) -> Result<Vec<TrainSample<E>>> {
    if clips.is_empty() {
        return Err(Error::contract("sample_batch", "no training clips"));
    }
    let t = config.train.sequence_length;
    let mut rng = derive_rng(config.train.seed, iteration, STREAM_DATA);
    let mut batch = Vec::with_capacity(config.train.batch);
    for _ in 0..config.train.batch {
        let clip = &clips[rng.random_range(0..clips.len())];
        if clip.len() < t {
            return Err(Error::contract(
                "sample_batch",
                format!("clip has {} frames, need {t}", clip.len()),
            ));
        }
        let start = rng.random_range(0..=clip.len() - t);
        let flip_h = rng.random_bool(0.5);
        let flip_v = rng.random_bool(0.5);
        let window = sample_sequence(clip, t, 1, start, flip_h, flip_v)?;
        batch.push((window.frames().to_vec(), clip.category()));
    }
    Ok(batch)
}

/// Full training run: splits the dataset, iterates `train_step`, logs one
/// CSV row per loss term per iteration, validates and checkpoints on the
/// configured cadence, and writes the final checkpoint.
pub fn train<E: CheckpointElement>(
    config: &RunConfig,
    dataset: &[VideoClip<E>],
    out_dir: &Path,
) -> Result<TrainState<E>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("train", "empty dataset"));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    // Tiny datasets (overfit harnesses) train on everything.
    let (train_clips, val_clips) = if dataset.len() >= 10 {
        let (tr, va, _te) = make_split(dataset.to_vec(), config.data.split_seed)?;
        (tr, va)
    } else {
        (dataset.to_vec(), Vec::new())
    };

    let mut state = TrainState::<E>::new(config.clone())?;
    let mut train_log = format!("{TRAIN_LOG_HEADER}\n");
    let mut val_log = format!("{VAL_LOG_HEADER}\n");

    let write_logs = |train_log: &str, val_log: &str| -> Result<()> {
        fs::write(out_dir.join("train_log.csv"), train_log)
            .map_err(|e| Error::io("writing train_log.csv".to_string(), e))?;
        fs::write(out_dir.join("val_log.csv"), val_log)
            .map_err(|e| Error::io("writing val_log.csv".to_string(), e))
    };

    for itr in 0..config.train.iterations {
        let batch = sample_batch(&train_clips, config, state.iteration)?;
        let report = match state.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                write_logs(&train_log, &val_log)?;
                return Err(e);
            }
        };
        train_log.push_str(&report.csv_rows());
        let done = itr + 1;
        if done % config.train.validation_interval == 0 && !val_clips.is_empty() {
            let m = state.validate_on(&val_clips)?;
            val_log.push_str(&format!(
                "{},{:.8},{:.4},{:.6}\n",
                state.iteration, m.mse, m.psnr, m.ssim
            ));
        }
        if done % config.train.checkpoint_interval == 0 {
            state.to_checkpoint().save(&out_dir.join(format!("checkpoint_{done}.ckpt")))?;
        }
    }
    state.to_checkpoint().save(&out_dir.join("checkpoint.ckpt"))?;
    write_logs(&train_log, &val_log)?;
    Ok(state)
}
