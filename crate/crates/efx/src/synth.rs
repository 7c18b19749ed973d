//! Procedural ground-truth effect videos with known per-frame motion.
//!
//! Each clip renders one random smooth blob with a band-limited noise fill
//! on a darker, near-flat background, then advects it frame by frame with
//! an analytic displacement field per effect:
//!
//! * melt — downward flow that speeds up over time, with lateral jitter and
//!   a light progressive blur;
//! * bloom — radial outward flow from the object centroid;
//! * swirl — rotation about the centroid;
//! * shrink — radial inward flow.
//!
//! Every effect is pure pixel advection with sub-`κ` per-step displacement,
//! so the pixel-transformer model class can represent it exactly; learning
//! failures therefore indict the training, not the parameterization. The
//! exact displacement field of every transition is returned alongside the
//! frames.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::FlowField;
use crate::predictor::{BroadEffect, EffectCategory, PredictorModel, FINE_PER_BROAD};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Multiplier applied to an effect's base rate per fine sub-type. For melt
/// this is the inverse of viscosity: low/medium/high viscosity maps to
/// fast/medium/slow flow.
pub const FINE_RATE_MULTIPLIERS: [f64; FINE_PER_BROAD] = [0.6, 1.0, 1.4];

/// A clip in memory: `(C, H, W)` frames in `[0, 1]` plus its label.
#[derive(Debug, Clone)]
pub struct VideoClip<E: Element> {
    frames: Vec<Tensor<E>>,
    category: EffectCategory,
    native_length: usize,
}

impl<E: Element> VideoClip<E> {
    /// Clamps frame values into `[0, 1]` and validates consistent shapes.
    pub fn new(
        mut frames: Vec<Tensor<E>>,
        category: EffectCategory,
        native_length: usize,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::contract("video_clip", "need at least one frame"));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::contract(
                "video_clip",
                format!("frames must be (C, H, W), got {shape:?}"),
            ));
        }
        for f in &mut frames {
            if f.shape() != shape.as_slice() {
                return Err(Error::contract("video_clip", "frame shape mismatch"));
            }
            for v in f.data_mut() {
                let x = Element::to_f64(*v);
                *v = E::from_f64(x.clamp(0.0, 1.0));
            }
        }
        Ok(VideoClip { frames, category, native_length })
    }

    pub fn frames(&self) -> &[Tensor<E>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn category(&self) -> EffectCategory {
        self.category
    }

    pub fn native_length(&self) -> usize {
        self.native_length
    }

    pub fn channels(&self) -> usize {
        self.frames[0].shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }
}

/// Recipe for one clip: the effect label plus the generation seed. The
/// fine id picks a rate multiplier from [`FINE_RATE_MULTIPLIERS`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectSpec {
    pub broad: BroadEffect,
    pub fine: usize,
    pub seed: u64,
}

impl EffectSpec {
    pub fn category(&self) -> Result<EffectCategory> {
        EffectCategory::new(self.broad, self.fine)
    }
}

/// Bilinear sample with clamp-to-edge, mirroring the graph warp op.
fn sample_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let v00 = plane[y0 * w + x0];
    let v01 = plane[y0 * w + x1];
    let v10 = plane[y1 * w + x0];
    let v11 = plane[y1 * w + x1];
    v00 * (1.0 - fy) * (1.0 - fx)
        + v01 * (1.0 - fy) * fx
        + v10 * fy * (1.0 - fx)
        + v11 * fy * fx
}

/// Moves content along the displacement field: `out(p) = frame(p − d(p))`,
/// the generative rule of every synthetic effect. `flow` follows the
/// content-motion convention (positive `v` moves content downward).
pub fn advect<E: Element>(frame: &Tensor<E>, flow: &FlowField<E>) -> Result<Tensor<E>> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[1] != flow.height() || shape[2] != flow.width() {
        return Err(Error::contract(
            "advect",
            format!(
                "frame {:?} does not match flow {}x{}",
                shape,
                flow.height(),
                flow.width()
            ),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let u: Vec<f64> = flow.u().data().iter().map(|v| Element::to_f64(*v)).collect();
    let v: Vec<f64> = flow.v().data().iter().map(|v| Element::to_f64(*v)).collect();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane: Vec<f64> =
            frame.data()[ch * h * w..(ch + 1) * h * w].iter().map(|x| Element::to_f64(*x)).collect();
        for yy in 0..h {
            for xx in 0..w {
                let i = yy * w + xx;
                out.push(sample_plane(&plane, h, w, yy as f64 - v[i], xx as f64 - u[i]));
            }
        }
    }
    Tensor::from_f64_slice(vec![c, h, w], &out)
}

/// 3×3 box blur with edge clamping, used for melt's progressive smoothing.
fn box_blur3(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += plane[yy * w + xx];
                    }
                }
                out[ch * h * w + y * w + x] = acc / 9.0;
            }
        }
    }
    out
}

/// Band-limited noise in [−1, 1]: a handful of low-frequency sinusoids.
fn noise_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut comps = Vec::new();
    let mut total = 0.0;
    for _ in 0..4 {
        let fx = rng.random_range(1..6) as f64;
        let fy = rng.random_range(1..6) as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.3..0.6);
        total += amp;
        comps.push((fx, fy, phase, amp));
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for &(fx, fy, phase, amp) in &comps {
                let arg = std::f64::consts::TAU
                    * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                    + phase;
                v += amp * arg.sin();
            }
            out.push(v / total);
        }
    }
    out
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    /// Soft object mask in [0, 1].
    mask: Vec<f64>,
}

fn render_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Blob {
    let size = h.min(w) as f64;
    let cy = h as f64 / 2.0 + rng.random_range(-0.08..0.08) * size;
    let cx = w as f64 / 2.0 + rng.random_range(-0.08..0.08) * size;
    let radius = rng.random_range(0.20..0.28) * size;
    let harmonics: Vec<(f64, f64, f64)> = (2..5)
        .map(|k| (k as f64, rng.random_range(-0.12..0.12), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let rho = (dy * dy + dx * dx).sqrt();
            let theta = dy.atan2(dx);
            let mut boundary = radius;
            for &(k, amp, phase) in &harmonics {
                boundary += radius * amp * (k * theta + phase).cos();
            }
            // Soft edge about 1.2 px wide keeps flow estimation well-posed.
            let m = 1.0 / (1.0 + (-(boundary - rho) / 1.2).exp());
            mask.push(m);
        }
    }
    Blob { cy, cx, radius, mask }
}

/// Analytic content displacement for one transition, evaluated per pixel of
/// the incoming frame. `step` is the 0-based transition index.
fn effect_flow(
    spec: &EffectSpec,
    blob: &Blob,
    jitter_phase: f64,
    step: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let rate_mul = FINE_RATE_MULTIPLIERS[spec.fine];
    let n = h * w;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    match spec.broad {
        BroadEffect::Melt => {
            let rate = (0.7 * rate_mul * (1.0 + 0.05 * step as f64)).min(2.0);
            let jitter = 0.25 * (0.9 * step as f64 + jitter_phase).sin();
            for i in 0..n {
                u[i] = jitter;
                v[i] = rate;
            }
        }
        BroadEffect::Bloom => {
            let rate = 0.9 * rate_mul;
            let soft = 0.35 * blob.radius;
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - blob.cy;
                    let dx = x as f64 - blob.cx;
                    let rho = (dy * dy + dx * dx).sqrt().max(1e-9);
                    let gain = rate * rho / (rho + soft);
                    u[y * w + x] = gain * dx / rho;
                    v[y * w + x] = gain * dy / rho;
                }
            }
        }
        BroadEffect::Swirl => {
            let theta = 0.06 * rate_mul;
            let (sin_t, cos_t) = (-theta).sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - blob.cy;
                    let dx = x as f64 - blob.cx;
                    // Source point is the backward rotation of p about c.
                    let sx = cos_t * dx - sin_t * dy;
                    let sy = sin_t * dx + cos_t * dy;
                    u[y * w + x] = dx - sx;
                    v[y * w + x] = dy - sy;
                }
            }
        }
        BroadEffect::Shrink => {
            let factor = 1.0 / (1.0 - 0.035 * rate_mul);
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - blob.cy;
                    let dx = x as f64 - blob.cx;
                    u[y * w + x] = dx * (1.0 - factor);
                    v[y * w + x] = dy * (1.0 - factor);
                }
            }
        }
    }
    (u, v)
}

/// Renders one clip of `t` frames plus the exact flow of each of its `t−1`
/// transitions. Deterministic per spec. Advecting frame `i` by flow `i`
/// (see [`advect`]) reproduces frame `i+1` up to melt's slight smoothing.
pub fn generate_clip<E: Element>(
    spec: &EffectSpec,
    t: usize,
    h: usize,
    w: usize,
) -> Result<(VideoClip<E>, Vec<FlowField<E>>)> {
    if t < 2 {
        return Err(Error::contract("generate_clip", "need at least two frames"));
    }
    let category = spec.category()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Reject degenerate (near-zero-area) objects, regenerating a few times.
    let mut blob = None;
    for _ in 0..10 {
        let candidate = render_blob(&mut rng, h, w);
        let area = candidate.mask.iter().filter(|&&m| m > 0.5).count();
        if area >= 4 {
            blob = Some(candidate);
            break;
        }
    }
    let blob = blob.ok_or_else(|| {
        Error::contract("generate_clip", "degenerate object after 10 attempts")
    })?;

    let texture = noise_field(&mut rng, h, w);
    let bg_noise = noise_field(&mut rng, h, w);
    let obj_base: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..0.85)).collect();
    let bg_base: Vec<f64> = (0..3).map(|_| rng.random_range(0.06..0.28)).collect();
    let jitter_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let n = h * w;
    let mut first = Vec::with_capacity(3 * n);
    for c in 0..3 {
        for i in 0..n {
            let obj = (obj_base[c] + 0.12 * texture[i]).clamp(0.35, 0.98);
            let bg = (bg_base[c] + 0.03 * bg_noise[i]).clamp(0.02, 0.33);
            first.push(blob.mask[i] * obj + (1.0 - blob.mask[i]) * bg);
        }
    }

    let mut frames_f64 = vec![first];
    let mut flows = Vec::with_capacity(t - 1);
    for step in 0..t - 1 {
        let (u, v) = effect_flow(spec, &blob, jitter_phase, step, h, w);
        let flow = FlowField::new(
            Tensor::<E>::from_f64_slice(vec![h, w], &u)?,
            Tensor::<E>::from_f64_slice(vec![h, w], &v)?,
        )?;
        let prev = frames_f64.last().expect("seeded with the first frame");
        let prev_t = Tensor::<f64>::new(vec![3, h, w], prev.clone())?;
        let flow64 = FlowField::new(
            Tensor::<f64>::new(vec![h, w], u)?,
            Tensor::<f64>::new(vec![h, w], v)?,
        )?;
        let mut next = advect(&prev_t, &flow64)?.data().to_vec();
        if spec.broad == BroadEffect::Melt {
            let blurred = box_blur3(&next, 3, h, w);
            for (x, b) in next.iter_mut().zip(blurred) {
                *x = 0.97 * *x + 0.03 * b;
            }
        }
        frames_f64.push(next);
        flows.push(flow);
    }

    let frames = frames_f64
        .into_iter()
        .map(|f| Tensor::<E>::from_f64_slice(vec![3, h, w], &f))
        .collect::<Result<Vec<_>>>()?;
    Ok((VideoClip::new(frames, category, t)?, flows))
}

/// Frames at `start, start+skip, …` with optional whole-clip flips.
pub fn sample_sequence<E: Element>(
    clip: &VideoClip<E>,
    t: usize,
    skip: usize,
    start: usize,
    flip_h: bool,
    flip_v: bool,
) -> Result<VideoClip<E>> {
    if skip < 1 {
        return Err(Error::contract("sample_sequence", "skip must be at least 1"));
    }
    if t < 1 {
        return Err(Error::contract("sample_sequence", "need at least one frame"));
    }
    let last = start + (t - 1) * skip;
    if last >= clip.len() {
        return Err(Error::contract(
            "sample_sequence",
            format!(
                "start {start} + (T−1)·skip {} = {last} exceeds clip length {}",
                (t - 1) * skip,
                clip.len()
            ),
        ));
    }
    let (c, h, w) = (clip.channels(), clip.height(), clip.width());
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let src = &clip.frames()[start + i * skip];
        if !flip_h && !flip_v {
            frames.push(src.clone());
            continue;
        }
        let mut data = vec![E::from_f64(0.0); c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = if flip_v { h - 1 - y } else { y };
                    let sx = if flip_h { w - 1 - x } else { x };
                    data[ch * h * w + y * w + x] = src.data()[ch * h * w + sy * w + sx];
                }
            }
        }
        frames.push(Tensor::new(vec![c, h, w], data)?);
    }
    VideoClip::new(frames, clip.category(), clip.native_length())
}

/// Deterministic 80/10/10 split by whole item (never by frame).
pub fn make_split<T>(items: Vec<T>, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 10 {
        return Err(Error::contract("make_split", format!("need at least 10 items, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates with the seeded generator.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut slots: Vec<u8> = vec![2; n];
    for (pos, &idx) in order.iter().enumerate() {
        slots[idx] = if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        };
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (item, slot) in items.into_iter().zip(slots) {
        match slot {
            0 => train.push(item),
            1 => val.push(item),
            _ => test.push(item),
        }
    }
    Ok((train, val, test))
}

/// For every first frame, one generated clip per broad effect, labeled by
/// that effect — so a classifier can never associate object identity with
/// a label. `models` must cover all four effects; each clip holds the first
/// frame plus `t` generated frames.
pub fn same_start_probe_set<E: Element>(
    first_frames: &[Tensor<E>],
    models: &[(BroadEffect, &PredictorModel<E>)],
    t: usize,
    seed: u64,
) -> Result<Vec<VideoClip<E>>> {
    for broad in BroadEffect::ALL {
        if !models.iter().any(|(b, _)| *b == broad) {
            return Err(Error::Config(format!("missing a trained model for effect {broad}")));
        }
    }
    let mut clips = Vec::with_capacity(first_frames.len() * BroadEffect::ALL.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for frame in first_frames {
        for broad in BroadEffect::ALL {
            let (_, model) = models
                .iter()
                .find(|(b, _)| *b == broad)
                .expect("presence checked above");
            let category = EffectCategory::new(broad, 0)?;
            let generated = model.rollout(frame, &category, t, None, 0.0, &mut rng)?;
            let mut frames = Vec::with_capacity(t + 1);
            frames.push(frame.clone());
            frames.extend(generated);
            clips.push(VideoClip::new(frames, category, t + 1)?);
        }
    }
    Ok(clips)
}
