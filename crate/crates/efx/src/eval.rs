//! Reconstruction metrics with multi-rate alignment, the first-frame
//! baseline, and the data-utility classifier protocol.
//!
//! Generated videos have no canonical playback speed, so a generated clip
//! is scored against the source resampled at every rate in a grid and the
//! best value per metric is reported: minimum MSE, maximum PSNR, maximum
//! SSIM. Data utility asks a different question — whether generated clips
//! carry enough effect-specific motion to train a classifier that works on
//! real clips.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::nn::{
    with_prefix, BoundConv, BoundDense, BoundLstm, Conv2dLayer, ConvLstm, Dense, ParamOwner,
};
use crate::predictor::{BroadEffect, EffectCategory};
use crate::synth::{sample_sequence, VideoClip};
use crate::tensor::{optim::Adam, Element, Graph, PaddingMode, Tensor, Var};
use crate::{Error, Result};

/// PSNR returned for (near-)exact reconstructions instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean squared error over all elements of two equally shaped tensors.
pub fn mse<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(
            "mse",
            format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = Element::to_f64(*x) - Element::to_f64(*y);
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<E: Element>(a: &Tensor<E>, b: &Tensor<E>, max_val: f64) -> Result<f64> {
    let err = mse(a, b)?;
    Ok(psnr_from_mse(err, max_val))
}

fn psnr_from_mse(err: f64, max_val: f64) -> f64 {
    if err <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * ((max_val * max_val) / err).log10()).min(PSNR_CAP_DB)
}

const SSIM_RADIUS: usize = 5; // 11x11 window
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window() -> Vec<f64> {
    let mut w1: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w1.iter().sum();
    for w in &mut w1 {
        *w /= s;
    }
    let side = 2 * SSIM_RADIUS + 1;
    let mut w2 = Vec::with_capacity(side * side);
    for wy in &w1 {
        for wx in &w1 {
            w2.push(wy * wx);
        }
    }
    w2
}

/// Structural similarity for `(C, H, W)` images in `[0, 1]`: Gaussian-
/// weighted 11×11 windows (σ=1.5), population statistics, evaluated only
/// where the window fits, per channel then averaged.
pub fn ssim<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::contract(
            "ssim",
            format!("want matching (C, H, W), got {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let side = 2 * SSIM_RADIUS + 1;
    if h < side || w < side {
        return Err(Error::contract(
            "ssim",
            format!("image {h}x{w} is smaller than the {side}x{side} window"),
        ));
    }
    let window = ssim_window();
    let c1 = (SSIM_K1) * (SSIM_K1);
    let c2 = (SSIM_K2) * (SSIM_K2);
    let mut channel_means = Vec::with_capacity(c);
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        let mut count = 0usize;
        for cy in SSIM_RADIUS..h - SSIM_RADIUS {
            for cx in SSIM_RADIUS..w - SSIM_RADIUS {
                let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                let mut wi = 0usize;
                for dy in 0..side {
                    let row = (cy + dy - SSIM_RADIUS) * w + cx - SSIM_RADIUS;
                    for dx in 0..side {
                        let x = Element::to_f64(pa[row + dx]);
                        let y = Element::to_f64(pb[row + dx]);
                        let wt = window[wi];
                        wi += 1;
                        mx += wt * x;
                        my += wt * y;
                        exx += wt * x * x;
                        eyy += wt * y * y;
                        exy += wt * x * y;
                    }
                }
                let vx = exx - mx * mx;
                let vy = eyy - my * my;
                let cov = exy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        channel_means.push(acc / count as f64);
    }
    Ok(channel_means.iter().sum::<f64>() / c as f64)
}

/// Per-clip metric triple. PSNR is derived from the pooled clip MSE; SSIM
/// is the mean of per-frame values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn clip_metrics<E: Element>(a: &VideoClip<E>, b: &VideoClip<E>) -> Result<ClipMetrics> {
    if a.len() != b.len() {
        return Err(Error::contract(
            "clip_metrics",
            format!("clip lengths differ: {} vs {}", a.len(), b.len()),
        ));
    }
    let mut err = 0.0;
    let mut sim = 0.0;
    for (x, y) in a.frames().iter().zip(b.frames()) {
        err += mse(x, y)?;
        sim += ssim(x, y)?;
    }
    let n = a.len() as f64;
    Ok(ClipMetrics { mse: err / n, psnr: psnr_from_mse(err / n, 1.0), ssim: sim / n })
}

/// Per-rate metric table plus the componentwise best values.
#[derive(Debug, Clone)]
pub struct RateSearch {
    pub per_rate: Vec<(usize, ClipMetrics)>,
    pub best: ClipMetrics,
}

/// Scores `generated` against `source` resampled at every feasible rate in
/// `rates` (start 0), reporting min MSE / max PSNR / max SSIM.
pub fn multi_rate_best<E: Element>(
    generated: &VideoClip<E>,
    source: &VideoClip<E>,
    rates: &[usize],
) -> Result<RateSearch> {
    let t = generated.len();
    let mut per_rate = Vec::new();
    for &rate in rates {
        if rate == 0 || (t - 1) * rate >= source.len() {
            continue;
        }
        let resampled = sample_sequence(source, t, rate, 0, false, false)?;
        per_rate.push((rate, clip_metrics(generated, &resampled)?));
    }
    if per_rate.is_empty() {
        return Err(Error::contract(
            "multi_rate_best",
            format!(
                "no rate in {:?} fits {} frames into a source of {}",
                rates,
                t,
                source.len()
            ),
        ));
    }
    let best = ClipMetrics {
        mse: per_rate.iter().map(|(_, m)| m.mse).fold(f64::INFINITY, f64::min),
        psnr: per_rate.iter().map(|(_, m)| m.psnr).fold(f64::NEG_INFINITY, f64::max),
        ssim: per_rate.iter().map(|(_, m)| m.ssim).fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(RateSearch { per_rate, best })
}

/// Multi-rate scores for a batch of (generated, source) pairs plus the
/// mean over clips.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub method: String,
    pub rates: Vec<usize>,
    pub per_clip: Vec<ClipMetrics>,
    pub aggregate: ClipMetrics,
}

impl MetricReport {
    pub fn from_pairs<E: Element>(
        method: &str,
        pairs: &[(VideoClip<E>, VideoClip<E>)],
        rates: &[usize],
    ) -> Result<MetricReport> {
        if pairs.is_empty() {
            return Err(Error::contract("metric_report", "no clips to evaluate"));
        }
        let per_clip: Vec<ClipMetrics> = pairs
            .par_iter()
            .map(|(gen, src)| multi_rate_best(gen, src, rates).map(|s| s.best))
            .collect::<Result<_>>()?;
        let n = per_clip.len() as f64;
        let aggregate = ClipMetrics {
            mse: per_clip.iter().map(|m| m.mse).sum::<f64>() / n,
            psnr: per_clip.iter().map(|m| m.psnr).sum::<f64>() / n,
            ssim: per_clip.iter().map(|m| m.ssim).sum::<f64>() / n,
        };
        Ok(MetricReport { method: method.to_string(), rates: rates.to_vec(), per_clip, aggregate })
    }

    /// Per-clip rows with an aggregate footer. PSNR 100 dB means an exact
    /// reconstruction (the cap).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip,mse,psnr_db,ssim\n");
        for (i, m) in self.per_clip.iter().enumerate() {
            out.push_str(&format!("{i},{:.8},{:.4},{:.6}\n", m.mse, m.psnr, m.ssim));
        }
        out.push_str(&format!(
            "aggregate,{:.8},{:.4},{:.6}\n",
            self.aggregate.mse, self.aggregate.psnr, self.aggregate.ssim
        ));
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: rates {:?}, {} clips, MSE {:.6}, PSNR {:.2} dB, SSIM {:.4}",
            self.method,
            self.rates,
            self.per_clip.len(),
            self.aggregate.mse,
            self.aggregate.psnr,
            self.aggregate.ssim
        )
    }
}

/// The trivial competitor: a video whose every frame is the input frame.
pub fn first_frame_baseline<E: Element>(
    first_frame: &Tensor<E>,
    t: usize,
    category: EffectCategory,
) -> Result<VideoClip<E>> {
    if t < 1 {
        return Err(Error::contract("first_frame_baseline", "need at least one frame"));
    }
    VideoClip::new(vec![first_frame.clone(); t], category, t)
}

/// Settings for the small clip classifier used by the data-utility probe.
#[derive(Debug, Clone)]
pub struct UtilityClassifierConfig {
    pub channels: [usize; 2],
    pub kernel: usize,
    pub num_classes: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for UtilityClassifierConfig {
    fn default() -> Self {
        UtilityClassifierConfig {
            channels: [8, 16],
            kernel: 3,
            num_classes: BroadEffect::ALL.len(),
            iterations: 2000,
            lr: 1e-3,
            seed: 5001,
        }
    }
}

/// Two strided conv stages, a conv-LSTM over time, and a pooled softmax
/// head over broad effect classes.
pub struct UtilityClassifier<E: Element> {
    conv1: Conv2dLayer<E>,
    conv2: Conv2dLayer<E>,
    lstm: ConvLstm<E>,
    head: Dense<E>,
    config: UtilityClassifierConfig,
}

struct BoundUtility {
    conv1: BoundConv,
    conv2: BoundConv,
    lstm: BoundLstm,
    head: BoundDense,
}

impl<E: Element> UtilityClassifier<E> {
    pub fn new(config: UtilityClassifierConfig) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.kernel;
        let [c1, c2] = config.channels;
        Ok(UtilityClassifier {
            conv1: Conv2dLayer::new(&mut rng, 3, c1, k, 2, PaddingMode::Symmetric, true, true),
            conv2: Conv2dLayer::new(&mut rng, c1, c2, k, 2, PaddingMode::Symmetric, true, true),
            lstm: ConvLstm::new(&mut rng, c2, c2, k),
            head: Dense::new(&mut rng, c2, config.num_classes),
            config,
        })
    }

    pub fn config(&self) -> &UtilityClassifierConfig {
        &self.config
    }

    fn bind_all(&self, g: &mut Graph<E>) -> BoundUtility {
        BoundUtility {
            conv1: self.conv1.bind(g),
            conv2: self.conv2.bind(g),
            lstm: self.lstm.bind(g),
            head: self.head.bind(g),
        }
    }

    /// Class probability graph node for one clip; sums to 1 via softmax.
    fn probs_on_graph(
        &self,
        g: &mut Graph<E>,
        bound: &BoundUtility,
        frames: &[Tensor<E>],
    ) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::contract("utility_classifier", "empty clip"));
        }
        let mut state = None;
        for frame in frames {
            let x = g.bind(frame);
            let a1 = bound.conv1.apply(g, x)?;
            let a1 = g.relu(a1);
            let a2 = bound.conv2.apply(g, a1)?;
            let a2 = g.relu(a2);
            let s = match state {
                Some(s) => s,
                None => {
                    let (h, w) = {
                        let shape = g.shape(a2);
                        (shape[1], shape[2])
                    };
                    let (h0, c0) = self.lstm.zero_state(h, w);
                    (g.bind(&h0), g.bind(&c0))
                }
            };
            state = Some(bound.lstm.step(g, a2, s)?);
        }
        let (hidden, _) = state.expect("at least one frame");
        let pooled = g.global_avg_pool(hidden)?;
        let row = g.reshape(pooled, vec![1, self.config.channels[1]])?;
        let logits = bound.head.apply(g, row)?;
        let flat = g.reshape(logits, vec![self.config.num_classes])?;
        Ok(g.softmax0(flat))
    }

    /// Detached class probabilities for one clip.
    pub fn probs(&self, clip: &VideoClip<E>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind_all(&mut g);
        let p = self.probs_on_graph(&mut g, &bound, clip.frames())?;
        Ok(g.value(p).iter().map(|v| Element::to_f64(*v)).collect())
    }

    pub fn predict(&self, clip: &VideoClip<E>) -> Result<usize> {
        let probs = self.probs(clip)?;
        Ok(probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("at least two classes"))
    }

    /// Cross-entropy training over shuffled clips, one clip per step.
    pub fn fit(&mut self, clips: &[VideoClip<E>]) -> Result<()> {
        if clips.is_empty() {
            return Err(Error::Config("no training clips".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9);
        let mut adam = Adam::new(self.config.lr);
        let mut order: Vec<usize> = (0..clips.len()).collect();
        for itr in 0..self.config.iterations {
            if itr % clips.len() == 0 {
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
            }
            let clip = &clips[order[itr % clips.len()]];
            let label = clip.category().broad().index();
            let mut g = Graph::new();
            let bound = self.bind_all(&mut g);
            let probs = self.probs_on_graph(&mut g, &bound, clip.frames())?;
            let p_true = g.narrow0(probs, label, 1)?;
            let lp = g.ln_clamped(p_true, 1e-7);
            let summed = g.sum_all(lp);
            let loss = g.mul_scalar(summed, -1.0);
            g.backward(loss)?;
            self.zero_grads();
            self.conv1.read_grads(&g, &bound.conv1);
            self.conv2.read_grads(&g, &bound.conv2);
            self.lstm.read_grads(&g, &bound.lstm);
            self.head.read_grads(&g, &bound.head);
            let mut params = self.params_mut();
            let mut refs: Vec<&mut Tensor<E>> = params.iter_mut().map(|(_, t)| &mut **t).collect();
            adam.step(&mut refs);
        }
        Ok(())
    }

    pub fn accuracy(&self, clips: &[VideoClip<E>]) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::contract("accuracy", "no clips"));
        }
        let mut hits = 0usize;
        for clip in clips {
            if self.predict(clip)? == clip.category().broad().index() {
                hits += 1;
            }
        }
        Ok(hits as f64 / clips.len() as f64)
    }
}

impl<E: Element> ParamOwner<E> for UtilityClassifier<E> {
    fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = with_prefix("conv1", self.conv1.params());
        out.extend(with_prefix("conv2", self.conv2.params()));
        out.extend(with_prefix("lstm", self.lstm.params()));
        out.extend(with_prefix("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = with_prefix("conv1", self.conv1.params_mut());
        out.extend(with_prefix("conv2", self.conv2.params_mut()));
        out.extend(with_prefix("lstm", self.lstm.params_mut()));
        out.extend(with_prefix("head", self.head.params_mut()));
        out
    }
}

fn broad_label_set<E: Element>(clips: &[VideoClip<E>]) -> Vec<BroadEffect> {
    let mut labels: Vec<BroadEffect> = Vec::new();
    for clip in clips {
        let b = clip.category().broad();
        if !labels.contains(&b) {
            labels.push(b);
        }
    }
    labels
}

/// Trains a fresh classifier on (synthetic) `train_clips` and reports its
/// top-1 accuracy on `test_clips`. Labels are broad effects.
pub fn data_utility<E: Element>(
    config: UtilityClassifierConfig,
    train_clips: &[VideoClip<E>],
    test_clips: &[VideoClip<E>],
) -> Result<f64> {
    let train_labels = broad_label_set(train_clips);
    if train_labels.len() < 2 {
        return Err(Error::Config(format!(
            "data utility needs at least two classes, got {:?}",
            train_labels
        )));
    }
    let mut test_labels = broad_label_set(test_clips);
    let mut sorted_train = train_labels.clone();
    sorted_train.sort_by_key(|b| b.index());
    test_labels.sort_by_key(|b| b.index());
    if test_labels != sorted_train {
        return Err(Error::Config(format!(
            "label sets differ: train {sorted_train:?} vs test {test_labels:?}"
        )));
    }
    let mut classifier = UtilityClassifier::<E>::new(config)?;
    classifier.fit(train_clips)?;
    classifier.accuracy(test_clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_clip, EffectSpec};

    /// Deterministic mid-contrast test image shared with the reference-
    /// implementation oracle.
    fn oracle_image() -> Tensor<f64> {
        let (h, w) = (24, 24);
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(
                        0.3 + 0.12
                            * (0.35 * x as f64 + 0.5 * c as f64).sin()
                            * (0.28 * y as f64 - 0.3 * c as f64).cos()
                            + 0.03 * (0.9 * (x + y) as f64).sin(),
                    );
                }
            }
        }
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn psnr_matches_pinned_examples() {
        let a = Tensor::<f64>::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        // MSE 0.01 -> 20 dB.
        let b = Tensor::<f64>::new(vec![1, 1, 2], vec![0.1, 0.1]).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        // Identical -> the cap.
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        // MSE 1 -> 0 dB.
        let c = Tensor::<f64>::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert!(psnr(&a, &c, 1.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn psnr_is_consistent_with_mse() {
        let a = oracle_image();
        let mut shifted = a.clone();
        for v in shifted.data_mut() {
            *v = (*v + 0.07).min(1.0);
        }
        let m = mse(&a, &shifted).unwrap();
        assert!(m > 1e-10);
        assert!((psnr(&a, &shifted, 1.0).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-6);
    }

    #[test]
    fn ssim_matches_reference_implementation_oracle() {
        let x = oracle_image();
        let mut comp = x.clone();
        for v in comp.data_mut() {
            *v = 1.0 - *v;
        }
        // Frozen from the standard reference implementation (Gaussian
        // weights, sigma 1.5, population statistics, data range 1).
        let got = ssim(&x, &comp).unwrap();
        assert!((got - (-0.409967365718)).abs() < 1e-9, "got {got}");

        let mut perturbed = x.clone();
        let w = 24;
        for (i, v) in perturbed.data_mut().iter_mut().enumerate() {
            *v = (*v + 0.05 * (0.7 * ((i % w) as f64)).sin()).clamp(0.0, 1.0);
        }
        let got = ssim(&x, &perturbed).unwrap();
        assert!((got - 0.824754854804).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn ssim_identities_symmetry_and_window_precondition() {
        let x = oracle_image();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let flat_a = Tensor::<f64>::full(vec![3, 16, 16], 0.3);
        let flat_b = Tensor::<f64>::full(vec![3, 16, 16], 0.3);
        assert!((ssim(&flat_a, &flat_b).unwrap() - 1.0).abs() < 1e-12);
        let mut y = x.clone();
        for v in y.data_mut() {
            *v = (*v * 1.3).min(1.0);
        }
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-7);
        let small = Tensor::<f64>::full(vec![3, 10, 12], 0.5);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn multi_rate_best_finds_the_generating_rate() {
        let spec = EffectSpec { broad: BroadEffect::Melt, fine: 1, seed: 17 };
        let (source, _) = generate_clip::<f64>(&spec, 16, 24, 24).unwrap();
        // A "generated" clip that is exactly the source at skip 2.
        let generated = sample_sequence(&source, 6, 2, 0, false, false).unwrap();
        let search = multi_rate_best(&generated, &source, &[1, 2, 3]).unwrap();
        assert_eq!(search.per_rate.len(), 3);
        let at_rate_2 = search.per_rate.iter().find(|(r, _)| *r == 2).unwrap().1;
        assert!(at_rate_2.mse < 1e-18);
        assert_eq!(at_rate_2.psnr, PSNR_CAP_DB);
        assert!((search.best.mse - at_rate_2.mse).abs() < 1e-18);
        // The best values obey min/max against the table.
        for (_, m) in &search.per_rate {
            assert!(search.best.mse <= m.mse + 1e-15);
            assert!(search.best.psnr >= m.psnr - 1e-12);
            assert!(search.best.ssim >= m.ssim - 1e-12);
        }
        // Singleton grid equals plain metrics.
        let single = multi_rate_best(&generated, &source, &[2]).unwrap();
        let resampled = sample_sequence(&source, 6, 2, 0, false, false).unwrap();
        let plain = clip_metrics(&generated, &resampled).unwrap();
        assert_eq!(single.best, plain);
        // No feasible rate is a contract error.
        assert!(multi_rate_best(&generated, &source, &[9]).is_err());
    }

    #[test]
    fn adding_a_rate_never_worsens_the_report() {
        let spec = EffectSpec { broad: BroadEffect::Bloom, fine: 0, seed: 23 };
        let (source, _) = generate_clip::<f64>(&spec, 16, 24, 24).unwrap();
        let generated = sample_sequence(&source, 5, 1, 2, false, false).unwrap();
        let narrow = multi_rate_best(&generated, &source, &[1, 2]).unwrap();
        let wide = multi_rate_best(&generated, &source, &[1, 2, 3]).unwrap();
        assert!(wide.best.mse <= narrow.best.mse + 1e-15);
        assert!(wide.best.psnr >= narrow.best.psnr - 1e-12);
        assert!(wide.best.ssim >= narrow.best.ssim - 1e-12);
    }

    #[test]
    fn first_frame_baseline_repeats_the_frame() {
        let spec = EffectSpec { broad: BroadEffect::Melt, fine: 0, seed: 31 };
        let (clip, _) = generate_clip::<f64>(&spec, 8, 24, 24).unwrap();
        let frame = clip.frames()[0].clone();
        let baseline = first_frame_baseline(&frame, 8, clip.category()).unwrap();
        assert_eq!(baseline.len(), 8);
        for f in baseline.frames() {
            assert_eq!(f.data(), frame.data());
        }
        // Static source: exact; moving source: strictly positive error.
        let static_clip =
            VideoClip::new(vec![frame.clone(); 8], clip.category(), 8).unwrap();
        assert!(clip_metrics(&baseline, &static_clip).unwrap().mse < 1e-18);
        assert!(clip_metrics(&baseline, &clip).unwrap().mse > 1e-6);
        assert!(first_frame_baseline(&frame, 0, clip.category()).is_err());
    }

    #[test]
    fn report_csv_has_rows_and_footer() {
        let spec = EffectSpec { broad: BroadEffect::Swirl, fine: 1, seed: 41 };
        let (source, _) = generate_clip::<f64>(&spec, 10, 24, 24).unwrap();
        let generated = sample_sequence(&source, 4, 1, 0, false, false).unwrap();
        let report =
            MetricReport::from_pairs("probe", &[(generated, source)], &[1, 2]).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3); // header, one clip, footer
        assert!(csv.lines().last().unwrap().starts_with("aggregate,"));
        assert!(report.summary().contains("probe"));
    }

    #[test]
    fn untrained_classifier_is_near_chance_and_single_class_is_rejected() {
        let mut clips = Vec::new();
        for (i, broad) in BroadEffect::ALL.into_iter().enumerate() {
            for s in 0..4 {
                let spec = EffectSpec { broad, fine: 1, seed: (i * 10 + s) as u64 };
                clips.push(generate_clip::<f32>(&spec, 4, 16, 16).unwrap().0);
            }
        }
        let config = UtilityClassifierConfig { iterations: 0, ..Default::default() };
        let classifier = UtilityClassifier::<f32>::new(config.clone()).unwrap();
        let probs = classifier.probs(&clips[0]).unwrap();
        assert_eq!(probs.len(), 4);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        let acc = classifier.accuracy(&clips).unwrap();
        assert!((0.0..=0.6).contains(&acc), "untrained accuracy {acc}");

        let melt_only: Vec<_> = clips[0..4].to_vec();
        assert!(matches!(
            data_utility(config, &melt_only, &melt_only),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn classifier_memorizes_a_tiny_set() {
        // Capacity sanity: a few hundred steps on four distinctive clips.
        let mut clips = Vec::new();
        for (i, broad) in BroadEffect::ALL.into_iter().enumerate() {
            let spec = EffectSpec { broad, fine: 2, seed: 60 + i as u64 };
            clips.push(generate_clip::<f32>(&spec, 4, 16, 16).unwrap().0);
        }
        let config = UtilityClassifierConfig {
            iterations: 240,
            lr: 3e-3,
            ..Default::default()
        };
        let mut classifier = UtilityClassifier::<f32>::new(config).unwrap();
        classifier.fit(&clips).unwrap();
        let acc = classifier.accuracy(&clips).unwrap();
        assert!(acc >= 0.75, "memorization accuracy {acc}");
    }
}
