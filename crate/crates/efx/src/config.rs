//! Run configuration: a flat `section.key = value` text format.
//!
//! One file drives a whole run — training hyperparameters, loss setup,
//! model architecture, feature-extractor settings, and data paths. Unknown
//! keys are rejected (they are almost always typos of known ones); missing
//! keys fall back to defaults and are reported as notices so silent drift
//! is visible in logs. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::losses::{FlowLossMode, LossConfig, LossKind};
use crate::predictor::{ArchConfig, OutputMode};
use crate::features::{FlowSolverConfig, StyleNetConfig};
use crate::{Error, Result};

/// Optimization-loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
    /// Frames per training rollout, including the conditioning frame.
    pub sequence_length: usize,
    pub clip_norm: f64,
    /// Teacher forcing is cut to zero from this iteration on.
    pub tf_warmup: usize,
    /// Initial discriminator input noise, annealed linearly to zero.
    pub noise_std: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub validation_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch: 4,
            iterations: 50_000,
            sequence_length: 8,
            clip_norm: 0.01,
            tf_warmup: 10_000,
            noise_std: 0.05,
            seed: 42,
            checkpoint_interval: 1000,
            validation_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.clip_norm <= 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.sequence_length < 2 {
            return Err(Error::Config(format!(
                "sequence_length must be at least 2, got {}",
                self.sequence_length
            )));
        }
        if self.checkpoint_interval == 0 || self.validation_interval == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        Ok(())
    }
}

/// Corpus location and generation defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub corpus_dir: String,
    pub clips_per_effect: usize,
    pub native_length: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus_dir: "data/corpus".into(),
            clips_per_effect: 200,
            native_length: 24,
            split_seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips_per_effect == 0 || self.native_length < 2 {
            return Err(Error::Config(
                "clips_per_effect must be positive and native_length at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a run needs, parsed from one text file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub arch: ArchConfig,
    pub style: StyleNetConfig,
    pub flow: FlowSolverConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            loss: LossConfig::new(LossKind::Mse),
            arch: ArchConfig::default(),
            style: StyleNetConfig::default(),
            flow: FlowSolverConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse_num::<usize>(key, p.trim()))
        .collect()
}

fn list_to_string(list: &[usize]) -> String {
    list.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses config text. Returns the config plus one notice per missing
    /// key that was filled from defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<(RunConfig, Vec<String>)> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `section.key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
        }

        let mut config = RunConfig::default();
        let mut notices = Vec::new();
        let mut take = |key: &str| -> Option<String> {
            match pairs.remove(key) {
                Some(v) => Some(v),
                None => {
                    notices.push(format!("{key} missing, using default"));
                    None
                }
            }
        };

        macro_rules! field {
            ($key:expr, $slot:expr, $conv:expr) => {
                if let Some(v) = take($key) {
                    $slot = $conv($key, &v)?;
                }
            };
        }
        let num = |key: &str, v: &str| parse_num::<usize>(key, v);
        let num64 = |key: &str, v: &str| parse_num::<u64>(key, v);
        let real = |key: &str, v: &str| parse_num::<f64>(key, v);

        field!("train.lr", config.train.lr, real);
        field!("train.batch", config.train.batch, num);
        field!("train.iterations", config.train.iterations, num);
        field!("train.sequence_length", config.train.sequence_length, num);
        field!("train.clip_norm", config.train.clip_norm, real);
        field!("train.tf_warmup", config.train.tf_warmup, num);
        field!("train.noise_std", config.train.noise_std, real);
        field!("train.seed", config.train.seed, num64);
        field!("train.checkpoint_interval", config.train.checkpoint_interval, num);
        field!("train.validation_interval", config.train.validation_interval, num);

        field!("loss.kind", config.loss.kind, |_k, v: &str| v.parse::<LossKind>());
        field!("loss.w_mse", config.loss.w_mse, real);
        field!("loss.w_content", config.loss.w_content, real);
        field!("loss.w_style", config.loss.w_style, real);
        field!("loss.w_flow", config.loss.w_flow, real);
        field!("loss.w_adversarial", config.loss.w_adversarial, real);
        field!("loss.flow_mode", config.loss.flow_mode, |_k, v: &str| {
            v.parse::<FlowLossMode>()
        });

        field!("arch.image_size", config.arch.image_size, num);
        field!("arch.enc_channels", config.arch.enc_channels, parse_list);
        field!("arch.stage_kernel", config.arch.stage_kernel, num);
        field!("arch.lstm_kernel", config.arch.lstm_kernel, num);
        field!("arch.head_kernel", config.arch.head_kernel, num);
        field!("arch.embed_dim", config.arch.embed_dim, num);
        field!("arch.kappa", config.arch.kappa, num);
        field!("arch.num_categories", config.arch.num_categories, num);
        field!("arch.output_mode", config.arch.output_mode, |_k, v: &str| {
            v.parse::<OutputMode>()
        });
        field!("arch.seed", config.arch.seed, num64);

        field!("style.seed", config.style.seed, num64);
        field!("style.channels", config.style.stage_channels, parse_list);
        field!("style.kernel", config.style.kernel, num);

        field!("flow.scales", config.flow.scales, num);
        field!("flow.iterations", config.flow.iterations, num);
        field!("flow.alpha_sq", config.flow.alpha_sq, real);
        field!("flow.max_displacement", config.flow.max_displacement, real);

        field!("data.corpus_dir", config.data.corpus_dir, |_k, v: &str| {
            Ok::<_, Error>(v.to_string())
        });
        field!("data.clips_per_effect", config.data.clips_per_effect, num);
        field!("data.native_length", config.data.native_length, num);
        field!("data.split_seed", config.data.split_seed, num64);

        if let Some(unknown) = pairs.keys().next() {
            return Err(Error::Config(format!("unknown config key {unknown:?}")));
        }
        Ok((config, notices))
    }

    /// Emits every key so a parse of the output needs no defaults.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# effect-transfer run configuration");
        let _ = writeln!(s, "train.lr = {}", self.train.lr);
        let _ = writeln!(s, "train.batch = {}", self.train.batch);
        let _ = writeln!(s, "train.iterations = {}", self.train.iterations);
        let _ = writeln!(s, "train.sequence_length = {}", self.train.sequence_length);
        let _ = writeln!(s, "train.clip_norm = {}", self.train.clip_norm);
        let _ = writeln!(s, "train.tf_warmup = {}", self.train.tf_warmup);
        let _ = writeln!(s, "train.noise_std = {}", self.train.noise_std);
        let _ = writeln!(s, "train.seed = {}", self.train.seed);
        let _ = writeln!(s, "train.checkpoint_interval = {}", self.train.checkpoint_interval);
        let _ = writeln!(s, "train.validation_interval = {}", self.train.validation_interval);
        let _ = writeln!(s, "loss.kind = {}", self.loss.kind);
        let _ = writeln!(s, "loss.w_mse = {}", self.loss.w_mse);
        let _ = writeln!(s, "loss.w_content = {}", self.loss.w_content);
        let _ = writeln!(s, "loss.w_style = {}", self.loss.w_style);
        let _ = writeln!(s, "loss.w_flow = {}", self.loss.w_flow);
        let _ = writeln!(s, "loss.w_adversarial = {}", self.loss.w_adversarial);
        let _ = writeln!(s, "loss.flow_mode = {}", self.loss.flow_mode);
        let _ = writeln!(s, "arch.image_size = {}", self.arch.image_size);
        let _ = writeln!(s, "arch.enc_channels = {}", list_to_string(&self.arch.enc_channels));
        let _ = writeln!(s, "arch.stage_kernel = {}", self.arch.stage_kernel);
        let _ = writeln!(s, "arch.lstm_kernel = {}", self.arch.lstm_kernel);
        let _ = writeln!(s, "arch.head_kernel = {}", self.arch.head_kernel);
        let _ = writeln!(s, "arch.embed_dim = {}", self.arch.embed_dim);
        let _ = writeln!(s, "arch.kappa = {}", self.arch.kappa);
        let _ = writeln!(s, "arch.num_categories = {}", self.arch.num_categories);
        let _ = writeln!(s, "arch.output_mode = {}", self.arch.output_mode);
        let _ = writeln!(s, "arch.seed = {}", self.arch.seed);
        let _ = writeln!(s, "style.seed = {}", self.style.seed);
        let _ = writeln!(s, "style.channels = {}", list_to_string(&self.style.stage_channels));
        let _ = writeln!(s, "style.kernel = {}", self.style.kernel);
        let _ = writeln!(s, "flow.scales = {}", self.flow.scales);
        let _ = writeln!(s, "flow.iterations = {}", self.flow.iterations);
        let _ = writeln!(s, "flow.alpha_sq = {}", self.flow.alpha_sq);
        let _ = writeln!(s, "flow.max_displacement = {}", self.flow.max_displacement);
        let _ = writeln!(s, "data.corpus_dir = {}", self.data.corpus_dir);
        let _ = writeln!(s, "data.clips_per_effect = {}", self.data.clips_per_effect);
        let _ = writeln!(s, "data.native_length = {}", self.data.native_length);
        let _ = writeln!(s, "data.split_seed = {}", self.data.split_seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.arch.validate()?;
        self.data.validate()?;
        if self.flow.scales == 0 || self.flow.iterations == 0 || self.flow.alpha_sq <= 0.0 {
            return Err(Error::Config("flow solver settings must be positive".into()));
        }
        if self.style.stage_channels.is_empty() {
            return Err(Error::Config("style net needs at least one stage".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let config = RunConfig::default();
        let text = config.serialize();
        let (parsed, notices) = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, config);
        assert!(notices.is_empty(), "full serialization needs no defaults: {notices:?}");
        // Fixed point: serialize(parse(serialize(x))) = serialize(x).
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn missing_keys_default_with_notices() {
        let (config, notices) =
            RunConfig::parse("train.lr = 0.001\nloss.kind = OF+S\n").unwrap();
        assert_eq!(config.train.lr, 0.001);
        assert_eq!(config.loss.kind, LossKind::OpticalFlowStyle);
        assert_eq!(config.train.batch, 4);
        assert!(notices.iter().any(|n| n.contains("train.batch")));
        assert!(!notices.iter().any(|n| n.contains("train.lr")));
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_rejected() {
        let err = RunConfig::parse("train.lrr = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("train.lrr"), "{err}");
        assert!(RunConfig::parse("just words\n").is_err());
        assert!(RunConfig::parse("train.lr = 0.1\ntrain.lr = 0.2\n").is_err());
        assert!(RunConfig::parse("train.batch = four\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# a comment\n\ntrain.seed = 9 # trailing comment\n";
        let (config, _) = RunConfig::parse(text).unwrap();
        assert_eq!(config.train.seed, 9);
    }

    #[test]
    fn lists_and_enums_parse() {
        let text = "arch.enc_channels = 8, 12, 16\nloss.flow_mode = gram\narch.output_mode = direct-rgb\n";
        let (config, _) = RunConfig::parse(text).unwrap();
        assert_eq!(config.arch.enc_channels, vec![8, 12, 16]);
        assert_eq!(config.loss.flow_mode, FlowLossMode::Gram);
        assert_eq!(config.arch.output_mode, OutputMode::DirectRgb);
    }

    #[test]
    fn validation_rejects_degenerate_settings() {
        let mut config = RunConfig::default();
        config.train.sequence_length = 1;
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.train.lr = 0.0;
        assert!(config.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
