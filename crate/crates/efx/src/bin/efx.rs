//! Command-line surface: corpus generation, training, animation of still
//! images, evaluation against the held-out split, the data-utility
//! classifier probe, and file inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/contract error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use efx::config::RunConfig;
use efx::eval::{first_frame_baseline, MetricReport, UtilityClassifier, UtilityClassifierConfig};
use efx::io::{
    build_corpus, load_corpus, read_png, read_rvt, read_rvt_header, write_png, write_rvt,
    Checkpoint,
};
use efx::predictor::{BroadEffect, EffectCategory};
use efx::synth::{make_split, sample_sequence, same_start_probe_set, VideoClip};
use efx::tensor::Tensor;
use efx::train::{train, TrainState};
use efx::{Error, Result};

#[derive(Parser)]
#[command(
    name = "efx",
    version,
    about = "Learns visual effects from videos and transfers them to still images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic effect corpus and its manifest.
    GenerateData(GenerateArgs),
    /// Train a predictor as described by a config file.
    Train(TrainArgs),
    /// Animate a still image (PNG or single-frame .rvt) with a trained model.
    Animate(AnimateArgs),
    /// Score model rollouts and the first-frame baseline on the test split.
    Evaluate(EvaluateArgs),
    /// Data-utility probe: train a classifier on generated clips, test on
    /// held-out ground-truth clips, and run the label-permutation control.
    Classify(ClassifyArgs),
    /// Print the header of an .rvt clip or .ckpt checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: the config's data.corpus_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed for clip generation (default: the config's train.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (required).
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Train on clips of this broad effect only (melt, bloom, swirl, shrink).
    #[arg(long)]
    effect: Option<BroadEffect>,
    /// Overrides train.iterations from the config.
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory for logs and checkpoints.
    #[arg(long, default_value = "train_out")]
    out: PathBuf,
}

#[derive(Args)]
struct AnimateArgs {
    /// Trained checkpoint (.ckpt).
    checkpoint: PathBuf,
    /// Input still image: PNG or single-frame .rvt.
    image: PathBuf,
    /// Broad effect to apply.
    #[arg(long)]
    effect: BroadEffect,
    /// Fine parameter id within the effect.
    #[arg(long, default_value_t = 0)]
    fine: usize,
    /// Total frames to write, including the input frame.
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Output directory (animation.rvt plus a frames/ PNG directory).
    #[arg(long, default_value = "animate_out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint (.ckpt); its embedded config drives the model.
    checkpoint: PathBuf,
    /// Overrides the embedded config's data section (corpus location).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated frame-rate grid for multi-rate alignment.
    #[arg(long, default_value = "1,2,3,4")]
    rates: String,
    /// Restrict evaluation to one broad effect.
    #[arg(long)]
    effect: Option<BroadEffect>,
    /// Output directory for the CSV reports.
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Checkpoint of the model trained on melt clips.
    #[arg(long)]
    melt: PathBuf,
    /// Checkpoint of the model trained on bloom clips.
    #[arg(long)]
    bloom: PathBuf,
    /// Checkpoint of the model trained on swirl clips.
    #[arg(long)]
    swirl: PathBuf,
    /// Checkpoint of the model trained on shrink clips.
    #[arg(long)]
    shrink: PathBuf,
    /// Overrides the melt checkpoint's config (corpus location, splits).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for probe-set rollouts and classifier init.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InspectArgs {
    /// .rvt or .ckpt file.
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(args) => generate_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Animate(args) => animate(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Classify(args) => classify(args),
        Command::Inspect(args) => inspect(args),
    }
}

/// Reads a config file, printing one notice per defaulted key to stderr.
fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (config, notices) = RunConfig::parse(&text)?;
    for notice in notices {
        eprintln!("config: {notice}");
    }
    Ok(config)
}

fn load_config_or_default(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn generate_data(args: GenerateArgs) -> Result<()> {
    let config = load_config_or_default(args.config.as_ref())?;
    let dir = args.out.unwrap_or_else(|| PathBuf::from(&config.data.corpus_dir));
    let seed = args.seed.unwrap_or(config.train.seed);
    let entries = build_corpus::<f32>(&dir, &config.data, config.arch.image_size, seed)?;
    println!(
        "wrote {} clips ({} per effect, {} frames, {}x{}) and manifest.csv to {}",
        entries.len(),
        config.data.clips_per_effect,
        config.data.native_length,
        config.arch.image_size,
        config.arch.image_size,
        dir.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        config.train.iterations = iterations;
    }
    let mut clips = load_corpus::<f32>(Path::new(&config.data.corpus_dir))?;
    if let Some(effect) = args.effect {
        clips.retain(|c| c.category().broad() == effect);
        if clips.is_empty() {
            return Err(Error::contract("train", format!("no {effect} clips in the corpus")));
        }
    }
    let state = train(&config, &clips, &args.out)?;
    println!(
        "trained {} iterations ({} loss) on {} clips; checkpoint at {}",
        state.iteration,
        config.loss.kind,
        clips.len(),
        args.out.join("checkpoint.ckpt").display()
    );
    Ok(())
}

/// Loads a still frame from PNG or from the first frame of an .rvt file.
fn load_still(path: &Path) -> Result<Tensor<f32>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("rvt") => {
            let frames = read_rvt::<f32>(path)?;
            Ok(frames.into_iter().next().expect("rvt files hold at least one frame"))
        }
        _ => read_png(path),
    }
}

fn animate(args: AnimateArgs) -> Result<()> {
    if args.steps < 2 {
        return Err(Error::contract("animate", "--steps must be at least 2"));
    }
    let state = TrainState::<f32>::from_checkpoint(&Checkpoint::load(&args.checkpoint)?)?;
    let frame = load_still(&args.image)?;
    let size = state.config.arch.image_size;
    if frame.shape() != [3, size, size] {
        return Err(Error::contract(
            "animate",
            format!(
                "input frame is {:?}, but this checkpoint expects (3, {size}, {size})",
                frame.shape()
            ),
        ));
    }
    let category = EffectCategory::new(args.effect, args.fine)?;
    let mut rng = efx::train::derive_rng(state.config.train.seed, 0, 0);
    let generated =
        state.model.rollout(&frame, &category, args.steps - 1, None, 0.0, &mut rng)?;
    let mut frames = Vec::with_capacity(args.steps);
    frames.push(frame);
    frames.extend(generated);

    fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let rvt_path = args.out.join("animation.rvt");
    write_rvt(&rvt_path, &frames)?;
    let png_dir = args.out.join("frames");
    fs::create_dir_all(&png_dir)
        .map_err(|e| Error::io(format!("creating {}", png_dir.display()), e))?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&png_dir.join(format!("frame_{i:03}.png")), f)?;
    }
    println!(
        "wrote {} frames of {category} to {} and {}",
        frames.len(),
        rvt_path.display(),
        png_dir.display()
    );
    Ok(())
}

fn parse_rates(text: &str) -> Result<Vec<usize>> {
    let rates: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad rate {s:?} in --rates {text:?}")))
        })
        .collect::<Result<_>>()?;
    if rates.is_empty() || rates.contains(&0) {
        return Err(Error::Config("--rates needs positive integers".into()));
    }
    Ok(rates)
}

/// The test split of the corpus under the config's split seed.
fn test_split(config: &RunConfig) -> Result<Vec<VideoClip<f32>>> {
    let clips = load_corpus::<f32>(Path::new(&config.data.corpus_dir))?;
    let (_, _, test) = make_split(clips, config.data.split_seed)?;
    Ok(test)
}

/// Free-run rollout clip for a source clip: the source's first frame
/// followed by `t - 1` generated frames.
fn rollout_clip(
    state: &TrainState<f32>,
    source: &VideoClip<f32>,
    t: usize,
) -> Result<VideoClip<f32>> {
    let first = source.frames()[0].clone();
    let mut rng = efx::train::derive_rng(state.config.train.seed, state.iteration, 0);
    let generated = state.model.rollout(&first, &source.category(), t - 1, None, 0.0, &mut rng)?;
    let mut frames = Vec::with_capacity(t);
    frames.push(first);
    frames.extend(generated);
    VideoClip::new(frames, source.category(), t)
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let state = TrainState::<f32>::from_checkpoint(&Checkpoint::load(&args.checkpoint)?)?;
    let mut config = state.config.clone();
    if let Some(path) = &args.config {
        config.data = load_config(path)?.data;
    }
    let rates = parse_rates(&args.rates)?;
    let mut test = test_split(&config)?;
    if let Some(effect) = args.effect {
        test.retain(|c| c.category().broad() == effect);
    }
    if test.is_empty() {
        return Err(Error::contract("evaluate", "test split is empty"));
    }
    let t = config.train.sequence_length;

    let model_pairs: Vec<(VideoClip<f32>, VideoClip<f32>)> = test
        .iter()
        .map(|src| Ok((rollout_clip(&state, src, t)?, src.clone())))
        .collect::<Result<_>>()?;
    let baseline_pairs: Vec<(VideoClip<f32>, VideoClip<f32>)> = test
        .iter()
        .map(|src| {
            Ok((first_frame_baseline(&src.frames()[0], t, src.category())?, src.clone()))
        })
        .collect::<Result<_>>()?;

    let method = format!("{} model ({} iterations)", config.loss.kind, state.iteration);
    let model_report = MetricReport::from_pairs(&method, &model_pairs, &rates)?;
    let baseline_report = MetricReport::from_pairs("first frame", &baseline_pairs, &rates)?;

    fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    fs::write(args.out.join("model.csv"), model_report.to_csv())
        .map_err(|e| Error::io("writing model.csv".to_string(), e))?;
    fs::write(args.out.join("first_frame.csv"), baseline_report.to_csv())
        .map_err(|e| Error::io("writing first_frame.csv".to_string(), e))?;

    println!("{}", model_report.summary());
    println!("{}", baseline_report.summary());
    let (m, b) = (model_report.aggregate.mse, baseline_report.aggregate.mse);
    println!(
        "model MSE is {} the first-frame baseline ({:.6} vs {:.6})",
        if m < b { "below" } else { "not below" },
        m,
        b
    );
    Ok(())
}

fn classify(args: ClassifyArgs) -> Result<()> {
    let load = |path: &PathBuf| TrainState::<f32>::from_checkpoint(&Checkpoint::load(path)?);
    let melt = load(&args.melt)?;
    let bloom = load(&args.bloom)?;
    let swirl = load(&args.swirl)?;
    let shrink = load(&args.shrink)?;
    let mut config = melt.config.clone();
    if let Some(path) = &args.config {
        config.data = load_config(path)?.data;
    }
    let seed = args.seed.unwrap_or(UtilityClassifierConfig::default().seed);
    let t = config.train.sequence_length;

    let clips = load_corpus::<f32>(Path::new(&config.data.corpus_dir))?;
    let (train_clips, _, test_clips) = make_split(clips, config.data.split_seed)?;
    // Probe clips grow from train-split first frames, so the ground-truth
    // test clips are unseen by both the generators and the classifier.
    let first_frames: Vec<Tensor<f32>> = train_clips
        .iter()
        .take(12)
        .map(|c| c.frames()[0].clone())
        .collect();
    let models = [
        (BroadEffect::Melt, &melt.model),
        (BroadEffect::Bloom, &bloom.model),
        (BroadEffect::Swirl, &swirl.model),
        (BroadEffect::Shrink, &shrink.model),
    ];
    let probe = same_start_probe_set(&first_frames, &models, t - 1, seed)?;
    let test_windows: Vec<VideoClip<f32>> = test_clips
        .iter()
        .map(|c| sample_sequence(c, t, 1, 0, false, false))
        .collect::<Result<_>>()?;

    let clf_config = UtilityClassifierConfig { seed, ..UtilityClassifierConfig::default() };
    let mut classifier = UtilityClassifier::<f32>::new(clf_config)?;
    classifier.fit(&probe)?;
    let accuracy = classifier.accuracy(&test_windows)?;

    // Rotating every label is a derangement: no clip keeps its true label,
    // so an informative classifier must drop to chance or below.
    let permuted: Vec<VideoClip<f32>> = test_windows
        .iter()
        .map(|c| {
            let broad = c.category().broad();
            let next = BroadEffect::ALL[(broad.index() + 1) % BroadEffect::ALL.len()];
            VideoClip::new(
                c.frames().to_vec(),
                EffectCategory::new(next, c.category().fine())?,
                c.native_length(),
            )
        })
        .collect::<Result<_>>()?;
    let control = classifier.accuracy(&permuted)?;

    println!(
        "data utility: {} probe clips, {} test clips",
        probe.len(),
        test_windows.len()
    );
    println!("accuracy {accuracy:.3} (chance 0.250)");
    println!("permuted-label control {control:.3}");
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let path = &args.path;
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    match bytes.get(..4) {
        Some(b"RVT1") => {
            let header = read_rvt_header(path)?;
            let payload = 4 * header.t as u64 * header.h as u64 * header.w as u64 * header.c as u64;
            println!(
                "RVT1 clip: T={} H={} W={} C={}; {} bytes (20 header + {} payload)",
                header.t,
                header.h,
                header.w,
                header.c,
                20 + payload,
                payload
            );
        }
        Some(b"EFCK") => {
            let ckpt = Checkpoint::load(path)?;
            let iteration = ckpt.u64s("iteration").map(|v| v[0]).unwrap_or(0);
            println!(
                "EFCK checkpoint v{}: {} bytes, {} entries, iteration {}, CRC ok",
                efx::io::checkpoint::CHECKPOINT_VERSION,
                bytes.len(),
                ckpt.entries().count(),
                iteration
            );
            for (name, entry) in ckpt.entries() {
                println!(
                    "  {name}: {:?} {} ({} values)",
                    entry.dims,
                    entry.data.dtype_name(),
                    entry.data.len()
                );
            }
        }
        _ => {
            return Err(Error::contract(
                "inspect",
                format!("{} is neither an .rvt clip nor an EFCK checkpoint", path.display()),
            ));
        }
    }
    Ok(())
}
