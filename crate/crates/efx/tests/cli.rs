//! End-to-end checks of the `efx` binary: exit codes, file formats, and
//! the shape contracts of each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn efx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efx"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, want: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "{what}: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    let text = format!(
        "train.lr = 1e-3\n\
         train.batch = 2\n\
         train.iterations = 2\n\
         train.sequence_length = 3\n\
         train.seed = 11\n\
         train.checkpoint_interval = 2\n\
         train.validation_interval = 2\n\
         loss.kind = MSE\n\
         arch.image_size = 16\n\
         arch.enc_channels = 2,3,4\n\
         arch.stage_kernel = 3\n\
         arch.embed_dim = 2\n\
         arch.kappa = 1\n\
         style.channels = 4,6\n\
         flow.scales = 2\n\
         flow.iterations = 4\n\
         data.corpus_dir = {}\n\
         data.clips_per_effect = 3\n\
         data.native_length = 6\n",
        corpus.display()
    );
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_code(&efx(&["--help"]), 0, "help");
    assert_code(&efx(&["no-such-subcommand"]), 1, "unknown subcommand");
    assert_code(&efx(&["train", "--no-such-flag"]), 1, "unknown flag");
    // train requires --config.
    assert_code(&efx(&["train"]), 1, "missing required flag");
}

#[test]
fn inspect_reports_the_golden_fixture_layout() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.rvt");
    let out = efx(&["inspect", fixture.to_str().unwrap()]);
    assert_code(&out, 0, "inspect golden");
    let text = stdout(&out);
    assert!(text.contains("T=2 H=2 W=2 C=1"), "got: {text}");
    assert!(text.contains("52 bytes"), "got: {text}");

    let out = efx(&["inspect", "/nonexistent.rvt"]);
    assert_code(&out, 2, "inspect missing file");
}

#[test]
fn full_pipeline_runs_and_respects_contracts() {
    let dir = fresh_dir("efx_cli_pipeline");
    let config = write_tiny_config(&dir);
    let config = config.to_str().unwrap();

    let out = efx(&["generate-data", "--config", config]);
    assert_code(&out, 0, "generate-data");
    assert!(dir.join("corpus/manifest.csv").exists());
    assert!(dir.join("corpus/melt_0_0000.rvt").exists());

    // --iterations 0 still writes the initial checkpoint.
    let train_out = dir.join("train_out");
    let out = efx(&[
        "train",
        "--config",
        config,
        "--iterations",
        "0",
        "--out",
        train_out.to_str().unwrap(),
    ]);
    assert_code(&out, 0, "train --iterations 0");
    let ckpt = train_out.join("checkpoint.ckpt");
    assert!(ckpt.exists());
    assert!(train_out.join("train_log.csv").exists());

    // A 16×16 PNG animated for 4 steps yields a T=4 16×16 RGB clip.
    let png = dir.join("still.png");
    let out = efx(&[
        "animate",
        ckpt.to_str().unwrap(),
        dir.join("corpus/bloom_1_0001.rvt").to_str().unwrap(),
        "--effect",
        "bloom",
        "--steps",
        "4",
        "--out",
        dir.join("anim").to_str().unwrap(),
    ]);
    assert_code(&out, 0, "animate from rvt");
    let header = efx(&["inspect", dir.join("anim/animation.rvt").to_str().unwrap()]);
    assert!(stdout(&header).contains("T=4 H=16 W=16 C=3"), "got: {}", stdout(&header));
    assert!(dir.join("anim/frames/frame_003.png").exists());

    // PNG input path: animate the exported first frame.
    fs::copy(dir.join("anim/frames/frame_000.png"), &png).unwrap();
    let out = efx(&[
        "animate",
        ckpt.to_str().unwrap(),
        png.to_str().unwrap(),
        "--effect",
        "melt",
        "--steps",
        "3",
        "--out",
        dir.join("anim_png").to_str().unwrap(),
    ]);
    assert_code(&out, 0, "animate from png");
    let header = efx(&["inspect", dir.join("anim_png/animation.rvt").to_str().unwrap()]);
    assert!(stdout(&header).contains("T=3 H=16 W=16 C=3"), "got: {}", stdout(&header));

    let out = efx(&[
        "evaluate",
        ckpt.to_str().unwrap(),
        "--out",
        dir.join("eval").to_str().unwrap(),
    ]);
    assert_code(&out, 0, "evaluate");
    assert!(dir.join("eval/model.csv").exists());
    assert!(dir.join("eval/first_frame.csv").exists());
    let model_csv = fs::read_to_string(dir.join("eval/model.csv")).unwrap();
    assert!(model_csv.starts_with("clip,mse,psnr_db,ssim\n"));
    assert!(model_csv.lines().last().unwrap().starts_with("aggregate,"));

    // Corrupting one payload byte must be caught by the CRC.
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.join("corrupt.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = efx(&["inspect", bad.to_str().unwrap()]);
    assert_code(&out, 2, "corrupted checkpoint");
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.to_lowercase().contains("crc"), "got: {err}");

    // Unknown config keys are data errors, not usage errors.
    let bad_cfg = dir.join("bad.cfg");
    fs::write(&bad_cfg, "train.lr = 1e-3\nnot.a.key = 1\n").unwrap();
    let out = efx(&["train", "--config", bad_cfg.to_str().unwrap()]);
    assert_code(&out, 2, "unknown config key");
}
