//! Corpus manifest: one CSV row per clip file, plus helpers that build a
//! synthetic corpus on disk and load one back.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::config::DataConfig;
use crate::io::rvt::{read_rvt, write_rvt};
use crate::predictor::{BroadEffect, EffectCategory, FINE_PER_BROAD};
use crate::synth::{generate_clip, EffectSpec, VideoClip};
use crate::tensor::Element;
use crate::{Error, Result};

pub const MANIFEST_HEADER: &str = "path,broad,fine,native_length,seed";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Clip file path relative to the manifest's directory.
    pub path: String,
    pub broad: BroadEffect,
    pub fine: usize,
    pub native_length: usize,
    pub seed: u64,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            e.path, e.broad, e.fine, e.native_length, e.seed
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "manifest {}: expected header {MANIFEST_HEADER:?}, got {other:?}",
                path.display()
            )));
        }
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Config(format!(
                "manifest {} line {}: want 5 fields, got {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::Config(format!(
                "manifest {} line {}: bad {what}: {line:?}",
                path.display(),
                lineno + 2
            ))
        };
        entries.push(ManifestEntry {
            path: fields[0].to_string(),
            broad: BroadEffect::from_str(fields[1]).map_err(|_| bad("broad effect"))?,
            fine: fields[2].parse().map_err(|_| bad("fine id"))?,
            native_length: fields[3].parse().map_err(|_| bad("native length"))?,
            seed: fields[4].parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(entries)
}

/// Renders `clips_per_effect` clips per broad effect (fine parameters
/// cycling), writes one `.rvt` per clip plus `manifest.csv` into `dir`,
/// and returns the manifest. Clip seeds count up from `base_seed` so the
/// corpus is reproducible from the manifest alone.
pub fn build_corpus<E: Element>(
    dir: &Path,
    data: &DataConfig,
    image_size: usize,
    base_seed: u64,
) -> Result<Vec<ManifestEntry>> {
    data.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for broad in BroadEffect::ALL {
        for i in 0..data.clips_per_effect {
            let fine = i % FINE_PER_BROAD;
            let seed = base_seed.wrapping_add(offset);
            let spec = EffectSpec { broad, fine, seed };
            let (clip, _) =
                generate_clip::<E>(&spec, data.native_length, image_size, image_size)?;
            let name = format!("{broad}_{fine}_{i:04}.rvt");
            write_rvt(&dir.join(&name), clip.frames())?;
            entries.push(ManifestEntry {
                path: name,
                broad,
                fine,
                native_length: data.native_length,
                seed,
            });
            offset += 1;
        }
    }
    write_manifest(&dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}

/// Reads every clip listed in `dir/manifest.csv`, in manifest order.
pub fn load_corpus<E: Element>(dir: &Path) -> Result<Vec<VideoClip<E>>> {
    let entries = read_manifest(&dir.join("manifest.csv"))?;
    entries
        .iter()
        .map(|e| {
            let frames = read_rvt::<E>(&dir.join(&e.path))?;
            let category = EffectCategory::new(e.broad, e.fine)?;
            VideoClip::new(frames, category, e.native_length)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_builds_and_loads_in_manifest_order() {
        let dir = std::env::temp_dir().join("efx_corpus_test");
        let _ = std::fs::remove_dir_all(&dir);
        let data = DataConfig {
            corpus_dir: dir.display().to_string(),
            clips_per_effect: 3,
            native_length: 4,
            split_seed: 7,
        };
        let entries = build_corpus::<f32>(&dir, &data, 16, 900).unwrap();
        assert_eq!(entries.len(), 4 * 3);
        assert_eq!(entries[0].fine, 0);
        assert_eq!(entries[1].fine, 1);
        let clips = load_corpus::<f32>(&dir).unwrap();
        assert_eq!(clips.len(), entries.len());
        for (clip, entry) in clips.iter().zip(&entries) {
            assert_eq!(clip.category().broad(), entry.broad);
            assert_eq!(clip.category().fine(), entry.fine);
            assert_eq!(clip.len(), 4);
            assert_eq!(clip.height(), 16);
        }
    }

    #[test]
    fn manifest_round_trips_and_rejects_junk() {
        let entries = vec![
            ManifestEntry {
                path: "melt/clip_000.rvt".into(),
                broad: BroadEffect::Melt,
                fine: 0,
                native_length: 24,
                seed: 17,
            },
            ManifestEntry {
                path: "swirl/clip_001.rvt".into(),
                broad: BroadEffect::Swirl,
                fine: 2,
                native_length: 24,
                seed: 18,
            },
        ];
        let dir = std::env::temp_dir().join("efx_manifest_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.csv");
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);

        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(read_manifest(&path).is_err());
        std::fs::write(&path, format!("{MANIFEST_HEADER}\nx,melt,0\n")).unwrap();
        assert!(read_manifest(&path).is_err());
        std::fs::write(&path, format!("{MANIFEST_HEADER}\nx,tornado,0,24,1\n")).unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
