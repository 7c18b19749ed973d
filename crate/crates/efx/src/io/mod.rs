//! On-disk formats: the `.rvt` raw video container, CRC-protected
//! checkpoints, PNG frame import/export, and the corpus manifest.

pub mod checkpoint;
pub mod manifest;
pub mod png;
pub mod rvt;

pub use checkpoint::{Checkpoint, CheckpointElement, Entry, EntryData};
pub use manifest::{build_corpus, load_corpus, ManifestEntry, read_manifest, write_manifest};
pub use png::{read_png, write_png};
pub use rvt::{read_rvt, read_rvt_header, write_rvt, RvtHeader};
