//! Single-file checkpoints: `EFCK` magic, format version, a config text
//! snapshot, a named tensor table, and a trailing CRC32 over everything
//! before it. The CRC turns silent corruption into a refusal to load,
//! which the determinism tests rely on.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Payload of one named entry. Model weights are stored in their native
/// precision; counters (iteration, seeds, Adam timestep) as u64.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl EntryData {
    fn tag(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::U64(_) => 2,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            EntryData::F32(_) => "f32",
            EntryData::F64(_) => "f64",
            EntryData::U64(_) => "u64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: EntryData,
}

/// In-memory checkpoint: config text plus named tensors in a stable order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub config_text: String,
    entries: Vec<(String, Entry)>,
}

/// Maps an element type to its dtype tag and raw representation.
pub trait CheckpointElement: Element {
    fn pack(data: &[Self]) -> EntryData;
    fn unpack(entry: &EntryData) -> Option<Vec<Self>>;
}

impl CheckpointElement for f32 {
    fn pack(data: &[Self]) -> EntryData {
        EntryData::F32(data.to_vec())
    }

    fn unpack(entry: &EntryData) -> Option<Vec<Self>> {
        match entry {
            EntryData::F32(v) => Some(v.clone()),
            _ => None,
        }
    }
}

impl CheckpointElement for f64 {
    fn pack(data: &[Self]) -> EntryData {
        EntryData::F64(data.to_vec())
    }

    fn unpack(entry: &EntryData) -> Option<Vec<Self>> {
        match entry {
            EntryData::F64(v) => Some(v.clone()),
            _ => None,
        }
    }
}

impl Checkpoint {
    pub fn new(config_text: impl Into<String>) -> Self {
        Checkpoint { config_text: config_text.into(), entries: Vec::new() }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn push_tensor<E: CheckpointElement>(&mut self, name: &str, tensor: &Tensor<E>) {
        self.push_entry(name, Entry { dims: tensor.shape().to_vec(), data: E::pack(tensor.data()) });
    }

    pub fn push_u64s(&mut self, name: &str, values: &[u64]) {
        self.push_entry(
            name,
            Entry { dims: vec![values.len()], data: EntryData::U64(values.to_vec()) },
        );
    }

    pub fn push_entry(&mut self, name: &str, entry: Entry) {
        debug_assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate checkpoint entry {name}"
        );
        self.entries.push((name.to_string(), entry));
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor<E: CheckpointElement>(&self, name: &str) -> Result<Tensor<E>> {
        let entry = self
            .entry(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        let data = E::unpack(&entry.data)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?} has a different dtype")))?;
        Tensor::new(entry.dims.clone(), data)
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match self.entry(name) {
            Some(Entry { data: EntryData::U64(v), .. }) => Ok(v.clone()),
            Some(_) => Err(Error::Checkpoint(format!("entry {name:?} is not u64"))),
            None => Err(Error::Checkpoint(format!("missing entry {name:?}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = self.config_text.as_bytes();
        bytes.extend_from_slice(&(config.len() as u32).to_le_bytes());
        bytes.extend_from_slice(config);
        bytes.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(entry.dims.len() as u32).to_le_bytes());
            for &d in &entry.dims {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            bytes.push(entry.data.tag());
            match &entry.data {
                EntryData::F32(v) => {
                    for x in v {
                        bytes.extend_from_slice(&x.to_le_bytes());
                    }
                }
                EntryData::F64(v) => {
                    for x in v {
                        bytes.extend_from_slice(&x.to_le_bytes());
                    }
                }
                EntryData::U64(v) => {
                    for x in v {
                        bytes.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 {
            return Err(fail("file too short for a checkpoint"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {computed:08x} — refusing to load"
            )));
        }
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            let end = cursor
                .checked_add(n)
                .filter(|&e| e <= body.len())
                .ok_or_else(|| fail("truncated checkpoint body"))?;
            let slice = &body[*cursor..end];
            *cursor = end;
            Ok(slice)
        };
        let take_u32 = |cursor: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(cursor, 4)?.try_into().unwrap()))
        };

        if take(&mut cursor, 4)? != CHECKPOINT_MAGIC {
            return Err(fail("bad magic; not a checkpoint file"));
        }
        let version = take_u32(&mut cursor)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file is v{version}, this build reads v{CHECKPOINT_VERSION}"
            )));
        }
        let config_len = take_u32(&mut cursor)? as usize;
        let config_text = std::str::from_utf8(take(&mut cursor, config_len)?)
            .map_err(|_| fail("config snapshot is not UTF-8"))?
            .to_string();
        let count = take_u32(&mut cursor)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = take_u32(&mut cursor)? as usize;
            let name = std::str::from_utf8(take(&mut cursor, name_len)?)
                .map_err(|_| fail("tensor name is not UTF-8"))?
                .to_string();
            let rank = take_u32(&mut cursor)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(take_u32(&mut cursor)? as usize);
            }
            let numel: usize = dims.iter().product();
            let tag = take(&mut cursor, 1)?[0];
            let data = match tag {
                0 => EntryData::F32(
                    take(&mut cursor, 4 * numel)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => EntryData::F64(
                    take(&mut cursor, 8 * numel)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => EntryData::U64(
                    take(&mut cursor, 8 * numel)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => {
                    return Err(Error::Checkpoint(format!("unknown dtype tag {other}")));
                }
            };
            entries.push((name, Entry { dims, data }));
        }
        if cursor != body.len() {
            return Err(fail("trailing bytes after the tensor table"));
        }
        Ok(Checkpoint { config_text, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let ctx = || format!("writing {}", path.display());
        let tmp = path.with_extension("ckpt.tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
        file.write_all(&bytes).map_err(|e| Error::io(ctx(), e))?;
        file.sync_all().map_err(|e| Error::io(ctx(), e))?;
        drop(file);
        fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
