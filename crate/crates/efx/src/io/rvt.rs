//! Raw video container: `RVT1` magic, u32 LE `T,H,W,C`, then f32 LE
//! values in frame-major `T,H,W,C` order. A bespoke lossless format —
//! bit-exact round-trip tests rule out encoded video.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

pub const RVT_MAGIC: &[u8; 4] = b"RVT1";
pub const RVT_HEADER_BYTES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RvtHeader {
    pub t: u32,
    pub h: u32,
    pub w: u32,
    pub c: u32,
}

impl RvtHeader {
    pub fn payload_values(&self) -> usize {
        self.t as usize * self.h as usize * self.w as usize * self.c as usize
    }

    pub fn file_bytes(&self) -> usize {
        RVT_HEADER_BYTES + 4 * self.payload_values()
    }
}

/// Serializes `(C, H, W)` frames. Values are clamped to `[0, 1]` and
/// stored as f32, the container's element type.
pub fn rvt_bytes<E: Element>(frames: &[Tensor<E>]) -> Result<Vec<u8>> {
    if frames.is_empty() {
        return Err(Error::contract("rvt_write", "need at least one frame"));
    }
    let shape = frames[0].shape();
    if shape.len() != 3 {
        return Err(Error::contract(
            "rvt_write",
            format!("frames must be (C, H, W), got {shape:?}"),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut bytes = Vec::with_capacity(RVT_HEADER_BYTES + 4 * frames.len() * c * h * w);
    bytes.extend_from_slice(RVT_MAGIC);
    for dim in [frames.len(), h, w, c] {
        let v = u32::try_from(dim)
            .map_err(|_| Error::contract("rvt_write", format!("dimension {dim} exceeds u32")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for frame in frames {
        if frame.shape() != shape {
            return Err(Error::contract("rvt_write", "frame shape mismatch"));
        }
        // CHW -> HWC.
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = Element::to_f64(frame.data()[ch * h * w + y * w + x]);
                    bytes.extend_from_slice(&(v.clamp(0.0, 1.0) as f32).to_le_bytes());
                }
            }
        }
    }
    Ok(bytes)
}

pub fn write_rvt<E: Element>(path: &Path, frames: &[Tensor<E>]) -> Result<()> {
    let bytes = rvt_bytes(frames)?;
    let ctx = || format!("writing {}", path.display());
    let tmp = path.with_extension("rvt.tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(ctx(), e))?;
    file.sync_all().map_err(|e| Error::io(ctx(), e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

pub fn parse_rvt_header(bytes: &[u8]) -> Result<RvtHeader> {
    if bytes.len() < RVT_HEADER_BYTES {
        return Err(Error::contract("rvt_read", "file shorter than the header"));
    }
    if &bytes[0..4] != RVT_MAGIC {
        return Err(Error::contract("rvt_read", "bad magic; not an RVT1 file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    Ok(RvtHeader { t: word(0), h: word(1), w: word(2), c: word(3) })
}

pub fn read_rvt_header(path: &Path) -> Result<RvtHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_rvt_header(&bytes)
}

/// Deserializes into `(C, H, W)` frames.
pub fn read_rvt<E: Element>(path: &Path) -> Result<Vec<Tensor<E>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    rvt_from_bytes(&bytes)
}

pub fn rvt_from_bytes<E: Element>(bytes: &[u8]) -> Result<Vec<Tensor<E>>> {
    let header = parse_rvt_header(bytes)?;
    if bytes.len() != header.file_bytes() {
        return Err(Error::contract(
            "rvt_read",
            format!("expected {} bytes, file has {}", header.file_bytes(), bytes.len()),
        ));
    }
    let (t, h, w, c) =
        (header.t as usize, header.h as usize, header.w as usize, header.c as usize);
    let mut frames = Vec::with_capacity(t);
    let mut offset = RVT_HEADER_BYTES;
    for _ in 0..t {
        let mut data = vec![E::from_f64(0.0); c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
                    offset += 4;
                    data[ch * h * w + y * w + x] = E::from_f64(v as f64);
                }
            }
        }
        frames.push(Tensor::new(vec![c, h, w], data)?);
    }
    Ok(frames)
}
