//! `MCMF` motion files.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "MCMF"
//! 4       4           version (u32) = 1
//! 8       4           N joints (u32)
//! 12      4           F_m frames (u32)
//! 16      4           fps (u32)
//! 20      4           D_m channels (u32)
//! 24      4·F_m·D_m   f32 channel values, frame-major
//! ...     ⌈D_m/8⌉     validity bits, channel c at byte c/8 bit c%8 (1 = observed)
//! ```
//!
//! A JSON sidecar with the header fields is written next to the binary.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layout::{ChannelLayout, MotionSequence};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCMF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McmfHeader {
    pub magic: String,
    pub version: u32,
    pub joints: u32,
    pub frames: u32,
    pub fps: u32,
    pub channels: u32,
}

pub fn encode_sequence(seq: &MotionSequence) -> Vec<u8> {
    let (frames, width) = seq.data.dim();
    let mask_len = width.div_ceil(8);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * frames * width + mask_len);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        seq.layout.joints() as u32,
        frames as u32,
        seq.fps,
        width as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in seq.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut mask = vec![0u8; mask_len];
    for (c, &valid) in seq.validity.iter().enumerate() {
        if valid {
            mask[c / 8] |= 1 << (c % 8);
        }
    }
    out.extend_from_slice(&mask);
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated header: need 4 bytes at offset {offset}"),
        })
}

pub fn decode_header(bytes: &[u8]) -> Result<McmfHeader> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"MCMF\"".into(),
        });
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    Ok(McmfHeader {
        magic: "MCMF".into(),
        version,
        joints: read_u32(bytes, 8)?,
        frames: read_u32(bytes, 12)?,
        fps: read_u32(bytes, 16)?,
        channels: read_u32(bytes, 20)?,
    })
}

pub fn decode_sequence(bytes: &[u8]) -> Result<MotionSequence> {
    let h = decode_header(bytes)?;
    let layout = ChannelLayout::with_joint_count(h.joints as usize)?;
    let (frames, width) = (h.frames as usize, h.channels as usize);
    if width != layout.width() {
        return Err(Error::Format {
            offset: 20,
            message: format!(
                "channel count {width} inconsistent with {} joints (expected {})",
                h.joints,
                layout.width()
            ),
        });
    }
    let payload = 4 * frames * width;
    let mask_len = width.div_ceil(8);
    let expected = HEADER_LEN + payload + mask_len;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated file: {} of {expected} bytes", bytes.len()),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            message: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let values: Vec<f32> = bytes[HEADER_LEN..HEADER_LEN + payload]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((frames, width), values).expect("payload size checked");
    let mask = &bytes[HEADER_LEN + payload..];
    let validity = (0..width).map(|c| mask[c / 8] & (1 << (c % 8)) != 0).collect();
    MotionSequence::new(layout, h.fps, data, validity).map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })
}

pub fn header_of(seq: &MotionSequence) -> McmfHeader {
    McmfHeader {
        magic: "MCMF".into(),
        version: VERSION,
        joints: seq.layout.joints() as u32,
        frames: seq.frames() as u32,
        fps: seq.fps,
        channels: seq.width() as u32,
    }
}

/// Writes `path` and a `.json` sidecar with the header fields.
pub fn save_sequence(seq: &MotionSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_sequence(seq)).map_err(|e| Error::io(path, e))?;
    let sidecar = path.with_extension("json");
    let json = serde_json::to_string_pretty(&header_of(seq))?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes)
}
