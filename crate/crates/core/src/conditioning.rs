//! Condition tracks (speech prosody, music features), their `MCFT` files,
//! windowing into aligned training segments, pseudo-captions and the hashed
//! toy text embedder.
//!
//! `MCFT` layout, little-endian:
//!
//! ```text
//! 0   4  magic "MCFT"
//! 4   1  kind (0 speech, 1 music)
//! 5   4  D_c (u32)
//! 9   4  T_c (u32)
//! 13  4  frame_rate (u32)
//! 17  4  source_rate (u32)
//! 21  4  hop (u32)
//! 25  …  f32 features, row-major T_c × D_c
//! ```

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::motion_repr::MotionSequence;
use crate::{Error, Result};

pub const MCFT_MAGIC: &[u8; 4] = b"MCFT";
pub const MCFT_HEADER_LEN: usize = 25;
pub const SPEECH_DIM: usize = 2;
pub const MUSIC_DIM: usize = 35;
pub const SOURCE_RATE: u32 = 76_800;
pub const HOP: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Speech,
    Music,
}

impl ConditionKind {
    pub fn dim(self) -> usize {
        match self {
            Self::Speech => SPEECH_DIM,
            Self::Music => MUSIC_DIM,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Self::Speech => 0,
            Self::Music => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::Speech),
            1 => Ok(Self::Music),
            k => Err(Error::Ingestion(format!("unknown condition kind byte {k}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Speech => "speech",
            Self::Music => "music",
        }
    }
}

impl std::str::FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(Self::Speech),
            "music" => Ok(Self::Music),
            _ => Err(Error::config(format!("unknown condition kind {s:?} (speech|music)"))),
        }
    }
}

/// A frame-aligned low-level control signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTrack {
    pub kind: ConditionKind,
    pub features: Array2<f32>,
    pub frame_rate: u32,
    pub source_rate: u32,
    pub hop: u32,
}

impl ConditionTrack {
    pub fn new(kind: ConditionKind, features: Array2<f32>, frame_rate: u32) -> Result<Self> {
        let track = Self {
            kind,
            features,
            frame_rate,
            source_rate: SOURCE_RATE,
            hop: HOP,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, d) = self.features.dim();
        if d != self.kind.dim() {
            return Err(Error::Ingestion(format!(
                "{} track must have {} feature channels, found {d}",
                self.kind.name(),
                self.kind.dim()
            )));
        }
        if t == 0 {
            return Err(Error::Ingestion("condition track has no frames".into()));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Ingestion(format!(
                "non-finite feature at frame {}, channel {}",
                i / d,
                i % d
            )));
        }
        if self.frame_rate == 0 {
            return Err(Error::Ingestion("frame rate must be positive".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn to_f64(&self) -> Mat {
        self.features.mapv(|v| v as f64)
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            features: self.features.slice(s![range, ..]).to_owned(),
            ..self.clone()
        }
    }
}

pub fn encode_track(track: &ConditionTrack) -> Vec<u8> {
    let (t, d) = track.features.dim();
    let mut out = Vec::with_capacity(MCFT_HEADER_LEN + 4 * t * d);
    out.extend_from_slice(MCFT_MAGIC);
    out.push(track.kind.code());
    for v in [d as u32, t as u32, track.frame_rate, track.source_rate, track.hop] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in track.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_track(bytes: &[u8]) -> Result<ConditionTrack> {
    if bytes.len() < MCFT_HEADER_LEN {
        return Err(Error::Ingestion(format!("feature file truncated at {} bytes", bytes.len())));
    }
    if &bytes[..4] != MCFT_MAGIC {
        return Err(Error::Ingestion("bad magic, expected \"MCFT\"".into()));
    }
    let kind = ConditionKind::from_code(bytes[4])?;
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (d, t) = (u(5) as usize, u(9) as usize);
    if d != kind.dim() {
        return Err(Error::Ingestion(format!(
            "declared {} track with {d} channels, expected {}",
            kind.name(),
            kind.dim()
        )));
    }
    let expected = MCFT_HEADER_LEN + 4 * t * d;
    if bytes.len() != expected {
        return Err(Error::Ingestion(format!(
            "feature payload is {} bytes, header implies {}",
            bytes.len() - MCFT_HEADER_LEN,
            expected - MCFT_HEADER_LEN
        )));
    }
    let values: Vec<f32> = bytes[MCFT_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let track = ConditionTrack {
        kind,
        features: Array2::from_shape_vec((t, d), values).expect("size checked"),
        frame_rate: u(13),
        source_rate: u(17),
        hop: u(21),
    };
    track.validate()?;
    Ok(track)
}

pub fn save_feature_track(track: &ConditionTrack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_track(track)).map_err(|e| Error::io(path, e))
}

pub fn load_feature_track(path: impl AsRef<Path>) -> Result<ConditionTrack> {
    let path = path.as_ref();
    decode_track(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Window ranges `[kS, kS+W)` fully inside `len` frames.
pub fn segment_ranges(len: usize, window: usize, stride: usize) -> Vec<Range<usize>> {
    if window == 0 || stride == 0 || len < window {
        return Vec::new();
    }
    (0..=(len - window) / stride).map(|k| k * stride..k * stride + window).collect()
}

/// Cuts a clip and its condition track into aligned windows; incomplete tails
/// are dropped.
pub fn segment_track(
    motion: &MotionSequence,
    track: &ConditionTrack,
    window: usize,
    stride: usize,
) -> Vec<(MotionSequence, ConditionTrack)> {
    let len = track.frames().min(motion.frames());
    segment_ranges(len, window, stride)
        .into_iter()
        .map(|r| {
            let mut m = motion.clone();
            m.data = motion.data.slice(s![r.clone(), ..]).to_owned();
            (m, track.slice(r))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum CaptionSpec {
    S2g { content: String },
    M2d { genre: String, style: String, song: String },
}

pub fn make_pseudo_caption(spec: &CaptionSpec) -> Result<String> {
    let need = |name: &str, v: &str| {
        if v.trim().is_empty() {
            Err(Error::Template(format!("slot {name:?} is empty")))
        } else {
            Ok(())
        }
    };
    match spec {
        CaptionSpec::S2g { content } => {
            need("content", content)?;
            Ok(format!("A person is giving a speech, and the content is {content}"))
        }
        CaptionSpec::M2d { genre, style, song } => {
            need("genre", genre)?;
            need("style", style)?;
            need("song", song)?;
            Ok(format!(
                "A dancer is performing a {genre} in the {style} style to the rhythm of the {song}"
            ))
        }
    }
}

/// Maps a caption to `F_t × D_t` token rows.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, caption: &str) -> Mat;
}

/// Whitespace tokens hashed to fixed pseudo-random unit vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

pub const DEFAULT_MAX_TOKENS: usize = 32;

impl HashEmbedder {
    pub fn new(dim: usize, max_tokens: usize) -> Self {
        Self { dim, max_tokens, seed: 0 }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &str) -> Mat {
        let tokens: Vec<&str> = caption.split_whitespace().take(self.max_tokens).collect();
        let mut out = Mat::zeros((tokens.len(), self.dim));
        for (i, tok) in tokens.iter().enumerate() {
            out.row_mut(i).assign(&ndarray::Array1::from(self.token_vector(tok)));
        }
        out
    }
}

pub fn embed_text(caption: &str, dim: usize, max_tokens: usize) -> Mat {
    HashEmbedder::new(dim, max_tokens).embed(caption)
}
