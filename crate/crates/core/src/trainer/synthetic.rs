//! Parametric synthetic corpus: sinusoidal whole-body motions with
//! archetype-specific joint patterns, captions naming their factors, and
//! condition tracks computed from the clean motion.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::conditioning::{load_feature_track, save_feature_track, ConditionKind, ConditionTrack, HashEmbedder, TextEmbedder};
use crate::motion_repr::{load_sequence, save_sequence, ChannelLayout, MotionSequence, DEFAULT_JOINTS};
use crate::{Error, Result};

const VERBS: [&str; 16] = [
    "waves", "jumps", "kicks", "spins", "claps", "bows", "stretches", "punches", "marches", "sways", "crouches",
    "reaches", "shrugs", "nods", "twists", "skips",
];
const TEMPO_WORDS: [&str; 8] = ["sluggishly", "slowly", "gently", "steadily", "briskly", "quickly", "rapidly", "frantically"];
const AMPLITUDE_WORDS: [&str; 8] = ["barely", "softly", "lightly", "moderately", "firmly", "strongly", "widely", "wildly"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionStyle {
    /// Captions name every factor of the motion.
    Descriptive,
    /// Every caption is the same sentence.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub archetypes: usize,
    pub tempos: usize,
    pub amplitudes: usize,
    pub count: usize,
    pub frames: usize,
    pub fps: u32,
    pub noise: f64,
    pub seed: u64,
    pub active_fraction: f64,
    pub condition: Option<ConditionKind>,
    pub captions: CaptionStyle,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            archetypes: 8,
            tempos: 1,
            amplitudes: 1,
            count: 64,
            frames: 32,
            fps: 20,
            noise: 0.02,
            seed: 0,
            active_fraction: 0.35,
            condition: None,
            captions: CaptionStyle::Descriptive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub motion: MotionSequence,
    pub caption: String,
    pub condition: Option<ConditionTrack>,
    pub archetype: usize,
    pub tempo: usize,
    pub amplitude: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub samples: Vec<SyntheticSample>,
}

/// Per-channel pattern of one archetype.
#[derive(Debug, Clone, PartialEq)]
pub struct Archetype {
    pub channels: Vec<usize>,
    pub weight: Vec<f64>,
    pub phase: Vec<f64>,
    pub harmonic: Vec<f64>,
    pub offset: Vec<f64>,
}

/// Animated channels: root and joint rotations, expression and jaw.
pub fn animated_channels(layout: &ChannelLayout) -> Vec<usize> {
    layout
        .root_rot()
        .chain(layout.joint_rots())
        .chain(layout.face_expr())
        .chain(layout.jaw_rot())
        .collect()
}

/// Archetypes depend only on their index and the active fraction.
pub fn archetype(index: usize, layout: &ChannelLayout, active_fraction: f64) -> Archetype {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA2C7_0000 + index as u64);
    let mut a = Archetype { channels: Vec::new(), weight: Vec::new(), phase: Vec::new(), harmonic: Vec::new(), offset: Vec::new() };
    for c in animated_channels(layout) {
        if rng.random::<f64>() < active_fraction {
            a.channels.push(c);
            a.weight.push(rng.random_range(0.4..1.0));
            a.phase.push(rng.random_range(0.0..2.0 * PI));
            a.harmonic.push(if rng.random::<f64>() < 0.3 { 2.0 } else { 1.0 });
            a.offset.push(rng.random_range(-0.3..0.3));
        }
    }
    a
}

fn level(k: usize, n: usize, lo: f64, hi: f64, single: f64) -> f64 {
    if n <= 1 {
        single
    } else {
        lo + (hi - lo) * k as f64 / (n - 1) as f64
    }
}

pub fn tempo_hz(k: usize, n: usize) -> f64 {
    level(k, n, 0.6, 2.0, 1.2)
}

pub fn amplitude_scale(k: usize, n: usize) -> f64 {
    level(k, n, 0.35, 1.0, 0.7)
}

fn word(words: &[&str], k: usize, n: usize, fallback: &str) -> String {
    if n <= words.len() {
        // Spread the chosen words across the vocabulary.
        let idx = if n <= 1 { 0 } else { k * (words.len() - 1) / (n - 1) };
        words[idx].to_string()
    } else {
        format!("{fallback} {k}")
    }
}

pub fn caption_for(spec: &SyntheticSpec, a: usize, t: usize, m: usize) -> String {
    if spec.captions == CaptionStyle::Generic {
        return "a person moves".to_string();
    }
    let verb = if spec.archetypes <= VERBS.len() { VERBS[a].to_string() } else { format!("performs motion {a}") };
    let mut s = format!("a person {verb}");
    if spec.tempos > 1 {
        s.push(' ');
        s.push_str(&word(&TEMPO_WORDS, t, spec.tempos, "at tempo"));
    }
    if spec.amplitudes > 1 {
        s.push_str(" and ");
        s.push_str(&word(&AMPLITUDE_WORDS, m, spec.amplitudes, "with amplitude"));
    }
    s
}

/// Builds the corpus. Factor combinations are drawn without repetition
/// until every combination has been used once.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.archetypes == 0 || spec.tempos == 0 || spec.amplitudes == 0 {
        return Err(Error::InvalidArgument("factor counts must be at least 1".into()));
    }
    if spec.frames < 2 || spec.fps == 0 {
        return Err(Error::InvalidArgument("need at least two frames and a positive fps".into()));
    }
    let layout = ChannelLayout::with_joint_count(DEFAULT_JOINTS)?;
    let archetypes: Vec<Archetype> = (0..spec.archetypes).map(|a| archetype(a, &layout, spec.active_fraction)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let combos = spec.archetypes * spec.tempos * spec.amplitudes;
    let mut pool: Vec<usize> = Vec::new();
    let mut samples = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        if pool.is_empty() {
            // Round-robin over archetypes, seeded order within each.
            let mut order: Vec<usize> = (0..combos).collect();
            order.shuffle(&mut rng);
            let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); spec.archetypes];
            for c in order {
                buckets[c % spec.archetypes].push(c);
            }
            let per = combos / spec.archetypes;
            pool = (0..per)
                .rev()
                .flat_map(|r| buckets.iter().rev().map(move |b| b[r]))
                .collect();
        }
        let combo = pool.pop().expect("refilled above");
        let a = combo % spec.archetypes;
        let rest = combo / spec.archetypes;
        let (t, m) = (rest % spec.tempos, rest / spec.tempos);
        let shift = rng.random_range(0.0..2.0 * PI);
        let clean = render(&archetypes[a], &layout, spec, tempo_hz(t, spec.tempos), amplitude_scale(m, spec.amplitudes), shift);
        let mut noisy = clean.clone();
        if spec.noise > 0.0 {
            for &c in &archetypes[a].channels {
                for f in 0..spec.frames {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    noisy[[f, c]] += spec.noise * n;
                }
            }
        }
        let condition = match spec.condition {
            Some(kind) => Some(condition_track(kind, &clean, &layout, spec, tempo_hz(t, spec.tempos), shift)?),
            None => None,
        };
        samples.push(SyntheticSample {
            motion: MotionSequence::from_f64(layout.clone(), spec.fps, &noisy)?,
            caption: caption_for(spec, a, t, m),
            condition,
            archetype: a,
            tempo: t,
            amplitude: m,
        });
    }
    Ok(SyntheticCorpus { spec: spec.clone(), samples })
}

fn render(a: &Archetype, layout: &ChannelLayout, spec: &SyntheticSpec, hz: f64, amp: f64, shift: f64) -> Mat {
    let mut x = Mat::zeros((spec.frames, layout.width()));
    for (i, &c) in a.channels.iter().enumerate() {
        for f in 0..spec.frames {
            let tsec = f as f64 / spec.fps as f64;
            x[[f, c]] = a.offset[i] + amp * a.weight[i] * (2.0 * PI * hz * a.harmonic[i] * tsec + a.phase[i] + shift).sin();
        }
    }
    x
}

/// Music: a beat-phase channel followed by 34 smoothed joint-speed bands.
/// Speech: expression energy and mean expression value.
fn condition_track(
    kind: ConditionKind,
    clean: &Mat,
    layout: &ChannelLayout,
    spec: &SyntheticSpec,
    hz: f64,
    shift: f64,
) -> Result<ConditionTrack> {
    let frames = clean.nrows();
    let speed = |f: usize, c: usize| -> f64 {
        let (a, b) = if f == 0 { (0, 1) } else { (f - 1, f) };
        (clean[[b, c]] - clean[[a, c]]).abs() * spec.fps as f64
    };
    let dim = kind.dim();
    let mut raw = Mat::zeros((frames, dim));
    match kind {
        ConditionKind::Music => {
            let channels = animated_channels(layout);
            let bands = dim - 1;
            for f in 0..frames {
                raw[[f, 0]] = (2.0 * PI * hz * f as f64 / spec.fps as f64 + shift).cos();
                for k in 0..bands {
                    let lo = k * channels.len() / bands;
                    let hi = (k + 1) * channels.len() / bands;
                    let s: f64 = channels[lo..hi].iter().map(|&c| speed(f, c)).sum();
                    raw[[f, 1 + k]] = s / (hi - lo) as f64;
                }
            }
        }
        ConditionKind::Speech => {
            let face: Vec<usize> = layout.face_expr().chain(layout.jaw_rot()).collect();
            for f in 0..frames {
                raw[[f, 0]] = face.iter().map(|&c| speed(f, c)).sum::<f64>() / face.len() as f64;
                raw[[f, 1]] = layout.face_expr().map(|c| clean[[f, c]]).sum::<f64>() / layout.face_expr().len() as f64;
            }
        }
    }
    // Three-tap moving average along time.
    let mut feats = Array2::<f32>::zeros((frames, dim));
    for f in 0..frames {
        let lo = f.saturating_sub(1);
        let hi = (f + 1).min(frames - 1);
        for k in 0..dim {
            let s: f64 = (lo..=hi).map(|g| raw[[g, k]]).sum();
            feats[[f, k]] = (s / (hi - lo + 1) as f64) as f32;
        }
    }
    ConditionTrack::new(kind, feats, spec.fps)
}

/// One training item: motion rows, caption token rows and an optional
/// frame-aligned condition track, all in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub motion: Mat,
    pub caption: String,
    pub text: Mat,
    pub track: Option<Mat>,
}

pub fn items_from_parts(
    motions: &[MotionSequence],
    captions: &[String],
    tracks: &[Option<ConditionTrack>],
    embedder: &HashEmbedder,
) -> Result<Vec<TrainItem>> {
    if motions.len() != captions.len() || motions.len() != tracks.len() {
        return Err(Error::shape("motions, captions and tracks are not aligned"));
    }
    Ok(motions
        .iter()
        .zip(captions)
        .zip(tracks)
        .map(|((m, c), t)| TrainItem {
            motion: m.to_f64(),
            caption: c.clone(),
            text: embedder.embed(c),
            track: t.as_ref().map(|t| t.to_f64()),
        })
        .collect())
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn motions(&self) -> Vec<Mat> {
        self.samples.iter().map(|s| s.motion.to_f64()).collect()
    }

    pub fn captions(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.caption.clone()).collect()
    }

    pub fn items(&self, embedder: &HashEmbedder) -> Vec<TrainItem> {
        let motions: Vec<MotionSequence> = self.samples.iter().map(|s| s.motion.clone()).collect();
        let tracks: Vec<Option<ConditionTrack>> = self.samples.iter().map(|s| s.condition.clone()).collect();
        items_from_parts(&motions, &self.captions(), &tracks, embedder).expect("aligned by construction")
    }
}

/// Index file of a corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub entries: Vec<CorpusEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub motion: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

pub const CORPUS_INDEX: &str = "corpus.json";

/// Writes `motions/NNNN.mcmf`, `conditions/NNNN.mcft` and `corpus.json`.
pub fn save_corpus(corpus: &SyntheticCorpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["motions", "conditions"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        let motion = format!("motions/{i:04}.mcmf");
        save_sequence(&s.motion, dir.join(&motion))?;
        let condition = match &s.condition {
            Some(t) => {
                let name = format!("conditions/{i:04}.mcft");
                save_feature_track(t, dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(CorpusEntry { motion, caption: s.caption.clone(), condition });
    }
    let index = CorpusIndex { entries, spec: Some(corpus.spec.clone()) };
    let path = dir.join(CORPUS_INDEX);
    std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
}

/// A corpus read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub motions: Vec<MotionSequence>,
    pub captions: Vec<String>,
    pub tracks: Vec<Option<ConditionTrack>>,
}

impl LoadedCorpus {
    pub fn items(&self, embedder: &HashEmbedder) -> Result<Vec<TrainItem>> {
        items_from_parts(&self.motions, &self.captions, &self.tracks, embedder)
    }
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let dir = dir.as_ref();
    let path = dir.join(CORPUS_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CorpusIndex = serde_json::from_str(&text)?;
    let mut out = LoadedCorpus { motions: Vec::new(), captions: Vec::new(), tracks: Vec::new() };
    for e in index.entries {
        out.motions.push(load_sequence(dir.join(&e.motion))?);
        out.captions.push(e.caption);
        out.tracks.push(match e.condition {
            Some(c) => Some(load_feature_track(dir.join(c))?),
            None => None,
        });
    }
    Ok(out)
}
