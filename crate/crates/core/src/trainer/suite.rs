//! Sampling from trained models and the metric-suite dispatcher.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::backbone::Model;
use crate::control_branch::ControlModel;
use crate::diffusion::{outpaint_sample, sample, DiffusionSchedule};
use crate::evaluation::{
    beat_align, corpus_hash, diversity, extract_motion_beats, face_l2, fid, mm_dist, r_precision_topk, FeatureCloud,
    MetricReport, Provenance, Region, RetrievalEmbedder, DEFAULT_BEAT_SIGMA, DEFAULT_PAIRS,
};
use crate::motion_repr::MotionSequence;
use crate::topology::BodyPartLayout;
use crate::{Error, Result};

/// Sequences denoised together per reverse step.
pub const SAMPLE_CHUNK: usize = 8;
/// Speed floor for the motion-beat heuristic.
pub const BEAT_SPEED_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Fid,
    FidHands,
    FidBody,
    Diversity,
    RPrecision,
    MmDist,
    BeatAlign,
    FaceL2,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Fid,
        Metric::FidHands,
        Metric::FidBody,
        Metric::Diversity,
        Metric::RPrecision,
        Metric::MmDist,
        Metric::BeatAlign,
        Metric::FaceL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Fid => "fid",
            Metric::FidHands => "fid-hands",
            Metric::FidBody => "fid-body",
            Metric::Diversity => "diversity",
            Metric::RPrecision => "r-precision",
            Metric::MmDist => "mm-dist",
            Metric::BeatAlign => "beat-align",
            Metric::FaceL2 => "face-l2",
        }
    }

    pub fn needs_embedder(self) -> bool {
        !matches!(self, Metric::BeatAlign | Metric::FaceL2)
    }

    /// Parses a comma-separated list; `all` expands to every metric.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if tok == "all" {
                out.extend(Metric::ALL);
            } else {
                out.push(tok.parse()?);
            }
        }
        if out.is_empty() {
            return Err(Error::config("empty metric list"));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('_', "-");
        let alias = match s.as_str() {
            "fid-h" => "fid-hands",
            "fid-b" => "fid-body",
            "top-k" | "r-prec" => "r-precision",
            "mm" => "mm-dist",
            "beat" => "beat-align",
            other => other,
        };
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| Error::config(format!("unknown metric {s:?}")))
    }
}

/// A stage-1 model alone or with a stage-2 branch.
#[derive(Debug, Clone, Copy)]
pub enum Generator<'a> {
    Backbone(&'a Model),
    Controlled(&'a Model, &'a ControlModel),
}

impl Generator<'_> {
    pub fn model(&self) -> &Model {
        match self {
            Generator::Backbone(m) | Generator::Controlled(m, _) => m,
        }
    }

    fn denoise(&self, xs: &Mat, frames: usize, ts: &[usize], texts: &[Mat], tracks: &[Mat], steps: usize) -> Result<Mat> {
        match self {
            Generator::Backbone(m) => m.denoise_batch(xs, frames, ts, texts, steps),
            Generator::Controlled(m, b) => b.denoise_batch(m, xs, frames, ts, texts, tracks, steps),
        }
    }
}

fn tracks_for(gen: &Generator, tracks: Option<&[Mat]>, n: usize) -> Result<Vec<Mat>> {
    match (gen, tracks) {
        (Generator::Backbone(_), _) => Ok(Vec::new()),
        (Generator::Controlled(..), Some(t)) if t.len() == n => Ok(t.to_vec()),
        (Generator::Controlled(..), _) => Err(Error::InvalidArgument("controlled sampling needs one track per text".into())),
    }
}

/// Samples one `frames`-long sequence per text. Sequence `i` falls in chunk
/// `i / SAMPLE_CHUNK`, whose noise stream is seeded with `seed + chunk`, so
/// two generators given the same arguments start from the same noise.
pub fn generate(
    gen: Generator,
    texts: &[Mat],
    tracks: Option<&[Mat]>,
    frames: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Vec<Mat>> {
    let tracks = tracks_for(&gen, tracks, texts.len())?;
    let width = gen.model().layout.width;
    let steps = sched.steps();
    let mut out = Vec::with_capacity(texts.len());
    for (c, chunk) in texts.chunks(SAMPLE_CHUNK).enumerate() {
        let lo = c * SAMPLE_CHUNK;
        let tr = if tracks.is_empty() { &[][..] } else { &tracks[lo..lo + chunk.len()] };
        let b = chunk.len();
        let mut den = |x: &Mat, t: usize| gen.denoise(x, frames, &vec![t; b], chunk, tr, steps);
        let x = sample(&mut den, (b * frames, width), sched, seed.wrapping_add(c as u64))?;
        for i in 0..b {
            out.push(x.slice(ndarray::s![i * frames..(i + 1) * frames, ..]).to_owned());
        }
    }
    Ok(out)
}

/// Long-sequence sampling for one text by overlapping windows. The track,
/// when given, is cut per window.
pub fn generate_long(
    gen: Generator,
    text: &Mat,
    track: Option<&Mat>,
    total: usize,
    window: usize,
    overlap: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Mat> {
    let stride = window - overlap.min(window);
    let steps = sched.steps();
    let width = gen.model().layout.width;
    if matches!(gen, Generator::Controlled(..)) && track.is_none() {
        return Err(Error::InvalidArgument("controlled sampling needs a track".into()));
    }
    let mut den = |x: &Mat, t: usize, k: usize| {
        let tracks: Vec<Mat> = match track {
            Some(tr) => {
                let lo = (k * stride).min(tr.nrows());
                let hi = (lo + window).min(tr.nrows());
                vec![tr.slice(ndarray::s![lo..hi, ..]).to_owned()]
            }
            None => Vec::new(),
        };
        gen.denoise(x, window, &[t], std::slice::from_ref(text), &tracks, steps)
    };
    let out = outpaint_sample(&mut den, total, window, overlap, width, sched, seed)?;
    Ok(out.slice(ndarray::s![..total, ..]).to_owned())
}

/// Audio beats of a condition track: strict local maxima of its first
/// channel (beat phase for music, articulation energy for speech).
pub fn condition_beats(track: &Mat) -> Vec<f64> {
    let c = track.column(0);
    (1..c.len().saturating_sub(1))
        .filter(|&i| c[i] > c[i - 1] && c[i] >= c[i + 1])
        .map(|i| i as f64)
        .collect()
}

/// Everything the dispatcher needs besides the embedder.
#[derive(Debug, Clone)]
pub struct SuiteInputs {
    pub generated: Vec<Mat>,
    pub reference: Vec<MotionSequence>,
    pub captions: Vec<String>,
    /// Per-item audio beats for beat alignment.
    pub audio_beats: Option<Vec<Vec<f64>>>,
    pub parts: BodyPartLayout,
}

fn embed_cloud(e: &RetrievalEmbedder, motions: &[Mat], parts: &BodyPartLayout, region: Option<Region>, p: Provenance) -> Result<FeatureCloud> {
    let data = match region {
        Some(r) => e.embed_region(motions, parts, r)?,
        None => e.embed_motions(motions)?,
    };
    let cloud = FeatureCloud::new(data, p);
    Ok(match region {
        Some(r) => cloud.with_region(r),
        None => cloud,
    })
}

/// Computes `metrics` on already generated motions.
pub fn evaluate_motions(
    inputs: &SuiteInputs,
    embedder: Option<&RetrievalEmbedder>,
    metrics: &[Metric],
    seed: u64,
    config: serde_json::Value,
) -> Result<MetricReport> {
    let n = inputs.reference.len();
    if inputs.generated.len() != n || inputs.captions.len() != n {
        return Err(Error::shape("generated, reference and captions differ in length"));
    }
    let reference: Vec<Mat> = inputs.reference.iter().map(|s| s.to_f64()).collect();
    let mut report = MetricReport::new(config, seed, corpus_hash(&reference, &inputs.captions));
    let need = metrics.iter().any(|m| m.needs_embedder());
    let emb = match (need, embedder) {
        (true, None) => return Err(Error::Dependency("embedding metrics need a trained retrieval embedder".into())),
        (_, e) => e,
    };
    let mut gen_cloud = None;
    let mut text_emb = None;
    for &m in metrics {
        match m {
            Metric::Fid | Metric::FidHands | Metric::FidBody => {
                let e = emb.expect("checked");
                let region = match m {
                    Metric::FidHands => Some(Region::Hands),
                    Metric::FidBody => Some(Region::WholeBody),
                    _ => None,
                };
                let a = embed_cloud(e, &inputs.generated, &inputs.parts, region, Provenance::Generated)?;
                let b = embed_cloud(e, &reference, &inputs.parts, region, Provenance::GroundTruth)?;
                report.push(m.name(), fid(&a, &b)?);
            }
            Metric::Diversity | Metric::RPrecision | Metric::MmDist => {
                let e = emb.expect("checked");
                if gen_cloud.is_none() {
                    gen_cloud = Some(e.embed_motions(&inputs.generated)?);
                    let caps: Vec<&str> = inputs.captions.iter().map(String::as_str).collect();
                    text_emb = Some(e.embed_texts(&caps)?);
                }
                let (g, t) = (gen_cloud.as_ref().unwrap(), text_emb.as_ref().unwrap());
                match m {
                    Metric::Diversity => {
                        let cloud = FeatureCloud::new(g.clone(), Provenance::Generated);
                        report.push(m.name(), diversity(&cloud, DEFAULT_PAIRS, seed)?);
                    }
                    Metric::RPrecision => {
                        for (k, v) in r_precision_topk(g, t, 3, seed)?.into_iter().enumerate() {
                            report.push(&format!("r-precision-top{}", k + 1), v);
                        }
                    }
                    _ => report.push(m.name(), mm_dist(g, t)?),
                }
            }
            Metric::BeatAlign => {
                let beats = inputs
                    .audio_beats
                    .as_ref()
                    .ok_or_else(|| Error::UndefinedMetric("beat alignment needs audio beats".into()))?;
                let mut scores = Vec::new();
                for (g, (r, a)) in inputs.generated.iter().zip(inputs.reference.iter().zip(beats)) {
                    let seq = MotionSequence::from_f64(r.layout.clone(), r.fps, g)?;
                    let mb = extract_motion_beats(&seq, BEAT_SPEED_FLOOR);
                    if !mb.is_empty() && !a.is_empty() {
                        scores.push(beat_align(&mb, a, DEFAULT_BEAT_SIGMA)?);
                    }
                }
                if scores.is_empty() {
                    return Err(Error::UndefinedMetric("no item has both motion and audio beats".into()));
                }
                report.push(m.name(), scores.iter().sum::<f64>() / scores.len() as f64);
            }
            Metric::FaceL2 => {
                let mut total = 0.0;
                for (g, r) in inputs.generated.iter().zip(&inputs.reference) {
                    let seq = MotionSequence::from_f64(r.layout.clone(), r.fps, g)?;
                    total += face_l2(&seq, r)?;
                }
                report.push(m.name(), total / n.max(1) as f64);
            }
        }
    }
    Ok(report)
}

/// Sampling settings recorded in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    pub frames: usize,
    pub metrics: Vec<Metric>,
}

/// Generates one sample per corpus item (text and, for a controlled
/// generator, its track), evaluates `metrics` against the corpus and writes
/// the report to `out` when given.
pub fn evaluate_suite(
    gen: Generator,
    corpus: &crate::trainer::LoadedCorpus,
    embedder: Option<&RetrievalEmbedder>,
    options: &SuiteOptions,
    sched: &DiffusionSchedule,
    out: Option<&Path>,
) -> Result<MetricReport> {
    if options.metrics.iter().any(|m| m.needs_embedder()) && embedder.is_none() {
        return Err(Error::Dependency("embedding metrics need a trained retrieval embedder".into()));
    }
    let cfg = &gen.model().config;
    let text_emb = crate::conditioning::HashEmbedder::new(cfg.text_dim, crate::conditioning::DEFAULT_MAX_TOKENS);
    let items = corpus.items(&text_emb)?;
    let texts: Vec<Mat> = items.iter().map(|i| i.text.clone()).collect();
    let tracks: Option<Vec<Mat>> = items.iter().map(|i| i.track.clone()).collect();
    let generated = generate(gen, &texts, tracks.as_deref(), options.frames, sched, options.seed)?;
    let reference: Vec<MotionSequence> = corpus
        .motions
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.data = m.data.slice(ndarray::s![..options.frames.min(m.frames()), ..]).to_owned();
            m
        })
        .collect();
    let audio_beats = tracks.as_ref().map(|t| t.iter().map(condition_beats).collect());
    let inputs = SuiteInputs {
        generated,
        reference,
        captions: corpus.captions.clone(),
        audio_beats,
        parts: gen.model().layout.clone(),
    };
    let config = serde_json::json!({
        "options": options,
        "model": cfg,
        "controlled": matches!(gen, Generator::Controlled(..)),
        "diffusion_steps": sched.steps(),
    });
    let report = evaluate_motions(&inputs, embedder, &options.metrics, options.seed, config)?;
    if let Some(p) = out {
        report.write(p)?;
    }
    Ok(report)
}
