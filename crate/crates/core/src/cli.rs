//! Command-line front end. `run` parses argv, dispatches to the library and
//! maps failures onto exit codes: 0 success, 1 usage, 2 data, 3 numeric.
//! Every error is printed on stderr as `error[<kind>]: <message>`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::checkpoint::{load_backbone, load_branch, load_retrieval, save_retrieval};
use crate::conditioning::{
    load_feature_track, segment_ranges, ConditionKind, ConditionTrack, HashEmbedder, TextEmbedder, DEFAULT_MAX_TOKENS,
};
use crate::diffusion::{make_linear_schedule, DiffusionSchedule};
use crate::evaluation::{
    corpus_hash, diversity, fid, train_retrieval, FeatureCloud, MetricReport, Provenance, RetrievalConfig, DEFAULT_PAIRS,
};
use crate::motion_repr::mcmf::{decode_header, MAGIC as MCMF_MAGIC};
use crate::motion_repr::{retarget_smplh_sequence, save_sequence, MotionSequence, Rot6D, SmplhFrame, Vec3};
use crate::topology::default_body_partition;
use crate::trainer::{
    condition_beats, evaluate_motions, generate, generate_long, load_corpus, make_synthetic_dataset, save_corpus,
    train_stage1, train_stage2, CaptionStyle, ExperimentDir, Generator, LoadedCorpus, Metric, SuiteInputs,
    SyntheticSpec, TrainConfig, CORPUS_INDEX,
};
use crate::backbone::{build_model, Model};
use crate::control_branch::ControlModel;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "wholebody", version, about = "Whole-body motion diffusion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an SMPL-H clip (JSON, axis-angle or rot6D) to an MCMF file.
    Convert {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic paired corpus directory.
    SynthData(SynthArgs),
    /// Stage-1 text-to-motion training.
    TrainStage1(TrainArgs),
    /// Stage-2 control-branch training against a stage-1 checkpoint.
    TrainStage2(TrainArgs),
    /// Train the retrieval embedder used by the embedding metrics.
    TrainRetrieval(RetrievalArgs),
    /// Sample fixed-length motions.
    Sample(SampleArgs),
    /// Sample a long motion by overlapping windows.
    Outpaint(OutpaintArgs),
    /// Compare two motion sets and write a metric report.
    Evaluate(EvaluateArgs),
    /// Print the headers of MCMF / MCFT / MCCK files.
    Inspect { files: Vec<PathBuf> },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML generator spec; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub archetypes: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// speech | music
    #[arg(long)]
    pub condition: Option<String>,
    /// Use the same caption for every item.
    #[arg(long)]
    pub generic_captions: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stage 2: the stage-1 backbone checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Cut corpus items into windows of this many frames.
    #[arg(long)]
    pub window: Option<u32>,
    #[arg(long)]
    pub stride: Option<u32>,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub latent_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub branch: Option<PathBuf>,
    /// Caption; repeat for several.
    #[arg(long = "text", required = true)]
    pub texts: Vec<String>,
    /// MCFT condition track(s), one per caption.
    #[arg(long = "condition")]
    pub conditions: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Reverse diffusion steps.
    #[arg(long, default_value_t = 1000)]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = 20)]
    pub fps: u32,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
}

#[derive(Debug, Args)]
pub struct OutpaintArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    /// Total frames to produce.
    #[arg(long)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub window: u32,
    #[arg(long, default_value_t = 16)]
    pub overlap: u32,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Comma-separated metric names or `all`.
    #[arg(long, default_value = "fid")]
    pub metrics: String,
    /// Generated motions (corpus directory or directory of .mcmf files).
    #[arg(long)]
    pub a: PathBuf,
    /// Reference motions.
    #[arg(long)]
    pub b: PathBuf,
    /// Retrieval checkpoint; without it FID and diversity use per-part
    /// channel statistics.
    #[arg(long)]
    pub embedder: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; defaults to stdout only.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::MissingArgument(_) | Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) | Error::Training { .. } => EXIT_NUMERIC,
        Error::Denoiser { source, .. } => exit_code(source),
        _ => EXIT_DATA,
    }
}

/// Stable machine-readable error kind.
pub fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::InvalidArgument(_) => "invalid-argument",
        Error::InvalidRotation(_) => "invalid-rotation",
        Error::DegenerateRotation(_) => "degenerate-rotation",
        Error::Mapping(_) => "mapping",
        Error::MissingArgument(_) => "missing-argument",
        Error::Layout(_) => "layout",
        Error::Format { .. } => "format",
        Error::Shape(_) => "shape",
        Error::Config(_) => "config",
        Error::Index { .. } => "index",
        Error::Denoiser { .. } => "denoiser",
        Error::Length(_) => "length",
        Error::State(_) => "state",
        Error::Ingestion(_) => "ingestion",
        Error::Template(_) => "template",
        Error::UndefinedMetric(_) => "undefined-metric",
        Error::InsufficientPool { .. } => "insufficient-pool",
        Error::Training { .. } => "training",
        Error::Dependency(_) => "dependency",
        Error::Compat(_) => "compat",
        Error::Numeric(_) => "numeric",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

/// Parses and runs `argv` (including the program name), returning the exit
/// code. Output goes to stdout, errors to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprintln!("error[usage]: {}", e.to_string().trim_end());
            return EXIT_USAGE;
        }
    };
    let flags: Vec<String> = argv.iter().skip(1).map(|s| s.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &flags) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {e}", error_kind(&e));
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, flags: &[String]) -> Result<()> {
    match cmd {
        Command::Convert { input, out } => convert(&input, &out),
        Command::SynthData(a) => synth_data(&a),
        Command::TrainStage1(a) => train(&a, 1, flags),
        Command::TrainStage2(a) => train(&a, 2, flags),
        Command::TrainRetrieval(a) => retrieval(&a),
        Command::Sample(a) => sample_cmd(&a, flags),
        Command::Outpaint(a) => outpaint_cmd(&a, flags),
        Command::Evaluate(a) => evaluate(&a, flags),
        Command::Inspect { files } => {
            if files.is_empty() {
                return Err(Error::MissingArgument("at least one file to inspect"));
            }
            for f in files {
                println!("{}", inspect(&f)?);
            }
            Ok(())
        }
    }
}

/// SMPL-H clip as accepted by `convert`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum SmplhClip {
    AxisAngle { fps: u32, frames: Vec<SmplhFrame> },
    Rot6d { fps: u32, frames: Vec<Rot6dFrame> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rot6dFrame {
    pub root_rot: [f64; 6],
    pub trans: Vec3,
    pub joints: Vec<(String, [f64; 6])>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn convert(input: &Path, out: &Path) -> Result<()> {
    let clip: SmplhClip = read_json(input)?;
    let (fps, frames) = match clip {
        SmplhClip::AxisAngle { fps, frames } => (fps, frames),
        SmplhClip::Rot6d { fps, frames } => {
            let conv = frames
                .iter()
                .map(|f| {
                    let joints: Vec<(String, Rot6D)> =
                        f.joints.iter().map(|(n, r)| (n.clone(), Rot6D::new(*r))).collect();
                    SmplhFrame::from_rot6d(&Rot6D::new(f.root_rot), f.trans, &joints)
                })
                .collect::<Result<Vec<_>>>()?;
            (fps, conv)
        }
    };
    if frames.is_empty() {
        return Err(Error::Ingestion("clip has no frames".into()));
    }
    let seq = retarget_smplh_sequence(&frames, fps)?;
    save_sequence(&seq, out)?;
    println!("wrote {} ({} frames, {} channels)", out.display(), seq.frames(), seq.width());
    Ok(())
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.count {
        spec.count = v;
    }
    if let Some(v) = a.archetypes {
        spec.archetypes = v;
    }
    if let Some(v) = a.frames {
        spec.frames = v;
    }
    if let Some(c) = &a.condition {
        spec.condition = Some(c.parse::<ConditionKind>()?);
    }
    if a.generic_captions {
        spec.captions = CaptionStyle::Generic;
    }
    let corpus = make_synthetic_dataset(&spec)?;
    save_corpus(&corpus, &a.out)?;
    println!("wrote {} items to {}", corpus.len(), a.out.display());
    Ok(())
}

/// Cuts every item (and its track) into `[kS, kS+W)` windows.
pub fn segment_corpus(corpus: &LoadedCorpus, window: usize, stride: usize) -> Result<LoadedCorpus> {
    if window == 0 || stride == 0 {
        return Err(Error::config("window and stride must be positive"));
    }
    let mut out = LoadedCorpus { motions: Vec::new(), captions: Vec::new(), tracks: Vec::new() };
    for ((m, c), t) in corpus.motions.iter().zip(&corpus.captions).zip(&corpus.tracks) {
        let len = t.as_ref().map_or(m.frames(), |t| t.frames().min(m.frames()));
        for r in segment_ranges(len, window, stride) {
            let mut seg = m.clone();
            seg.data = m.data.slice(ndarray::s![r.clone(), ..]).to_owned();
            out.motions.push(seg);
            out.captions.push(c.clone());
            out.tracks.push(t.as_ref().map(|t| t.slice(r.clone())));
        }
    }
    if out.motions.is_empty() {
        return Err(Error::Ingestion(format!("no item is at least {window} frames long")));
    }
    Ok(out)
}

fn load_train_config(path: Option<&Path>, stage: u8) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
    if path.is_none() {
        cfg.stage = stage;
    }
    if cfg.stage != stage {
        return Err(Error::config(format!("config is for stage {}, command is stage {stage}", cfg.stage)));
    }
    Ok(cfg)
}

fn train(a: &TrainArgs, stage: u8, flags: &[String]) -> Result<()> {
    let mut cfg = load_train_config(a.config.as_deref(), stage)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if stage == 2 {
        match (&a.checkpoint, &cfg.stage1_checkpoint) {
            (Some(p), _) => cfg.stage1_checkpoint = Some(p.display().to_string()),
            (None, Some(_)) => {}
            (None, None) => return Err(Error::MissingArgument("--checkpoint (stage-1 backbone)")),
        }
    }
    cfg.validate()?;
    let mut corpus = load_corpus(&a.data)?;
    if let Some(w) = a.window {
        corpus = segment_corpus(&corpus, w as usize, a.stride.unwrap_or(w) as usize)?;
    }
    let exp = ExperimentDir::create(&a.out, &cfg)?;
    write_json(&a.out.join("command.json"), &flags)?;
    if stage == 1 {
        let items = corpus.items(&cfg.embedder())?;
        let mut model = build_model(&cfg.model, cfg.seed)?;
        let log = train_stage1(&items, &mut model, &cfg, Some(&exp))?;
        println!("stage 1: {} steps, loss {:.6} -> {:.6}", log.losses.len(), log.losses[0], log.tail_mean(1));
    } else {
        let path = PathBuf::from(cfg.stage1_checkpoint.clone().expect("validated"));
        let (model, hash) = load_backbone(&path)?;
        if let Some(expected) = &cfg.expected_backbone_hash {
            if *expected != hash {
                return Err(Error::Compat(format!("checkpoint hash {hash} differs from expected {expected}")));
            }
        }
        cfg.model = model.config.clone();
        let items = corpus.items(&cfg.embedder())?;
        let out = train_stage2(&items, &model, &cfg, Some(&exp))?;
        println!(
            "stage 2: {} steps, loss {:.6} -> {:.6}, {} trainable tensors",
            out.log.losses.len(),
            out.log.losses[0],
            out.log.tail_mean(1),
            out.trainable.len()
        );
    }
    println!("experiment written to {}", a.out.display());
    Ok(())
}

fn retrieval(a: &RetrievalArgs) -> Result<()> {
    let corpus = load_corpus(&a.data)?;
    let motions: Vec<Mat> = corpus.motions.iter().map(|m| m.to_f64()).collect();
    let mut cfg = RetrievalConfig::new(motions.first().map_or(0, |m| m.ncols()));
    if let Some(d) = a.latent_dim {
        cfg.latent_dim = d;
    }
    let (emb, trace) = train_retrieval(&motions, &corpus.captions, cfg, a.epochs, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_retrieval(&emb, &a.out)?;
    if let Some(last) = trace.epoch_losses.last() {
        println!("retrieval: {} epochs, final loss {:.6}", a.epochs, last.total);
    }
    Ok(())
}

struct Loaded {
    model: Model,
    hash: String,
    branch: Option<ControlModel>,
    texts: Vec<Mat>,
    tracks: Option<Vec<Mat>>,
    sched: DiffusionSchedule,
}

fn load_generator(g: &GenArgs) -> Result<Loaded> {
    if !g.conditions.is_empty() && g.conditions.len() != g.texts.len() {
        return Err(Error::InvalidArgument("give one --condition per --text".into()));
    }
    if g.branch.is_some() != !g.conditions.is_empty() {
        return Err(Error::InvalidArgument("--branch and --condition go together".into()));
    }
    let sched = make_linear_schedule(
        g.diffusion_steps,
        crate::diffusion::DEFAULT_BETA_MIN,
        crate::diffusion::DEFAULT_BETA_MAX,
    )?;
    let (model, hash) = load_backbone(&g.checkpoint)?;
    let branch = g.branch.as_ref().map(|p| load_branch(p, &model)).transpose()?;
    let emb = HashEmbedder::new(model.config.text_dim, DEFAULT_MAX_TOKENS);
    let texts = g.texts.iter().map(|t| emb.embed(t)).collect();
    let tracks = if g.conditions.is_empty() {
        None
    } else {
        let ts = g.conditions.iter().map(load_feature_track).collect::<Result<Vec<ConditionTrack>>>()?;
        if let Some(b) = &branch {
            if let Some(t) = ts.iter().find(|t| t.kind != b.kind) {
                return Err(Error::Compat(format!("branch expects {} tracks, got {}", b.kind.name(), t.kind.name())));
            }
        }
        Some(ts.iter().map(|t| t.to_f64()).collect())
    };
    Ok(Loaded { model, hash, branch, texts, tracks, sched })
}

impl Loaded {
    fn generator(&self) -> Generator<'_> {
        match &self.branch {
            Some(b) => Generator::Controlled(&self.model, b),
            None => Generator::Backbone(&self.model),
        }
    }
}

#[derive(Debug, Serialize)]
struct SampleSummary<'a> {
    flags: &'a [String],
    backbone_hash: &'a str,
    seed: u64,
    frames: usize,
    files: Vec<SampleFile>,
}

#[derive(Debug, Serialize)]
struct SampleFile {
    file: String,
    caption: String,
}

fn write_samples(g: &GenArgs, l: &Loaded, motions: &[Mat], flags: &[String]) -> Result<()> {
    ensure_dir(&g.out)?;
    let layout = crate::motion_repr::ChannelLayout::default();
    let mut files = Vec::new();
    for (i, (m, caption)) in motions.iter().zip(&g.texts).enumerate() {
        let name = format!("sample-{i:04}.mcmf");
        let seq = MotionSequence::from_f64(layout.clone(), g.fps, m)?;
        save_sequence(&seq, g.out.join(&name))?;
        files.push(SampleFile { file: name, caption: caption.clone() });
    }
    let summary = SampleSummary {
        flags,
        backbone_hash: &l.hash,
        seed: g.seed,
        frames: motions.first().map_or(0, |m| m.nrows()),
        files,
    };
    write_json(&g.out.join("summary.json"), &summary)?;
    println!("wrote {} samples to {}", motions.len(), g.out.display());
    Ok(())
}

fn sample_cmd(a: &SampleArgs, flags: &[String]) -> Result<()> {
    let l = load_generator(&a.gen)?;
    // Tracks longer than the requested clip drive only its first frames.
    let tracks = l
        .tracks
        .as_ref()
        .map(|ts| {
            ts.iter()
                .map(|t| {
                    if t.nrows() < a.frames {
                        Err(Error::Length(format!("condition track has {} frames, need {}", t.nrows(), a.frames)))
                    } else {
                        Ok(t.slice(ndarray::s![..a.frames, ..]).to_owned())
                    }
                })
                .collect::<Result<Vec<Mat>>>()
        })
        .transpose()?;
    let motions = generate(l.generator(), &l.texts, tracks.as_deref(), a.frames, &l.sched, a.gen.seed)?;
    write_samples(&a.gen, &l, &motions, flags)
}

fn outpaint_cmd(a: &OutpaintArgs, flags: &[String]) -> Result<()> {
    let l = load_generator(&a.gen)?;
    let mut motions = Vec::new();
    for (i, text) in l.texts.iter().enumerate() {
        let track = l.tracks.as_ref().map(|t| &t[i]);
        motions.push(generate_long(
            l.generator(),
            text,
            track,
            a.frames,
            a.window as usize,
            a.overlap as usize,
            &l.sched,
            a.gen.seed.wrapping_add(i as u64),
        )?);
    }
    write_samples(&a.gen, &l, &motions, flags)
}

/// Reads a corpus directory, or every `.mcmf` file in a directory (sorted,
/// with empty captions).
pub fn load_motion_set(dir: &Path) -> Result<LoadedCorpus> {
    if dir.join(CORPUS_INDEX).exists() {
        return load_corpus(dir);
    }
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mcmf"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Ingestion(format!("{} holds no .mcmf files", dir.display())));
    }
    let motions = paths
        .iter()
        .map(crate::motion_repr::load_sequence)
        .collect::<Result<Vec<_>>>()?;
    let n = motions.len();
    Ok(LoadedCorpus { motions, captions: vec![String::new(); n], tracks: vec![None; n] })
}

/// Per-part channel mean and standard deviation of a sequence; the
/// featurizer used when no retrieval embedder is supplied.
pub fn raw_features(seqs: &[MotionSequence]) -> Result<Mat> {
    let first = seqs.first().ok_or_else(|| Error::Ingestion("empty motion set".into()))?;
    let width = first.width();
    let parts = default_body_partition(first.layout.joints())?;
    let cols = parts.column_lists();
    let mut out = Mat::zeros((seqs.len(), 2 * cols.len()));
    for (i, s) in seqs.iter().enumerate() {
        if s.width() != width {
            return Err(Error::shape("motions differ in width"));
        }
        let x = s.to_f64();
        for (p, c) in cols.iter().enumerate() {
            let vals: Vec<f64> = c.iter().flat_map(|&j| x.column(j).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            out[[i, 2 * p]] = mean;
            out[[i, 2 * p + 1]] = var.sqrt();
        }
    }
    Ok(out)
}

fn evaluate(a: &EvaluateArgs, flags: &[String]) -> Result<()> {
    let metrics = Metric::parse_list(&a.metrics)?;
    let gen = load_motion_set(&a.a)?;
    let reference = load_motion_set(&a.b)?;
    let config = serde_json::json!({ "flags": flags, "metrics": metrics });
    let report = match &a.embedder {
        Some(p) => {
            let emb = load_retrieval(p)?;
            if gen.motions.len() != reference.motions.len() {
                return Err(Error::Length("--a and --b must hold the same number of motions".into()));
            }
            let parts = default_body_partition(crate::motion_repr::DEFAULT_JOINTS)?;
            let inputs = SuiteInputs {
                generated: gen.motions.iter().map(|m| m.to_f64()).collect(),
                reference: reference.motions.clone(),
                captions: reference.captions.clone(),
                audio_beats: reference
                    .tracks
                    .iter()
                    .map(|t| t.as_ref().map(|t| condition_beats(&t.to_f64())))
                    .collect(),
                parts,
            };
            evaluate_motions(&inputs, Some(&emb), &metrics, a.seed, config)?
        }
        None => {
            let unsupported: Vec<&str> = metrics
                .iter()
                .filter(|m| !matches!(m, Metric::Fid | Metric::Diversity))
                .map(|m| m.name())
                .collect();
            if !unsupported.is_empty() {
                return Err(Error::Dependency(format!("{} need --embedder", unsupported.join(", "))));
            }
            let ga = FeatureCloud::new(raw_features(&gen.motions)?, Provenance::Generated);
            let gb = FeatureCloud::new(raw_features(&reference.motions)?, Provenance::GroundTruth);
            let ref_mats: Vec<Mat> = reference.motions.iter().map(|m| m.to_f64()).collect();
            let mut report = MetricReport::new(config, a.seed, corpus_hash(&ref_mats, &reference.captions));
            for m in &metrics {
                let v = match m {
                    Metric::Fid => fid(&ga, &gb)?,
                    _ => diversity(&ga, DEFAULT_PAIRS, a.seed)?,
                };
                report.push(m.name(), v);
            }
            report
        }
    };
    let json = report.to_json()?;
    if let Some(p) = &a.out {
        report.write(p)?;
    }
    print!("{json}");
    Ok(())
}

/// One-line description of an MCMF, MCFT or MCCK file.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = bytes.get(..4).ok_or_else(|| Error::Format { offset: 0, message: "file shorter than 4 bytes".into() })?;
    if magic == MCMF_MAGIC {
        let h = decode_header(&bytes)?;
        Ok(format!(
            "{}: MCMF v{} N={} F_m={} fps={} D_m={}",
            path.display(),
            h.version,
            h.joints,
            h.frames,
            h.fps,
            h.channels
        ))
    } else if magic == crate::conditioning::MCFT_MAGIC {
        let t = crate::conditioning::decode_track(&bytes)?;
        Ok(format!(
            "{}: MCFT kind={} D_c={} T_c={} frame_rate={} source_rate={} hop={}",
            path.display(),
            t.kind.name(),
            t.dim(),
            t.frames(),
            t.frame_rate,
            t.source_rate,
            t.hop
        ))
    } else if magic == crate::checkpoint::MAGIC {
        let c = crate::checkpoint::decode(&bytes)?;
        Ok(format!(
            "{}: MCCK kind={:?} tensors={}",
            path.display(),
            c.manifest.kind,
            c.manifest.tensors.len()
        ))
    } else {
        Err(Error::Format { offset: 0, message: format!("unknown magic {:?}", String::from_utf8_lossy(magic)) })
    }
}
