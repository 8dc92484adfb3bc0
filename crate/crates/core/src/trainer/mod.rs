//! Two-stage training: text-conditioned denoiser pre-training, then control
//! branch adaptation against a frozen (or locally unfrozen) backbone.

mod suite;
mod synthetic;

pub use suite::*;
pub use synthetic::*;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::backbone::{forward_tape, Batch, Model, ModelConfig};
use crate::checkpoint::{backbone_hash, save_backbone, save_branch};
use crate::conditioning::{ConditionKind, HashEmbedder, DEFAULT_MAX_TOKENS};
use crate::control_branch::{
    attach_control_branch, backbone_trainable, controlled_tape, set_freeze_policy, ConditionBatch, ControlModel,
    FreezePolicy,
};
use crate::diffusion::{gaussian, make_linear_schedule, q_sample, DiffusionSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
use crate::params::{cosine_lr, grads_of, Adam};
use crate::{Error, Result};

pub const DEFAULT_LR_START: f64 = 2e-4;
pub const DEFAULT_LR_END: f64 = 2e-5;
pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_BRANCH_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Training window; longer items are randomly cropped. Defaults to the
    /// shortest item.
    pub frames: Option<usize>,
    /// Stop once the mean of the last 50 losses drops below this fraction of
    /// the first loss.
    pub stop_below: Option<f64>,
    pub model: ModelConfig,
    pub max_tokens: usize,
    /// Stage 2: path or hash of the stage-1 checkpoint the branch plugs into.
    pub stage1_checkpoint: Option<String>,
    /// Stage 2: refuse a backbone whose hash differs from this.
    pub expected_backbone_hash: Option<String>,
    pub freeze: FreezePolicy,
    pub branch_depth: usize,
    pub condition: Option<ConditionKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lr_start: DEFAULT_LR_START,
            lr_end: DEFAULT_LR_END,
            schedule: LrSchedule::Cosine,
            batch_size: DEFAULT_BATCH,
            steps: 1000,
            seed: 0,
            diffusion_steps: DEFAULT_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            checkpoint_every: 0,
            frames: None,
            stop_below: None,
            model: ModelConfig::default(),
            max_tokens: DEFAULT_MAX_TOKENS,
            stage1_checkpoint: None,
            expected_backbone_hash: None,
            freeze: FreezePolicy::full(),
            branch_depth: DEFAULT_BRANCH_DEPTH,
            condition: None,
        }
    }
}

impl TrainConfig {
    pub fn stage2() -> Self {
        Self { stage: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.stage == 2 && self.stage1_checkpoint.is_none() {
            return Err(Error::config("stage 2 requires stage1_checkpoint"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("batch_size and steps must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        self.model.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Cosine => cosine_lr(step, self.steps, self.lr_start, self.lr_end),
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_linear_schedule(self.diffusion_steps, self.beta_min, self.beta_max)
    }

    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.model.text_dim, self.max_tokens)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// Per-step record of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean of the last `n` losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for (i, (l, lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
            let _ = writeln!(s, "{i},{lr:e},{l:e}");
        }
        s
    }
}

/// Experiment directory: `config.toml`, `checkpoints/`, `loss.csv`,
/// `metrics.json`.
#[derive(Debug, Clone)]
pub struct ExperimentDir {
    pub root: PathBuf,
}

impl ExperimentDir {
    pub fn create(root: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let ck = root.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        let cfg = root.join("config.toml");
        std::fs::write(&cfg, config.to_toml()?).map_err(|e| Error::io(&cfg, e))?;
        Ok(Self { root })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn write_log(&self, log: &TrainLog) -> Result<()> {
        let p = self.root.join("loss.csv");
        std::fs::write(&p, log.to_csv()).map_err(|e| Error::io(&p, e))
    }
}

/// Deterministic minibatch and crop sampler.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    at: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), at: n }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.at == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

fn window_for(items: &[TrainItem], config: &TrainConfig) -> Result<usize> {
    let shortest = items.iter().map(|i| i.motion.nrows()).min().ok_or_else(|| Error::InvalidArgument("empty corpus".into()))?;
    let w = config.frames.unwrap_or(shortest);
    if w == 0 || w > shortest {
        return Err(Error::config(format!("training window {w} exceeds the shortest item ({shortest} frames)")));
    }
    Ok(w.min(config.model.max_frames))
}

/// Stacked `x_0`, noised `x_t`, timesteps, texts and tracks of a minibatch.
struct Draw {
    x0: Mat,
    xt: Mat,
    ts: Vec<usize>,
    texts: Vec<Mat>,
    tracks: Vec<Mat>,
}

fn draw(
    items: &[TrainItem],
    idx: &[usize],
    window: usize,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
    with_tracks: bool,
) -> Result<Draw> {
    let width = items[0].motion.ncols();
    let mut x0 = Mat::zeros((idx.len() * window, width));
    let mut xt = Mat::zeros((idx.len() * window, width));
    let mut ts = Vec::with_capacity(idx.len());
    let mut texts = Vec::with_capacity(idx.len());
    let mut tracks = Vec::new();
    for (b, &i) in idx.iter().enumerate() {
        let item = &items[i];
        if item.motion.ncols() != width {
            return Err(Error::shape("corpus items have different widths"));
        }
        let start = rng.random_range(0..=item.motion.nrows() - window);
        let clip = item.motion.slice(ndarray::s![start..start + window, ..]).to_owned();
        let t = rng.random_range(1..=sched.steps());
        let eps = gaussian(rng, clip.dim());
        let noisy = q_sample(&clip, t, &eps, sched)?;
        x0.slice_mut(ndarray::s![b * window..(b + 1) * window, ..]).assign(&clip);
        xt.slice_mut(ndarray::s![b * window..(b + 1) * window, ..]).assign(&noisy);
        ts.push(t);
        texts.push(item.text.clone());
        if with_tracks {
            let tr = item
                .track
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("item {i} has no condition track")))?;
            let end = (start + window).min(tr.nrows());
            let begin = start.min(end);
            tracks.push(tr.slice(ndarray::s![begin..end, ..]).to_owned());
        }
    }
    Ok(Draw { x0, xt, ts, texts, tracks })
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training { step, message: format!("loss is {loss}") })
    }
}

fn should_stop(log: &TrainLog, config: &TrainConfig) -> bool {
    match (config.stop_below, log.initial_loss()) {
        (Some(ratio), Some(first)) if log.losses.len() >= 50 => log.tail_mean(50) < ratio * first,
        _ => false,
    }
}

/// Stage 1: `loss = MSE(f(q_sample(x0, t, ε), t, text), x0)` with `t`
/// uniform in `1..=T`, Adam and a cosine learning rate.
pub fn train_stage1(
    items: &[TrainItem],
    model: &mut Model,
    config: &TrainConfig,
    exp: Option<&ExperimentDir>,
) -> Result<TrainLog> {
    config.validate()?;
    if model.config != config.model {
        return Err(Error::config("model does not match the configured architecture"));
    }
    let sched = config.schedule()?;
    let window = window_for(items, config)?;
    let mut sampler = Sampler::new(items.len(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut opt = Adam::new();
    let mut log = TrainLog::default();
    for step in 0..config.steps {
        let idx = sampler.batch(config.batch_size);
        let d = draw(items, &idx, window, &sched, &mut rng, false)?;
        let mut tape = Tape::new();
        let p = model.params.map("", &mut |_, m| tape.leaf(m.clone(), true));
        let batch = Batch::new(&mut tape, &model.config, d.xt, window, &d.ts, &d.texts)?;
        let out = forward_tape(&mut tape, &p, &model.layout, &batch);
        let target = tape.constant(d.x0);
        let loss = tape.mse(out, target);
        let value = tape.scalar(loss);
        check_loss(value, step)?;
        let grads = grads_of(&tape.backward(loss), &p);
        let lr = config.lr_at(step);
        opt.step(&mut model.params, &grads, lr);
        log.losses.push(value);
        log.lrs.push(lr);
        if let Some(exp) = exp {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                let p = exp.checkpoint(&format!("stage1-step{:06}.mcck", step + 1));
                save_backbone(model, &p)?;
                log.checkpoints.push(p);
            }
        }
        if should_stop(&log, config) {
            break;
        }
    }
    if let Some(exp) = exp {
        let p = exp.checkpoint("stage1.mcck");
        save_backbone(model, &p)?;
        log.checkpoints.push(p);
        exp.write_log(&log)?;
    }
    Ok(log)
}

/// Result of a stage-2 run. `model` differs from the input backbone only in
/// the tensors the freeze policy left trainable.
#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub model: Model,
    pub branch: ControlModel,
    pub trainable: BTreeSet<String>,
    pub log: TrainLog,
}

/// Stage 2: attach a branch to `backbone`, apply the freeze policy and train
/// the trainable set on the same objective through the controlled forward.
pub fn train_stage2(
    items: &[TrainItem],
    backbone: &Model,
    config: &TrainConfig,
    exp: Option<&ExperimentDir>,
) -> Result<Stage2Outcome> {
    config.validate()?;
    if config.stage != 2 {
        return Err(Error::config("train_stage2 needs a stage-2 config"));
    }
    let hash = backbone_hash(backbone);
    if let Some(expected) = &config.expected_backbone_hash {
        if *expected != hash {
            return Err(Error::Compat(format!("backbone hash {hash} does not match expected {expected}")));
        }
    }
    let kind = match config.condition {
        Some(k) => k,
        None => items
            .first()
            .and_then(|i| i.track.as_ref())
            .map(|t| if t.ncols() == ConditionKind::Music.dim() { ConditionKind::Music } else { ConditionKind::Speech })
            .ok_or_else(|| Error::InvalidArgument("stage 2 needs condition tracks".into()))?,
    };
    let sched = config.schedule()?;
    let window = window_for(items, config)?;
    let mut model = backbone.clone();
    let mut branch = attach_control_branch(&model, config.branch_depth, kind, config.seed ^ 0xb4a2, &hash)?;
    let trainable = set_freeze_policy(&mut model, &branch, &config.freeze)?;
    let mut sampler = Sampler::new(items.len(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let mut opt_main = Adam::new();
    let mut opt_branch = Adam::new();
    let mut log = TrainLog::default();
    let parts = model.layout.len();
    for step in 0..config.steps {
        let idx = sampler.batch(config.batch_size);
        let d = draw(items, &idx, window, &sched, &mut rng, true)?;
        let mut tape = Tape::new();
        let main = {
            let params = &model.params;
            params.map("", &mut |name, m| tape.leaf(m.clone(), backbone_trainable(params, name)))
        };
        let bp = branch.params.map("", &mut |_, m| tape.leaf(m.clone(), true));
        let batch = Batch::new(&mut tape, &model.config, d.xt, window, &d.ts, &d.texts)?;
        let cond = ConditionBatch::new(&d.tracks, window, parts, branch.cond_dim)?;
        let out = controlled_tape(&mut tape, &main, &bp, &model.layout, &batch, &cond);
        let target = tape.constant(d.x0);
        let loss = tape.mse(out, target);
        let value = tape.scalar(loss);
        check_loss(value, step)?;
        let grads = tape.backward(loss);
        let lr = config.lr_at(step);
        opt_branch.step(&mut branch.params, &grads_of(&grads, &bp), lr);
        opt_main.step(&mut model.params, &grads_of(&grads, &main), lr);
        log.losses.push(value);
        log.lrs.push(lr);
        if let Some(exp) = exp {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                branch.backbone_hash = backbone_hash(&model);
                let p = exp.checkpoint(&format!("stage2-step{:06}.mcck", step + 1));
                save_branch(&branch, &p)?;
                log.checkpoints.push(p);
            }
        }
        if should_stop(&log, config) {
            break;
        }
    }
    branch.backbone_hash = backbone_hash(&model);
    if let Some(exp) = exp {
        let p = exp.checkpoint("stage2-branch.mcck");
        save_branch(&branch, &p)?;
        log.checkpoints.push(p);
        if branch.backbone_hash != hash {
            let p = exp.checkpoint("stage2-backbone.mcck");
            save_backbone(&model, &p)?;
            log.checkpoints.push(p);
        }
        exp.write_log(&log)?;
    }
    Ok(Stage2Outcome { model, branch, trainable, log })
}
