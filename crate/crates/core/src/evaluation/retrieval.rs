//! Contrastive VAE retrieval model: motion and text encoders that map into a
//! shared Gaussian latent space, plus a motion decoder.


use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::conditioning::{HashEmbedder, TextEmbedder, DEFAULT_MAX_TOKENS};
use crate::diffusion::gaussian;
use crate::evaluation::metrics::Region;
use crate::mc_attn::sinusoid;
use crate::params::{grads_of, join, xavier_uniform, zeros_row, Adam, ParamTree};
use crate::topology::BodyPartLayout;
use crate::{Error, Result};

pub const DEFAULT_LATENT_DIM: usize = 256;
pub const LAMBDA_KL: f64 = 1e-5;
pub const LAMBDA_E: f64 = 1e-5;
pub const LAMBDA_NCE: f64 = 1e-1;
pub const NCE_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl: f64,
    pub embed: f64,
    pub nce: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kl: LAMBDA_KL, embed: LAMBDA_E, nce: LAMBDA_NCE, temperature: NCE_TEMPERATURE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub width: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub pe_dim: usize,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub lr: f64,
}

impl RetrievalConfig {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            latent_dim: DEFAULT_LATENT_DIM,
            hidden: 128,
            text_dim: crate::backbone::DEFAULT_TEXT_DIM,
            max_tokens: DEFAULT_MAX_TOKENS,
            pe_dim: 16,
            weights: LossWeights::default(),
            batch_size: 64,
            lr: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.latent_dim == 0 || self.hidden == 0 || self.text_dim == 0 {
            return Err(Error::config("retrieval dimensions must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("retrieval batch size must be at least 2"));
        }
        if !(self.weights.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }

    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.text_dim, self.max_tokens)
    }
}

macro_rules! retrieval_params {
    ($($field:ident => $name:literal),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RetrievalParams<T> {
            $(pub $field: T,)*
        }

        impl<T> RetrievalParams<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> RetrievalParams<U> {
                RetrievalParams { $($field: f(&join(prefix, $name), &self.$field),)* }
            }
        }

        impl<T> ParamTree<T> for RetrievalParams<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f(join(prefix, $name), &self.$field);)*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $(f(join(prefix, $name), &mut self.$field);)*
            }
        }
    };
}

retrieval_params! {
    m_in => "motion.input.weight",
    m_vel => "motion.velocity.weight",
    m_pe => "motion.position.weight",
    m_b => "motion.input.bias",
    m_mid_w => "motion.mid.weight",
    m_mid_b => "motion.mid.bias",
    m_mu_w => "motion.mu.weight",
    m_mu_b => "motion.mu.bias",
    m_lv_w => "motion.logvar.weight",
    m_lv_b => "motion.logvar.bias",
    t_in_w => "text.input.weight",
    t_in_b => "text.input.bias",
    t_mid_w => "text.mid.weight",
    t_mid_b => "text.mid.bias",
    t_mu_w => "text.mu.weight",
    t_mu_b => "text.mu.bias",
    t_lv_w => "text.logvar.weight",
    t_lv_b => "text.logvar.bias",
    d_z => "decoder.latent.weight",
    d_pe => "decoder.position.weight",
    d_b => "decoder.hidden.bias",
    d_out_w => "decoder.output.weight",
    d_out_b => "decoder.output.bias",
}

impl RetrievalParams<Mat> {
    pub fn init(cfg: &RetrievalConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h, e, t, p) = (cfg.width, cfg.hidden, cfg.latent_dim, cfg.text_dim, cfg.pe_dim);
        let mut x = |a, b| xavier_uniform(&mut rng, a, b);
        Self {
            m_in: x(w, h),
            m_vel: x(w, h),
            m_pe: x(p, h),
            m_b: zeros_row(h),
            m_mid_w: x(h, h),
            m_mid_b: zeros_row(h),
            m_mu_w: x(h, e),
            m_mu_b: zeros_row(e),
            m_lv_w: Mat::zeros((h, e)),
            m_lv_b: zeros_row(e),
            t_in_w: x(t, h),
            t_in_b: zeros_row(h),
            t_mid_w: x(h, h),
            t_mid_b: zeros_row(h),
            t_mu_w: x(h, e),
            t_mu_b: zeros_row(e),
            t_lv_w: Mat::zeros((h, e)),
            t_lv_b: zeros_row(e),
            d_z: x(e, h),
            d_pe: x(p, h),
            d_b: zeros_row(h),
            d_out_w: x(h, w),
            d_out_b: zeros_row(w),
        }
    }
}

/// A trained retrieval model plus the channel statistics used to
/// standardize its motion inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalEmbedder {
    pub config: RetrievalConfig,
    pub params: RetrievalParams<Mat>,
    pub mean: Mat,
    pub std: Mat,
}

/// Standardized motion rows of a batch with their velocity and frame
/// position features.
pub struct MotionBatch {
    pub x: Mat,
    pub vel: Mat,
    pub pe: Mat,
    pub segments: Vec<(usize, usize)>,
    pub expand: Mat,
}

impl MotionBatch {
    pub fn new(motions: &[&Mat], mean: &Mat, std: &Mat, pe_dim: usize) -> Result<Self> {
        let width = mean.ncols();
        let total: usize = motions.iter().map(|m| m.nrows()).sum();
        let mut x = Mat::zeros((total, width));
        let mut vel = Mat::zeros((total, width));
        let mut pe = Mat::zeros((total, pe_dim));
        let mut expand = Mat::zeros((total, motions.len()));
        let mut segments = Vec::with_capacity(motions.len());
        let mut row = 0;
        for (b, m) in motions.iter().enumerate() {
            if m.ncols() != width {
                return Err(Error::shape(format!("motion width {} != {width}", m.ncols())));
            }
            if m.nrows() == 0 {
                return Err(Error::shape("motion with zero frames"));
            }
            for f in 0..m.nrows() {
                let r = row + f;
                for c in 0..width {
                    x[[r, c]] = (m[[f, c]] - mean[[0, c]]) / std[[0, c]];
                    if f > 0 {
                        vel[[r, c]] = (m[[f, c]] - m[[f - 1, c]]) / std[[0, c]];
                    }
                }
                for (c, v) in sinusoid(f as f64, pe_dim).into_iter().enumerate() {
                    pe[[r, c]] = v;
                }
                expand[[r, b]] = 1.0;
            }
            segments.push((row, row + m.nrows()));
            row += m.nrows();
        }
        Ok(Self { x, vel, pe, segments, expand })
    }
}

pub struct TextBatch {
    pub tokens: Mat,
    pub segments: Vec<(usize, usize)>,
}

impl TextBatch {
    pub fn new(captions: &[&str], embedder: &HashEmbedder) -> Result<Self> {
        let rows: Vec<Mat> = captions.iter().map(|c| embedder.embed(c)).collect();
        let total: usize = rows.iter().map(|r| r.nrows()).sum();
        let mut tokens = Mat::zeros((total, embedder.dim));
        let mut segments = Vec::new();
        let mut at = 0;
        for (r, c) in rows.iter().zip(captions) {
            if r.nrows() == 0 {
                return Err(Error::InvalidArgument(format!("caption {c:?} has no tokens")));
            }
            tokens.slice_mut(ndarray::s![at..at + r.nrows(), ..]).assign(r);
            segments.push((at, at + r.nrows()));
            at += r.nrows();
        }
        Ok(Self { tokens, segments })
    }
}

fn dense_gelu(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let h = tape.linear(x, w, b);
    tape.gelu(h)
}

/// Motion encoder: per-frame features pooled over frames, then Gaussian heads.
pub fn encode_motion_tape(tape: &mut Tape, p: &RetrievalParams<Var>, batch: &MotionBatch) -> (Var, Var) {
    let x = tape.constant(batch.x.clone());
    let vel = tape.constant(batch.vel.clone());
    let pe = tape.constant(batch.pe.clone());
    let a = tape.matmul(x, p.m_in);
    let v = tape.matmul(vel, p.m_vel);
    let q = tape.matmul(pe, p.m_pe);
    let s = tape.add(a, v);
    let s = tape.add(s, q);
    let s = tape.add_row(s, p.m_b);
    let h = tape.gelu(s);
    let pooled = tape.segment_mean(h, &batch.segments);
    let m = dense_gelu(tape, pooled, p.m_mid_w, p.m_mid_b);
    (tape.linear(m, p.m_mu_w, p.m_mu_b), tape.linear(m, p.m_lv_w, p.m_lv_b))
}

pub fn encode_text_tape(tape: &mut Tape, p: &RetrievalParams<Var>, batch: &TextBatch) -> (Var, Var) {
    let t = tape.constant(batch.tokens.clone());
    let h = dense_gelu(tape, t, p.t_in_w, p.t_in_b);
    let pooled = tape.segment_mean(h, &batch.segments);
    let m = dense_gelu(tape, pooled, p.t_mid_w, p.t_mid_b);
    (tape.linear(m, p.t_mu_w, p.t_mu_b), tape.linear(m, p.t_lv_w, p.t_lv_b))
}

/// Decodes one latent row per sequence into standardized frames.
pub fn decode_tape(tape: &mut Tape, p: &RetrievalParams<Var>, z: Var, batch: &MotionBatch) -> Var {
    let expand = tape.constant(batch.expand.clone());
    let pe = tape.constant(batch.pe.clone());
    let ze = tape.matmul(expand, z);
    let a = tape.matmul(ze, p.d_z);
    let q = tape.matmul(pe, p.d_pe);
    let s = tape.add(a, q);
    let s = tape.add_row(s, p.d_b);
    let h = tape.gelu(s);
    tape.linear(h, p.d_out_w, p.d_out_b)
}

/// Encoder and decoder outputs entering the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub mu_m: Var,
    pub lv_m: Var,
    pub mu_t: Var,
    pub lv_t: Var,
    pub rec_m: Var,
    pub rec_t: Var,
    pub target: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub kl: Var,
    pub embed: Var,
    pub nce: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub embed: f64,
    pub nce: f64,
}

/// Batch-mean KL of `N(μ, e^{lv})` against `N(0, I)`, summed over dims.
fn gaussian_kl(tape: &mut Tape, mu: Var, lv: Var) -> Var {
    let (b, d) = tape.value(mu).dim();
    let mu2 = tape.mul(mu, mu);
    let var = tape.exp(lv);
    let s = tape.add(mu2, var);
    let s = tape.sub(s, lv);
    let total = tape.sum(s);
    let shifted = tape.scale(total, 0.5 / b as f64);
    let offset = tape.constant(Mat::from_elem((1, 1), 0.5 * d as f64));
    tape.sub(shifted, offset)
}

/// Weighted sum `L_rec + λ_KL·L_KL + λ_E·L_E + λ_NCE·L_NCE`.
///
/// `L_rec` and `L_KL` average the motion-latent and text-latent terms;
/// `L_NCE` is the symmetric InfoNCE over cosine similarities.
pub fn retrieval_loss_tape(tape: &mut Tape, inp: &LossInputs, w: &LossWeights) -> Result<LossVars> {
    let b = tape.value(inp.mu_m).nrows();
    if b < 2 {
        return Err(Error::InvalidArgument("InfoNCE needs a batch of at least 2".into()));
    }
    let rm = tape.mse(inp.rec_m, inp.target);
    let rt = tape.mse(inp.rec_t, inp.target);
    let rec = tape.add(rm, rt);
    let rec = tape.scale(rec, 0.5);
    let km = gaussian_kl(tape, inp.mu_m, inp.lv_m);
    let kt = gaussian_kl(tape, inp.mu_t, inp.lv_t);
    let kl = tape.add(km, kt);
    let kl = tape.scale(kl, 0.5);
    let embed = tape.mse(inp.mu_m, inp.mu_t);
    let nm = tape.l2_normalize_rows(inp.mu_m, 1e-12);
    let nt = tape.l2_normalize_rows(inp.mu_t, 1e-12);
    let ntt = tape.transpose(nt);
    let sim = tape.matmul(nm, ntt);
    let logits = tape.scale(sim, 1.0 / w.temperature);
    let logits_t = tape.transpose(logits);
    let ce_a = tape.diag_cross_entropy(logits);
    let ce_b = tape.diag_cross_entropy(logits_t);
    let nce = tape.add(ce_a, ce_b);
    let nce = tape.scale(nce, 0.5);
    let terms = [
        rec,
        tape.scale(kl, w.kl),
        tape.scale(embed, w.embed),
        tape.scale(nce, w.nce),
    ];
    let total = tape.sum_all(&terms);
    Ok(LossVars { total, rec, kl, embed, nce })
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            total: tape.scalar(self.total),
            rec: tape.scalar(self.rec),
            kl: tape.scalar(self.kl),
            embed: tape.scalar(self.embed),
            nce: tape.scalar(self.nce),
        }
    }
}

fn reparameterize(tape: &mut Tape, mu: Var, lv: Var, eps: Option<&Mat>) -> Var {
    match eps {
        None => mu,
        Some(e) => {
            let half = tape.scale(lv, 0.5);
            let sd = tape.exp(half);
            let e = tape.constant(e.clone());
            let noise = tape.mul(sd, e);
            tape.add(mu, noise)
        }
    }
}

impl RetrievalEmbedder {
    pub fn new(config: RetrievalConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = RetrievalParams::init(&config, seed);
        let w = config.width;
        Ok(Self { config, params, mean: Mat::zeros((1, w)), std: Mat::ones((1, w)) })
    }

    /// Sets the input standardization from per-channel corpus statistics.
    pub fn fit_normalization(&mut self, motions: &[Mat]) -> Result<()> {
        let w = self.config.width;
        let mut sum = vec![0.0; w];
        let mut sq = vec![0.0; w];
        let mut n = 0.0;
        for m in motions {
            if m.ncols() != w {
                return Err(Error::shape(format!("motion width {} != {w}", m.ncols())));
            }
            for row in m.rows() {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(Error::InvalidArgument("no frames to normalize".into()));
        }
        for c in 0..w {
            let mu = sum[c] / n;
            let var = (sq[c] / n - mu * mu).max(0.0);
            self.mean[[0, c]] = mu;
            self.std[[0, c]] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    pub fn motion_batch(&self, motions: &[&Mat]) -> Result<MotionBatch> {
        MotionBatch::new(motions, &self.mean, &self.std, self.config.pe_dim)
    }

    fn leaves(&self, tape: &mut Tape, grad: bool) -> RetrievalParams<Var> {
        self.params.map("", &mut |_, m| tape.leaf(m.clone(), grad))
    }

    /// Unit-normalized latent means of each motion. Normalizing makes
    /// Euclidean ranking agree with the cosine similarity used in training.
    pub fn embed_motions(&self, motions: &[Mat]) -> Result<Mat> {
        let mut out = Mat::zeros((motions.len(), self.config.latent_dim));
        for (start, chunk) in motions.chunks(256).enumerate() {
            let refs: Vec<&Mat> = chunk.iter().collect();
            let batch = self.motion_batch(&refs)?;
            let mut tape = Tape::new();
            let p = self.leaves(&mut tape, false);
            let (mu, _) = encode_motion_tape(&mut tape, &p, &batch);
            out.slice_mut(ndarray::s![start * 256..start * 256 + chunk.len(), ..])
                .assign(tape.value(mu));
        }
        finite(unit_rows(out), "motion embedding")
    }

    pub fn embed_texts(&self, captions: &[&str]) -> Result<Mat> {
        let mut out = Mat::zeros((captions.len(), self.config.latent_dim));
        let emb = self.config.embedder();
        for (start, chunk) in captions.chunks(256).enumerate() {
            let batch = TextBatch::new(chunk, &emb)?;
            let mut tape = Tape::new();
            let p = self.leaves(&mut tape, false);
            let (mu, _) = encode_text_tape(&mut tape, &p, &batch);
            out.slice_mut(ndarray::s![start * 256..start * 256 + chunk.len(), ..])
                .assign(tape.value(mu));
        }
        finite(unit_rows(out), "text embedding")
    }

    /// Embeds motions with every channel outside `region` zeroed.
    pub fn embed_region(&self, motions: &[Mat], layout: &BodyPartLayout, region: Region) -> Result<Mat> {
        let keep = region_mask(layout, region)?;
        let masked: Vec<Mat> = motions.iter().map(|m| apply_region(m, &keep)).collect();
        self.embed_motions(&masked)
    }

    /// Encoder means/log-variances of one motion, and its reconstruction
    /// from the motion latent mean, in original channel units.
    pub fn reconstruct(&self, motion: &Mat) -> Result<(Mat, Mat, Mat)> {
        let batch = self.motion_batch(&[motion])?;
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape, false);
        let (mu, lv) = encode_motion_tape(&mut tape, &p, &batch);
        let rec = decode_tape(&mut tape, &p, mu, &batch);
        let mut out = tape.value(rec).clone();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[[0, c]] + self.mean[[0, c]];
            }
        }
        Ok((tape.value(mu).clone(), tape.value(lv).clone(), out))
    }

    /// One full forward pass of the training objective. `noise` supplies the
    /// reparameterization draws for the motion and text latents; `None`
    /// decodes from the means.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &RetrievalParams<Var>,
        motions: &[&Mat],
        captions: &[&str],
        noise: Option<(&Mat, &Mat)>,
    ) -> Result<LossVars> {
        if motions.len() != captions.len() {
            return Err(Error::shape("motions and captions are not paired"));
        }
        let mb = self.motion_batch(motions)?;
        let tb = TextBatch::new(captions, &self.config.embedder())?;
        let (mu_m, lv_m) = encode_motion_tape(tape, p, &mb);
        let (mu_t, lv_t) = encode_text_tape(tape, p, &tb);
        let zm = reparameterize(tape, mu_m, lv_m, noise.map(|n| n.0));
        let zt = reparameterize(tape, mu_t, lv_t, noise.map(|n| n.1));
        let rec_m = decode_tape(tape, p, zm, &mb);
        let rec_t = decode_tape(tape, p, zt, &mb);
        let target = tape.constant(mb.x.clone());
        let inp = LossInputs { mu_m, lv_m, mu_t, lv_t, rec_m, rec_t, target };
        retrieval_loss_tape(tape, &inp, &self.config.weights)
    }
}

fn unit_rows(mut m: Mat) -> Mat {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row /= n;
    }
    m
}

fn finite(m: Mat, what: &str) -> Result<Mat> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(Error::Numeric(format!("{what} is not finite")))
    }
}

/// Column keep-mask for a body region. Hands are the two hand slices; the
/// whole body is every skeletal slice (expression and shape excluded).
pub fn region_mask(layout: &BodyPartLayout, region: Region) -> Result<Vec<bool>> {
    let names: &[&str] = match region {
        Region::Hands => &["left-hand", "right-hand"],
        Region::WholeBody => &[
            "root", "spine", "head+neck", "jaw", "left-arm", "right-arm", "left-hand", "right-hand", "left-leg",
            "right-leg",
        ],
    };
    let mut keep = vec![false; layout.width];
    for n in names {
        let idx = layout
            .part_index(n)
            .ok_or_else(|| Error::Layout(format!("layout has no part named {n}")))?;
        for c in layout.parts[idx].columns() {
            keep[c] = true;
        }
    }
    Ok(keep)
}

pub fn apply_region(m: &Mat, keep: &[bool]) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        for (v, &k) in row.iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub epoch_losses: Vec<LossComponents>,
}

/// Trains a retrieval model with Adam on paired motions and captions.
pub fn train_retrieval(
    motions: &[Mat],
    captions: &[String],
    config: RetrievalConfig,
    epochs: usize,
    seed: u64,
) -> Result<(RetrievalEmbedder, RetrievalTrace)> {
    if motions.len() != captions.len() || motions.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two paired samples, got {} motions / {} captions",
            motions.len(),
            captions.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RetrievalEmbedder::new(config, rng.random())?;
    model.fit_normalization(motions)?;
    let bs = model.config.batch_size.min(motions.len());
    let e = model.config.latent_dim;
    let mut opt = Adam::new();
    let mut order: Vec<usize> = (0..motions.len()).collect();
    let mut trace = RetrievalTrace { epoch_losses: Vec::with_capacity(epochs) };
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut acc = LossComponents { total: 0.0, rec: 0.0, kl: 0.0, embed: 0.0, nce: 0.0 };
        let mut batches = 0.0;
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let ms: Vec<&Mat> = chunk.iter().map(|&i| &motions[i]).collect();
            let cs: Vec<&str> = chunk.iter().map(|&i| captions[i].as_str()).collect();
            let em = gaussian(&mut rng, (chunk.len(), e));
            let et = gaussian(&mut rng, (chunk.len(), e));
            let mut tape = Tape::new();
            let p = model.leaves(&mut tape, true);
            let vars = model.loss(&mut tape, &p, &ms, &cs, Some((&em, &et)))?;
            let v = vars.values(&tape);
            if !v.total.is_finite() {
                return Err(Error::Training { step, message: format!("non-finite retrieval loss {}", v.total) });
            }
            let grads = tape.backward(vars.total);
            let g = grads_of(&grads, &p);
            opt.step(&mut model.params, &g, model.config.lr);
            acc.total += v.total;
            acc.rec += v.rec;
            acc.kl += v.kl;
            acc.embed += v.embed;
            acc.nce += v.nce;
            batches += 1.0;
            step += 1;
        }
        if batches > 0.0 {
            acc.total /= batches;
            acc.rec /= batches;
            acc.kl /= batches;
            acc.embed /= batches;
            acc.nce /= batches;
        }
        trace.epoch_losses.push(acc);
    }
    Ok((model, trace))
}
