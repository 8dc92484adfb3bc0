//! Main-branch denoiser: part encoding, timestep embedding, a stack of
//! MC-Attn layers with text in every temporal branch, per-part output
//! projection and part decoding. Predicts `x_0` from `(x_t, t, text)`.

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::mc_attn::{init_layer_with, layer_tape, sinusoid, LayerDims, McAttnLayer, TokenGrid, DEFAULT_EXPERTS, FFN_HIDDEN};
use crate::motion_repr::DEFAULT_JOINTS;
use crate::params::{join, param_count, xavier_uniform, zeros_row, ParamTree};
use crate::topology::{decode_tokens, default_body_partition, encode_tokens, BodyPartLayout, PartCodec};
use crate::{Error, Result};

pub const DEFAULT_TEXT_DIM: usize = 64;
pub const DEFAULT_MAX_FRAMES: usize = 196;

/// Named `(layers, token_dim)` scaling variants.
pub const VARIANTS: [(&str, usize, usize); 5] = [
    ("tiny", 4, 64),
    ("small-4x128", 4, 128),
    ("small-8x64", 8, 64),
    ("medium", 8, 128),
    ("large", 16, 128),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub layers: usize,
    pub parts: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub experts: usize,
    pub max_frames: usize,
    pub text_dim: usize,
    pub joints: usize,
    pub positional: bool,
    /// Explicit partition; the default 12-part table when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<BodyPartLayout>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::variant("tiny").expect("registered")
    }
}

impl ModelConfig {
    pub fn variant(name: &str) -> Result<Self> {
        let (_, layers, token_dim) = VARIANTS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| Error::config(format!("unsupported model variant {name:?}")))?;
        Ok(Self {
            variant: name.into(),
            layers: *layers,
            parts: 12,
            token_dim: *token_dim,
            hidden: FFN_HIDDEN,
            experts: DEFAULT_EXPERTS,
            max_frames: DEFAULT_MAX_FRAMES,
            text_dim: DEFAULT_TEXT_DIM,
            joints: DEFAULT_JOINTS,
            positional: true,
            partition: None,
        })
    }

    /// Free-form dimensions over an explicit partition (the variant is
    /// recorded as `custom`).
    pub fn custom(layers: usize, partition: BodyPartLayout, text_dim: usize, experts: usize) -> Self {
        Self {
            variant: "custom".into(),
            layers,
            parts: partition.len(),
            token_dim: partition.token_dim,
            hidden: FFN_HIDDEN,
            experts,
            max_frames: DEFAULT_MAX_FRAMES,
            text_dim,
            joints: DEFAULT_JOINTS,
            positional: true,
            partition: Some(partition),
        }
    }

    pub fn layout(&self) -> Result<BodyPartLayout> {
        let layout = match &self.partition {
            Some(p) => p.clone(),
            None => default_body_partition(self.joints)?.with_token_dim(self.token_dim)?,
        };
        if layout.len() != self.parts || layout.token_dim != self.token_dim {
            return Err(Error::config(format!(
                "partition has {} parts × {}, config says {} × {}",
                layout.len(),
                layout.token_dim,
                self.parts,
                self.token_dim
            )));
        }
        Ok(layout)
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims {
            parts: self.parts,
            token_dim: self.token_dim,
            text_dim: self.text_dim,
            experts: self.experts,
            hidden: self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant != "custom" {
            let known = VARIANTS.iter().any(|(n, l, d)| *n == self.variant && *l == self.layers && *d == self.token_dim);
            if !known {
                return Err(Error::config(format!(
                    "unsupported variant {:?} with {} layers × {}",
                    self.variant, self.layers, self.token_dim
                )));
            }
        }
        if self.layers == 0 || self.max_frames == 0 {
            return Err(Error::config("layers and max_frames must be positive"));
        }
        self.layer_dims().validate()?;
        self.layout().map(|_| ())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> Result<usize> {
        let d = self.token_dim;
        let width = self.layout()?.width;
        let codec = 2 * d * width + self.parts * d + width;
        let time = 2 * (d * d + d);
        let output = self.parts * (d * d + d);
        Ok(codec + self.layers * self.layer_dims().param_count() + time + output)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub codec: PartCodec<T>,
    pub time_w1: T,
    pub time_b1: T,
    pub time_w2: T,
    pub time_b2: T,
    pub layers: Vec<McAttnLayer<T>>,
    pub out_w: Vec<T>,
    pub out_b: Vec<T>,
}

impl<T> Backbone<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Backbone<U> {
        let names = self.codec.names.clone();
        Backbone {
            codec: self.codec.map(&join(prefix, "codec"), f),
            time_w1: f(&join(prefix, "time.w1"), &self.time_w1),
            time_b1: f(&join(prefix, "time.b1"), &self.time_b1),
            time_w2: f(&join(prefix, "time.w2"), &self.time_w2),
            time_b2: f(&join(prefix, "time.b2"), &self.time_b2),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(prefix, &format!("layers.{i}")), f))
                .collect(),
            out_w: self
                .out_w
                .iter()
                .zip(&names)
                .map(|(w, n)| f(&join(prefix, &format!("output.{n}.weight")), w))
                .collect(),
            out_b: self
                .out_b
                .iter()
                .zip(&names)
                .map(|(b, n)| f(&join(prefix, &format!("output.{n}.bias")), b))
                .collect(),
        }
    }
}

impl<T> ParamTree<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.codec.visit(&join(prefix, "codec"), f);
        f(join(prefix, "time.w1"), &self.time_w1);
        f(join(prefix, "time.b1"), &self.time_b1);
        f(join(prefix, "time.w2"), &self.time_w2);
        f(join(prefix, "time.b2"), &self.time_b2);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        for (w, n) in self.out_w.iter().zip(&self.codec.names) {
            f(join(prefix, &format!("output.{n}.weight")), w);
        }
        for (b, n) in self.out_b.iter().zip(&self.codec.names) {
            f(join(prefix, &format!("output.{n}.bias")), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        let names = self.codec.names.clone();
        self.codec.visit_mut(&join(prefix, "codec"), f);
        f(join(prefix, "time.w1"), &mut self.time_w1);
        f(join(prefix, "time.b1"), &mut self.time_b1);
        f(join(prefix, "time.w2"), &mut self.time_w2);
        f(join(prefix, "time.b2"), &mut self.time_b2);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        for (w, n) in self.out_w.iter_mut().zip(&names) {
            f(join(prefix, &format!("output.{n}.weight")), w);
        }
        for (b, n) in self.out_b.iter_mut().zip(&names) {
            f(join(prefix, &format!("output.{n}.bias")), b);
        }
    }
}

/// A configured denoiser with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: BodyPartLayout,
    pub params: Backbone<Mat>,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let layout = config.layout()?;
    let d = config.token_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codec = PartCodec::init(&layout, rand::Rng::random(&mut rng));
    let time_w1 = xavier_uniform(&mut rng, d, d);
    let time_w2 = xavier_uniform(&mut rng, d, d);
    let layers = (0..config.layers)
        .map(|_| init_layer_with(config.layer_dims(), rand::Rng::random(&mut rng)))
        .collect::<Result<Vec<_>>>()?;
    let params = Backbone {
        codec,
        time_w1,
        time_b1: zeros_row(d),
        time_w2,
        time_b2: zeros_row(d),
        layers,
        out_w: (0..layout.len()).map(|_| Mat::zeros((d, d))).collect(),
        out_b: (0..layout.len()).map(|_| zeros_row(d)).collect(),
    };
    Ok(Model {
        config: config.clone(),
        layout,
        params,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }
}

/// Sinusoidal features of each timestep, one row per batch item.
pub fn timestep_features(ts: &[usize], dim: usize) -> Mat {
    let mut m = Mat::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        m.row_mut(i).assign(&Array1::from(sinusoid(t as f64, dim)));
    }
    m
}

/// Tape inputs shared by a forward pass over a batch.
pub struct Batch {
    pub grid: TokenGrid,
    /// `B·F × D_m` noisy motion rows.
    pub x: Var,
    /// `B × D_b` timestep features.
    pub t_feat: Var,
    /// Stacked text rows, absent when every item is empty.
    pub text: Option<Var>,
}

impl Batch {
    /// Pushes `xs` (B items of `F × D_m`, stacked), timesteps and texts.
    pub fn new(tape: &mut Tape, config: &ModelConfig, xs: Mat, frames: usize, ts: &[usize], texts: &[Mat]) -> Result<Self> {
        let batch = ts.len();
        if texts.len() != batch || xs.nrows() != batch * frames {
            return Err(Error::shape(format!(
                "batch of {batch} timesteps, {} texts and {} rows for {frames} frames",
                texts.len(),
                xs.nrows()
            )));
        }
        if frames == 0 || frames > config.max_frames {
            return Err(Error::shape(format!("{frames} frames outside 1..={}", config.max_frames)));
        }
        for t in texts {
            if t.nrows() > 0 && t.ncols() != config.text_dim {
                return Err(Error::shape(format!(
                    "text width {} does not match D_t = {}",
                    t.ncols(),
                    config.text_dim
                )));
            }
        }
        let text_lens: Vec<usize> = texts.iter().map(|t| t.nrows()).collect();
        let grid = TokenGrid::new(batch, frames, config.parts, config.token_dim, text_lens, config.positional);
        let text = if grid.text_rows() > 0 {
            let views: Vec<_> = texts.iter().filter(|t| t.nrows() > 0).map(|t| t.view()).collect();
            Some(tape.constant(ndarray::concatenate(Axis(0), &views).expect("equal widths")))
        } else {
            None
        };
        Ok(Self {
            x: tape.constant(xs),
            t_feat: tape.constant(timestep_features(ts, config.token_dim)),
            text,
            grid,
        })
    }
}

/// Timestep embedding broadcast to every token row.
pub fn time_tokens(tape: &mut Tape, p: &Backbone<Var>, batch: &Batch) -> Var {
    let h = tape.linear(batch.t_feat, p.time_w1, p.time_b1);
    let h = tape.gelu(h);
    let e = tape.linear(h, p.time_w2, p.time_b2);
    tape.repeat_rows(e, batch.grid.frames * batch.grid.parts)
}

/// Encoded part tokens of `x_t` plus the broadcast timestep embedding.
pub fn embed(tape: &mut Tape, p: &Backbone<Var>, layout: &BodyPartLayout, batch: &Batch) -> (Var, Var) {
    let tok = encode_tokens(tape, batch.x, &p.codec, layout);
    let temb = time_tokens(tape, p, batch);
    (tape.add(tok, temb), temb)
}

/// Layer stack, output projection and decoding. `inject[i]`, when present, is
/// added to the input of layer `i`.
pub fn trunk(
    tape: &mut Tape,
    p: &Backbone<Var>,
    layout: &BodyPartLayout,
    batch: &Batch,
    h0: Var,
    inject: &[Option<Var>],
) -> Var {
    let mut h = h0;
    for (i, layer) in p.layers.iter().enumerate() {
        if let Some(Some(extra)) = inject.get(i) {
            h = tape.add(h, *extra);
        }
        h = layer_tape(tape, h, batch.text, layer, &batch.grid);
    }
    let out = tape.part_linear(h, &p.out_w, &p.out_b);
    decode_tokens(tape, out, &p.codec, layout)
}

pub fn forward_tape(tape: &mut Tape, p: &Backbone<Var>, layout: &BodyPartLayout, batch: &Batch) -> Var {
    let (h0, _) = embed(tape, p, layout, batch);
    trunk(tape, p, layout, batch, h0, &[])
}

impl Model {
    fn check_input(&self, x_t: &Mat, t: usize, steps: usize) -> Result<()> {
        if x_t.ncols() != self.layout.width {
            return Err(Error::shape(format!(
                "motion width {} does not match D_m = {}",
                x_t.ncols(),
                self.layout.width
            )));
        }
        if t == 0 || t > steps {
            return Err(Error::Index { t, max: steps });
        }
        Ok(())
    }

    /// Predicts `x_0` for a batch of equal-length items stacked as rows.
    pub fn denoise_batch(&self, xs: &Mat, frames: usize, ts: &[usize], texts: &[Mat], steps: usize) -> Result<Mat> {
        for &t in ts {
            self.check_input(xs, t, steps)?;
        }
        let mut tape = Tape::new();
        let p = self.params.map("", &mut |_, m| tape.constant(m.clone()));
        let batch = Batch::new(&mut tape, &self.config, xs.clone(), frames, ts, texts)?;
        let out = forward_tape(&mut tape, &p, &self.layout, &batch);
        let out = tape.value(out).clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("denoiser produced a non-finite value".into()));
        }
        Ok(out)
    }
}

/// `x0_hat = f_m(x_t, t, text)` for one sequence (`F_m × D_m`).
pub fn denoise_forward(model: &Model, x_t: &Mat, t: usize, text: &Mat, steps: usize) -> Result<Mat> {
    model.denoise_batch(x_t, x_t.nrows(), &[t], std::slice::from_ref(text), steps)
}
