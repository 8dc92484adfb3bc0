//! Plug-in control branch: copies of the first `K` backbone layers driven by
//! a frame-aligned condition track, injected into the frozen main branch
//! through zero-initialized per-part bridges.

use std::collections::BTreeSet;

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::backbone::{embed, trunk, Backbone, Batch, Model};
use crate::conditioning::ConditionKind;
use crate::mc_attn::{layer_tape, McAttnLayer};
use crate::params::{join, xavier_uniform, zeros_row, ParamTree};
use crate::topology::BodyPartLayout;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ControlBranch<T> {
    /// `D_c × N_b·D_b`, no bias.
    pub cond_proj: T,
    pub layers: Vec<McAttnLayer<T>>,
    /// `[layer][part]`, each `D_b × D_b`.
    pub bridge_w: Vec<Vec<T>>,
    pub bridge_b: Vec<Vec<T>>,
    pub part_names: Vec<String>,
}

impl<T> ControlBranch<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ControlBranch<U> {
        let names = &self.part_names;
        let bridges = |v: &Vec<Vec<T>>, leaf: &str, f: &mut dyn FnMut(&str, &T) -> U| -> Vec<Vec<U>> {
            v.iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .zip(names)
                        .map(|(x, n)| f(&join(prefix, &format!("bridges.{i}.{n}.{leaf}")), x))
                        .collect()
                })
                .collect()
        };
        ControlBranch {
            cond_proj: f(&join(prefix, "cond_proj"), &self.cond_proj),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(prefix, &format!("layers.{i}")), f))
                .collect(),
            bridge_w: bridges(&self.bridge_w, "weight", f),
            bridge_b: bridges(&self.bridge_b, "bias", f),
            part_names: names.clone(),
        }
    }
}

impl<T> ParamTree<T> for ControlBranch<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "cond_proj"), &self.cond_proj);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        for (leaf, v) in [("weight", &self.bridge_w), ("bias", &self.bridge_b)] {
            for (i, row) in v.iter().enumerate() {
                for (x, n) in row.iter().zip(&self.part_names) {
                    f(join(prefix, &format!("bridges.{i}.{n}.{leaf}")), x);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "cond_proj"), &mut self.cond_proj);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        let names = &self.part_names;
        for (leaf, v) in [("weight", &mut self.bridge_w), ("bias", &mut self.bridge_b)] {
            for (i, row) in v.iter_mut().enumerate() {
                for (x, n) in row.iter_mut().zip(names) {
                    f(join(prefix, &format!("bridges.{i}.{n}.{leaf}")), x);
                }
            }
        }
    }
}

/// A branch with the metadata needed to plug it into a compatible backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlModel {
    pub kind: ConditionKind,
    pub cond_dim: usize,
    pub backbone_hash: String,
    pub params: ControlBranch<Mat>,
}

impl ControlModel {
    pub fn depth(&self) -> usize {
        self.params.layers.len()
    }
}

/// Deep-copies layers `0..K` of the backbone, zero bridges and a uniform
/// condition projection.
pub fn attach_control_branch(
    model: &Model,
    depth: usize,
    kind: ConditionKind,
    seed: u64,
    backbone_hash: &str,
) -> Result<ControlModel> {
    let layers = model.params.layers.len();
    if depth == 0 || depth > layers {
        return Err(Error::Compat(format!("branch depth {depth} outside 1..={layers}")));
    }
    let (n, d) = (model.layout.len(), model.layout.token_dim);
    let cond_dim = kind.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ControlBranch {
        cond_proj: xavier_uniform(&mut rng, cond_dim, n * d),
        layers: model.params.layers[..depth].to_vec(),
        bridge_w: (0..depth).map(|_| (0..n).map(|_| Mat::zeros((d, d))).collect()).collect(),
        bridge_b: (0..depth).map(|_| (0..n).map(|_| zeros_row(d)).collect()).collect(),
        part_names: model.layout.parts.iter().map(|p| p.name.clone()).collect(),
    };
    Ok(ControlModel {
        kind,
        cond_dim,
        backbone_hash: backbone_hash.to_string(),
        params,
    })
}

/// Zero-pads a `T_c × D_c` track to `F_m` rows and returns the position mask.
pub fn align_condition(track: &Mat, frames: usize) -> Result<(Mat, Vec<bool>)> {
    let tc = track.nrows();
    if tc > frames {
        return Err(Error::Length(format!(
            "condition track has {tc} frames but the motion window has {frames}; window the track first"
        )));
    }
    let mut out = Mat::zeros((frames, track.ncols()));
    out.slice_mut(s![..tc, ..]).assign(track);
    Ok((out, (0..frames).map(|f| f < tc).collect()))
}

/// Aligned condition rows for a batch (`B·F × D_c`) and the token-level mask.
pub struct ConditionBatch {
    pub rows: Mat,
    pub token_mask: Vec<f64>,
}

impl ConditionBatch {
    pub fn new(tracks: &[Mat], frames: usize, parts: usize, cond_dim: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(tracks.len());
        let mut token_mask = Vec::with_capacity(tracks.len() * frames * parts);
        for t in tracks {
            if t.ncols() != cond_dim {
                return Err(Error::shape(format!(
                    "condition has {} channels, branch expects {cond_dim}",
                    t.ncols()
                )));
            }
            let (aligned, mask) = align_condition(t, frames)?;
            rows.push(aligned);
            for m in mask {
                token_mask.extend(std::iter::repeat_n(if m { 1.0 } else { 0.0 }, parts));
            }
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(Self {
            rows: ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?,
            token_mask,
        })
    }
}

/// Branch tokens: projected condition (masked) + `x_t` tokens + timestep.
pub fn controlled_tape(
    tape: &mut Tape,
    main: &Backbone<Var>,
    branch: &ControlBranch<Var>,
    layout: &BodyPartLayout,
    batch: &Batch,
    cond: &ConditionBatch,
) -> Var {
    let (h0, _) = embed(tape, main, layout, batch);
    let c = tape.constant(cond.rows.clone());
    let c = tape.matmul(c, branch.cond_proj);
    let c = tape.reshape(c, batch.grid.rows(), layout.token_dim);
    let c = tape.mask_rows(c, &cond.token_mask);
    let mut b = tape.add(c, h0);
    let mut inject = Vec::with_capacity(branch.layers.len());
    for (i, layer) in branch.layers.iter().enumerate() {
        b = layer_tape(tape, b, batch.text, layer, &batch.grid);
        inject.push(Some(tape.part_linear(b, &branch.bridge_w[i], &branch.bridge_b[i])));
    }
    trunk(tape, main, layout, batch, h0, &inject)
}

impl ControlModel {
    /// Stage-2 denoiser over a batch of equal-length items stacked as rows.
    pub fn denoise_batch(
        &self,
        model: &Model,
        xs: &Mat,
        frames: usize,
        ts: &[usize],
        texts: &[Mat],
        tracks: &[Mat],
        steps: usize,
    ) -> Result<Mat> {
        self.check(model)?;
        for &t in ts {
            if t == 0 || t > steps {
                return Err(Error::Index { t, max: steps });
            }
        }
        if xs.ncols() != model.layout.width {
            return Err(Error::shape(format!(
                "motion width {} does not match D_m = {}",
                xs.ncols(),
                model.layout.width
            )));
        }
        let mut tape = Tape::new();
        let main = model.params.map("", &mut |_, m| tape.constant(m.clone()));
        let branch = self.params.map("", &mut |_, m| tape.constant(m.clone()));
        let batch = Batch::new(&mut tape, &model.config, xs.clone(), frames, ts, texts)?;
        let cond = ConditionBatch::new(tracks, frames, model.layout.len(), self.cond_dim)?;
        if tracks.len() != ts.len() {
            return Err(Error::shape("one condition track per batch item"));
        }
        let out = controlled_tape(&mut tape, &main, &branch, &model.layout, &batch, &cond);
        let out = tape.value(out).clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("controlled denoiser produced a non-finite value".into()));
        }
        Ok(out)
    }

    /// Checks that the branch fits the backbone's layout and depth.
    pub fn check(&self, model: &Model) -> Result<()> {
        let (n, d) = (model.layout.len(), model.layout.token_dim);
        if self.params.cond_proj.dim() != (self.cond_dim, n * d) {
            return Err(Error::Compat(format!(
                "condition projection {:?} does not fit {n} parts × {d}",
                self.params.cond_proj.dim()
            )));
        }
        if self.depth() > model.params.layers.len() {
            return Err(Error::Compat("branch deeper than backbone".into()));
        }
        if let Some(l) = self.params.layers.first() {
            if l.dims() != model.params.layers[0].dims() {
                return Err(Error::Compat("branch layer dims differ from backbone".into()));
            }
        }
        Ok(())
    }
}

pub fn controlled_forward(
    model: &Model,
    branch: &ControlModel,
    x_t: &Mat,
    t: usize,
    text: &Mat,
    track: &Mat,
    steps: usize,
) -> Result<Mat> {
    branch.denoise_batch(
        model,
        x_t,
        x_t.nrows(),
        &[t],
        std::slice::from_ref(text),
        std::slice::from_ref(track),
        steps,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    FullFreeze,
    LocalUnfreeze,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub mode: FreezeMode,
    #[serde(default)]
    pub unfrozen_parts: Vec<String>,
}

impl FreezePolicy {
    pub fn full() -> Self {
        Self {
            mode: FreezeMode::FullFreeze,
            unfrozen_parts: Vec::new(),
        }
    }

    pub fn local(parts: &[&str]) -> Self {
        Self {
            mode: FreezeMode::LocalUnfreeze,
            unfrozen_parts: parts.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Hands, jaw and face expression.
    pub fn speech_default() -> Self {
        Self::local(&["left-hand", "right-hand", "jaw", "face-expression"])
    }

    pub fn music_default() -> Self {
        Self::local(&["left-hand", "right-hand"])
    }
}

/// Sets the codec trainable flags and returns every trainable tensor name,
/// prefixed `backbone.` or `branch.`.
pub fn set_freeze_policy(model: &mut Model, branch: &ControlModel, policy: &FreezePolicy) -> Result<BTreeSet<String>> {
    if policy.mode == FreezeMode::FullFreeze && !policy.unfrozen_parts.is_empty() {
        return Err(Error::config("full-freeze policy cannot list unfrozen parts"));
    }
    for name in &policy.unfrozen_parts {
        if model.layout.part_index(name).is_none() {
            return Err(Error::config(format!("unknown body part {name:?}")));
        }
    }
    let codec = &mut model.params.codec;
    for (p, flag) in codec.trainable.iter_mut().enumerate() {
        *flag = policy.unfrozen_parts.contains(&codec.names[p]);
    }
    let mut set = BTreeSet::new();
    branch.params.visit("branch", &mut |n, _| {
        set.insert(n);
    });
    model.params.visit("backbone", &mut |n, _| {
        if backbone_trainable(&model.params, &n) {
            set.insert(n);
        }
    });
    Ok(set)
}

/// Whether a stage-2 backbone tensor (named with the `backbone.` prefix or
/// without it) is trainable under the current codec flags.
pub fn backbone_trainable<T>(params: &Backbone<T>, name: &str) -> bool {
    let name = name.strip_prefix("backbone.").unwrap_or(name);
    if !name.starts_with("codec.") {
        return false;
    }
    params.codec.part_of(name).is_some_and(|p| params.codec.trainable[p])
}
