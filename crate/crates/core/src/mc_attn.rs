//! One MC-Attn layer.
//!
//! Three parallel branches read the same part tokens: a static graph branch
//! mixing parts through a learned adjacency `A_s`, a dynamic branch using
//! per-frame attention over parts as edge weights, and a temporal branch
//! attending over frames of one part stream with the text tokens appended to
//! the keys and values. Wiring:
//!
//! ```text
//! h   = LayerNorm(X + E_s + E_d + E_t)
//! out = h + MoE(h)
//! ```
//!
//! Tokens are stored as rows `((b·F) + f)·N_b + p` of a `B·F·N_b × D_b`
//! matrix so a whole batch runs through one tape.

use std::rc::Rc;

use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttnGroup, AttnPlan, Mat, Tape, Var};
use crate::params::{join, ones_row, xavier_uniform, zeros_row, ParamTree};
use crate::{Error, Result};

pub const FFN_HIDDEN: usize = 256;
pub const DEFAULT_EXPERTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub parts: usize,
    pub token_dim: usize,
    pub text_dim: usize,
    pub experts: usize,
    pub hidden: usize,
}

impl LayerDims {
    pub fn new(parts: usize, token_dim: usize, text_dim: usize, experts: usize) -> Self {
        Self {
            parts,
            token_dim,
            text_dim,
            experts,
            hidden: FFN_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts < 1 {
            return Err(Error::config("mixture of experts needs at least one expert"));
        }
        if self.parts == 0 || self.token_dim == 0 || self.text_dim == 0 || self.hidden == 0 {
            return Err(Error::config(format!("layer dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Closed-form parameter count of one layer.
    pub fn param_count(&self) -> usize {
        let (n, d, t, e, h) = (self.parts, self.token_dim, self.text_dim, self.experts, self.hidden);
        n * n + 6 * d * d + 2 * t * d + 2 * d + d * e + e * (2 * d * h + h + d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McAttnLayer<T> {
    pub a_s: T,
    pub dyn_q: T,
    pub dyn_k: T,
    pub dyn_v: T,
    pub tmp_q: T,
    pub tmp_k: T,
    pub tmp_v: T,
    pub text_k: T,
    pub text_v: T,
    pub norm_gamma: T,
    pub norm_beta: T,
    pub gate: T,
    pub experts: Vec<Expert<T>>,
}

impl<T> McAttnLayer<T> {
    fn singles(&self) -> [(&'static str, &T); 12] {
        [
            ("a_s", &self.a_s),
            ("dynamic.q", &self.dyn_q),
            ("dynamic.k", &self.dyn_k),
            ("dynamic.v", &self.dyn_v),
            ("temporal.q", &self.tmp_q),
            ("temporal.k", &self.tmp_k),
            ("temporal.v", &self.tmp_v),
            ("temporal.text_k", &self.text_k),
            ("temporal.text_v", &self.text_v),
            ("norm.gamma", &self.norm_gamma),
            ("norm.beta", &self.norm_beta),
            ("moe.gate", &self.gate),
        ]
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> McAttnLayer<U> {
        let mut g = |name: &str, v: &T| f(&join(prefix, name), v);
        McAttnLayer {
            a_s: g("a_s", &self.a_s),
            dyn_q: g("dynamic.q", &self.dyn_q),
            dyn_k: g("dynamic.k", &self.dyn_k),
            dyn_v: g("dynamic.v", &self.dyn_v),
            tmp_q: g("temporal.q", &self.tmp_q),
            tmp_k: g("temporal.k", &self.tmp_k),
            tmp_v: g("temporal.v", &self.tmp_v),
            text_k: g("temporal.text_k", &self.text_k),
            text_v: g("temporal.text_v", &self.text_v),
            norm_gamma: g("norm.gamma", &self.norm_gamma),
            norm_beta: g("norm.beta", &self.norm_beta),
            gate: g("moe.gate", &self.gate),
            experts: self
                .experts
                .iter()
                .enumerate()
                .map(|(e, x)| Expert {
                    w1: g(&format!("moe.experts.{e}.w1"), &x.w1),
                    b1: g(&format!("moe.experts.{e}.b1"), &x.b1),
                    w2: g(&format!("moe.experts.{e}.w2"), &x.w2),
                    b2: g(&format!("moe.experts.{e}.b2"), &x.b2),
                })
                .collect(),
        }
    }
}

impl<T> ParamTree<T> for McAttnLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (name, v) in self.singles() {
            f(join(prefix, name), v);
        }
        for (e, x) in self.experts.iter().enumerate() {
            f(join(prefix, &format!("moe.experts.{e}.w1")), &x.w1);
            f(join(prefix, &format!("moe.experts.{e}.b1")), &x.b1);
            f(join(prefix, &format!("moe.experts.{e}.w2")), &x.w2);
            f(join(prefix, &format!("moe.experts.{e}.b2")), &x.b2);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (name, v) in [
            ("a_s", &mut self.a_s),
            ("dynamic.q", &mut self.dyn_q),
            ("dynamic.k", &mut self.dyn_k),
            ("dynamic.v", &mut self.dyn_v),
            ("temporal.q", &mut self.tmp_q),
            ("temporal.k", &mut self.tmp_k),
            ("temporal.v", &mut self.tmp_v),
            ("temporal.text_k", &mut self.text_k),
            ("temporal.text_v", &mut self.text_v),
            ("norm.gamma", &mut self.norm_gamma),
            ("norm.beta", &mut self.norm_beta),
            ("moe.gate", &mut self.gate),
        ] {
            f(join(prefix, name), v);
        }
        for (e, x) in self.experts.iter_mut().enumerate() {
            f(join(prefix, &format!("moe.experts.{e}.w1")), &mut x.w1);
            f(join(prefix, &format!("moe.experts.{e}.b1")), &mut x.b1);
            f(join(prefix, &format!("moe.experts.{e}.w2")), &mut x.w2);
            f(join(prefix, &format!("moe.experts.{e}.b2")), &mut x.b2);
        }
    }
}

impl McAttnLayer<Mat> {
    pub fn dims(&self) -> LayerDims {
        LayerDims {
            parts: self.a_s.nrows(),
            token_dim: self.dyn_q.nrows(),
            text_dim: self.text_k.nrows(),
            experts: self.experts.len(),
            hidden: self.experts[0].w1.ncols(),
        }
    }
}

/// `A_s = I`, uniform projections, unit/zero norm affine, zero expert biases.
pub fn init_layer(parts: usize, token_dim: usize, text_dim: usize, experts: usize, seed: u64) -> Result<McAttnLayer<Mat>> {
    init_layer_with(LayerDims::new(parts, token_dim, text_dim, experts), seed)
}

pub fn init_layer_with(dims: LayerDims, seed: u64) -> Result<McAttnLayer<Mat>> {
    dims.validate()?;
    let LayerDims {
        parts: n,
        token_dim: d,
        text_dim: t,
        experts: e,
        hidden: h,
    } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = |i, o| xavier_uniform(&mut rng, i, o);
    let dyn_q = x(d, d);
    let dyn_k = x(d, d);
    let dyn_v = x(d, d);
    let tmp_q = x(d, d);
    let tmp_k = x(d, d);
    let tmp_v = x(d, d);
    let text_k = x(t, d);
    let text_v = x(t, d);
    let gate = x(d, e);
    let experts = (0..e)
        .map(|_| Expert {
            w1: x(d, h),
            b1: zeros_row(h),
            w2: x(h, d),
            b2: zeros_row(d),
        })
        .collect();
    Ok(McAttnLayer {
        a_s: Mat::eye(n),
        dyn_q,
        dyn_k,
        dyn_v,
        tmp_q,
        tmp_k,
        tmp_v,
        text_k,
        text_v,
        norm_gamma: ones_row(d),
        norm_beta: zeros_row(d),
        gate,
        experts,
    })
}

/// Sinusoidal encoding of position `pos` in `dim` channels (sin on even, cos
/// on odd indices, base 10000).
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// Row bookkeeping and attention plans for a batch of token grids.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub batch: usize,
    pub frames: usize,
    pub parts: usize,
    pub token_dim: usize,
    /// Text rows per batch item, stacked in order.
    pub text_lens: Vec<usize>,
    dynamic: Rc<AttnPlan>,
    temporal: Rc<AttnPlan>,
    pe: Option<Rc<Mat>>,
}

impl TokenGrid {
    pub fn new(batch: usize, frames: usize, parts: usize, token_dim: usize, text_lens: Vec<usize>, positional: bool) -> Self {
        assert_eq!(text_lens.len(), batch, "one text length per batch item");
        let row = |b: usize, f: usize, p: usize| (b * frames + f) * parts + p;
        let motion_rows = batch * frames * parts;
        let mut dynamic = AttnPlan::default();
        for b in 0..batch {
            for f in 0..frames {
                let rows: Vec<usize> = (0..parts).map(|p| row(b, f, p)).collect();
                dynamic.groups.push(AttnGroup {
                    queries: rows.clone(),
                    keys: rows,
                });
            }
        }
        let mut temporal = AttnPlan::default();
        let mut text_start = motion_rows;
        for (b, &nt) in text_lens.iter().enumerate() {
            for p in 0..parts {
                let queries: Vec<usize> = (0..frames).map(|f| row(b, f, p)).collect();
                let mut keys = queries.clone();
                keys.extend(text_start..text_start + nt);
                temporal.groups.push(AttnGroup { queries, keys });
            }
            text_start += nt;
        }
        let pe = positional.then(|| {
            let mut m = Mat::zeros((motion_rows, token_dim));
            for f in 0..frames {
                let enc = ndarray::Array1::from(sinusoid(f as f64, token_dim));
                for b in 0..batch {
                    for p in 0..parts {
                        m.row_mut(row(b, f, p)).assign(&enc);
                    }
                }
            }
            Rc::new(m)
        });
        Self {
            batch,
            frames,
            parts,
            token_dim,
            text_lens,
            dynamic: Rc::new(dynamic),
            temporal: Rc::new(temporal),
            pe,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.frames * self.parts
    }

    pub fn text_rows(&self) -> usize {
        self.text_lens.iter().sum()
    }

    pub fn positional(&self) -> bool {
        self.pe.is_some()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.token_dim as f64).sqrt()
    }
}

pub fn static_tape(tape: &mut Tape, x: Var, p: &McAttnLayer<Var>) -> Var {
    tape.part_mix(p.a_s, x)
}

pub fn dynamic_tape(tape: &mut Tape, x: Var, p: &McAttnLayer<Var>, grid: &TokenGrid) -> Var {
    let q = tape.matmul(x, p.dyn_q);
    let k = tape.matmul(x, p.dyn_k);
    let v = tape.matmul(x, p.dyn_v);
    tape.attention(q, k, v, grid.dynamic.clone(), grid.scale())
}

pub fn temporal_tape(tape: &mut Tape, x: Var, text: Option<Var>, p: &McAttnLayer<Var>, grid: &TokenGrid) -> Var {
    let mut q = tape.matmul(x, p.tmp_q);
    let mut k = tape.matmul(x, p.tmp_k);
    let mut v = tape.matmul(x, p.tmp_v);
    if let Some(pe) = &grid.pe {
        let pe = tape.leaf_rc(pe.clone(), false);
        q = tape.add(q, pe);
        k = tape.add(k, pe);
    }
    if let Some(text) = text.filter(|_| grid.text_rows() > 0) {
        let kt = tape.matmul(text, p.text_k);
        let vt = tape.matmul(text, p.text_v);
        k = tape.concat_rows(k, kt);
        v = tape.concat_rows(v, vt);
    }
    tape.attention(q, k, v, grid.temporal.clone(), grid.scale())
}

pub fn moe_tape(tape: &mut Tape, x: Var, p: &McAttnLayer<Var>) -> Var {
    let logits = tape.matmul(x, p.gate);
    let gates = tape.softmax_rows(logits);
    let outs: Vec<Var> = p
        .experts
        .iter()
        .enumerate()
        .map(|(e, ex)| {
            let h = tape.linear(x, ex.w1, ex.b1);
            let h = tape.gelu(h);
            let y = tape.linear(h, ex.w2, ex.b2);
            tape.row_scale(y, gates, e)
        })
        .collect();
    tape.sum_all(&outs)
}

/// Full layer on the tape. `text` holds the stacked text rows of every batch
/// item (`Σ F_t × D_t`), or `None` when no item has text.
pub fn layer_tape(tape: &mut Tape, x: Var, text: Option<Var>, p: &McAttnLayer<Var>, grid: &TokenGrid) -> Var {
    let es = static_tape(tape, x, p);
    let ed = dynamic_tape(tape, x, p, grid);
    let et = temporal_tape(tape, x, text, p, grid);
    let sum = tape.sum_all(&[x, es, ed, et]);
    let h = tape.layer_norm(sum, p.norm_gamma, p.norm_beta);
    let m = moe_tape(tape, h, p);
    tape.add(h, m)
}

// ----------------------------------------------------------------------
// Array front ends for a single sequence
// ----------------------------------------------------------------------

fn flatten(h: &Array3<f64>) -> Mat {
    let (f, n, d) = h.dim();
    h.as_standard_layout()
        .into_owned()
        .into_shape_with_order((f * n, d))
        .expect("contiguous")
}

fn unflatten(m: &Mat, f: usize, n: usize) -> Array3<f64> {
    let d = m.ncols();
    m.clone().into_shape_with_order((f, n, d)).expect("row count")
}

fn check_tokens(h: &Array3<f64>, layer: &McAttnLayer<Mat>) -> Result<()> {
    let dims = layer.dims();
    let (_, n, d) = h.dim();
    if n != dims.parts || d != dims.token_dim {
        return Err(Error::shape(format!(
            "tokens are {n}×{d} per frame, layer expects {}×{}",
            dims.parts, dims.token_dim
        )));
    }
    Ok(())
}

fn check_text(text: &Mat, layer: &McAttnLayer<Mat>) -> Result<()> {
    if text.nrows() > 0 && text.ncols() != layer.dims().text_dim {
        return Err(Error::shape(format!(
            "text width {} does not match the text projections ({})",
            text.ncols(),
            layer.dims().text_dim
        )));
    }
    Ok(())
}

fn run(
    layer: &McAttnLayer<Mat>,
    h: &Array3<f64>,
    text: Option<&Mat>,
    positional: bool,
    body: impl FnOnce(&mut Tape, Var, Option<Var>, &McAttnLayer<Var>, &TokenGrid) -> Var,
) -> Mat {
    let (f, n, d) = h.dim();
    let text_len = text.map_or(0, |t| t.nrows());
    let grid = TokenGrid::new(1, f, n, d, vec![text_len], positional);
    let mut tape = Tape::new();
    let x = tape.constant(flatten(h));
    let t = text.filter(|t| t.nrows() > 0).map(|t| tape.constant(t.clone()));
    let p = layer.map("", &mut |_, m| tape.constant(m.clone()));
    let out = body(&mut tape, x, t, &p, &grid);
    tape.value(out).clone()
}

/// `E_s[f] = A_s · H_s[f]` for every frame.
pub fn static_forward(h: &Array3<f64>, a_s: &Mat) -> Result<Array3<f64>> {
    let (f, n, _) = h.dim();
    if a_s.dim() != (n, n) {
        return Err(Error::shape(format!("adjacency {:?} does not match {n} parts", a_s.dim())));
    }
    let mut tape = Tape::new();
    let a = tape.constant(a_s.clone());
    let x = tape.constant(flatten(h));
    let out = tape.part_mix(a, x);
    Ok(unflatten(tape.value(out), f, n))
}

/// Per-frame attention matrices `A_d` (`F_m × N_b × N_b`).
pub fn dynamic_scores(h: &Array3<f64>, layer: &McAttnLayer<Mat>) -> Result<Array3<f64>> {
    check_tokens(h, layer)?;
    let (f, n, d) = h.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array3::zeros((f, n, n));
    for fi in 0..f {
        let x = h.slice(s![fi, .., ..]);
        let q = x.dot(&layer.dyn_q);
        let k = x.dot(&layer.dyn_k);
        let a = crate::autograd::softmax_rows(&(q.dot(&k.t()) * scale));
        out.slice_mut(s![fi, .., ..]).assign(&a);
    }
    Ok(out)
}

pub fn dynamic_forward(h: &Array3<f64>, layer: &McAttnLayer<Mat>) -> Result<Array3<f64>> {
    check_tokens(h, layer)?;
    let (f, n, _) = h.dim();
    let out = run(layer, h, None, false, |t, x, _, p, g| dynamic_tape(t, x, p, g));
    Ok(unflatten(&out, f, n))
}

/// Temporal branch over each part stream; `text` may have zero rows.
pub fn temporal_forward(h: &Array3<f64>, text: &Mat, layer: &McAttnLayer<Mat>, positional: bool) -> Result<Array3<f64>> {
    check_tokens(h, layer)?;
    check_text(text, layer)?;
    let (f, n, _) = h.dim();
    let out = run(layer, h, Some(text), positional, temporal_tape);
    Ok(unflatten(&out, f, n))
}

/// Mixture of experts on `tokens × D_b` rows.
pub fn moe_forward(x: &Mat, layer: &McAttnLayer<Mat>) -> Result<Mat> {
    if x.ncols() != layer.dims().token_dim {
        return Err(Error::shape(format!(
            "token width {} does not match layer width {}",
            x.ncols(),
            layer.dims().token_dim
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = layer.map("", &mut |_, m| tape.constant(m.clone()));
    let out = moe_tape(&mut tape, xv, &p);
    Ok(tape.value(out).clone())
}

pub fn layer_forward(h: &Array3<f64>, text: &Mat, layer: &McAttnLayer<Mat>, positional: bool) -> Result<Array3<f64>> {
    check_tokens(h, layer)?;
    check_text(text, layer)?;
    let (f, n, _) = h.dim();
    let out = run(layer, h, Some(text), positional, layer_tape);
    Ok(unflatten(&out, f, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gelu_scalar, LAYER_NORM_EPS};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_tokens(rng: &mut ChaCha8Rng, f: usize, n: usize, d: usize) -> Array3<f64> {
        Array3::from_shape_fn((f, n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn row(m: &Mat, i: usize) -> Vec<f64> {
        m.row(i).to_vec()
    }

    fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
        (0..w.ncols()).map(|j| (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum()).collect()
    }

    /// Plain loop attention: one query list over one key/value list.
    fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
        q.iter()
            .map(|qi| {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = w.iter().sum();
                let mut out = vec![0.0; v[0].len()];
                for (wj, vj) in w.iter().zip(v) {
                    for (o, x) in out.iter_mut().zip(vj) {
                        *o += wj / z * x;
                    }
                }
                out
            })
            .collect()
    }

    fn naive_ffn(x: &[f64], ex: &Expert<Mat>) -> Vec<f64> {
        let h: Vec<f64> = vecmat(x, &ex.w1)
            .iter()
            .zip(ex.b1.iter())
            .map(|(a, b)| gelu_scalar(a + b))
            .collect();
        vecmat(&h, &ex.w2).iter().zip(ex.b2.iter()).map(|(a, b)| a + b).collect()
    }

    fn naive_moe(x: &[f64], layer: &McAttnLayer<Mat>) -> Vec<f64> {
        let logits = vecmat(x, &layer.gate);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut out = vec![0.0; x.len()];
        for (e, ex) in layer.experts.iter().enumerate() {
            for (o, y) in out.iter_mut().zip(naive_ffn(x, ex)) {
                *o += w[e] / z * y;
            }
        }
        out
    }

    fn naive_layer_norm(x: &[f64], g: &Mat, b: &Mat) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mu) / (var + LAYER_NORM_EPS).sqrt() * g[[0, i]] + b[[0, i]])
            .collect()
    }

    fn randomize(layer: &mut McAttnLayer<Mat>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        layer.visit_mut("", &mut |_, m| {
            let r = rand_mat(&mut rng, m.nrows(), m.ncols());
            *m = r;
        });
    }

    #[test]
    fn init_identity_and_determinism() {
        let a = init_layer(12, 64, 64, 4, 1).unwrap();
        assert_eq!(a.a_s, Mat::eye(12));
        assert_eq!(a, init_layer(12, 64, 64, 4, 1).unwrap());
        assert_ne!(a.dyn_q, init_layer(12, 64, 64, 4, 2).unwrap().dyn_q);
        assert!(matches!(init_layer(12, 64, 64, 0, 1), Err(Error::Config(_))));
        let bound = (6.0f64 / 128.0).sqrt();
        assert!(a.dyn_q.iter().all(|v| v.abs() <= bound));
        let mut count = 0;
        a.visit("", &mut |_, m| count += m.len());
        assert_eq!(count, a.dims().param_count());
    }

    #[test]
    fn static_identity_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_tokens(&mut rng, 3, 4, 5);
        assert_eq!(static_forward(&h, &Mat::eye(4)).unwrap(), h);
        let h2 = rand_tokens(&mut rng, 2, 2, 3);
        let swap = Mat::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = static_forward(&h2, &swap).unwrap();
        for f in 0..2 {
            assert_eq!(out.slice(s![f, 0, ..]), h2.slice(s![f, 1, ..]));
            assert_eq!(out.slice(s![f, 1, ..]), h2.slice(s![f, 0, ..]));
        }
        assert!(static_forward(&h, &Mat::eye(3)).is_err());
    }

    #[test]
    fn static_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = rand_tokens(&mut rng, 4, 5, 6);
        let a = rand_mat(&mut rng, 5, 5);
        let out = static_forward(&h, &a).unwrap();
        for f in 0..4 {
            for p in 0..5 {
                for k in 0..6 {
                    let want: f64 = (0..5).map(|q| a[[p, q]] * h[[f, q, k]]).sum();
                    assert!((out[[f, p, k]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dynamic_single_part_and_uniform_rows() {
        let layer = init_layer(1, 4, 3, 1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = rand_tokens(&mut rng, 3, 1, 4);
        let out = dynamic_forward(&h, &layer).unwrap();
        for f in 0..3 {
            let want = vecmat(&h.slice(s![f, 0, ..]).to_vec(), &layer.dyn_v);
            for k in 0..4 {
                assert!((out[[f, 0, k]] - want[k]).abs() < 1e-12);
            }
        }
        let layer = init_layer(5, 4, 3, 1, 4).unwrap();
        let tok = [0.3, -0.2, 0.7, 0.1];
        let same = Array3::from_shape_fn((2, 5, 4), |(_, _, k)| tok[k]);
        let a = dynamic_scores(&same, &layer).unwrap();
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn dynamic_matches_naive_attention() {
        let layer = init_layer(6, 8, 3, 2, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = rand_tokens(&mut rng, 4, 6, 8);
        let out = dynamic_forward(&h, &layer).unwrap();
        let scores = dynamic_scores(&h, &layer).unwrap();
        for f in 0..4 {
            let x: Vec<Vec<f64>> = (0..6).map(|p| h.slice(s![f, p, ..]).to_vec()).collect();
            let q: Vec<_> = x.iter().map(|v| vecmat(v, &layer.dyn_q)).collect();
            let k: Vec<_> = x.iter().map(|v| vecmat(v, &layer.dyn_k)).collect();
            let v: Vec<_> = x.iter().map(|v| vecmat(v, &layer.dyn_v)).collect();
            let want = naive_attention(&q, &k, &v, 1.0 / 8f64.sqrt());
            for p in 0..6 {
                for c in 0..8 {
                    assert!((out[[f, p, c]] - want[p][c]).abs() < 1e-10);
                }
                let rs: f64 = scores.slice(s![f, p, ..]).sum();
                assert!((rs - 1.0).abs() < 1e-6);
            }
        }
    }

    fn temporal_oracle(h: &Array3<f64>, text: &Mat, layer: &McAttnLayer<Mat>, positional: bool) -> Array3<f64> {
        let (f, n, d) = h.dim();
        let mut out = Array3::zeros((f, n, d));
        for p in 0..n {
            let x: Vec<Vec<f64>> = (0..f).map(|fi| h.slice(s![fi, p, ..]).to_vec()).collect();
            let pe = |fi: usize, v: Vec<f64>| -> Vec<f64> {
                if positional {
                    v.iter().zip(sinusoid(fi as f64, d)).map(|(a, b)| a + b).collect()
                } else {
                    v
                }
            };
            let q: Vec<_> = x.iter().enumerate().map(|(i, v)| pe(i, vecmat(v, &layer.tmp_q))).collect();
            let mut k: Vec<_> = x.iter().enumerate().map(|(i, v)| pe(i, vecmat(v, &layer.tmp_k))).collect();
            let mut v: Vec<_> = x.iter().map(|v| vecmat(v, &layer.tmp_v)).collect();
            for t in 0..text.nrows() {
                k.push(vecmat(&row(text, t), &layer.text_k));
                v.push(vecmat(&row(text, t), &layer.text_v));
            }
            let o = naive_attention(&q, &k, &v, 1.0 / (d as f64).sqrt());
            for fi in 0..f {
                for c in 0..d {
                    out[[fi, p, c]] = o[fi][c];
                }
            }
        }
        out
    }

    #[test]
    fn temporal_single_frame_without_text() {
        let layer = init_layer(3, 4, 5, 1, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = rand_tokens(&mut rng, 1, 3, 4);
        let out = temporal_forward(&h, &Mat::zeros((0, 5)), &layer, false).unwrap();
        for p in 0..3 {
            let want = vecmat(&h.slice(s![0, p, ..]).to_vec(), &layer.tmp_v);
            for c in 0..4 {
                assert!((out[[0, p, c]] - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_matches_self_attention_oracle() {
        let layer = init_layer(3, 6, 5, 1, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = rand_tokens(&mut rng, 7, 3, 6);
        let empty = Mat::zeros((0, 5));
        for positional in [false, true] {
            let out = temporal_forward(&h, &empty, &layer, positional).unwrap();
            let want = temporal_oracle(&h, &empty, &layer, positional);
            assert!((&out - &want).iter().all(|v| v.abs() < 1e-10));
        }
        let text = rand_mat(&mut rng, 4, 5);
        let out = temporal_forward(&h, &text, &layer, true).unwrap();
        let want = temporal_oracle(&h, &text, &layer, true);
        assert!((&out - &want).iter().all(|v| v.abs() < 1e-10));
        assert!(temporal_forward(&h, &rand_mat(&mut rng, 2, 4), &layer, false).is_err());
    }

    #[test]
    fn dominant_text_key_takes_over() {
        let mut layer = init_layer(2, 4, 3, 1, 12).unwrap();
        layer.text_k = Mat::from_elem((3, 4), 1.0);
        layer.tmp_q = Mat::from_elem((4, 4), 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = rand_tokens(&mut rng, 3, 2, 4).mapv(|v| v.abs() + 0.5);
        let text = Mat::from_shape_vec((1, 3), vec![400.0, 400.0, 400.0]).unwrap();
        let out = temporal_forward(&h, &text, &layer, false).unwrap();
        let want = temporal_oracle(&h, &text, &layer, false);
        assert!((&out - &want).iter().all(|v| v.abs() < 1e-10));
        let vt = vecmat(&row(&text, 0), &layer.text_v);
        for f in 0..3 {
            for p in 0..2 {
                for c in 0..4 {
                    assert!((out[[f, p, c]] - vt[c]).abs() < 1e-6 * vt[c].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn moe_degenerate_cases_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut one = init_layer(2, 5, 3, 1, 15).unwrap();
        randomize(&mut one, 16);
        let x = rand_mat(&mut rng, 6, 5);
        let out = moe_forward(&x, &one).unwrap();
        for r in 0..6 {
            let want = naive_ffn(&row(&x, r), &one.experts[0]);
            for c in 0..5 {
                assert!((out[[r, c]] - want[c]).abs() < 1e-12);
            }
        }

        let mut same = init_layer(2, 5, 3, 3, 17).unwrap();
        randomize(&mut same, 18);
        let e0 = same.experts[0].clone();
        same.experts.iter_mut().for_each(|e| *e = e0.clone());
        let a = moe_forward(&x, &same).unwrap();
        same.gate = rand_mat(&mut rng, 5, 3) * 10.0;
        let b = moe_forward(&x, &same).unwrap();
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));

        let mut four = init_layer(2, 5, 3, 4, 19).unwrap();
        randomize(&mut four, 20);
        let out = moe_forward(&x, &four).unwrap();
        for r in 0..6 {
            let want = naive_moe(&row(&x, r), &four);
            for c in 0..5 {
                assert!((out[[r, c]] - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_projections_give_layer_norm_of_double() {
        let mut layer = init_layer(4, 6, 3, 2, 21).unwrap();
        layer.visit_mut("", &mut |name, m| {
            if name != "a_s" && !name.starts_with("norm") {
                m.fill(0.0);
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = rand_tokens(&mut rng, 3, 4, 6);
        let text = rand_mat(&mut rng, 2, 3);
        let out = layer_forward(&h, &text, &layer, true).unwrap();
        for f in 0..3 {
            for p in 0..4 {
                let x: Vec<f64> = h.slice(s![f, p, ..]).iter().map(|v| 2.0 * v).collect();
                let want = naive_layer_norm(&x, &layer.norm_gamma, &layer.norm_beta);
                for c in 0..6 {
                    assert!((out[[f, p, c]] - want[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_scalar_oracle() {
        let mut layer = init_layer(1, 3, 2, 2, 23).unwrap();
        randomize(&mut layer, 24);
        let h = Array3::from_shape_vec((1, 1, 3), vec![0.4, -0.9, 0.25]).unwrap();
        let out = layer_forward(&h, &Mat::zeros((0, 2)), &layer, false).unwrap();
        let x = h.as_slice().unwrap().to_vec();
        let a = layer.a_s[[0, 0]];
        let ed = vecmat(&x, &layer.dyn_v);
        let et = vecmat(&x, &layer.tmp_v);
        let sum: Vec<f64> = (0..3).map(|i| x[i] + a * x[i] + ed[i] + et[i]).collect();
        let hn = naive_layer_norm(&sum, &layer.norm_gamma, &layer.norm_beta);
        let moe = naive_moe(&hn, &layer);
        for c in 0..3 {
            assert!((out[[0, 0, c]] - (hn[c] + moe[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_permutation_equivariance() {
        let mut layer = init_layer(3, 4, 2, 2, 25).unwrap();
        randomize(&mut layer, 26);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let h = rand_tokens(&mut rng, 5, 3, 4);
        let perm = [3usize, 0, 4, 1, 2];
        let hp = Array3::from_shape_fn((5, 3, 4), |(f, p, c)| h[[perm[f], p, c]]);
        let permuted = |a: &Array3<f64>| Array3::from_shape_fn((5, 3, 4), |(f, p, c)| a[[perm[f], p, c]]);
        let empty = Mat::zeros((0, 2));
        let close = |a: &Array3<f64>, b: &Array3<f64>| (a - b).iter().all(|v| v.abs() < 1e-12);
        assert!(close(&static_forward(&hp, &layer.a_s).unwrap(), &permuted(&static_forward(&h, &layer.a_s).unwrap())));
        assert!(close(&dynamic_forward(&hp, &layer).unwrap(), &permuted(&dynamic_forward(&h, &layer).unwrap())));
        assert!(close(
            &layer_forward(&hp, &empty, &layer, false).unwrap(),
            &permuted(&layer_forward(&h, &empty, &layer, false).unwrap())
        ));
        assert!(!close(
            &layer_forward(&hp, &empty, &layer, true).unwrap(),
            &permuted(&layer_forward(&h, &empty, &layer, true).unwrap())
        ));
    }

    #[test]
    fn batched_grid_matches_per_item() {
        let mut layer = init_layer(3, 4, 2, 2, 28).unwrap();
        randomize(&mut layer, 29);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let h0 = rand_tokens(&mut rng, 4, 3, 4);
        let h1 = rand_tokens(&mut rng, 4, 3, 4);
        let t0 = rand_mat(&mut rng, 2, 2);
        let t1 = rand_mat(&mut rng, 3, 2);
        let grid = TokenGrid::new(2, 4, 3, 4, vec![2, 3], true);
        let mut tape = Tape::new();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &[flatten(&h0).view(), flatten(&h1).view()]).unwrap();
        let texts = ndarray::concatenate(ndarray::Axis(0), &[t0.view(), t1.view()]).unwrap();
        let x = tape.constant(stacked);
        let t = tape.constant(texts);
        let p = layer.map("", &mut |_, m| tape.constant(m.clone()));
        let out = layer_tape(&mut tape, x, Some(t), &p, &grid);
        let out = tape.value(out).clone();
        let a = flatten(&layer_forward(&h0, &t0, &layer, true).unwrap());
        let b = flatten(&layer_forward(&h1, &t1, &layer, true).unwrap());
        assert!((&out.slice(s![..12, ..]) - &a).iter().all(|v| v.abs() < 1e-12));
        assert!((&out.slice(s![12.., ..]) - &b).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let (n, d, fm, ft) = (3, 4, 5, 2);
        let mut layer = init_layer(n, d, 3, 2, 31).unwrap();
        randomize(&mut layer, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let h = flatten(&rand_tokens(&mut rng, fm, n, d));
        let text = rand_mat(&mut rng, ft, 3);
        let probe = rand_mat(&mut rng, fm * n, d);
        let grid = TokenGrid::new(1, fm, n, d, vec![ft], true);

        let loss = |layer: &McAttnLayer<Mat>, h: &Mat| -> (f64, Option<(McAttnLayer<Option<Mat>>, Mat)>) {
            let mut tape = Tape::new();
            let x = tape.leaf(h.clone(), true);
            let t = tape.constant(text.clone());
            let p = layer.map("", &mut |_, m| tape.leaf(m.clone(), true));
            let out = layer_tape(&mut tape, x, Some(t), &p, &grid);
            let pr = tape.constant(probe.clone());
            let prod = tape.mul(out, pr);
            let l = tape.sum(prod);
            let grads = tape.backward(l);
            let gp = p.map("", &mut |_, v| grads.get(*v).cloned());
            (tape.scalar(l), Some((gp, grads.get(x).unwrap().clone())))
        };

        let (_, g) = loss(&layer, &h);
        let (gp, gx) = g.unwrap();
        let eps = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs().max(b.abs()).max(1e-3));
        let mut worst: f64 = 0.0;

        let mut analytic = Vec::new();
        gp.visit("", &mut |name, g| analytic.push((name, g.clone().unwrap())));
        for (name, g) in &analytic {
            let shape = g.dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let bumped = |delta: f64| {
                        let mut l2 = layer.clone();
                        l2.visit_mut("", &mut |n2, m| {
                            if &n2 == name {
                                m[[i, j]] += delta;
                            }
                        });
                        loss(&l2, &h).0
                    };
                    let fd = (bumped(eps) - bumped(-eps)) / (2.0 * eps);
                    worst = worst.max(rel(fd, g[[i, j]]));
                }
            }
        }
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                let mut hp = h.clone();
                hp[[i, j]] += eps;
                let mut hm = h.clone();
                hm[[i, j]] -= eps;
                let fd = (loss(&layer, &hp).0 - loss(&layer, &hm).0) / (2.0 * eps);
                worst = worst.max(rel(fd, gx[[i, j]]));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    proptest! {
        #[test]
        fn static_branch_part_permutation(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let a = rand_mat(&mut rng, n, n);
            let h = rand_tokens(&mut rng, 2, n, 3);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // P·H reorders parts: (P·H)[p] = H[perm[p]]; P A Pᵀ[p,q] = A[perm[p], perm[q]].
            let pa = Mat::from_shape_fn((n, n), |(p, q)| a[[perm[p], perm[q]]]);
            let ph = Array3::from_shape_fn((2, n, 3), |(f, p, c)| h[[f, perm[p], c]]);
            let lhs = static_forward(&ph, &pa).unwrap();
            let base = static_forward(&h, &a).unwrap();
            let rhs = Array3::from_shape_fn((2, n, 3), |(f, p, c)| base[[f, perm[p], c]]);
            prop_assert!((lhs - rhs).iter().all(|v| v.abs() < 1e-12));
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..500) {
            let mut layer = init_layer(5, 4, 3, 3, seed).unwrap();
            randomize(&mut layer, seed + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = rand_tokens(&mut rng, 3, 5, 4);
            let a = dynamic_scores(&h, &layer).unwrap();
            for r in a.sum_axis(ndarray::Axis(2)).iter() {
                prop_assert!((r - 1.0).abs() < 1e-6);
            }
            let gates = crate::autograd::softmax_rows(&flatten(&h).dot(&layer.gate));
            for r in gates.sum_axis(ndarray::Axis(1)).iter() {
                prop_assert!((r - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn fresh_layer_static_branch_is_identity(seed in 0u64..500) {
            let layer = init_layer(6, 4, 3, 2, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = rand_tokens(&mut rng, 2, 6, 4);
            prop_assert_eq!(static_forward(&h, &layer.a_s).unwrap(), h);
        }
    }
}
