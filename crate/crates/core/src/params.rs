//! Named parameter trees.
//!
//! Model parameter structs are generic over their leaf type so the same
//! layout can hold weights (`Mat`), tape handles (`Var`), gradients
//! (`Option<Mat>`) or optimizer moments. [`ParamTree`] walks the leaves in a
//! fixed order with stable dotted names.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Mat, Var};

pub trait ParamTree<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> ParamTree<T> for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, v) in self.iter().enumerate() {
            f(join(prefix, &i.to_string()), v);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, v) in self.iter_mut().enumerate() {
            f(join(prefix, &i.to_string()), v);
        }
    }
}

/// Flattened `(name, leaf)` list in visit order.
pub fn named<T, P: ParamTree<T>>(tree: &P) -> Vec<(String, &T)> {
    let mut out = Vec::new();
    tree.visit("", &mut |n, v| out.push((n, v)));
    out
}

pub fn param_count<P: ParamTree<Mat>>(tree: &P) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, m| n += m.len());
    n
}

/// SHA-256 over the exact bit patterns of one tensor.
pub fn tensor_checksum(m: &Mat) -> String {
    let mut h = Sha256::new();
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Per-tensor checksums keyed by parameter name.
pub fn checksums<P: ParamTree<Mat>>(tree: &P) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    tree.visit("", &mut |n, m| {
        out.insert(n, tensor_checksum(m));
    });
    out
}

/// Uniform init with bound `√(6/(fan_in+fan_out))`.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

pub fn zeros_row(n: usize) -> Mat {
    Mat::zeros((1, n))
}

pub fn ones_row(n: usize) -> Mat {
    Mat::ones((1, n))
}

/// Gradients of a tree of tape leaves, in visit order.
pub fn grads_of<P: ParamTree<Var>>(grads: &Gradients, vars: &P) -> Vec<Option<Mat>> {
    let mut out = Vec::new();
    vars.visit("", &mut |_, v| out.push(grads.get(*v).cloned()));
    out
}

/// Adam with bias correction; moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Mat, Mat)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is aligned with the tree's visit order;
    /// leaves with `None` are left untouched.
    pub fn step<P: ParamTree<Mat>>(&mut self, tree: &mut P, grads: &[Option<Mat>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let moments = &mut self.moments;
        let mut idx = 0;
        tree.visit_mut("", &mut |name, w| {
            let g = grads[idx].as_ref();
            idx += 1;
            let Some(g) = g else { return };
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (Mat::zeros(w.dim()), Mat::zeros(w.dim())));
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        });
        assert_eq!(idx, grads.len(), "gradient list does not match the parameter tree");
    }
}

/// Cosine decay from `start` at step 0 to `end` at step `total − 1`.
pub fn cosine_lr(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return start;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * progress).cos())
}
