//! Body-part partition of the channel vector and the per-part codecs that
//! map channel slices to `D_b`-dimensional part tokens.

use std::collections::BTreeMap;
use std::ops::Range;
use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::motion_repr::{ChannelLayout, DEFAULT_JOINTS};
use crate::params::{join, xavier_uniform, zeros_row, ParamTree};
use crate::{Error, Result};

pub const DEFAULT_TOKEN_DIM: usize = 64;
pub const DEFAULT_PARTS: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPart {
    pub name: String,
    pub ranges: Vec<Range<usize>>,
}

impl BodyPart {
    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn columns(&self) -> Vec<usize> {
        self.ranges.iter().flat_map(|r| r.clone()).collect()
    }
}

/// Ordered partition of `[0, D_m)` into named parts plus the token width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPartLayout {
    pub parts: Vec<BodyPart>,
    pub width: usize,
    pub token_dim: usize,
}

impl BodyPartLayout {
    pub fn new(parts: Vec<BodyPart>, width: usize, token_dim: usize) -> Result<Self> {
        if parts.is_empty() || token_dim == 0 {
            return Err(Error::Layout("need at least one part and a positive token width".into()));
        }
        let mut owner: Vec<Option<usize>> = vec![None; width];
        for (p, part) in parts.iter().enumerate() {
            if part.is_empty() {
                return Err(Error::Layout(format!("part {:?} is empty", part.name)));
            }
            for c in part.columns() {
                match owner.get_mut(c) {
                    None => return Err(Error::Layout(format!("part {:?} exceeds width {width}", part.name))),
                    Some(Some(q)) => {
                        return Err(Error::Layout(format!(
                            "channel {c} claimed by both {:?} and {:?}",
                            parts[*q].name, part.name
                        )))
                    }
                    Some(slot) => *slot = Some(p),
                }
            }
        }
        if let Some(c) = owner.iter().position(|o| o.is_none()) {
            return Err(Error::Layout(format!("channel {c} belongs to no part")));
        }
        Ok(Self { parts, width, token_dim })
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.parts.iter().position(|p| p.name == name)
    }

    pub fn column_lists(&self) -> Rc<Vec<Vec<usize>>> {
        Rc::new(self.parts.iter().map(BodyPart::columns).collect())
    }

    pub fn with_token_dim(mut self, token_dim: usize) -> Result<Self> {
        if token_dim == 0 {
            return Err(Error::Layout("token width must be positive".into()));
        }
        self.token_dim = token_dim;
        Ok(self)
    }

    /// JSON object mapping part name to its `[start, end)` ranges.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, Vec<[usize; 2]>> = self
            .parts
            .iter()
            .map(|p| (p.name.as_str(), p.ranges.iter().map(|r| [r.start, r.end]).collect()))
            .collect();
        serde_json::to_value(map).expect("plain map serializes")
    }
}

/// Fixed 12-part partition of the default whole-body layout.
pub fn default_body_partition(joints: usize) -> Result<BodyPartLayout> {
    if joints != DEFAULT_JOINTS {
        return Err(Error::Layout(format!(
            "no registered partition for {joints} joints (only {DEFAULT_JOINTS})"
        )));
    }
    let l = ChannelLayout::default();
    let joint = |name: &str| l.joint(l.joint_index(name).expect("default table"));
    let joints_of = |names: &[&str]| -> Vec<Range<usize>> { names.iter().map(|n| joint(n)).collect() };
    let hand = |side: &str| {
        let first = l.joint_index(&format!("{side}_index1")).expect("default table");
        vec![l.joint(first).start..l.joint(first + 14).end]
    };
    let part = |name: &str, ranges: Vec<Range<usize>>| BodyPart {
        name: name.into(),
        ranges: merge(ranges),
    };
    let parts = vec![
        part("root", vec![l.root_rot(), l.root_traj()]),
        part("spine", joints_of(&["spine1", "spine2", "spine3"])),
        part("head+neck", joints_of(&["neck", "head", "eyes"])),
        part("jaw", vec![l.jaw_rot()]),
        part("face-expression", vec![l.face_expr()]),
        part("face-shape+body-shape", vec![l.face_shape(), l.body_shape()]),
        part(
            "left-arm",
            joints_of(&["left_collar", "left_shoulder", "left_elbow", "left_wrist"]),
        ),
        part(
            "right-arm",
            joints_of(&["right_collar", "right_shoulder", "right_elbow", "right_wrist"]),
        ),
        part("left-hand", hand("left")),
        part("right-hand", hand("right")),
        part("left-leg", joints_of(&["left_hip", "left_knee", "left_ankle", "left_foot"])),
        part(
            "right-leg",
            joints_of(&["right_hip", "right_knee", "right_ankle", "right_foot"]),
        ),
    ];
    BodyPartLayout::new(parts, l.width(), DEFAULT_TOKEN_DIM)
}

fn merge(mut ranges: Vec<Range<usize>>) -> Vec<Range<usize>> {
    ranges.sort_by_key(|r| r.start);
    let mut out: Vec<Range<usize>> = Vec::new();
    for r in ranges {
        match out.last_mut() {
            Some(last) if last.end == r.start => last.end = r.end,
            _ => out.push(r),
        }
    }
    out
}

/// Per-part encoder (`slice_len × D_b` + bias) and decoder (`D_b × slice_len`
/// + bias). `trainable[p]` marks whether part `p` takes optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PartCodec<T> {
    pub names: Vec<String>,
    pub enc_w: Vec<T>,
    pub enc_b: Vec<T>,
    pub dec_w: Vec<T>,
    pub dec_b: Vec<T>,
    pub trainable: Vec<bool>,
}

impl<T> PartCodec<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> PartCodec<U> {
        let mut go = |kind: &str, leaf: &str, v: &Vec<T>| -> Vec<U> {
            v.iter()
                .zip(&self.names)
                .map(|(x, n)| f(&join(&join(&join(prefix, kind), n), leaf), x))
                .collect()
        };
        PartCodec {
            names: self.names.clone(),
            enc_w: go("encoder", "weight", &self.enc_w),
            enc_b: go("encoder", "bias", &self.enc_b),
            dec_w: go("decoder", "weight", &self.dec_w),
            dec_b: go("decoder", "bias", &self.dec_b),
            trainable: self.trainable.clone(),
        }
    }

    /// Whether a full parameter name refers to a trainable part. Names outside
    /// the codec return `None`.
    pub fn part_of(&self, name: &str) -> Option<usize> {
        let mut it = name.rsplitn(3, '.');
        let _leaf = it.next()?;
        let part = it.next()?;
        self.names.iter().position(|n| n == part)
    }
}

impl<T> ParamTree<T> for PartCodec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (kind, leaf, v) in [
            ("encoder", "weight", &self.enc_w),
            ("encoder", "bias", &self.enc_b),
            ("decoder", "weight", &self.dec_w),
            ("decoder", "bias", &self.dec_b),
        ] {
            for (x, n) in v.iter().zip(&self.names) {
                f(join(&join(&join(prefix, kind), n), leaf), x);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        let names = &self.names;
        for (kind, leaf, v) in [
            ("encoder", "weight", &mut self.enc_w),
            ("encoder", "bias", &mut self.enc_b),
            ("decoder", "weight", &mut self.dec_w),
            ("decoder", "bias", &mut self.dec_b),
        ] {
            for (x, n) in v.iter_mut().zip(names) {
                f(join(&join(&join(prefix, kind), n), leaf), x);
            }
        }
    }
}

impl PartCodec<Mat> {
    /// Uniform-initialized matrices, zero biases, every part trainable.
    pub fn init(layout: &BodyPartLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = layout.token_dim;
        let mut codec = Self::zeros(layout);
        for (p, part) in layout.parts.iter().enumerate() {
            codec.enc_w[p] = xavier_uniform(&mut rng, part.len(), d);
            codec.dec_w[p] = xavier_uniform(&mut rng, d, part.len());
        }
        codec
    }

    pub fn zeros(layout: &BodyPartLayout) -> Self {
        let d = layout.token_dim;
        let parts = &layout.parts;
        Self {
            names: parts.iter().map(|p| p.name.clone()).collect(),
            enc_w: parts.iter().map(|p| Mat::zeros((p.len(), d))).collect(),
            enc_b: parts.iter().map(|_| zeros_row(d)).collect(),
            dec_w: parts.iter().map(|p| Mat::zeros((d, p.len()))).collect(),
            dec_b: parts.iter().map(|p| zeros_row(p.len())).collect(),
            trainable: vec![true; parts.len()],
        }
    }

    pub fn check(&self, layout: &BodyPartLayout) -> Result<()> {
        let d = layout.token_dim;
        if self.enc_w.len() != layout.len() {
            return Err(Error::shape(format!(
                "codec has {} parts, layout {}",
                self.enc_w.len(),
                layout.len()
            )));
        }
        for (p, part) in layout.parts.iter().enumerate() {
            let n = part.len();
            if self.enc_w[p].dim() != (n, d)
                || self.enc_b[p].dim() != (1, d)
                || self.dec_w[p].dim() != (d, n)
                || self.dec_b[p].dim() != (1, n)
            {
                return Err(Error::shape(format!("codec part {:?} does not match {n}→{d}", part.name)));
            }
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, names: &[&str], trainable: bool) -> Result<()> {
        for n in names {
            let p = self
                .names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::config(format!("unknown body part {n:?}")))?;
            self.trainable[p] = trainable;
        }
        Ok(())
    }
}

/// Tape form of the encoder: `G×D_m` rows to `G·N_b × D_b` tokens.
pub fn encode_tokens(tape: &mut Tape, x: Var, codec: &PartCodec<Var>, layout: &BodyPartLayout) -> Var {
    tape.part_encode(x, layout.column_lists(), &codec.enc_w, &codec.enc_b)
}

/// Tape form of the decoder: `G·N_b × D_b` tokens to `G×D_m` rows.
pub fn decode_tokens(tape: &mut Tape, tokens: Var, codec: &PartCodec<Var>, layout: &BodyPartLayout) -> Var {
    tape.part_decode(tokens, layout.column_lists(), layout.width, &codec.dec_w, &codec.dec_b)
}

fn const_codec(tape: &mut Tape, codec: &PartCodec<Mat>) -> PartCodec<Var> {
    codec.map("", &mut |_, m| tape.constant(m.clone()))
}

/// Encodes `F_m × D_m` values into an `F_m × N_b × D_b` token tensor.
pub fn encode_parts(seq: &Array2<f64>, codec: &PartCodec<Mat>, layout: &BodyPartLayout) -> Result<Array3<f64>> {
    if seq.ncols() != layout.width {
        return Err(Error::shape(format!(
            "sequence width {} does not match layout width {}",
            seq.ncols(),
            layout.width
        )));
    }
    codec.check(layout)?;
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let c = const_codec(&mut tape, codec);
    let t = encode_tokens(&mut tape, x, &c, layout);
    let frames = seq.nrows();
    Ok(tape
        .value(t)
        .clone()
        .into_shape_with_order((frames, layout.len(), layout.token_dim))
        .expect("token count"))
}

/// Decodes an `F_m × N_b × D_b` token tensor back to `F_m × D_m` values.
pub fn decode_parts(tokens: &Array3<f64>, codec: &PartCodec<Mat>, layout: &BodyPartLayout) -> Result<Array2<f64>> {
    let (frames, parts, d) = tokens.dim();
    if parts != layout.len() || d != layout.token_dim {
        return Err(Error::shape(format!(
            "token shape {:?} does not match {} parts × {}",
            tokens.dim(),
            layout.len(),
            layout.token_dim
        )));
    }
    codec.check(layout)?;
    let mut tape = Tape::new();
    let flat = tokens
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((frames * parts, d))
        .expect("token count");
    let t = tape.constant(flat);
    let c = const_codec(&mut tape, codec);
    let out = decode_tokens(&mut tape, t, &c, layout);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn random_codec(layout: &BodyPartLayout, seed: u64) -> PartCodec<Mat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = PartCodec::init(layout, seed);
        for b in c.enc_b.iter_mut().chain(c.dec_b.iter_mut()) {
            *b = rand_mat(&mut rng, 1, b.ncols());
        }
        c
    }

    #[test]
    fn default_partition_covers_layout() {
        let l = default_body_partition(52).unwrap();
        assert_eq!(l.len(), 12);
        assert_eq!(l.parts.iter().map(BodyPart::len).sum::<usize>(), 325);
        assert_eq!(l.parts[l.part_index("jaw").unwrap()].len(), 3);
        let lens: Vec<usize> = l.parts.iter().map(BodyPart::len).collect();
        assert_eq!(lens, vec![6, 9, 9, 3, 50, 110, 12, 12, 45, 45, 12, 12]);
        let mut seen = vec![0u8; 325];
        for p in &l.parts {
            for c in p.columns() {
                seen[c] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
        assert!(matches!(default_body_partition(51), Err(Error::Layout(_))));
    }

    #[test]
    fn overlapping_parts_rejected() {
        let parts = vec![
            BodyPart { name: "a".into(), ranges: vec![0..3] },
            BodyPart { name: "b".into(), ranges: vec![2..4] },
        ];
        assert!(BodyPartLayout::new(parts, 4, 2).is_err());
        let gap = vec![BodyPart { name: "a".into(), ranges: vec![0..3] }];
        assert!(BodyPartLayout::new(gap, 4, 2).is_err());
    }

    #[test]
    fn json_export_lists_ranges() {
        let l = default_body_partition(52).unwrap();
        let j = l.to_json();
        assert_eq!(j["jaw"], serde_json::json!([[312, 315]]));
        assert_eq!(j["face-shape+body-shape"], serde_json::json!([[162, 262], [315, 325]]));
        assert_eq!(j["root"], serde_json::json!([[0, 6]]));
    }

    #[test]
    fn zero_codec_gives_zero() {
        let l = default_body_partition(52).unwrap();
        let c = PartCodec::init(&l, 0);
        let z = encode_parts(&Array2::zeros((3, 325)), &c, &l).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let d = decode_parts(&Array3::zeros((3, 12, 64)), &c, &l).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_codec_copies_slices() {
        let parts = vec![
            BodyPart { name: "a".into(), ranges: vec![0..1, 3..4] },
            BodyPart { name: "b".into(), ranges: vec![1..3] },
        ];
        let l = BodyPartLayout::new(parts, 4, 2).unwrap();
        let mut c = PartCodec::zeros(&l);
        c.enc_w = vec![Mat::eye(2), Mat::eye(2)];
        let x = Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = encode_parts(&x, &c, &l).unwrap();
        assert_eq!(t.as_slice().unwrap(), &[1.0, 4.0, 2.0, 3.0]);
    }

    #[test]
    fn encode_matches_matmul_oracle() {
        let l = default_body_partition(52).unwrap();
        let c = random_codec(&l, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 4, 325);
        let t = encode_parts(&x, &c, &l).unwrap();
        for f in 0..4 {
            for (p, part) in l.parts.iter().enumerate() {
                for k in 0..64 {
                    let mut acc = c.enc_b[p][[0, k]];
                    for (j, col) in part.columns().into_iter().enumerate() {
                        acc += x[[f, col]] * c.enc_w[p][[j, k]];
                    }
                    assert!((t[[f, p, k]] - acc).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(encode_parts(&rand_mat(&mut rng, 2, 300), &c, &l), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_matches_matmul_oracle() {
        let l = default_body_partition(52).unwrap();
        let c = random_codec(&l, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = Array3::from_shape_fn((3, 12, 64), |_| rng.random_range(-1.0..1.0));
        let out = decode_parts(&tokens, &c, &l).unwrap();
        for f in 0..3 {
            for (p, part) in l.parts.iter().enumerate() {
                for (j, col) in part.columns().into_iter().enumerate() {
                    let mut acc = c.dec_b[p][[0, j]];
                    for k in 0..64 {
                        acc += tokens[[f, p, k]] * c.dec_w[p][[k, j]];
                    }
                    assert!((out[[f, col]] - acc).abs() < 1e-12);
                }
            }
        }
        assert!(decode_parts(&Array3::zeros((1, 11, 64)), &c, &l).is_err());
    }

    #[test]
    fn pseudo_inverse_round_trip() {
        // Parts no wider than D_b: root, spine, head+neck, jaw, arms, legs, face-expression.
        let l = default_body_partition(52).unwrap().with_token_dim(64).unwrap();
        let mut c = PartCodec::init(&l, 9);
        for (p, part) in l.parts.iter().enumerate() {
            if part.len() > 64 {
                continue;
            }
            let w = &c.enc_w[p];
            let m = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[[i, j]]);
            let pinv = m.pseudo_inverse(1e-12).unwrap();
            c.dec_w[p] = Mat::from_shape_fn((pinv.nrows(), pinv.ncols()), |(i, j)| pinv[(i, j)]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_mat(&mut rng, 5, 325);
        let back = decode_parts(&encode_parts(&x, &c, &l).unwrap(), &c, &l).unwrap();
        for part in l.parts.iter().filter(|p| p.len() <= 64) {
            for col in part.columns() {
                for f in 0..5 {
                    assert!((back[[f, col]] - x[[f, col]]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn parameter_names_are_hierarchical() {
        let l = default_body_partition(52).unwrap();
        let c = PartCodec::init(&l, 0);
        let names: Vec<String> = crate::params::named(&c).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 48);
        assert_eq!(names[0], "encoder.root.weight");
        assert!(names.contains(&"decoder.left-hand.bias".to_string()));
        assert_eq!(c.part_of("codec.encoder.left-hand.weight"), Some(8));
        assert_eq!(c.part_of("layers.0.a_s"), None);
    }

    proptest! {
        #[test]
        fn codec_is_affine(seed in 0u64..1000, a in -2.0f64..2.0) {
            let l = default_body_partition(52).unwrap().with_token_dim(8).unwrap();
            let mut c = PartCodec::init(&l, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_mat(&mut rng, 2, 325);
            let y = rand_mat(&mut rng, 2, 325);
            // zero biases: exactly linear
            let e = |v: &Array2<f64>, c: &PartCodec<Mat>| encode_parts(v, c, &l).unwrap();
            let lhs = e(&(&x * a + &y), &c);
            let rhs = e(&x, &c) * a + e(&y, &c);
            prop_assert!((lhs - rhs).iter().all(|v| v.abs() < 1e-10));
            c.dec_w.iter_mut().for_each(|w| w.mapv_inplace(|v| v * 0.5));
            let tx = e(&x, &c);
            let ty = e(&y, &c);
            let d = |t: &Array3<f64>| decode_parts(t, &c, &l).unwrap();
            let lhs = d(&(&tx * a + &ty));
            let rhs = d(&tx) * a + d(&ty);
            prop_assert!((lhs - rhs).iter().all(|v| v.abs() < 1e-10));
        }
    }
}
