//! Channel layout of the whole-body pose tuple and the frame/sequence types.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FACE_SHAPE_DIM: usize = 100;
pub const FACE_EXPR_DIM: usize = 50;
pub const BODY_SHAPE_DIM: usize = 10;

/// SMPL-X body joints after the pelvis, in skeleton order.
pub const BODY_JOINTS: [&str; 21] = [
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

/// Fingers in SMPL-X hand order; each has three joints numbered 1..=3.
pub const FINGERS: [&str; 5] = ["index", "middle", "pinky", "ring", "thumb"];

/// Shared gaze joint completing the default 52-joint table.
pub const EYES_JOINT: &str = "eyes";

/// Joint names of the default whole-body table: 21 body joints, the gaze
/// joint, then 15 left-hand and 15 right-hand joints.
pub fn default_joint_names() -> Vec<String> {
    let mut names: Vec<String> = BODY_JOINTS.iter().map(|s| s.to_string()).collect();
    names.push(EYES_JOINT.to_string());
    for side in ["left", "right"] {
        for finger in FINGERS {
            for k in 1..=3 {
                names.push(format!("{side}_{finger}{k}"));
            }
        }
    }
    names
}

pub const DEFAULT_JOINTS: usize = 52;

/// Fixed channel ordering of a flattened frame, parameterized by the joint
/// table: root_rot, root_traj, joint_rots, face_shape, face_expr, jaw_rot,
/// body_shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub joint_names: Vec<String>,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self {
            joint_names: default_joint_names(),
        }
    }
}

impl ChannelLayout {
    pub fn new(joint_names: Vec<String>) -> Result<Self> {
        if joint_names.is_empty() {
            return Err(Error::Layout("joint table is empty".into()));
        }
        Ok(Self { joint_names })
    }

    /// The default table when `n` is 52, otherwise generic names `joint_k`.
    pub fn with_joint_count(n: usize) -> Result<Self> {
        if n == DEFAULT_JOINTS {
            return Ok(Self::default());
        }
        Self::new((0..n).map(|k| format!("joint_{k}")).collect())
    }

    pub fn joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn width(&self) -> usize {
        3 + 3 + 3 * self.joints() + FACE_SHAPE_DIM + FACE_EXPR_DIM + 3 + BODY_SHAPE_DIM
    }

    pub fn root_rot(&self) -> Range<usize> {
        0..3
    }

    pub fn root_traj(&self) -> Range<usize> {
        3..6
    }

    pub fn joint_rots(&self) -> Range<usize> {
        6..6 + 3 * self.joints()
    }

    pub fn face_shape(&self) -> Range<usize> {
        let s = self.joint_rots().end;
        s..s + FACE_SHAPE_DIM
    }

    pub fn face_expr(&self) -> Range<usize> {
        let s = self.face_shape().end;
        s..s + FACE_EXPR_DIM
    }

    pub fn jaw_rot(&self) -> Range<usize> {
        let s = self.face_expr().end;
        s..s + 3
    }

    pub fn body_shape(&self) -> Range<usize> {
        let s = self.jaw_rot().end;
        s..s + BODY_SHAPE_DIM
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|j| j == name)
    }

    /// Channels of joint `j` inside the flat vector.
    pub fn joint(&self, j: usize) -> Range<usize> {
        let s = 6 + 3 * j;
        s..s + 3
    }
}

/// One pose of the whole-body tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrame {
    pub root_rot: [f64; 3],
    pub root_traj: [f64; 3],
    /// `3N` axis-angle values, joint-major.
    pub joint_rots: Vec<f64>,
    pub face_shape: [f64; FACE_SHAPE_DIM],
    pub face_expr: [f64; FACE_EXPR_DIM],
    pub jaw_rot: [f64; 3],
    pub body_shape: [f64; BODY_SHAPE_DIM],
}

impl MotionFrame {
    pub fn zeros(joints: usize) -> Self {
        Self {
            root_rot: [0.0; 3],
            root_traj: [0.0; 3],
            joint_rots: vec![0.0; 3 * joints],
            face_shape: [0.0; FACE_SHAPE_DIM],
            face_expr: [0.0; FACE_EXPR_DIM],
            jaw_rot: [0.0; 3],
            body_shape: [0.0; BODY_SHAPE_DIM],
        }
    }

    pub fn joints(&self) -> usize {
        self.joint_rots.len() / 3
    }

    pub fn joint(&self, j: usize) -> [f64; 3] {
        [self.joint_rots[3 * j], self.joint_rots[3 * j + 1], self.joint_rots[3 * j + 2]]
    }

    pub fn set_joint(&mut self, j: usize, v: [f64; 3]) {
        self.joint_rots[3 * j..3 * j + 3].copy_from_slice(&v);
    }
}

/// Flattens a frame in the fixed channel order.
pub fn pack_frame(f: &MotionFrame) -> Vec<f64> {
    let mut v = Vec::with_capacity(6 + f.joint_rots.len() + FACE_SHAPE_DIM + FACE_EXPR_DIM + 13);
    v.extend_from_slice(&f.root_rot);
    v.extend_from_slice(&f.root_traj);
    v.extend_from_slice(&f.joint_rots);
    v.extend_from_slice(&f.face_shape);
    v.extend_from_slice(&f.face_expr);
    v.extend_from_slice(&f.jaw_rot);
    v.extend_from_slice(&f.body_shape);
    v
}

pub fn unpack_frame(v: &[f64], layout: &ChannelLayout) -> Result<MotionFrame> {
    if v.len() != layout.width() {
        return Err(Error::Layout(format!(
            "expected {} channels for {} joints, got {}",
            layout.width(),
            layout.joints(),
            v.len()
        )));
    }
    let mut f = MotionFrame::zeros(layout.joints());
    f.root_rot.copy_from_slice(&v[layout.root_rot()]);
    f.root_traj.copy_from_slice(&v[layout.root_traj()]);
    f.joint_rots.copy_from_slice(&v[layout.joint_rots()]);
    f.face_shape.copy_from_slice(&v[layout.face_shape()]);
    f.face_expr.copy_from_slice(&v[layout.face_expr()]);
    f.jaw_rot.copy_from_slice(&v[layout.jaw_rot()]);
    f.body_shape.copy_from_slice(&v[layout.body_shape()]);
    Ok(f)
}

/// A motion clip: `F_m × D_m` channel values stored in single precision
/// (the on-disk precision), plus a per-channel validity mask. `false` marks
/// channels that were filled rather than observed.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub layout: ChannelLayout,
    pub fps: u32,
    pub data: Array2<f32>,
    pub validity: Vec<bool>,
}

impl MotionSequence {
    pub fn new(layout: ChannelLayout, fps: u32, data: Array2<f32>, validity: Vec<bool>) -> Result<Self> {
        if fps == 0 {
            return Err(Error::InvalidArgument("fps must be positive".into()));
        }
        if data.nrows() == 0 {
            return Err(Error::InvalidArgument("a sequence needs at least one frame".into()));
        }
        if data.ncols() != layout.width() || validity.len() != layout.width() {
            return Err(Error::Layout(format!(
                "data width {} / mask width {} do not match layout width {}",
                data.ncols(),
                validity.len(),
                layout.width()
            )));
        }
        Ok(Self { layout, fps, data, validity })
    }

    pub fn from_frames(layout: ChannelLayout, fps: u32, frames: &[MotionFrame]) -> Result<Self> {
        let width = layout.width();
        let mut data = Array2::zeros((frames.len(), width));
        for (i, f) in frames.iter().enumerate() {
            let packed = pack_frame(f);
            if packed.len() != width {
                return Err(Error::Layout(format!(
                    "frame {i} has {} channels, layout expects {width}",
                    packed.len()
                )));
            }
            for (o, v) in data.row_mut(i).iter_mut().zip(packed) {
                *o = v as f32;
            }
        }
        Self::new(layout, fps, data, vec![true; width])
    }

    /// Builds a sequence from double-precision values (rounded to `f32`).
    pub fn from_f64(layout: ChannelLayout, fps: u32, values: &Array2<f64>) -> Result<Self> {
        let width = layout.width();
        Self::new(layout, fps, values.mapv(|v| v as f32), vec![true; width])
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn frame(&self, i: usize) -> MotionFrame {
        let v: Vec<f64> = self.data.row(i).iter().map(|&x| x as f64).collect();
        unpack_frame(&v, &self.layout).expect("sequence width matches its layout")
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(|v| v as f64)
    }

    pub fn mark_invalid(&mut self, range: Range<usize>) {
        for v in &mut self.validity[range] {
            *v = false;
        }
    }
}
