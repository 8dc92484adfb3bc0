//! SMPL-H → SMPL-X direct mapping and missing-channel filling.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layout::{default_joint_names, ChannelLayout, MotionFrame, MotionSequence, BODY_JOINTS, FINGERS};
use super::rotation::{rot6d_to_axis_angle, Rot6D, Vec3};
use crate::{Error, Result};

/// Joint names carried by SMPL-H after the pelvis: 21 body + 30 hand joints.
pub fn smplh_joint_names() -> Vec<String> {
    let mut names: Vec<String> = BODY_JOINTS.iter().map(|s| s.to_string()).collect();
    for side in ["left", "right"] {
        for finger in FINGERS {
            for k in 1..=3 {
                names.push(format!("{side}_{finger}{k}"));
            }
        }
    }
    names
}

/// One SMPL-H pose with axis-angle rotations keyed by joint name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmplhFrame {
    pub root_rot: Vec3,
    pub trans: Vec3,
    pub joints: Vec<(String, Vec3)>,
}

impl SmplhFrame {
    /// All joints of the standard SMPL-H table at rest.
    pub fn zeros() -> Self {
        Self {
            root_rot: [0.0; 3],
            trans: [0.0; 3],
            joints: smplh_joint_names().into_iter().map(|n| (n, [0.0; 3])).collect(),
        }
    }

    /// Converts a 6D-rotation pose (root and joints) to axis-angle.
    pub fn from_rot6d(root: &Rot6D, trans: Vec3, joints: &[(String, Rot6D)]) -> Result<Self> {
        Ok(Self {
            root_rot: rot6d_to_axis_angle(root)?,
            trans,
            joints: joints
                .iter()
                .map(|(n, r)| Ok((n.clone(), rot6d_to_axis_angle(r)?)))
                .collect::<Result<_>>()?,
        })
    }
}

/// Channel validity after retargeting into `layout`: face, jaw and body-shape
/// channels plus every joint absent from SMPL-H are marked unobserved.
pub fn smplh_validity(layout: &ChannelLayout) -> Vec<bool> {
    let mut valid = vec![true; layout.width()];
    let smplh = smplh_joint_names();
    for (j, name) in layout.joint_names.iter().enumerate() {
        if !smplh.contains(name) {
            valid[layout.joint(j)].iter_mut().for_each(|v| *v = false);
        }
    }
    for r in [layout.face_shape(), layout.face_expr(), layout.jaw_rot(), layout.body_shape()] {
        valid[r].iter_mut().for_each(|v| *v = false);
    }
    valid
}

/// Copies every SMPL-H joint rotation onto the identically named SMPL-X
/// joint. Channels SMPL-H lacks stay zero. Root translation is copied verbatim.
pub fn retarget_smplh_to_smplx(src: &SmplhFrame, layout: &ChannelLayout) -> Result<MotionFrame> {
    let unknown: Vec<String> = src
        .joints
        .iter()
        .filter(|(n, _)| layout.joint_index(n).is_none())
        .map(|(n, _)| n.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Mapping(unknown));
    }
    let mut frame = MotionFrame::zeros(layout.joints());
    frame.root_rot = src.root_rot;
    frame.root_traj = src.trans;
    for (name, rot) in &src.joints {
        let j = layout.joint_index(name).expect("checked above");
        frame.set_joint(j, *rot);
    }
    Ok(frame)
}

/// Retargets a whole SMPL-H clip into the default whole-body layout.
pub fn retarget_smplh_sequence(frames: &[SmplhFrame], fps: u32) -> Result<MotionSequence> {
    let layout = ChannelLayout::default();
    debug_assert_eq!(layout.joint_names, default_joint_names());
    let converted = frames
        .iter()
        .map(|f| retarget_smplh_to_smplx(f, &layout))
        .collect::<Result<Vec<_>>>()?;
    let mut seq = MotionSequence::from_frames(layout, fps, &converted)?;
    seq.validity = smplh_validity(&seq.layout);
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillPolicy {
    Zero,
    Average,
}

/// Overwrites unobserved channels with zero or with the caller-supplied
/// corpus average (a full-width vector). Observed channels and the mask are
/// left untouched.
pub fn fill_missing_channels(
    seq: &MotionSequence,
    policy: FillPolicy,
    average: Option<&[f32]>,
) -> Result<MotionSequence> {
    let width = seq.width();
    let fill: Vec<f32> = match policy {
        FillPolicy::Zero => vec![0.0; width],
        FillPolicy::Average => {
            let avg = average.ok_or(Error::MissingArgument("average vector for the average fill policy"))?;
            if avg.len() != width {
                return Err(Error::Layout(format!(
                    "average vector has {} channels, sequence has {width}",
                    avg.len()
                )));
            }
            avg.to_vec()
        }
    };
    let mut out = seq.clone();
    let data: &mut Array2<f32> = &mut out.data;
    for (c, valid) in seq.validity.iter().enumerate() {
        if !valid {
            data.column_mut(c).fill(fill[c]);
        }
    }
    Ok(out)
}
