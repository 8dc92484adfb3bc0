//! Whole-body motion representation: the SMPL-X axis-angle pose tuple,
//! rotation conversions, SMPL-H retargeting, missing-channel filling and the
//! `MCMF` motion file format.

mod layout;
pub mod mcmf;
mod retarget;
pub mod rotation;

pub use layout::{
    default_joint_names, pack_frame, unpack_frame, ChannelLayout, MotionFrame, MotionSequence, BODY_JOINTS,
    BODY_SHAPE_DIM, DEFAULT_JOINTS, EYES_JOINT, FACE_EXPR_DIM, FACE_SHAPE_DIM, FINGERS,
};
pub use mcmf::{load_sequence, save_sequence};
pub use retarget::{
    fill_missing_channels, retarget_smplh_sequence, retarget_smplh_to_smplx, smplh_joint_names, smplh_validity,
    FillPolicy, SmplhFrame,
};
pub use rotation::{
    axis_angle_to_matrix, canonicalize_axis_angle, matrix_to_axis_angle, rot6d_to_axis_angle, rot6d_to_matrix,
    Mat3, Rot6D, Vec3,
};
