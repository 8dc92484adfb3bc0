//! Rotation conversions and retargeting an SMPL-H frame into the SMPL-X
//! channel layout.

use wholebody::motion_repr::{
    axis_angle_to_matrix, matrix_to_axis_angle, retarget_smplh_sequence, rot6d_to_axis_angle, save_sequence,
    load_sequence, Rot6D, SmplhFrame,
};

fn main() -> wholebody::Result<()> {
    let v = [0.3, -1.1, 0.4];
    let r = axis_angle_to_matrix(v)?;
    let r6 = Rot6D::from_matrix(&r);
    println!("axis-angle {v:?}");
    println!("  -> 6D {:?}", r6.cols);
    println!("  -> back {:?}", matrix_to_axis_angle(&r)?);
    println!("  -> from 6D {:?}", rot6d_to_axis_angle(&r6)?);

    let mut frames = vec![SmplhFrame::zeros(); 10];
    for (i, f) in frames.iter_mut().enumerate() {
        f.trans = [0.0, 0.0, 0.05 * i as f64];
    }
    let seq = retarget_smplh_sequence(&frames, 30)?;
    let invalid = seq.validity.iter().filter(|v| !**v).count();
    println!("retargeted {} frames × {} channels, {invalid} channels marked missing", seq.frames(), seq.width());

    let path = std::env::temp_dir().join("wholebody-example.mcmf");
    save_sequence(&seq, &path)?;
    let back = load_sequence(&path)?;
    println!("MCMF round trip equal: {}", back == seq);
    Ok(())
}
