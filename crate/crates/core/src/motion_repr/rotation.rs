//! Rotation format conversions: axis-angle, rotation matrices and the
//! continuous 6D representation (first two matrix columns).

use crate::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// First two columns of a rotation matrix, column-major:
/// `cols = [r00, r10, r20, r01, r11, r21]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D {
    pub cols: [f64; 6],
}

impl Rot6D {
    pub fn new(cols: [f64; 6]) -> Self {
        Self { cols }
    }

    /// Takes the first two columns of `r`.
    pub fn from_matrix(r: &Mat3) -> Self {
        Self {
            cols: [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]],
        }
    }
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rodrigues' formula. `θ = 0` yields the identity exactly.
pub fn axis_angle_to_matrix(v: Vec3) -> Result<Mat3> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite axis-angle {v:?}")));
    }
    let theta = norm(&v);
    if theta == 0.0 {
        return Ok(IDENTITY);
    }
    let k = [v[0] / theta, v[1] / theta, v[2] / theta];
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    // R = I + sinθ K + (1 − cosθ) K², expanded with K² = k kᵀ − I.
    Ok([
        [
            c + t * k[0] * k[0],
            t * k[0] * k[1] - s * k[2],
            t * k[0] * k[2] + s * k[1],
        ],
        [
            t * k[1] * k[0] + s * k[2],
            c + t * k[1] * k[1],
            t * k[1] * k[2] - s * k[0],
        ],
        [
            t * k[2] * k[0] - s * k[1],
            t * k[2] * k[1] + s * k[0],
            c + t * k[2] * k[2],
        ],
    ])
}

const ORTHO_TOL: f64 = 1e-6;

fn check_rotation(r: &Mat3) -> Result<()> {
    if !r.iter().flatten().all(|x| x.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entries".into()));
    }
    for i in 0..3 {
        for j in 0..3 {
            let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (rtr - expect).abs() > ORTHO_TOL {
                return Err(Error::InvalidRotation(format!(
                    "RᵀR deviates from identity by {:.3e} at ({i},{j})",
                    (rtr - expect).abs()
                )));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if det <= 0.0 {
        return Err(Error::InvalidRotation(format!("determinant {det} is not positive")));
    }
    Ok(())
}

/// Returns the canonical axis-angle with `‖v‖ ∈ [0, π]`.
///
/// At `θ = π` the axis is only defined up to sign; the representative whose
/// components compare lexicographically largest is returned.
pub fn matrix_to_axis_angle(r: &Mat3) -> Result<Vec3> {
    check_rotation(r)?;
    let trace = r[0][0] + r[1][1] + r[2][2];
    let cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    // 2 sinθ · axis
    let w = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let sin2 = norm(&w);
    let theta = sin2.atan2(trace - 1.0);
    if theta == 0.0 || sin2 == 0.0 && cos > 0.0 {
        return Ok([0.0, 0.0, 0.0]);
    }
    if theta < 1e-4 {
        // sinθ/θ ≈ 1 − θ²/6; v ≈ w / 2 · θ / sinθ
        let f = 0.5 * (1.0 + theta * theta / 6.0);
        return Ok([w[0] * f, w[1] * f, w[2] * f]);
    }
    if std::f64::consts::PI - theta > 1e-5 {
        let f = theta / sin2;
        return Ok([w[0] * f, w[1] * f, w[2] * f]);
    }
    // Near π: recover the axis from the symmetric part R + Rᵀ = 2 k kᵀ (1 − cosθ) + 2 cosθ I.
    let one_minus_cos = 1.0 - cos;
    let diag = [
        ((r[0][0] - cos) / one_minus_cos).max(0.0),
        ((r[1][1] - cos) / one_minus_cos).max(0.0),
        ((r[2][2] - cos) / one_minus_cos).max(0.0),
    ];
    let i = (0..3)
        .max_by(|&a, &b| diag[a].partial_cmp(&diag[b]).unwrap())
        .unwrap();
    let mut axis = [0.0; 3];
    axis[i] = diag[i].sqrt();
    for j in 0..3 {
        if j != i {
            axis[j] = (r[i][j] + r[j][i]) / (2.0 * one_minus_cos * axis[i]);
        }
    }
    let n = norm(&axis);
    let mut axis = [axis[0] / n, axis[1] / n, axis[2] / n];
    // Orient with the antisymmetric part when it still carries signal.
    if dot(&axis, &w) < 0.0 {
        axis = [-axis[0], -axis[1], -axis[2]];
    }
    if std::f64::consts::PI - theta < 1e-12 || sin2 < 1e-12 {
        let neg = [-axis[0], -axis[1], -axis[2]];
        if lex_greater(&neg, &axis) {
            axis = neg;
        }
    }
    Ok([axis[0] * theta, axis[1] * theta, axis[2] * theta])
}

fn lex_greater(a: &Vec3, b: &Vec3) -> bool {
    for k in 0..3 {
        if a[k] > b[k] {
            return true;
        }
        if a[k] < b[k] {
            return false;
        }
    }
    false
}

/// Gram–Schmidt on the two stored columns, third column by cross product.
pub fn rot6d_to_matrix(r6: &Rot6D) -> Result<Mat3> {
    let a: Vec3 = [r6.cols[0], r6.cols[1], r6.cols[2]];
    let b: Vec3 = [r6.cols[3], r6.cols[4], r6.cols[5]];
    if !a.iter().chain(b.iter()).all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite rot6d".into()));
    }
    let na = norm(&a);
    let nb = norm(&b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateRotation("zero-length column".into()));
    }
    let angle = norm(&cross(&a, &b)).atan2(dot(&a, &b));
    if angle < 1e-6 || std::f64::consts::PI - angle < 1e-6 {
        return Err(Error::DegenerateRotation(format!(
            "columns are parallel (angle {angle:.3e} rad)"
        )));
    }
    let e1 = [a[0] / na, a[1] / na, a[2] / na];
    let d = dot(&e1, &b);
    let u = [b[0] - d * e1[0], b[1] - d * e1[1], b[2] - d * e1[2]];
    let nu = norm(&u);
    let e2 = [u[0] / nu, u[1] / nu, u[2] / nu];
    let e3 = cross(&e1, &e2);
    Ok([
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ])
}

pub fn rot6d_to_axis_angle(r6: &Rot6D) -> Result<Vec3> {
    matrix_to_axis_angle(&rot6d_to_matrix(r6)?)
}

/// Maps any axis-angle onto the canonical representative with `‖v‖ ≤ π`.
pub fn canonicalize_axis_angle(v: Vec3) -> Result<Vec3> {
    matrix_to_axis_angle(&axis_angle_to_matrix(v)?)
}
