//! Small fixed-size geometry helpers shared across the pipeline.

use nalgebra::{Matrix3, Point3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Pt3 = Point3<f64>;

/// Rotation from intrinsic z-x'-y'' Euler angles: `R = Rz(yaw) Rx(pitch) Ry(roll)`.
///
/// With this order the gimbal-locked region (pitch at +-pi/2) corresponds to
/// the palm's y-axis pointing vertically, which neither side grasps (thumb
/// vertical) nor overhead grasps (approach vertical) come near, so bounding
/// pitch away from +-pi/2 costs no reachable grasps.
pub fn rot_zxy(roll: f64, pitch: f64, yaw: f64) -> Mat3 {
    let (sa, ca) = yaw.sin_cos();
    let (sb, cb) = pitch.sin_cos();
    let (sg, cg) = roll.sin_cos();
    Mat3::new(
        ca * cg - sa * sb * sg,
        -sa * cb,
        ca * sg + sa * sb * cg,
        sa * cg + ca * sb * sg,
        ca * cb,
        sa * sg - ca * sb * cg,
        -cb * sg,
        sb,
        cb * cg,
    )
}

/// Inverse of [`rot_zxy`]: recover `(roll, pitch, yaw)` from a rotation.
/// Near the gimbal singularity the yaw/roll split is fixed by setting roll 0.
pub fn euler_zxy(r: &Mat3) -> (f64, f64, f64) {
    let sb = r[(2, 1)].clamp(-1.0, 1.0);
    let pitch = sb.asin();
    let cb = (1.0 - sb * sb).sqrt();
    if cb < 1e-9 {
        let yaw = f64::atan2(r[(0, 2)], r[(0, 0)]);
        (0.0, pitch, yaw)
    } else {
        let yaw = f64::atan2(-r[(0, 1)], r[(1, 1)]);
        let roll = f64::atan2(-r[(2, 0)], r[(2, 2)]);
        (roll, pitch, yaw)
    }
}

/// Rotation about the world z axis.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Build an orthonormal right-handed rotation whose columns are the given
/// (already orthonormal) axes.
pub fn mat_from_cols(x: Vec3, y: Vec3, z: Vec3) -> Mat3 {
    Mat3::from_columns(&[x, y, z])
}
