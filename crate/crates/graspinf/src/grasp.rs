//! The 14-D grasp preshape configuration and its feasible box.

use crate::geom::{euler_zxy, rot_zxy, Mat3, Vec3};
use crate::hand::HandConfig;
use crate::perception::ObjectFrame;
use serde::{Deserialize, Serialize};

pub const CONFIG_DIM: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspType {
    Side,
    Overhead,
}

impl std::fmt::Display for GraspType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraspType::Side => write!(f, "side"),
            GraspType::Overhead => write!(f, "overhead"),
        }
    }
}

impl std::str::FromStr for GraspType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "side" => Ok(GraspType::Side),
            "overhead" => Ok(GraspType::Overhead),
            other => Err(format!("unknown grasp type `{other}`")),
        }
    }
}

/// Grasp preshape: palm pose in the object frame plus the first two joint
/// angles of each of four fingers.
///
/// `palm_rpy` holds `[roll, pitch, yaw]` for the intrinsic z-x'-y'' Euler
/// convention of [`rot_zxy`](crate::geom::rot_zxy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspConfig {
    pub palm_position: Vec3,
    pub palm_rpy: Vec3,
    pub joints: [f64; 8],
}

impl GraspConfig {
    pub fn to_vec(&self) -> [f64; CONFIG_DIM] {
        let mut v = [0.0; CONFIG_DIM];
        v[..3].copy_from_slice(self.palm_position.as_slice());
        v[3..6].copy_from_slice(self.palm_rpy.as_slice());
        v[6..].copy_from_slice(&self.joints);
        v
    }

    pub fn from_vec(v: &[f64]) -> Self {
        assert_eq!(v.len(), CONFIG_DIM);
        GraspConfig {
            palm_position: Vec3::new(v[0], v[1], v[2]),
            palm_rpy: Vec3::new(v[3], v[4], v[5]),
            joints: v[6..14].try_into().unwrap(),
        }
    }

    pub fn rotation(&self) -> Mat3 {
        rot_zxy(self.palm_rpy.x, self.palm_rpy.y, self.palm_rpy.z)
    }

    /// Direction the palm approaches along (palm -z), in the object frame.
    pub fn approach_axis(&self) -> Vec3 {
        -self.rotation().column(2)
    }

    /// Thumb direction (palm +x) in the object frame.
    pub fn thumb_axis(&self) -> Vec3 {
        self.rotation().column(0).into()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// Re-express this grasp, currently relative to `from`, in the `to`
    /// frame. Joint angles are frame independent.
    pub fn change_frame(&self, from: &ObjectFrame, to: &ObjectFrame) -> GraspConfig {
        let pos_world = from.origin + from.axes * self.palm_position;
        let rot_world = from.axes * self.rotation();
        let pos_to = to.axes.transpose() * (pos_world - to.origin);
        let rot_to = to.axes.transpose() * rot_world;
        let (roll, pitch, yaw) = euler_zxy(&rot_to);
        GraspConfig {
            palm_position: pos_to,
            palm_rpy: Vec3::new(roll, pitch, yaw),
            joints: self.joints,
        }
    }
}

/// Componentwise box constraints on the 14-D configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundBox {
    pub lower: [f64; CONFIG_DIM],
    pub upper: [f64; CONFIG_DIM],
}

impl BoundBox {
    /// Default box: palm position within +-0.4 m of the object origin,
    /// roll/yaw free, pitch bounded away from the Euler singularity, joints
    /// from the hand model.
    pub fn with_hand(hand: &HandConfig) -> Self {
        use std::f64::consts::{FRAC_PI_2, PI};
        let mut lower = [0.0; CONFIG_DIM];
        let mut upper = [0.0; CONFIG_DIM];
        for i in 0..3 {
            lower[i] = -0.4;
            upper[i] = 0.4;
        }
        lower[3] = -PI;
        upper[3] = PI;
        lower[4] = -FRAC_PI_2 + 0.1;
        upper[4] = FRAC_PI_2 - 0.1;
        lower[5] = -PI;
        upper[5] = PI;
        lower[6..].copy_from_slice(&hand.joint_lower);
        upper[6..].copy_from_slice(&hand.joint_upper);
        BoundBox { lower, upper }
    }

    pub fn is_valid(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, u)| l < u)
    }

    pub fn contains(&self, v: &[f64; CONFIG_DIM]) -> bool {
        v.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(x, (l, u))| x >= l && x <= u)
    }

    pub fn clamp(&self, v: &mut [f64; CONFIG_DIM]) {
        for i in 0..CONFIG_DIM {
            v[i] = v[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn center(&self) -> [f64; CONFIG_DIM] {
        let mut c = [0.0; CONFIG_DIM];
        for i in 0..CONFIG_DIM {
            c[i] = 0.5 * (self.lower[i] + self.upper[i]);
        }
        c
    }

    pub fn half_width(&self) -> [f64; CONFIG_DIM] {
        let mut h = [0.0; CONFIG_DIM];
        for i in 0..CONFIG_DIM {
            h[i] = 0.5 * (self.upper[i] - self.lower[i]);
        }
        h
    }
}

impl Default for BoundBox {
    fn default() -> Self {
        BoundBox::with_hand(&HandConfig::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{rot_z, Pt3};

    #[test]
    fn vec_round_trip() {
        let g = GraspConfig {
            palm_position: Vec3::new(0.1, -0.2, 0.3),
            palm_rpy: Vec3::new(0.5, -0.4, 2.0),
            joints: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        };
        assert_eq!(GraspConfig::from_vec(&g.to_vec()), g);
    }

    #[test]
    fn change_frame_round_trip_preserves_world_pose() {
        let a = ObjectFrame {
            origin: Pt3::new(0.2, -0.1, 0.05),
            axes: rot_z(0.8),
        };
        let b = ObjectFrame {
            origin: Pt3::new(-0.3, 0.4, 0.0),
            axes: rot_z(-1.3),
        };
        let g = GraspConfig {
            palm_position: Vec3::new(0.05, 0.02, 0.1),
            palm_rpy: Vec3::new(0.3, 0.2, -0.9),
            joints: [0.1; 8],
        };
        let g_b = g.change_frame(&a, &b);
        let g_back = g_b.change_frame(&b, &a);
        assert!((g.palm_position - g_back.palm_position).norm() < 1e-10);
        assert!((g.rotation() - g_back.rotation()).norm() < 1e-10);
    }

    #[test]
    fn default_box_is_valid() {
        let b = BoundBox::default();
        assert!(b.is_valid());
        let mut v = [100.0; CONFIG_DIM];
        b.clamp(&mut v);
        assert!(b.contains(&v));
    }
}
