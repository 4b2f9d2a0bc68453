//! Hand model description: palm frame conventions, joint limits, and the
//! kinematic width function used by the analytic grasp oracle.

use serde::{Deserialize, Serialize};

/// Conventions and limits for a four-fingered hand whose preshape uses the
/// first two joints of each finger (8 sampled joints total).
///
/// Palm frame: the thumb points along +x and the approach direction is -z.
/// The 8 joint entries are ordered `[rot_0, flex_0, rot_1, flex_1, ...]`
/// where `rot` spins the finger about its major axis and `flex` closes it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HandConfig {
    /// Per-joint lower limits for the 8 preshape joints (radians).
    pub joint_lower: [f64; 8],
    /// Per-joint upper limits (radians).
    pub joint_upper: [f64; 8],
    /// Range used when sampling preshape joints in the heuristic planner.
    pub sample_range: (f64, f64),
    /// Palm width between opposing finger bases (meters).
    pub palm_width: f64,
    /// Effective proximal link length entering the width function (meters).
    pub link_length: f64,
}

impl Default for HandConfig {
    fn default() -> Self {
        let mut lower = [0.0; 8];
        let mut upper = [0.0; 8];
        for f in 0..4 {
            lower[2 * f] = -0.6; // rotation joint
            upper[2 * f] = 0.6;
            lower[2 * f + 1] = -0.2; // flexion joint
            upper[2 * f + 1] = 1.2;
        }
        HandConfig {
            joint_lower: lower,
            joint_upper: upper,
            sample_range: (0.0, 0.6),
            palm_width: 0.02,
            link_length: 0.06,
        }
    }
}

impl HandConfig {
    /// Aperture between fingertips and thumb as a function of the preshape
    /// joints: fully open near zero flexion, closing as the mean flexion
    /// grows. Deterministic and smooth; versioned with the oracle config.
    pub fn finger_span(&self, joints: &[f64; 8]) -> f64 {
        let mean_flex = (joints[1] + joints[3] + joints[5] + joints[7]) / 4.0;
        let q = mean_flex.clamp(0.0, std::f64::consts::FRAC_PI_2);
        self.palm_width + 2.0 * self.link_length * q.cos()
    }
}
