//! Teleoperation math: relative end-effector commands, leader-follower joint
//! mapping, waypoint interpolation and first-order low-pass filtering.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::kinematics::{ik_step, ArmModel, Pose2D};
use crate::time::Timestamp;

/// Amplitude (m) of the scripted teleop displacement.
pub const SCRIPTED_AMPLITUDE: f64 = 0.01;
/// Frequency (Hz) of the scripted teleop displacement.
pub const SCRIPTED_FREQ_HZ: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TeleopError {
    #[error("expected {expected} values, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("no waypoints")]
    EmptyWaypoints,
    #[error("waypoint timestamps must be strictly increasing")]
    UnorderedWaypoints,
    #[error("filter expects dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("alpha must be in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("calibration scale must be non-zero")]
    ZeroScale,
}

/// Joint targets that move the end effector by `delta` (heading wrapped)
/// from the pose at `current`, via one damped IK step clamped to limits.
pub fn ee_delta_to_joints(current: &[f64], delta: Pose2D, model: &ArmModel, damping: f64) -> Vec<f64> {
    let target = model.fk(current).offset(delta);
    ik_step(model, current, target, damping)
}

/// Per-joint affine map from a leader device to a follower arm.
#[derive(Clone, Debug, PartialEq)]
pub struct LeaderCalibration {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
    /// +1.0 or -1.0 per joint.
    pub sign: Vec<f64>,
}

impl LeaderCalibration {
    pub fn new(offset: Vec<f64>, scale: Vec<f64>, sign: Vec<f64>) -> Result<Self, TeleopError> {
        if scale.len() != offset.len() || sign.len() != offset.len() {
            return Err(TeleopError::ArityMismatch {
                expected: offset.len(),
                got: scale.len().min(sign.len()),
            });
        }
        if scale.iter().any(|s| *s == 0.0) {
            return Err(TeleopError::ZeroScale);
        }
        let sign = sign.into_iter().map(|s| if s < 0.0 { -1.0 } else { 1.0 }).collect();
        Ok(LeaderCalibration { offset, scale, sign })
    }

    pub fn identity(n: usize) -> Self {
        LeaderCalibration {
            offset: alloc::vec![0.0; n],
            scale: alloc::vec![1.0; n],
            sign: alloc::vec![1.0; n],
        }
    }
}

/// `follower_i = sign_i * scale_i * (leader_i - offset_i)`, clamped to the
/// follower's joint limits.
pub fn leader_to_follower(
    leader: &[f64],
    cal: &LeaderCalibration,
    limits: &[(f64, f64)],
) -> Result<Vec<f64>, TeleopError> {
    if leader.len() != cal.offset.len() || limits.len() != leader.len() {
        return Err(TeleopError::ArityMismatch {
            expected: cal.offset.len(),
            got: leader.len(),
        });
    }
    Ok(leader
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let (lo, hi) = limits[i];
            (cal.sign[i] * cal.scale[i] * (q - cal.offset[i])).clamp(lo, hi)
        })
        .collect())
}

/// Piecewise-linear interpolation, clamped to the end waypoints.
pub fn interpolate(waypoints: &[(Timestamp, Vec<f64>)], t: Timestamp) -> Result<Vec<f64>, TeleopError> {
    let (first, last) = match (waypoints.first(), waypoints.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(TeleopError::EmptyWaypoints),
    };
    let dim = first.1.len();
    for pair in waypoints.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(TeleopError::UnorderedWaypoints);
        }
        if pair[1].1.len() != dim {
            return Err(TeleopError::ArityMismatch { expected: dim, got: pair[1].1.len() });
        }
    }
    if t <= first.0 {
        return Ok(first.1.clone());
    }
    if t >= last.0 {
        return Ok(last.1.clone());
    }
    // first index whose timestamp is > t; t is strictly inside the range
    let hi = waypoints.partition_point(|(ts, _)| *ts <= t);
    let (t0, a) = &waypoints[hi - 1];
    let (t1, b) = &waypoints[hi];
    if *t0 == t {
        return Ok(a.clone());
    }
    let u = (t.0 - t0.0) as f64 / (t1.0 - t0.0) as f64;
    Ok(a.iter().zip(b).map(|(x, y)| x + (y - x) * u).collect())
}

/// First-order exponential smoother `y = alpha x + (1 - alpha) y_prev`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowPass {
    alpha: f64,
    y_prev: Option<Vec<f64>>,
}

impl LowPass {
    pub fn new(alpha: f64) -> Result<Self, TeleopError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(TeleopError::InvalidAlpha(alpha));
        }
        Ok(LowPass { alpha, y_prev: None })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn output(&self) -> Option<&[f64]> {
        self.y_prev.as_deref()
    }

    pub fn reset(&mut self) {
        self.y_prev = None;
    }

    /// Filters one sample. The first sample passes through unchanged.
    pub fn apply(&mut self, x: &[f64]) -> Result<Vec<f64>, TeleopError> {
        let y = match &self.y_prev {
            None => x.to_vec(),
            Some(prev) => {
                if prev.len() != x.len() {
                    return Err(TeleopError::DimensionMismatch { expected: prev.len(), got: x.len() });
                }
                x.iter()
                    .zip(prev)
                    .map(|(xi, pi)| self.alpha * xi + (1.0 - self.alpha) * pi)
                    .collect()
            }
        };
        self.y_prev = Some(y.clone());
        Ok(y)
    }
}

/// Smoothing factor giving a -3 dB cutoff of `cutoff_hz` when the filter
/// runs at `rate_hz`: `alpha = 1 - exp(-2 pi f_c / f_s)`.
pub fn alpha_for_cutoff(cutoff_hz: f64, rate_hz: f64) -> f64 {
    1.0 - libm::exp(-2.0 * PI * cutoff_hz / rate_hz)
}

/// Displacement of the scripted teleop device from where it started, at
/// `t` seconds: `x = A sin(wt)`, `y = A (1 - cos(wt))`, no rotation.
pub fn scripted_teleop(t: f64) -> Pose2D {
    let w = 2.0 * PI * SCRIPTED_FREQ_HZ;
    Pose2D {
        x: SCRIPTED_AMPLITUDE * libm::sin(w * t),
        y: SCRIPTED_AMPLITUDE * (1.0 - libm::cos(w * t)),
        theta: 0.0,
    }
}
