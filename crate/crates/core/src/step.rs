//! Episode step records and unit validation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use core::f64::consts::PI;

use crate::schema::{Payload, Value};

/// One step of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub timestep: u64,
    pub instruction: String,
    pub observation: Payload,
    pub action: Payload,
    pub metadata: BTreeMap<String, String>,
}

impl StepRecord {
    /// Bit-level equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &StepRecord) -> bool {
        self.timestep == other.timestep
            && self.instruction == other.instruction
            && self.metadata == other.metadata
            && crate::schema::payload_bit_eq(&self.observation, &other.observation)
            && crate::schema::payload_bit_eq(&self.action, &other.action)
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("field `{field}` value {value} violates unit limit {limit}{hint}")]
pub struct UnitViolation {
    pub field: String,
    pub value: f64,
    pub limit: f64,
    pub hint: &'static str,
}

/// Unit rules applied to every recorded step.
///
/// * `joint_pos*` observations and `arm*` actions are joint angles and must
///   satisfy `|q| <= joint_limit`.
/// * `ee_pose*` is `[x, y, z, roll, pitch, yaw]`: positions finite, angles
///   within `2 pi`.
/// * every float must be finite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitRules {
    pub joint_limit: f64,
    pub position_limit: f64,
}

impl Default for UnitRules {
    fn default() -> Self {
        UnitRules { joint_limit: 2.0 * PI, position_limit: 100.0 }
    }
}

impl UnitRules {
    pub fn check(&self, step: &StepRecord) -> Result<(), UnitViolation> {
        for (key, value) in &step.observation {
            if key.starts_with("joint_pos") {
                check_abs(key, value, self.joint_limit, " (degrees suspected)")?;
            } else if key.starts_with("ee_pose") {
                if let Some(v) = value.as_f64s() {
                    for (i, x) in v.iter().enumerate() {
                        let (limit, hint) = if i < 3 {
                            (self.position_limit, " (millimeters suspected)")
                        } else {
                            (2.0 * PI, " (degrees suspected)")
                        };
                        if !(x.abs() <= limit) {
                            return Err(UnitViolation { field: key.clone(), value: *x, limit, hint });
                        }
                    }
                }
            } else {
                check_abs(key, value, f64::INFINITY, "")?;
            }
        }
        for (key, value) in &step.action {
            if key.starts_with("arm") {
                check_abs(key, value, self.joint_limit, " (degrees suspected)")?;
            } else {
                check_abs(key, value, f64::INFINITY, "")?;
            }
        }
        Ok(())
    }
}

fn check_abs(key: &str, value: &Value, limit: f64, hint: &'static str) -> Result<(), UnitViolation> {
    if let Some(v) = value.as_f64s() {
        for x in v {
            if !x.is_finite() || x.abs() > limit {
                return Err(UnitViolation { field: String::from(key), value: *x, limit, hint });
            }
        }
    }
    Ok(())
}
