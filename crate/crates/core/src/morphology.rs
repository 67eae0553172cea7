//! Morphologies: which client roles make up an embodiment, the observation
//! keys it reports and how a flat action vector is split across components.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::schema::{DType, Field, SchemaDescriptor, SchemaError};

pub const ARM_ROLES: [&str; 2] = ["arm", "arm2"];
pub const GRIPPER_ROLES: [&str; 2] = ["gripper", "gripper2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EmbodimentKind {
    SingleArm,
    Bimanual,
}

impl EmbodimentKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbodimentKind::SingleArm => "single_arm",
            EmbodimentKind::Bimanual => "bimanual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single_arm" => Some(EmbodimentKind::SingleArm),
            "bimanual" => Some(EmbodimentKind::Bimanual),
            _ => None,
        }
    }

    /// `(arm role, gripper role, key suffix)` per side, in action order.
    pub fn sides(self) -> &'static [(&'static str, &'static str, &'static str)] {
        match self {
            EmbodimentKind::SingleArm => &[("arm", "gripper", "")],
            EmbodimentKind::Bimanual => &[("arm", "gripper", "_left"), ("arm2", "gripper2", "_right")],
        }
    }
}

impl fmt::Display for EmbodimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MorphologyError {
    #[error("no morphology matches roles {0:?}")]
    NoMatch(Vec<String>),
    #[error("roles match several morphologies equally well: {0:?}")]
    AmbiguousMatch(Vec<String>),
    #[error("action has {got} values, layout expects {expected}")]
    ActionShapeMismatch { expected: usize, got: usize },
}

/// A morphology's role requirements.
#[derive(Clone, Debug, PartialEq)]
pub struct Morphology<K> {
    pub kind: K,
    pub required: Vec<String>,
    pub optional: Vec<String>,
}

/// Built-in morphology table.
pub fn builtin_morphologies() -> Vec<Morphology<EmbodimentKind>> {
    let s = |v: &[&str]| v.iter().map(|r| (*r).to_owned()).collect::<Vec<_>>();
    alloc::vec![
        Morphology {
            kind: EmbodimentKind::SingleArm,
            required: s(&["arm"]),
            optional: s(&["gripper"]),
        },
        Morphology {
            kind: EmbodimentKind::Bimanual,
            required: s(&["arm", "arm2"]),
            optional: s(&["gripper", "gripper2"]),
        },
    ]
}

/// Picks the morphology whose required roles are all present, preferring the
/// one that requires the most roles.
pub fn infer_with<K: Clone>(table: &[Morphology<K>], roles: &[&str]) -> Result<K, MorphologyError> {
    let owned = || roles.iter().map(|r| (*r).to_owned()).collect::<Vec<_>>();
    let mut best: Option<(&Morphology<K>, usize)> = None;
    let mut tied = false;
    for m in table {
        if !m.required.iter().all(|r| roles.contains(&r.as_str())) {
            continue;
        }
        let score = m.required.len();
        match best {
            Some((_, s)) if s > score => {}
            Some((_, s)) if s == score => tied = true,
            _ => {
                best = Some((m, score));
                tied = false;
            }
        }
    }
    match best {
        None => Err(MorphologyError::NoMatch(owned())),
        Some(_) if tied => Err(MorphologyError::AmbiguousMatch(owned())),
        Some((m, _)) => Ok(m.kind.clone()),
    }
}

pub fn infer_embodiment(roles: &[&str]) -> Result<EmbodimentKind, MorphologyError> {
    infer_with(&builtin_morphologies(), roles)
}

/// Observation keys, sorted: `timestamp_ns`, per-side state and one
/// `image_{role}` per camera.
pub fn observation_keys(kind: EmbodimentKind, camera_roles: &[&str]) -> Vec<String> {
    let mut keys = alloc::vec![String::from("timestamp_ns")];
    for (_, _, suffix) in kind.sides() {
        for base in ["joint_pos", "ee_pose", "gripper_width"] {
            keys.push(format!("{base}{suffix}"));
        }
    }
    for cam in camera_roles {
        keys.push(format!("image_{cam}"));
    }
    keys.sort();
    keys
}

/// Shape of one camera stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CameraShape {
    pub role: String,
    pub height: usize,
    pub width: usize,
}

/// Observation schema for an embodiment whose arms each have `n_joints`.
pub fn observation_schema(
    kind: EmbodimentKind,
    n_joints: usize,
    cameras: &[CameraShape],
) -> Result<SchemaDescriptor, SchemaError> {
    let mut fields = alloc::vec![Field::new("timestamp_ns", DType::I64, &[])];
    for (_, _, suffix) in kind.sides() {
        fields.push(Field::new(format!("joint_pos{suffix}"), DType::F64, &[n_joints]));
        fields.push(Field::new(format!("ee_pose{suffix}"), DType::F64, &[6]));
        fields.push(Field::new(format!("gripper_width{suffix}"), DType::F64, &[]));
    }
    for c in cameras {
        fields.push(Field::new(format!("image_{}", c.role), DType::U8, &[c.height, c.width, 3]));
    }
    SchemaDescriptor::new(fields)
}

/// Ordered `(role, arity)` segments of a flat action vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionLayout {
    segments: Vec<(String, usize)>,
}

impl ActionLayout {
    /// Layout in the canonical order arm, gripper, arm2, gripper2 for the
    /// roles present. `arity` gives each present role's dimension.
    pub fn new(kind: EmbodimentKind, mut arity: impl FnMut(&str) -> Option<usize>) -> Self {
        let mut segments = Vec::new();
        for (arm, gripper, _) in kind.sides() {
            for role in [*arm, *gripper] {
                if let Some(n) = arity(role) {
                    segments.push((role.to_owned(), n));
                }
            }
        }
        ActionLayout { segments }
    }

    pub fn from_segments(segments: Vec<(String, usize)>) -> Self {
        ActionLayout { segments }
    }

    pub fn segments(&self) -> &[(String, usize)] {
        &self.segments
    }

    pub fn dim(&self) -> usize {
        self.segments.iter().map(|(_, n)| n).sum()
    }

    pub fn split<'a>(&'a self, action: &'a [f64]) -> Result<Vec<(&'a str, &'a [f64])>, MorphologyError> {
        if action.len() != self.dim() {
            return Err(MorphologyError::ActionShapeMismatch { expected: self.dim(), got: action.len() });
        }
        let mut off = 0;
        Ok(self
            .segments
            .iter()
            .map(|(role, n)| {
                let seg = &action[off..off + n];
                off += n;
                (role.as_str(), seg)
            })
            .collect())
    }
}
