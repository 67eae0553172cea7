//! The teleoperation entry point shared by every station config.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Duration;

use crossbeam_channel::Receiver;
use rio_core::kinematics::{ArmModel, Pose2D, DEFAULT_DAMPING};
use rio_core::morphology::EmbodimentKind;
use rio_core::step::StepRecord;
use rio_core::teleop::{ee_delta_to_joints, scripted_teleop, LowPass, TeleopError};
use rio_core::Payload;
use serde::Serialize;

use crate::clock;
use crate::middleware::MiddlewareError;
use crate::station::{Env, RunningStation, StationError};

/// Joint configuration the arms move to before teleoperation starts.
pub const READY_POSE: [f64; 3] = [0.3, 0.6, 0.4];
pub const DEFAULT_TELEOP_RATE_HZ: f64 = 50.0;
pub const DEFAULT_FILTER_ALPHA: f64 = 0.5;
/// Scripted gripper command: `mid + amp * sin(2 pi f t)` meters.
const GRIPPER_MID: f64 = 0.04;
const GRIPPER_AMP: f64 = 0.02;

pub fn ready_pose(n_joints: usize) -> Vec<f64> {
    (0..n_joints).map(|i| READY_POSE[i % READY_POSE.len()]).collect()
}

/// Operator input arriving from outside the loop.
#[derive(Clone, Debug, PartialEq)]
pub enum TeleopCommand {
    /// Moves the reference of `arm` (the first arm when `None`).
    EeDelta { arm: Option<String>, delta: Pose2D },
    Gripper { role: Option<String>, width: f64 },
    Stop,
}

pub enum TeleopSource {
    Scripted,
    Commands(Receiver<TeleopCommand>),
}

#[derive(Clone, Debug)]
pub struct TeleopOptions {
    pub rate_hz: f64,
    pub filter_alpha: f64,
    pub duration: Duration,
    /// Stops after this many steps when set.
    pub max_steps: Option<u64>,
    pub damping: f64,
    pub instruction: String,
}

impl Default for TeleopOptions {
    fn default() -> Self {
        TeleopOptions {
            rate_hz: DEFAULT_TELEOP_RATE_HZ,
            filter_alpha: DEFAULT_FILTER_ALPHA,
            duration: Duration::from_secs(10),
            max_steps: None,
            damping: DEFAULT_DAMPING,
            instruction: String::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TeleopReport {
    pub station: String,
    pub embodiment: EmbodimentKind,
    pub steps: u64,
    pub elapsed_s: f64,
    pub achieved_rate_hz: f64,
    /// RMS distance between the measured end effector and its reference.
    pub ee_rms_error_m: f64,
    pub observation_keys: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TeleopRunError {
    #[error(transparent)]
    Station(#[from] StationError),
    #[error(transparent)]
    Backend(#[from] MiddlewareError),
    #[error(transparent)]
    Signal(#[from] TeleopError),
    #[error("step sink: {0}")]
    Sink(String),
    #[error("observation keys {got:?} differ from the {kind} schema {want:?}")]
    KeyMismatch { kind: EmbodimentKind, got: Vec<String>, want: Vec<String> },
}

struct ArmTrack {
    role: String,
    model: ArmModel,
    reference: Pose2D,
    anchor: Pose2D,
    commanded: Vec<f64>,
}

/// Homes the station, moves to the ready pose, then runs a relative
/// end-effector teleop loop at `opts.rate_hz`. Every step is passed to
/// `sink` (the recorder, when recording).
pub fn run_teleop(
    station: &mut RunningStation,
    opts: &TeleopOptions,
    source: TeleopSource,
    mut sink: impl FnMut(&StepRecord) -> Result<(), String>,
) -> Result<TeleopReport, TeleopRunError> {
    let env = station.env();
    env.set_instruction(&opts.instruction);
    let obs = env.reset()?;
    check_keys(env, &obs)?;

    let mut arms = Vec::new();
    let mut targets = Vec::new();
    for role in env.arm_roles() {
        let model = env.arm_model(role).cloned().ok_or_else(|| StationError::Config(format!("no model for {role}")))?;
        let q = ready_pose(model.n_joints());
        let anchor = model.fk(&q);
        targets.push((role.to_string(), q.clone()));
        arms.push(ArmTrack { role: role.to_string(), model, reference: anchor, anchor, commanded: q });
    }
    env.move_to(&targets)?;

    let layout = env.action_layout().clone();
    let mut filter = LowPass::new(opts.filter_alpha)?;
    let mut grippers: BTreeMap<String, f64> = BTreeMap::new();
    let scripted = matches!(source, TeleopSource::Scripted);
    let period = rio_core::time::period_ns(opts.rate_hz);
    let dt = 1.0 / opts.rate_hz;
    let start = clock::now();
    let end = start + clock::duration_ns(opts.duration);
    let mut sq_err = 0.0;
    let mut samples = 0u64;
    let mut steps = 0u64;
    let mut stopped = false;

    while !stopped && opts.max_steps.is_none_or(|m| steps < m) {
        let deadline = start + steps * period;
        if deadline >= end {
            break;
        }
        clock::sleep_until(deadline);
        let t = steps as f64 * dt;

        if scripted {
            let s = scripted_teleop(t);
            for a in &mut arms {
                a.reference = a.anchor.offset(s);
            }
        } else if let TeleopSource::Commands(rx) = &source {
            for cmd in rx.try_iter() {
                match cmd {
                    TeleopCommand::EeDelta { arm, delta } => {
                        let idx = arm.and_then(|r| arms.iter().position(|a| a.role == r)).unwrap_or(0);
                        arms[idx].reference = arms[idx].reference.offset(delta);
                    }
                    TeleopCommand::Gripper { role, width } => {
                        grippers.insert(role.unwrap_or_else(|| "gripper".into()), width);
                    }
                    TeleopCommand::Stop => stopped = true,
                }
            }
        }

        let mut raw = Vec::with_capacity(layout.dim());
        for (role, n) in layout.segments() {
            if let Some(a) = arms.iter().find(|a| &a.role == role) {
                let current = a.model.fk(&a.commanded);
                let e = current.error_to(a.reference);
                let q = ee_delta_to_joints(&a.commanded, Pose2D::new(e[0], e[1], e[2]), &a.model, opts.damping);
                raw.extend_from_slice(&q);
            } else {
                let w = if scripted {
                    GRIPPER_MID + GRIPPER_AMP * (2.0 * PI * rio_core::teleop::SCRIPTED_FREQ_HZ * t).sin()
                } else {
                    grippers.get(role).copied().unwrap_or(GRIPPER_MID)
                };
                raw.extend(std::iter::repeat_n(w, *n));
            }
        }
        let action = filter.apply(&raw)?;
        let mut off = 0;
        for (role, n) in layout.segments() {
            if let Some(a) = arms.iter_mut().find(|a| &a.role == role) {
                a.commanded.copy_from_slice(&action[off..off + n]);
            }
            off += n;
        }

        let env = station.env();
        let obs = env.get_state()?;
        for a in &arms {
            let p = env.ee_pose(&a.role)?;
            sq_err += (p.x - a.reference.x).powi(2) + (p.y - a.reference.y).powi(2);
            samples += 1;
        }
        let rec = env.step_with(obs, &action)?;
        sink(&rec).map_err(TeleopRunError::Sink)?;
        steps += 1;
    }

    let elapsed = clock::now().since(start) as f64 * 1e-9;
    let env = station.env();
    Ok(TeleopReport {
        station: env.station_name().to_string(),
        embodiment: env.kind(),
        steps,
        elapsed_s: elapsed,
        achieved_rate_hz: if elapsed > 0.0 { steps as f64 / elapsed } else { 0.0 },
        ee_rms_error_m: if samples > 0 { (sq_err / samples as f64).sqrt() } else { 0.0 },
        observation_keys: env.observation_keys(),
    })
}

fn check_keys(env: &Env, obs: &Payload) -> Result<(), TeleopRunError> {
    let got: Vec<String> = obs.keys().cloned().collect();
    let want = env.observation_keys();
    if got != want {
        return Err(TeleopRunError::KeyMismatch { kind: env.kind(), got, want });
    }
    Ok(())
}

