//! Simulated devices hosted as nodes, and the registry that builds them
//! from station config entries.

use std::f64::consts::PI;

use rio_core::camera::{self, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use rio_core::kinematics::{ArmModel, Pose2D, SimArm, SimGripper, DEFAULT_DAMPING, DEFAULT_LINKS, DEFAULT_MAX_VEL};
use rio_core::schema::payload;
use rio_core::teleop::{ee_delta_to_joints, scripted_teleop};
use rio_core::{Payload, Value};
use serde::Deserialize;

use crate::node::{HandlerError, MethodSpec, NodeContext, NodeLogic, NodeSpec, Pattern};

pub const ARM_RATE_HZ: f64 = 100.0;
pub const GRIPPER_RATE_HZ: f64 = 100.0;
pub const CAMERA_RATE_HZ: f64 = 30.0;
pub const TELEOP_RATE_HZ: f64 = 50.0;

/// Parameters of a `sim_arm` component.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmParams {
    #[serde(default = "default_links")]
    pub link_lengths: Vec<f64>,
    /// Per-joint `[lo, hi]` in radians. Defaults to `[-pi, pi]`.
    #[serde(default)]
    pub joint_limits: Option<Vec<[f64; 2]>>,
    #[serde(default = "default_max_vel")]
    pub max_vel: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
}

fn default_links() -> Vec<f64> {
    DEFAULT_LINKS.to_vec()
}

fn default_max_vel() -> f64 {
    DEFAULT_MAX_VEL
}

fn default_damping() -> f64 {
    DEFAULT_DAMPING
}

impl Default for ArmParams {
    fn default() -> Self {
        ArmParams { link_lengths: default_links(), joint_limits: None, max_vel: default_max_vel(), damping: default_damping() }
    }
}

impl ArmParams {
    pub fn model(&self) -> Result<ArmModel, String> {
        let n = self.link_lengths.len();
        if n == 0 || self.link_lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err("link_lengths must be positive".into());
        }
        let joint_limits = match &self.joint_limits {
            None => vec![(-PI, PI); n],
            Some(l) if l.len() == n && l.iter().all(|[lo, hi]| lo <= hi) => l.iter().map(|[lo, hi]| (*lo, *hi)).collect(),
            Some(_) => return Err(format!("joint_limits must be {n} ordered [lo, hi] pairs")),
        };
        if !(self.max_vel > 0.0) || !(self.damping > 0.0) {
            return Err("max_vel and damping must be positive".into());
        }
        Ok(ArmModel { link_lengths: self.link_lengths.clone(), joint_limits, max_vel: self.max_vel })
    }
}

pub fn arm_state(arm: &SimArm) -> Payload {
    payload([
        ("joint_pos", Value::f64s(arm.joint_pos.clone())),
        ("joint_vel", Value::f64s(arm.joint_vel.clone())),
        ("joint_target", Value::f64s(arm.target.clone())),
        ("ee_pose", Value::f64s(arm.ee_pose().to_pose6().to_vec())),
    ])
}

pub fn arm_spec(name: &str, model: &ArmModel, rate_hz: f64) -> NodeSpec {
    let n = model.n_joints();
    let joints = || payload([("joints", Value::f64s(vec![0.0; n]))]);
    NodeSpec::new(name, Pattern::PubReq, rate_hz, arm_state(&SimArm::new(model.clone())))
        .with_method(MethodSpec::new("set_joint_target", joints(), joints()))
        .with_method(MethodSpec::new("set_ee_delta", payload([("delta", Value::f64s(vec![0.0; 3]))]), joints()))
        .with_method(MethodSpec::new("home", Payload::new(), joints()))
}

/// Kinematic arm. Requests are applied in order, so the newest joint
/// target received during a tick wins.
pub struct ArmNode {
    arm: SimArm,
    damping: f64,
}

impl ArmNode {
    pub fn new(model: ArmModel, damping: f64) -> Self {
        ArmNode { arm: SimArm::new(model), damping }
    }
}

fn f64s<'a>(args: &'a Payload, key: &str, n: usize) -> Result<&'a [f64], HandlerError> {
    match args.get(key).and_then(Value::as_f64s) {
        Some(v) if v.len() == n && v.iter().all(|x| x.is_finite()) => Ok(v),
        _ => Err(HandlerError::Rejected(format!("`{key}` must be {n} finite numbers"))),
    }
}

impl NodeLogic for ArmNode {
    fn setup(&mut self, ctx: &mut NodeContext) -> Result<(), HandlerError> {
        ctx.publish(arm_state(&self.arm)).map(|_| ())
    }

    fn publish(&mut self, ctx: &mut NodeContext) -> Result<(), HandlerError> {
        self.arm.tick(ctx.dt());
        ctx.publish(arm_state(&self.arm)).map(|_| ())
    }

    fn handle(&mut self, _ctx: &mut NodeContext, method: &str, args: &Payload) -> Result<Payload, HandlerError> {
        let n = self.arm.model.n_joints();
        match method {
            "set_joint_target" => {
                let q = f64s(args, "joints", n)?.to_vec();
                self.arm.set_target(&q);
            }
            "set_ee_delta" => {
                let d = f64s(args, "delta", 3)?;
                let delta = Pose2D { x: d[0], y: d[1], theta: d[2] };
                let q = ee_delta_to_joints(&self.arm.joint_pos, delta, &self.arm.model, self.damping);
                self.arm.set_target(&q);
            }
            "home" => {
                let zeros = vec![0.0; n];
                self.arm.set_target(&zeros);
            }
            other => return Err(HandlerError::Rejected(format!("unknown method `{other}`"))),
        }
        Ok(payload([("joints", Value::f64s(self.arm.target.clone()))]))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperParams {
    #[serde(default = "default_max_width")]
    pub max_width: f64,
    #[serde(default = "default_gripper_vel")]
    pub max_vel: f64,
}

fn default_max_width() -> f64 {
    SimGripper::default().max_width
}

fn default_gripper_vel() -> f64 {
    SimGripper::default().max_vel
}

impl Default for GripperParams {
    fn default() -> Self {
        GripperParams { max_width: default_max_width(), max_vel: default_gripper_vel() }
    }
}

pub fn gripper_state(g: &SimGripper) -> Payload {
    payload([("width", Value::f64(g.width)), ("target", Value::f64(g.target))])
}

pub fn gripper_spec(name: &str, rate_hz: f64) -> NodeSpec {
    let width = || payload([("width", Value::f64(0.0))]);
    NodeSpec::new(name, Pattern::PubReq, rate_hz, gripper_state(&SimGripper::default()))
        .with_method(MethodSpec::new("set_width", width(), width()))
        .with_method(MethodSpec::new("home", Payload::new(), width()))
}

pub struct GripperNode {
    gripper: SimGripper,
}

impl GripperNode {
    pub fn new(params: &GripperParams) -> Self {
        GripperNode { gripper: SimGripper { max_width: params.max_width, max_vel: params.max_vel, ..SimGripper::default() } }
    }
}

impl NodeLogic for GripperNode {
    fn setup(&mut self, ctx: &mut NodeContext) -> Result<(), HandlerError> {
        ctx.publish(gripper_state(&self.gripper)).map(|_| ())
    }

    fn publish(&mut self, ctx: &mut NodeContext) -> Result<(), HandlerError> {
        self.gripper.tick(ctx.dt());
        ctx.publish(gripper_state(&self.gripper)).map(|_| ())
    }

    fn handle(&mut self, _ctx: &mut NodeContext, method: &str, args: &Payload) -> Result<Payload, HandlerError> {
        match method {
            "set_width" => {
                let w = args.get("width").and_then(Value::as_f64).filter(|w| w.is_finite());
                let w = w.ok_or_else(|| HandlerError::Rejected("`width` must be a finite number".into()))?;
                self.gripper.set_target(w);
            }
            "home" => self.gripper.set_target(0.0),
            other => return Err(HandlerError::Rejected(format!("unknown method `{other}`"))),
        }
        Ok(payload([("width", Value::f64(self.gripper.target))]))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraParams {
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
}

fn default_height() -> usize {
    DEFAULT_HEIGHT
}

fn default_width() -> usize {
    DEFAULT_WIDTH
}

impl Default for CameraParams {
    fn default() -> Self {
        CameraParams { height: DEFAULT_HEIGHT, width: DEFAULT_WIDTH }
    }
}

fn camera_state(index: u32, height: usize, width: usize) -> Payload {
    payload([
        ("index", Value::i64(index as i64)),
        ("frame", Value::u8_array(&[height, width, 3], camera::render(index, height, width))),
    ])
}

pub fn camera_spec(name: &str, rate_hz: f64, p: &CameraParams) -> NodeSpec {
    NodeSpec::new(name, Pattern::Pub, rate_hz, camera_state(0, p.height, p.width))
}

pub struct CameraNode {
    index: u32,
    height: usize,
    width: usize,
}

impl CameraNode {
    pub fn new(p: &CameraParams) -> Self {
        CameraNode { index: 0, height: p.height, width: p.width }
    }
}

impl NodeLogic for CameraNode {
    fn publish(&mut self, ctx: &mut NodeContext) -> Result<(), HandlerError> {
        ctx.publish(camera_state(self.index, self.height, self.width))?;
        self.index = self.index.wrapping_add(1);
        Ok(())
    }
}

pub fn teleop_state(t: f64) -> Payload {
    let d = scripted_teleop(t);
    payload([("delta", Value::f64s(vec![d.x, d.y, d.theta])), ("t", Value::f64(t))])
}

pub fn teleop_spec(name: &str, rate_hz: f64) -> NodeSpec {
    NodeSpec::new(name, Pattern::Pub, rate_hz, teleop_state(0.0))
}

/// Publishes the scripted end-effector displacement `s(t)` at tick times.
pub struct ScriptedTeleopNode;

impl NodeLogic for ScriptedTeleopNode {
    fn publish(&mut self, ctx: &mut NodeContext) -> Result<(), HandlerError> {
        let t = ctx.tick() as f64 * ctx.dt();
        ctx.publish(teleop_state(t)).map(|_| ())
    }
}
