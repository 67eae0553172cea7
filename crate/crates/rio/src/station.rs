//! Stations: one config file describes every node; building it launches
//! the servers, connects a client per role and wraps them in an [`Env`].

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rio_core::kinematics::{ArmModel, Pose2D};
use rio_core::morphology::{self, ActionLayout, CameraShape, EmbodimentKind, MorphologyError};
use rio_core::schema::payload;
use rio_core::step::StepRecord;
use rio_core::{Payload, SchemaDescriptor, Timestamp, Value};
use serde::Deserialize;

use crate::clock;
use crate::middleware::{open_backend, BackendHandle, BackendKind, MiddlewareError};
use crate::node::{await_all_ready, make_pair, shutdown_all, ClientConnector, ClientProxy, NodeError, NodeHandle, NodeLogic, NodeSpec};
use crate::sim::{self, ArmNode, ArmParams, CameraNode, CameraParams, GripperNode, GripperParams};

pub const DEFAULT_READY_TIMEOUT_MS: u64 = 5000;

#[derive(Debug, thiserror::Error)]
pub enum StationError {
    #[error("config: {0}")]
    Config(String),
    #[error("component `{role}` names unregistered spec `{spec}`")]
    UnknownRole { role: String, spec: String },
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Backend(#[from] MiddlewareError),
    #[error(transparent)]
    Morphology(#[from] MorphologyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `middleware = "shm"` or a table such as `{ kind = "tcp", port = 7447 }`.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum MiddlewareField {
    Name(String),
    Table(BackendKind),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub spec: String,
    #[serde(default)]
    pub rate_hz: Option<f64>,
    #[serde(default)]
    pub capacity: Option<usize>,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    middleware: MiddlewareField,
    #[serde(default)]
    ready_timeout_ms: Option<u64>,
    components: BTreeMap<String, ComponentConfig>,
}

#[derive(Clone, Debug)]
pub struct StationConfig {
    pub name: String,
    pub middleware: BackendKind,
    pub ready_timeout: Duration,
    /// Role key to component.
    pub components: BTreeMap<String, ComponentConfig>,
}

impl StationConfig {
    pub fn parse(text: &str) -> Result<Self, StationError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| StationError::Config(e.to_string()))?;
        let middleware = match raw.middleware {
            MiddlewareField::Name(n) => BackendKind::parse(&n)?,
            MiddlewareField::Table(k) => k,
        };
        if raw.components.is_empty() {
            return Err(StationError::Config("station has no components".into()));
        }
        for role in raw.components.keys() {
            if role.is_empty() || role.contains('/') {
                return Err(StationError::Config(format!("bad role key `{role}`")));
            }
        }
        Ok(StationConfig {
            name: raw.name,
            middleware,
            ready_timeout: Duration::from_millis(raw.ready_timeout_ms.unwrap_or(DEFAULT_READY_TIMEOUT_MS)),
            components: raw.components,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StationError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| StationError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// What a registered spec contributes to the station.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComponentKind {
    Arm,
    Gripper,
    Camera,
    Teleop,
}

pub struct RegistryEntry {
    pub name: &'static str,
    pub kind: ComponentKind,
    pub description: &'static str,
}

pub const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry {
        name: "sim_arm",
        kind: ComponentKind::Arm,
        description: "planar kinematic arm, pubreq at 100 Hz; api set_joint_target, set_ee_delta, home",
    },
    RegistryEntry {
        name: "sim_gripper",
        kind: ComponentKind::Gripper,
        description: "parallel gripper width, pubreq at 100 Hz; api set_width, home",
    },
    RegistryEntry { name: "sim_camera", kind: ComponentKind::Camera, description: "synthetic 64x64 RGB camera, pub at 30 Hz" },
    RegistryEntry {
        name: "scripted_teleop",
        kind: ComponentKind::Teleop,
        description: "scripted end-effector displacement source, pub at 50 Hz",
    },
];

pub fn lookup(spec: &str) -> Option<&'static RegistryEntry> {
    REGISTRY.iter().find(|e| e.name == spec)
}

fn params<T: for<'de> Deserialize<'de> + Default>(role: &str, c: &ComponentConfig) -> Result<T, StationError> {
    if c.params.is_empty() {
        return Ok(T::default());
    }
    T::deserialize(toml::Value::Table(c.params.clone()))
        .map_err(|e| StationError::Config(format!("component `{role}` params: {e}")))
}

/// A component resolved against the registry.
pub struct BuiltComponent {
    pub kind: ComponentKind,
    pub spec: NodeSpec,
    pub logic: Box<dyn FnOnce(&crate::node::ServerLauncher) -> Result<NodeHandle, NodeError> + Send>,
    pub arm_model: Option<ArmModel>,
    pub camera: Option<CameraParams>,
}

fn launch_with<L: NodeLogic>(
    logic: L,
) -> Box<dyn FnOnce(&crate::node::ServerLauncher) -> Result<NodeHandle, NodeError> + Send> {
    Box::new(move |l| l.launch(logic))
}

/// Resolves one config entry into a node spec and its logic.
pub fn build_component(role: &str, c: &ComponentConfig) -> Result<BuiltComponent, StationError> {
    let entry = lookup(&c.spec).ok_or_else(|| StationError::UnknownRole { role: role.into(), spec: c.spec.clone() })?;
    let rate = |default: f64| c.rate_hz.unwrap_or(default);
    let mut built = match entry.kind {
        ComponentKind::Arm => {
            let p: ArmParams = params(role, c)?;
            let model = p.model().map_err(|e| StationError::Config(format!("component `{role}`: {e}")))?;
            BuiltComponent {
                kind: entry.kind,
                spec: sim::arm_spec(role, &model, rate(sim::ARM_RATE_HZ)),
                logic: launch_with(ArmNode::new(model.clone(), p.damping)),
                arm_model: Some(model),
                camera: None,
            }
        }
        ComponentKind::Gripper => {
            let p: GripperParams = params(role, c)?;
            BuiltComponent {
                kind: entry.kind,
                spec: sim::gripper_spec(role, rate(sim::GRIPPER_RATE_HZ)),
                logic: launch_with(GripperNode::new(&p)),
                arm_model: None,
                camera: None,
            }
        }
        ComponentKind::Camera => {
            let p: CameraParams = params(role, c)?;
            BuiltComponent {
                kind: entry.kind,
                spec: sim::camera_spec(role, rate(sim::CAMERA_RATE_HZ), &p),
                logic: launch_with(CameraNode::new(&p)),
                arm_model: None,
                camera: Some(p),
            }
        }
        ComponentKind::Teleop => BuiltComponent {
            kind: entry.kind,
            spec: sim::teleop_spec(role, rate(sim::TELEOP_RATE_HZ)),
            logic: launch_with(sim::ScriptedTeleopNode),
            arm_model: None,
            camera: None,
        },
    };
    if let Some(cap) = c.capacity {
        if cap == 0 {
            return Err(StationError::Config(format!("component `{role}`: capacity must be positive")));
        }
        built.spec.capacity = cap;
    }
    Ok(built)
}

/// A station with every server running.
pub struct RunningStation {
    pub name: String,
    backend: BackendHandle,
    handles: Vec<NodeHandle>,
    connectors: BTreeMap<String, ClientConnector>,
    kinds: BTreeMap<String, ComponentKind>,
    env: Env,
}

/// Launches every component and waits until all are ready.
pub fn build_station(cfg: &StationConfig) -> Result<RunningStation, StationError> {
    let backend = open_backend(&cfg.middleware)?;
    build_station_on(cfg, backend)
}

/// Like [`build_station`] on an already open backend.
pub fn build_station_on(cfg: &StationConfig, backend: BackendHandle) -> Result<RunningStation, StationError> {
    // resolve everything before launching anything
    let mut built = Vec::new();
    for (role, c) in &cfg.components {
        built.push((role.clone(), build_component(role, c)?));
    }
    let mut handles = Vec::new();
    let mut connectors = BTreeMap::new();
    let mut kinds = BTreeMap::new();
    let mut models = BTreeMap::new();
    let mut cameras = Vec::new();
    for (role, b) in built {
        let (launcher, connector) = make_pair(b.spec, &backend)?;
        handles.push((b.logic)(&launcher)?);
        connectors.insert(role.clone(), connector);
        kinds.insert(role.clone(), b.kind);
        if let Some(m) = b.arm_model {
            models.insert(role.clone(), m);
        }
        if let Some(p) = b.camera {
            cameras.push(CameraShape { role: role.clone(), height: p.height, width: p.width });
        }
    }
    let refs: Vec<&NodeHandle> = handles.iter().collect();
    if let Err(e) = await_all_ready(&refs, cfg.ready_timeout) {
        shutdown_all(&mut handles);
        return Err(e.into());
    }
    let mut clients = BTreeMap::new();
    for (role, c) in &connectors {
        let mut proxy = c.connect()?;
        proxy.wait_latest(cfg.ready_timeout)?;
        clients.insert(role.clone(), proxy);
    }
    let env = Env::new(&cfg.name, clients, &kinds, models, cameras)?;
    Ok(RunningStation { name: cfg.name.clone(), backend, handles, connectors, kinds, env })
}

impl RunningStation {
    pub fn backend(&self) -> &BackendHandle {
        &self.backend
    }

    pub fn env(&mut self) -> &mut Env {
        &mut self.env
    }

    pub fn env_ref(&self) -> &Env {
        &self.env
    }

    pub fn handles(&self) -> &[NodeHandle] {
        &self.handles
    }

    /// Roles in config order with their component kind.
    pub fn roles(&self) -> &BTreeMap<String, ComponentKind> {
        &self.kinds
    }

    /// A fresh proxy for `role`, for use on another thread.
    pub fn connector(&self, role: &str) -> Option<&ClientConnector> {
        self.connectors.get(role)
    }

    /// Every state topic served by the station.
    pub fn topics(&self) -> Vec<String> {
        self.connectors.keys().map(|r| format!("{r}/state")).collect()
    }

    /// Adds a node on the station backend; it is shut down with the station.
    pub fn adopt(&mut self, handle: NodeHandle) {
        self.handles.push(handle);
    }

    /// Stops every node and releases the backend.
    pub fn shutdown(mut self) {
        self.teardown();
    }

    fn teardown(&mut self) {
        self.env.clients.clear();
        shutdown_all(&mut self.handles);
        self.handles.clear();
        self.backend.close();
    }
}

impl Drop for RunningStation {
    fn drop(&mut self) {
        self.teardown();
    }
}

/// Per-side state read from the clients.
struct Side {
    arm: String,
    gripper: Option<String>,
    suffix: &'static str,
}

/// Gym-style view of a station.
pub struct Env {
    station: String,
    kind: EmbodimentKind,
    clients: BTreeMap<String, ClientProxy>,
    sides: Vec<Side>,
    cameras: Vec<CameraShape>,
    models: BTreeMap<String, ArmModel>,
    layout: ActionLayout,
    schema: SchemaDescriptor,
    instruction: String,
    timestep: u64,
    metadata: BTreeMap<String, String>,
}

impl Env {
    fn new(
        station: &str,
        clients: BTreeMap<String, ClientProxy>,
        kinds: &BTreeMap<String, ComponentKind>,
        models: BTreeMap<String, ArmModel>,
        cameras: Vec<CameraShape>,
    ) -> Result<Self, StationError> {
        let device_roles: Vec<&str> = kinds
            .iter()
            .filter(|(_, k)| matches!(k, ComponentKind::Arm | ComponentKind::Gripper))
            .map(|(r, _)| r.as_str())
            .collect();
        for (role, k) in kinds {
            let expected = match k {
                ComponentKind::Arm => morphology::ARM_ROLES.contains(&role.as_str()),
                ComponentKind::Gripper => morphology::GRIPPER_ROLES.contains(&role.as_str()),
                _ => true,
            };
            if !expected {
                return Err(StationError::Config(format!("role `{role}` cannot host a {k:?} component")));
            }
        }
        let kind = morphology::infer_embodiment(&device_roles)?;
        let sides: Vec<Side> = kind
            .sides()
            .iter()
            .map(|(arm, gripper, suffix)| Side {
                arm: (*arm).to_string(),
                gripper: kinds.contains_key(*gripper).then(|| (*gripper).to_string()),
                suffix,
            })
            .collect();
        let n_joints = models.get("arm").map(ArmModel::n_joints).unwrap_or(3);
        if models.values().any(|m| m.n_joints() != n_joints) {
            return Err(StationError::Config("all arms must have the same joint count".into()));
        }
        let layout = ActionLayout::new(kind, |role| {
            if let Some(m) = models.get(role) {
                Some(m.n_joints())
            } else if kinds.get(role) == Some(&ComponentKind::Gripper) {
                Some(1)
            } else {
                None
            }
        });
        let schema = morphology::observation_schema(kind, n_joints, &cameras)
            .map_err(|e| StationError::Config(e.to_string()))?;
        let mut metadata = BTreeMap::new();
        metadata.insert("station".to_string(), station.to_string());
        metadata.insert("embodiment".to_string(), kind.name().to_string());
        Ok(Env {
            station: station.into(),
            kind,
            clients,
            sides,
            cameras,
            models,
            layout,
            schema,
            instruction: String::new(),
            timestep: 0,
            metadata,
        })
    }

    pub fn station_name(&self) -> &str {
        &self.station
    }

    pub fn kind(&self) -> EmbodimentKind {
        self.kind
    }

    pub fn observation_schema(&self) -> &SchemaDescriptor {
        &self.schema
    }

    pub fn observation_keys(&self) -> Vec<String> {
        let cams: Vec<&str> = self.cameras.iter().map(|c| c.role.as_str()).collect();
        morphology::observation_keys(self.kind, &cams)
    }

    pub fn action_layout(&self) -> &ActionLayout {
        &self.layout
    }

    /// Arm roles in action order.
    pub fn arm_roles(&self) -> Vec<&str> {
        self.sides.iter().map(|s| s.arm.as_str()).collect()
    }

    pub fn arm_model(&self, role: &str) -> Option<&ArmModel> {
        self.models.get(role)
    }

    pub fn client(&mut self, role: &str) -> Option<&mut ClientProxy> {
        self.clients.get_mut(role)
    }

    pub fn set_instruction(&mut self, instruction: &str) {
        self.instruction = instruction.into();
    }

    pub fn timestep(&self) -> u64 {
        self.timestep
    }

    fn client_mut(&mut self, role: &str) -> Result<&mut ClientProxy, MiddlewareError> {
        self.clients.get_mut(role).ok_or_else(|| MiddlewareError::InvalidConfig(format!("no client for `{role}`")))
    }

    /// Assembles the observation from each client's latest sample.
    pub fn get_state(&mut self) -> Result<Payload, MiddlewareError> {
        let mut obs = Payload::new();
        let mut stamp: Option<Timestamp> = None;
        for i in 0..self.sides.len() {
            let (arm, gripper, suffix) = (self.sides[i].arm.clone(), self.sides[i].gripper.clone(), self.sides[i].suffix);
            let s = self.client_mut(&arm)?.latest()?;
            stamp.get_or_insert(s.ts);
            for key in ["joint_pos", "ee_pose"] {
                let v = s.get(key).cloned().ok_or_else(|| MiddlewareError::Protocol(format!("{arm} state lacks {key}")))?;
                obs.insert(format!("{key}{suffix}"), v);
            }
            let width = match gripper {
                Some(g) => self.client_mut(&g)?.latest()?.get("width").and_then(Value::as_f64).unwrap_or(0.0),
                None => 0.0,
            };
            obs.insert(format!("gripper_width{suffix}"), Value::f64(width));
        }
        for c in self.cameras.clone() {
            let s = self.client_mut(&c.role)?.latest()?;
            let frame = s.get("frame").cloned().ok_or_else(|| MiddlewareError::Protocol("camera state lacks frame".into()))?;
            obs.insert(format!("image_{}", c.role), frame);
        }
        obs.insert("timestamp_ns".into(), Value::i64(stamp.unwrap_or_default().0 as i64));
        Ok(obs)
    }

    /// Timestamp of an observation built by [`Env::get_state`].
    pub fn observation_ts(obs: &Payload) -> Timestamp {
        Timestamp(obs.get("timestamp_ns").and_then(Value::as_i64).unwrap_or(0).max(0) as u64)
    }

    /// Commands the home pose and waits for every arm to reach it.
    pub fn reset(&mut self) -> Result<Payload, MiddlewareError> {
        self.timestep = 0;
        let mut roles = Vec::new();
        for s in &self.sides {
            roles.push(s.arm.clone());
            roles.extend(s.gripper.clone());
        }
        for r in &roles {
            self.client_mut(r)?.call("home", &Payload::new())?;
        }
        let arms: Vec<String> = self.sides.iter().map(|s| s.arm.clone()).collect();
        self.wait_joints(&arms.iter().map(|a| (a.clone(), vec![0.0; self.n_joints(a)])).collect::<Vec<_>>())?;
        self.get_state()
    }

    fn n_joints(&self, arm: &str) -> usize {
        self.models.get(arm).map(ArmModel::n_joints).unwrap_or(3)
    }

    /// Commands joint targets and waits until the arms settle there.
    pub fn move_to(&mut self, targets: &[(String, Vec<f64>)]) -> Result<(), MiddlewareError> {
        for (arm, q) in targets {
            self.client_mut(arm)?.call("set_joint_target", &payload([("joints", Value::f64s(q.clone()))]))?;
        }
        self.wait_joints(targets)
    }

    fn wait_joints(&mut self, targets: &[(String, Vec<f64>)]) -> Result<(), MiddlewareError> {
        let deadline = clock::now() + clock::duration_ns(Duration::from_secs(10));
        loop {
            let mut settled = true;
            for (arm, q) in targets {
                let s = self.client_mut(arm)?.latest()?;
                let pos = s.get("joint_pos").and_then(Value::as_f64s).unwrap_or(&[]);
                settled &= pos.len() == q.len() && pos.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-9);
            }
            if settled {
                return Ok(());
            }
            if clock::now() >= deadline {
                return Err(MiddlewareError::Timeout(10_000));
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    /// Splits a flat action by component and forwards each part.
    pub fn apply_action(&mut self, action: &[f64]) -> Result<Payload, StationError> {
        let parts: Vec<(String, Vec<f64>)> =
            self.layout.split(action)?.into_iter().map(|(r, a)| (r.to_string(), a.to_vec())).collect();
        let mut out = Payload::new();
        for (role, a) in parts {
            let is_arm = self.models.contains_key(&role);
            let args = if is_arm {
                payload([("joints", Value::f64s(a.clone()))])
            } else {
                payload([("width", Value::f64(a[0]))])
            };
            let method = if is_arm { "set_joint_target" } else { "set_width" };
            self.client_mut(&role)?.send(method, &args)?;
            out.insert(role, Value::f64s(a));
        }
        Ok(out)
    }

    /// Reads the observation, forwards the action and returns the step.
    pub fn step(&mut self, action: &[f64]) -> Result<StepRecord, StationError> {
        self.layout.split(action)?;
        let observation = self.get_state()?;
        self.step_with(observation, action)
    }

    /// Like [`Env::step`] with an observation read earlier.
    pub fn step_with(&mut self, observation: Payload, action: &[f64]) -> Result<StepRecord, StationError> {
        let action = self.apply_action(action)?;
        let rec = StepRecord {
            timestep: self.timestep,
            instruction: self.instruction.clone(),
            observation,
            action,
            metadata: self.metadata.clone(),
        };
        self.timestep += 1;
        Ok(rec)
    }

    /// End-effector pose of `arm` from its latest state.
    pub fn ee_pose(&mut self, arm: &str) -> Result<Pose2D, MiddlewareError> {
        let s = self.client_mut(arm)?.latest()?;
        let p = s.get("ee_pose").and_then(Value::as_f64s).filter(|p| p.len() == 6);
        let p = p.ok_or_else(|| MiddlewareError::Protocol(format!("{arm} state lacks ee_pose")))?;
        Ok(Pose2D::new(p[0], p[1], p[5]))
    }
}
