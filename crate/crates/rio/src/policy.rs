//! Policy interface, the policy wrapper node, and the two deployment
//! loops: the asynchronous chunked executor and a synchronous baseline.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, RecvTimeoutError};
use rio_core::executor::{self, AsyncExecutor, Dispatch, ExecutorConfig, ExecutorError, TickRecord};
use rio_core::morphology::ActionLayout;
use rio_core::schema::payload;
use rio_core::stats::median;
use rio_core::{DType, Payload, SchemaDescriptor, Timestamp, Value};
use serde::{Deserialize, Serialize};

use crate::clock;
use crate::middleware::{BackendHandle, MiddlewareError};
use crate::node::{make_pair, ClientConnector, ClientProxy, HandlerError, MethodSpec, NodeContext, NodeError, NodeHandle, NodeLogic, NodeSpec, Pattern};
use crate::station::{Env, RunningStation, StationError};

pub const POLICY_NODE: &str = "policy";
pub const INFER: &str = "infer";
pub const BASE_TIMESTEP_KEY: &str = "base_timestep";
/// Injected forward-pass time of the latency policy, in milliseconds.
pub const FORWARD_PASS_MS: f64 = 85.8;
pub const DEFAULT_INFER_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("observation lacks `{0}`")]
    MissingKey(String),
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("{0}")]
    Failed(String),
}

/// A horizon of future actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    /// `H` rows of action-dim entries.
    pub actions: Vec<Vec<f64>>,
    pub issued_ts: Timestamp,
    pub base_timestep: u64,
}

impl ActionChunk {
    pub fn to_payload(&self) -> Payload {
        let h = self.actions.len();
        let d = self.actions.first().map_or(0, Vec::len);
        payload([
            ("actions", Value::f64_array(&[h, d], self.actions.concat())),
            ("issued_ns", Value::i64(self.issued_ts.0 as i64)),
            (BASE_TIMESTEP_KEY, Value::i64(self.base_timestep as i64)),
        ])
    }

    pub fn from_payload(p: &Payload) -> Result<Self, MiddlewareError> {
        let bad = || MiddlewareError::Protocol("malformed action chunk".into());
        let (shape, data) = match p.get("actions") {
            Some(Value::F64 { shape, data }) if shape.len() == 2 && shape[1] > 0 => (shape, data),
            _ => return Err(bad()),
        };
        let issued = p.get("issued_ns").and_then(Value::as_i64).ok_or_else(bad)?;
        let base = p.get(BASE_TIMESTEP_KEY).and_then(Value::as_i64).ok_or_else(bad)?;
        Ok(ActionChunk {
            actions: data.chunks(shape[1]).map(<[f64]>::to_vec).collect(),
            issued_ts: Timestamp(issued.max(0) as u64),
            base_timestep: base.max(0) as u64,
        })
    }
}

/// What a deployable policy implements.
pub trait Policy: Send + 'static {
    fn init(&mut self, _params: &serde_json::Map<String, serde_json::Value>) -> Result<(), PolicyError> {
        Ok(())
    }

    /// Maps a standard observation to the policy's own input.
    fn convert_obs(&self, obs: &Payload) -> Result<Payload, PolicyError>;

    fn infer(&mut self, input: &Payload, base_timestep: u64) -> Result<ActionChunk, PolicyError>;

    fn horizon(&self) -> usize;

    fn action_dim(&self) -> usize;
}

/// Deterministic sinusoidal chunks laid out like the station action.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    layout: ActionLayout,
    required: Vec<String>,
    horizon: usize,
    rate_hz: f64,
    amplitude: f64,
    freq_hz: f64,
}

impl ScriptedPolicy {
    pub fn new(layout: ActionLayout, required: Vec<String>, horizon: usize, rate_hz: f64) -> Self {
        ScriptedPolicy { layout, required, horizon: horizon.max(1), rate_hz, amplitude: 0.3, freq_hz: 0.25 }
    }

    /// Needs the joint positions of every arm of `env`.
    pub fn for_env(env: &Env, horizon: usize, rate_hz: f64) -> Self {
        let required = env.kind().sides().iter().map(|(_, _, s)| format!("joint_pos{s}")).collect();
        Self::new(env.action_layout().clone(), required, horizon, rate_hz)
    }

    /// Action at control step `k`.
    pub fn action_at(&self, k: u64) -> Vec<f64> {
        let phase = 2.0 * PI * self.freq_hz * k as f64 / self.rate_hz;
        let mut out = Vec::with_capacity(self.layout.dim());
        for (i, (role, n)) in self.layout.segments().iter().enumerate() {
            if role.starts_with("arm") {
                out.extend((0..*n).map(|j| self.amplitude * (phase + (i + j) as f64).sin()));
            } else {
                out.extend((0..*n).map(|_| 0.04 + 0.02 * (phase + i as f64).sin()));
            }
        }
        out
    }
}

impl Policy for ScriptedPolicy {
    fn init(&mut self, params: &serde_json::Map<String, serde_json::Value>) -> Result<(), PolicyError> {
        for (k, v) in params {
            let x = v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| PolicyError::BadParam(format!("`{k}` must be a number")))?;
            match k.as_str() {
                "amplitude" => self.amplitude = x,
                "freq_hz" => self.freq_hz = x,
                _ => return Err(PolicyError::BadParam(format!("unknown parameter `{k}`"))),
            }
        }
        Ok(())
    }

    fn convert_obs(&self, obs: &Payload) -> Result<Payload, PolicyError> {
        let mut input = Payload::new();
        for key in self.required.iter().map(String::as_str).chain(["timestamp_ns"]) {
            let v = obs.get(key).ok_or_else(|| PolicyError::MissingKey(key.into()))?;
            input.insert(key.into(), v.clone());
        }
        Ok(input)
    }

    fn infer(&mut self, _input: &Payload, base_timestep: u64) -> Result<ActionChunk, PolicyError> {
        Ok(ActionChunk {
            actions: (0..self.horizon as u64).map(|h| self.action_at(base_timestep + h)).collect(),
            issued_ts: clock::now(),
            base_timestep,
        })
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn action_dim(&self) -> usize {
        self.layout.dim()
    }
}

/// Wraps a policy and holds every inference for a fixed time, standing in
/// for a large model's forward pass.
pub struct LatencyPolicy<P> {
    inner: P,
    latency: Duration,
}

impl<P: Policy> LatencyPolicy<P> {
    pub fn new(inner: P, latency: Duration) -> Self {
        LatencyPolicy { inner, latency }
    }

    pub fn forward_pass(inner: P) -> Self {
        Self::new(inner, Duration::from_secs_f64(FORWARD_PASS_MS / 1000.0))
    }
}

impl<P: Policy> Policy for LatencyPolicy<P> {
    fn init(&mut self, params: &serde_json::Map<String, serde_json::Value>) -> Result<(), PolicyError> {
        let mut rest = params.clone();
        if let Some(v) = rest.remove("latency_ms") {
            let ms = v.as_f64().filter(|m| *m >= 0.0).ok_or_else(|| PolicyError::BadParam("`latency_ms` must be >= 0".into()))?;
            self.latency = Duration::from_secs_f64(ms / 1000.0);
        }
        self.inner.init(&rest)
    }

    fn convert_obs(&self, obs: &Payload) -> Result<Payload, PolicyError> {
        self.inner.convert_obs(obs)
    }

    fn infer(&mut self, input: &Payload, base_timestep: u64) -> Result<ActionChunk, PolicyError> {
        let done = clock::now() + clock::duration_ns(self.latency);
        let chunk = self.inner.infer(input, base_timestep)?;
        clock::sleep_until(done);
        Ok(chunk)
    }

    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }
}

/// A payload of zeros (empty strings) with the shape of `schema`.
pub fn zero_payload(schema: &SchemaDescriptor) -> Payload {
    schema
        .fields()
        .iter()
        .map(|f| {
            let n = f.element_count();
            let v = match f.dtype {
                DType::F64 => Value::f64_array(&f.shape, vec![0.0; n]),
                DType::I64 => Value::I64 { shape: f.shape.clone(), data: vec![0; n] },
                DType::U8 => Value::u8_array(&f.shape, vec![0; n]),
                DType::Utf8 => Value::text(""),
            };
            (f.name.clone(), v)
        })
        .collect()
}

/// Node spec of a policy answering `infer` for observations of `obs`.
pub fn policy_spec(name: &str, obs: &SchemaDescriptor, horizon: usize, action_dim: usize) -> NodeSpec {
    let mut request = zero_payload(obs);
    request.insert(BASE_TIMESTEP_KEY.into(), Value::i64(0));
    let reply = ActionChunk { actions: vec![vec![0.0; action_dim]; horizon], issued_ts: Timestamp::ZERO, base_timestep: 0 };
    NodeSpec::new(name, Pattern::Req, 0.0, Payload::new()).with_method(MethodSpec::new(INFER, request, reply.to_payload()))
}

struct PolicyNode<P> {
    policy: P,
}

impl<P: Policy> NodeLogic for PolicyNode<P> {
    fn handle(&mut self, _ctx: &mut NodeContext, method: &str, args: &Payload) -> Result<Payload, HandlerError> {
        if method != INFER {
            return Err(HandlerError::Rejected(format!("unknown method `{method}`")));
        }
        let base = args.get(BASE_TIMESTEP_KEY).and_then(Value::as_i64).unwrap_or(0).max(0) as u64;
        let input = self.policy.convert_obs(args).map_err(|e| HandlerError::Rejected(e.to_string()))?;
        let chunk = self.policy.infer(&input, base).map_err(|e| HandlerError::Rejected(e.to_string()))?;
        Ok(chunk.to_payload())
    }
}

/// Hosts `policy` as a request-only node on `backend`.
pub fn serve_policy<P: Policy>(
    policy: P,
    name: &str,
    obs: &SchemaDescriptor,
    backend: &BackendHandle,
) -> Result<(NodeHandle, ClientConnector), NodeError> {
    let spec = policy_spec(name, obs, policy.horizon(), policy.action_dim());
    let (launcher, connector) = make_pair(spec, backend)?;
    let handle = launcher.launch(PolicyNode { policy })?;
    handle.ready_event().wait_timeout(Duration::from_secs(5));
    Ok((handle, connector.with_timeout(DEFAULT_INFER_TIMEOUT)))
}

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error(transparent)]
    Station(#[from] StationError),
    #[error(transparent)]
    Backend(#[from] MiddlewareError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Async,
    Sync,
}

/// One line of a rollout trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub mode: Mode,
    /// Control tick the action was executed at.
    pub tick: u64,
    pub exec_ns: u64,
    pub chunk_id: Option<u64>,
    pub index: Option<usize>,
    pub obs_ns: Option<u64>,
    /// `exec_ns - obs_ns` in milliseconds.
    pub obs_age_ms: Option<f64>,
    pub starved: bool,
    pub action: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RolloutSummary {
    pub mode: Mode,
    pub ticks: u64,
    pub starved: usize,
    pub chunks: usize,
    /// Chunk switches directly preceded by a starved tick.
    pub starved_boundaries: usize,
    /// Async: obs age at the first action of each fresh chunk. Sync: obs to
    /// action latency of each cycle.
    pub median_latency_ms: f64,
    pub max_latency_ms: f64,
}

/// A stretch of time one loop spent working.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub name: String,
    pub start_ns: u64,
    pub end_ns: u64,
}

impl Span {
    fn new(name: &str, start: Timestamp, end: Timestamp) -> Self {
        Span { name: name.into(), start_ns: start.0, end_ns: end.0.max(start.0) }
    }

    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

pub const MAIN_SPAN: &str = "main";
pub const INFER_SPAN: &str = "infer";

#[derive(Clone, Debug)]
pub struct RolloutTrace {
    pub mode: Mode,
    pub records: Vec<TraceRecord>,
    /// Main-loop work and inference calls.
    pub spans: Vec<Span>,
}

impl RolloutTrace {
    /// Latencies the summary's median is taken over, in milliseconds.
    pub fn latencies_ms(&self) -> Vec<f64> {
        match self.mode {
            Mode::Async => self
                .records
                .iter()
                .filter(|r| r.index == Some(0) && r.chunk_id.is_some_and(|c| c > 0))
                .filter_map(|r| r.obs_age_ms)
                .collect(),
            Mode::Sync => self.records.iter().filter_map(|r| r.obs_age_ms).collect(),
        }
    }

    pub fn summary(&self) -> RolloutSummary {
        let lat = self.latencies_ms();
        let mut starved_boundaries = 0;
        for w in self.records.windows(2) {
            if w[0].starved && w[1].index == Some(0) && w[1].chunk_id.is_some_and(|c| c > 0) {
                starved_boundaries += 1;
            }
        }
        let chunks = self.records.iter().filter_map(|r| r.chunk_id).max().map_or(0, |c| c as usize + 1);
        RolloutSummary {
            mode: self.mode,
            ticks: self.records.len() as u64,
            starved: self.records.iter().filter(|r| r.starved).count(),
            chunks,
            starved_boundaries,
            median_latency_ms: if lat.is_empty() { f64::NAN } else { median(&lat) },
            max_latency_ms: lat.iter().copied().fold(f64::NAN, f64::max),
        }
    }

    /// Writes one JSON object per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), std::io::Error> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, std::io::Error> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

fn record(mode: Mode, r: &TickRecord) -> TraceRecord {
    TraceRecord {
        mode,
        tick: r.tick,
        exec_ns: r.exec_ts.0,
        chunk_id: r.chunk_id,
        index: r.index,
        obs_ns: r.obs_ts.map(|t| t.0),
        obs_age_ms: r.obs_ts.map(|o| r.exec_ts.since(o) as f64 * 1e-6),
        starved: r.starved,
        action: r.action.clone(),
    }
}

fn request_args(obs: &Payload, base_timestep: u64) -> Payload {
    let mut args = obs.clone();
    args.insert(BASE_TIMESTEP_KEY.into(), Value::i64(base_timestep as i64));
    args
}

fn ticks_for(duration: Duration, rate_hz: f64) -> u64 {
    (duration.as_secs_f64() * rate_hz).round().max(1.0) as u64
}

type Reply = (u64, Result<ActionChunk, MiddlewareError>, Timestamp, Timestamp);

/// Runs the chunked executor for `duration`. The first chunk is fetched
/// with a blocking call before tick 0; afterwards inference runs on a
/// worker thread and the control loop only sleeps until the next tick or
/// the next scheduled request.
pub fn run_async_executor(
    env: &mut Env,
    policy: &ClientConnector,
    cfg: ExecutorConfig,
    duration: Duration,
) -> Result<RolloutTrace, DeployError> {
    cfg.validate()?;
    let mut proxy = policy.connect()?;
    let obs = env.get_state()?;
    let t0 = clock::now();
    let first = ActionChunk::from_payload(&proxy.call(INFER, &request_args(&obs, 0))?)?;
    let rtt = clock::now().since(t0);
    let period = cfg.period_ns();
    let mut ex = AsyncExecutor::new(cfg.clone(), clock::now() + period)?;
    ex.prime(first.actions, Env::observation_ts(&obs), rtt)?;

    let (req_tx, req_rx) = bounded::<(u64, Payload)>(1);
    let (rep_tx, rep_rx) = unbounded::<Reply>();
    let worker = thread::Builder::new().name("rio-infer".into()).spawn(move || infer_worker(proxy, req_rx, rep_tx))?;

    let ticks = ticks_for(duration, cfg.control_rate_hz);
    let mut records = Vec::with_capacity(ticks as usize);
    let mut spans = Vec::with_capacity(ticks as usize * 2);
    let result = (|| -> Result<(), DeployError> {
        for k in 0..ticks {
            let tick_at = ex.tick_time(k);
            loop {
                let now = clock::now();
                if ex.dispatch_due(now) {
                    let obs = env.get_state()?;
                    let req = ex.dispatch(clock::now(), Env::observation_ts(&obs))?;
                    req_tx.send((req.id, request_args(&obs, req.base_timestep))).map_err(|_| MiddlewareError::Disconnected)?;
                    spans.push(Span::new(MAIN_SPAN, now, clock::now()));
                    continue;
                }
                if now >= tick_at {
                    break;
                }
                let wake = ex.next_dispatch_at().map_or(tick_at, |d| d.min(tick_at));
                match rep_rx.recv_timeout(Duration::from_nanos(wake.since(now))) {
                    Ok((id, reply, sent, at)) => {
                        let chunk = reply?;
                        ex.receive(id, chunk.actions, at)?;
                        spans.push(Span::new(INFER_SPAN, sent, at));
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => return Err(MiddlewareError::Disconnected.into()),
                }
            }
            let woke = clock::now();
            let rec = ex.on_tick(k, woke);
            if let Some(a) = &rec.action {
                env.apply_action(a)?;
            }
            records.push(record(Mode::Async, &rec));
            spans.push(Span::new(MAIN_SPAN, woke, clock::now()));
        }
        Ok(())
    })();
    drop(req_tx);
    let _ = worker.join();
    result?;
    Ok(RolloutTrace { mode: Mode::Async, records, spans })
}

fn infer_worker(mut proxy: ClientProxy, requests: crossbeam_channel::Receiver<(u64, Payload)>, replies: crossbeam_channel::Sender<Reply>) {
    for (id, args) in requests {
        let sent = clock::now();
        let reply = proxy.call(INFER, &args).and_then(|p| ActionChunk::from_payload(&p));
        if replies.send((id, reply, sent, clock::now())).is_err() {
            return;
        }
    }
}

/// Serialized baseline on the same control clock: observe at a tick,
/// block on inference, execute the first action at the next tick
/// boundary, then observe again.
pub fn run_sync_baseline(
    env: &mut Env,
    policy: &ClientConnector,
    rate_hz: f64,
    duration: Duration,
) -> Result<RolloutTrace, DeployError> {
    let mut proxy = policy.connect()?;
    let period = rio_core::time::period_ns(rate_hz);
    let start = clock::now() + period;
    let ticks = ticks_for(duration, rate_hz);
    let mut records = Vec::new();
    let mut spans = Vec::new();
    let mut k = 0u64;
    let mut cycle = 0u64;
    while k < ticks {
        clock::sleep_until(start + k * period);
        let woke = clock::now();
        let obs = env.get_state()?;
        let obs_ts = Env::observation_ts(&obs);
        let sent = clock::now();
        let chunk = ActionChunk::from_payload(&proxy.call(INFER, &request_args(&obs, k))?)?;
        let done = clock::now();
        spans.push(Span::new(INFER_SPAN, sent, done));
        spans.push(Span::new(MAIN_SPAN, woke, done));
        k = done.since(start).div_ceil(period).max(k + 1);
        clock::sleep_until(start + k * period);
        let action = chunk.actions.into_iter().next();
        if let Some(a) = &action {
            env.apply_action(a)?;
        }
        let exec = clock::now();
        spans.push(Span::new(MAIN_SPAN, start + k * period, exec));
        records.push(TraceRecord {
            mode: Mode::Sync,
            tick: k,
            exec_ns: exec.0,
            chunk_id: Some(cycle),
            index: Some(0),
            obs_ns: Some(obs_ts.0),
            obs_age_ms: Some(exec.since(obs_ts) as f64 * 1e-6),
            starved: false,
            action,
        });
        cycle += 1;
    }
    Ok(RolloutTrace { mode: Mode::Sync, records, spans })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Scripted,
    Latency,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scripted" => Some(PolicyKind::Scripted),
            "latency" => Some(PolicyKind::Latency),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeployOptions {
    pub policy: PolicyKind,
    pub params: serde_json::Map<String, serde_json::Value>,
    pub mode: Mode,
    pub executor: ExecutorConfig,
    pub duration: Duration,
}

impl Default for DeployOptions {
    fn default() -> Self {
        DeployOptions {
            policy: PolicyKind::Scripted,
            params: serde_json::Map::new(),
            mode: Mode::Async,
            executor: ExecutorConfig::new(15.0, 16, 0.5),
            duration: Duration::from_secs(30),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DeployReport {
    pub station: String,
    pub embodiment: String,
    pub policy: PolicyKind,
    pub observation_keys: Vec<String>,
    pub rollout: RolloutSummary,
}

/// Launches the chosen policy on the station's backend, homes the station
/// and runs one rollout. Works unchanged for every station config.
pub fn deploy(station: &mut RunningStation, opts: &DeployOptions) -> Result<(DeployReport, RolloutTrace), DeployError> {
    let env = station.env();
    let rate = opts.executor.control_rate_hz;
    let mut scripted = ScriptedPolicy::for_env(env, opts.executor.horizon, rate);
    let schema = env.observation_schema().clone();
    let backend = station.backend().clone();
    let (handle, connector) = match opts.policy {
        PolicyKind::Scripted => {
            scripted.init(&opts.params)?;
            serve_policy(scripted, POLICY_NODE, &schema, &backend)?
        }
        PolicyKind::Latency => {
            let mut p = LatencyPolicy::forward_pass(scripted);
            p.init(&opts.params)?;
            serve_policy(p, POLICY_NODE, &schema, &backend)?
        }
    };
    station.adopt(handle);
    let env = station.env();
    let obs = env.reset()?;
    let trace = match opts.mode {
        Mode::Async => run_async_executor(env, &connector, opts.executor.clone(), opts.duration)?,
        Mode::Sync => run_sync_baseline(env, &connector, rate, opts.duration)?,
    };
    let report = DeployReport {
        station: env.station_name().into(),
        embodiment: env.kind().name().into(),
        policy: opts.policy,
        observation_keys: obs.keys().cloned().collect(),
        rollout: trace.summary(),
    };
    Ok((report, trace))
}

/// The executor config with dispatch as soon as the trigger fires.
pub fn immediate(mut cfg: ExecutorConfig) -> ExecutorConfig {
    cfg.dispatch = Dispatch::Immediate;
    cfg
}

/// Virtual-time counterpart of [`run_async_executor`], used as an oracle.
pub fn simulate_scripted(cfg: ExecutorConfig, ticks: u64, latency: Duration, dim: usize) -> Result<RolloutTrace, ExecutorError> {
    let h = cfg.horizon;
    let trace = executor::simulate(cfg, ticks, latency.as_nanos() as u64, |_, base| {
        (0..h).map(|i| vec![(base + i as u64) as f64; dim]).collect()
    })?;
    Ok(RolloutTrace { mode: Mode::Async, records: trace.iter().map(|r| record(Mode::Async, r)).collect(), spans: Vec::new() })
}
