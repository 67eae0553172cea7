//! Browser bridge: station state and commands over WebSocket text frames.
//!
//! The message grammar and close codes are in `docs/bridge.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use rio_core::downsample::Downsampler;
use rio_core::kinematics::Pose2D;
use rio_core::morphology::EmbodimentKind;
use rio_core::schema::payload;
use rio_core::{Payload, SchemaDescriptor, TimedSample, Timestamp, Value};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use tungstenite::protocol::frame::coding::CloseCode;
use tungstenite::protocol::frame::CloseFrame;
use tungstenite::protocol::WebSocketConfig;
use tungstenite::{Message, WebSocket};

use crate::clock;
use crate::node::{ClientConnector, ClientProxy, NodeStats};
use crate::recorder::{next_episode_path, EpisodeMeta, EpisodeSummary, EpisodeWriter};
use crate::station::{ComponentKind, RunningStation};
use crate::teleop::{run_teleop, TeleopCommand, TeleopOptions, TeleopReport, TeleopRunError, TeleopSource};

pub const DEFAULT_GATEWAY_PORT: u16 = 8787;
pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on state messages per topic per second.
pub const MAX_STATE_RATE_HZ: f64 = 30.0;
pub const STATS_RATE_HZ: f64 = 2.0;
pub const DEFAULT_CONSOLE_DIR: &str = "console/dist";

const READ_SLICE: Duration = Duration::from_millis(5);
const WRITE_TIMEOUT: Duration = Duration::from_millis(50);
const HEAD_TIMEOUT: Duration = Duration::from_secs(2);
const MAX_HEAD_BYTES: usize = 8192;
const MAX_WRITE_BUFFER: usize = 1 << 20;
const DIRECT_CALL_TIMEOUT: Duration = Duration::from_millis(500);
/// How long a closing connection waits for the peer's close frame.
const CLOSE_GRACE: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("address {0} is already in use")]
    AddressInUse(SocketAddr),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Hello,
    Subscribe,
    State,
    Command,
    Stats,
    RecordCtl,
    Error,
}

impl MessageType {
    /// Types a client may send.
    pub fn from_client(self) -> bool {
        matches!(self, MessageType::Hello | MessageType::Subscribe | MessageType::Command | MessageType::RecordCtl)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeMessage {
    #[serde(rename = "type")]
    pub kind: MessageType,
    #[serde(default)]
    pub topic: String,
    pub seq: u64,
    #[serde(default)]
    pub body: Json,
}

impl BridgeMessage {
    pub fn new(kind: MessageType, topic: impl Into<String>, seq: u64, body: Json) -> Self {
        BridgeMessage { kind, topic: topic.into(), seq, body }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("bridge messages serialize")
    }

    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        serde_json::from_str(text).map_err(|e| GatewayError::ProtocolViolation(e.to_string()))
    }
}

/// Close codes used by the gateway.
pub mod close {
    pub const NORMAL: u16 = 1000;
    pub const GOING_AWAY: u16 = 1001;
    pub const PROTOCOL: u16 = 1002;
    pub const UNSUPPORTED: u16 = 1003;
}

/// A field value as plain JSON: numbers for scalars, flat arrays otherwise.
/// Byte images are summarized by dtype and shape.
pub fn value_to_json(v: &Value) -> Json {
    match v {
        Value::F64 { shape, data } if shape.is_empty() => json!(data[0]),
        Value::F64 { data, .. } => json!(data),
        Value::I64 { shape, data } if shape.is_empty() => json!(data[0]),
        Value::I64 { data, .. } => json!(data),
        Value::U8 { shape, .. } => json!({ "dtype": "u8", "shape": shape }),
        Value::Text(s) => json!(s),
    }
}

pub fn payload_to_json(p: &Payload) -> Json {
    Json::Object(p.iter().map(|(k, v)| (k.clone(), value_to_json(v))).collect())
}

/// Where command messages go.
#[derive(Clone, Debug)]
pub enum CommandSink {
    /// Calls the arm and gripper nodes directly.
    Direct,
    /// Forwards to a running teleop loop.
    Teleop(Sender<TeleopCommand>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordControl {
    Start { instruction: Option<String> },
    Stop,
}

#[derive(Clone, Debug)]
pub struct GatewayOptions {
    pub host: String,
    /// 0 picks a free port.
    pub port: u16,
    pub state_rate_hz: f64,
    pub stats_rate_hz: f64,
    pub sink: CommandSink,
    /// Recording is refused when unset.
    pub record: Option<Sender<RecordControl>>,
    /// Serves the console bundle from this directory when set.
    pub console_dir: Option<PathBuf>,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            host: "127.0.0.1".into(),
            port: DEFAULT_GATEWAY_PORT,
            state_rate_hz: MAX_STATE_RATE_HZ,
            stats_rate_hz: STATS_RATE_HZ,
            sink: CommandSink::Direct,
            record: None,
            console_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FieldInfo {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TopicInfo {
    pub name: String,
    pub role: String,
    pub kind: String,
    pub fields: Vec<FieldInfo>,
}

fn field_infos(schema: &SchemaDescriptor) -> Vec<FieldInfo> {
    schema
        .fields()
        .iter()
        .map(|f| FieldInfo { name: f.name.clone(), dtype: f.dtype.name().into(), shape: f.shape.clone() })
        .collect()
}

struct Context {
    station: String,
    embodiment: EmbodimentKind,
    topics: Vec<TopicInfo>,
    connectors: BTreeMap<String, ClientConnector>,
    kinds: BTreeMap<String, ComponentKind>,
    nodes: Vec<(String, Arc<NodeStats>)>,
    opts: GatewayOptions,
    started: Timestamp,
    stop: AtomicBool,
    recording: AtomicBool,
    summary: Mutex<Option<Json>>,
    connections: AtomicU64,
}

impl Context {
    fn first_role(&self, kind: ComponentKind) -> Option<String> {
        self.kinds.iter().find(|(_, k)| **k == kind).map(|(r, _)| r.clone())
    }

    fn topic_role(&self, topic: &str) -> Option<&TopicInfo> {
        self.topics.iter().find(|t| t.name == topic)
    }
}

/// A running gateway. Shuts down on drop.
pub struct Gateway {
    addr: SocketAddr,
    ctx: Arc<Context>,
    accept: Option<JoinHandle<()>>,
}

/// Starts a gateway for `station` on `port` with direct commands.
pub fn serve_bridge(station: &RunningStation, port: u16) -> Result<Gateway, GatewayError> {
    Gateway::serve(station, GatewayOptions { port, ..GatewayOptions::default() })
}

impl Gateway {
    pub fn serve(station: &RunningStation, opts: GatewayOptions) -> Result<Gateway, GatewayError> {
        let want: SocketAddr = format!("{}:{}", opts.host, opts.port)
            .parse()
            .map_err(|e| GatewayError::Io(std::io::Error::new(ErrorKind::InvalidInput, format!("{e}"))))?;
        let listener = match TcpListener::bind(want) {
            Ok(l) => l,
            Err(e) if e.kind() == ErrorKind::AddrInUse => return Err(GatewayError::AddressInUse(want)),
            Err(e) => return Err(e.into()),
        };
        let addr = listener.local_addr()?;
        let env = station.env_ref();
        let mut topics = Vec::new();
        let mut connectors = BTreeMap::new();
        for (role, kind) in station.roles() {
            let Some(c) = station.connector(role) else { continue };
            if let Some(schema) = c.state_schema() {
                topics.push(TopicInfo {
                    name: format!("{role}/state"),
                    role: role.clone(),
                    kind: format!("{kind:?}").to_lowercase(),
                    fields: field_infos(schema),
                });
            }
            connectors.insert(role.clone(), c.clone());
        }
        let ctx = Arc::new(Context {
            station: env.station_name().to_string(),
            embodiment: env.kind(),
            topics,
            connectors,
            kinds: station.roles().clone(),
            nodes: station.handles().iter().map(|h| (h.name().to_string(), h.stats().clone())).collect(),
            opts,
            started: clock::now(),
            stop: AtomicBool::new(false),
            recording: AtomicBool::new(false),
            summary: Mutex::new(None),
            connections: AtomicU64::new(0),
        });
        let c = ctx.clone();
        let accept = thread::Builder::new().name("gateway-accept".into()).spawn(move || accept_loop(listener, c))?;
        Ok(Gateway { addr, ctx, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Bridge URL for clients.
    pub fn url(&self) -> String {
        format!("ws://{}/bridge", self.addr)
    }

    /// Replaces the bench or profile summary carried by stats messages.
    pub fn publish_summary(&self, summary: Json) {
        *self.ctx.summary.lock().unwrap() = Some(summary);
    }

    pub fn set_recording(&self, on: bool) {
        self.ctx.recording.store(on, Ordering::Release);
    }

    pub fn connections(&self) -> u64 {
        self.ctx.connections.load(Ordering::Acquire)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.ctx.stop.store(true, Ordering::Release);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, ctx: Arc<Context>) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    for stream in listener.incoming() {
        if ctx.stop.load(Ordering::Acquire) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let c = ctx.clone();
        if let Ok(h) = thread::Builder::new().name("gateway-conn".into()).spawn(move || handle_stream(stream, c)) {
            workers.push(h);
        }
        workers.retain(|h| !h.is_finished());
    }
    for h in workers {
        let _ = h.join();
    }
}

/// Peeks at the request head without consuming it.
fn peek_head(stream: &TcpStream) -> Option<String> {
    stream.set_read_timeout(Some(HEAD_TIMEOUT)).ok()?;
    let mut buf = vec![0u8; MAX_HEAD_BYTES];
    let deadline = clock::now() + clock::duration_ns(HEAD_TIMEOUT);
    loop {
        let n = stream.peek(&mut buf).ok()?;
        if n == 0 {
            return None;
        }
        let head = &buf[..n];
        if head.windows(4).any(|w| w == b"\r\n\r\n") || n == buf.len() || clock::now() >= deadline {
            return Some(String::from_utf8_lossy(head).into_owned());
        }
        thread::sleep(Duration::from_millis(1));
    }
}

fn is_upgrade(head: &str) -> bool {
    head.lines().any(|l| {
        let l = l.to_ascii_lowercase();
        l.starts_with("upgrade:") && l.contains("websocket")
    })
}

fn handle_stream(stream: TcpStream, ctx: Arc<Context>) {
    let Some(head) = peek_head(&stream) else { return };
    if is_upgrade(&head) {
        bridge(stream, &ctx);
    } else {
        serve_http(stream, &head, ctx.opts.console_dir.as_deref());
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") | Some("map") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        Some("wasm") => "application/wasm",
        _ => "application/octet-stream",
    }
}

/// Resolves a request path inside `root`, refusing anything that escapes it.
pub fn static_path(root: &Path, request_path: &str) -> Option<PathBuf> {
    let path = request_path.split(['?', '#']).next().unwrap_or("/");
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let mut full = root.join(rel);
    if path.ends_with('/') || rel.as_os_str().is_empty() {
        full = full.join("index.html");
    }
    Some(full)
}

fn serve_http(mut stream: TcpStream, head: &str, console_dir: Option<&Path>) {
    // consume the request head
    let mut sink = vec![0u8; head.len()];
    let _ = stream.read_exact(&mut sink);
    let target = head.lines().next().and_then(|l| {
        let mut parts = l.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("GET"), Some(p)) | (Some("HEAD"), Some(p)) => Some(p.to_string()),
            _ => None,
        }
    });
    let reply = |stream: &mut TcpStream, status: &str, ctype: &str, body: &[u8]| {
        let headers = format!(
            "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            body.len()
        );
        let _ = stream.write_all(headers.as_bytes());
        if !head.starts_with("HEAD") {
            let _ = stream.write_all(body);
        }
    };
    let Some(target) = target else {
        reply(&mut stream, "405 Method Not Allowed", "text/plain", b"only GET is served\n");
        return;
    };
    let Some(root) = console_dir else {
        reply(&mut stream, "404 Not Found", "text/plain", b"console serving is off; start with --serve-console\n");
        return;
    };
    if !root.join("index.html").is_file() {
        reply(&mut stream, "404 Not Found", "text/plain", b"console is not built\n");
        return;
    }
    match static_path(root, &target).and_then(|p| fs::read(&p).ok().map(|b| (p, b))) {
        Some((p, body)) => reply(&mut stream, "200 OK", content_type(&p), &body),
        None => reply(&mut stream, "404 Not Found", "text/plain", b"not found\n"),
    }
}

struct Subscription {
    topic: String,
    proxy: ClientProxy,
    last_ts: Timestamp,
    down: Downsampler<TimedSample>,
    sent: u64,
}

struct Conn<'a> {
    ws: WebSocket<TcpStream>,
    ctx: &'a Context,
    out_seq: u64,
    in_seq: Option<u64>,
    subs: Vec<Subscription>,
    proxies: BTreeMap<String, ClientProxy>,
    closing: Option<Timestamp>,
}

enum Outcome {
    Continue,
    Close(u16, String),
}

fn bridge(stream: TcpStream, ctx: &Context) {
    let _ = stream.set_nodelay(true);
    let config = WebSocketConfig::default().max_write_buffer_size(MAX_WRITE_BUFFER);
    let Ok(ws) = tungstenite::accept_with_config(stream, Some(config)) else { return };
    let _ = ws.get_ref().set_read_timeout(Some(READ_SLICE));
    let _ = ws.get_ref().set_write_timeout(Some(WRITE_TIMEOUT));
    ctx.connections.fetch_add(1, Ordering::AcqRel);
    let mut conn = Conn { ws, ctx, out_seq: 0, in_seq: None, subs: Vec::new(), proxies: BTreeMap::new(), closing: None };
    conn.run();
}

impl Conn<'_> {
    fn run(&mut self) {
        let stats_period = rio_core::time::period_ns(self.ctx.opts.stats_rate_hz);
        let mut next_stats = clock::now();
        loop {
            if self.ctx.stop.load(Ordering::Acquire) && self.closing.is_none() {
                self.close(close::GOING_AWAY, "gateway shutting down");
            }
            match self.ws.read() {
                Ok(Message::Text(t)) if self.closing.is_none() => {
                    if let Outcome::Close(code, reason) = self.on_text(t.as_str()) {
                        self.close(code, &reason);
                    }
                }
                Ok(Message::Binary(_)) if self.closing.is_none() => {
                    self.send_error("", None, "binary frames are not supported");
                    self.close(close::UNSUPPORTED, "binary frames are not supported");
                }
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(_) => return,
            }
            if let Some(since) = self.closing {
                if clock::now().since(since) > clock::duration_ns(CLOSE_GRACE) {
                    return;
                }
                continue;
            }
            let now = clock::now();
            self.pump_state(now);
            if now >= next_stats {
                let body = self.stats_body();
                self.send(MessageType::Stats, "", body);
                next_stats = now + stats_period;
            }
            let _ = self.ws.flush();
        }
    }

    fn next_seq(&mut self) -> u64 {
        self.out_seq += 1;
        self.out_seq
    }

    fn send(&mut self, kind: MessageType, topic: &str, body: Json) {
        let seq = self.next_seq();
        let text = BridgeMessage::new(kind, topic, seq, body).to_text();
        // a stalled reader only fills this connection's buffer; once it is
        // full the message is dropped
        let _ = self.ws.write(Message::text(text));
    }

    fn send_error(&mut self, topic: &str, ack: Option<u64>, message: &str) {
        let mut body = json!({ "message": message });
        if let Some(a) = ack {
            body["ack"] = json!(a);
        }
        self.send(MessageType::Error, topic, body);
    }

    fn close(&mut self, code: u16, reason: &str) {
        self.closing = Some(clock::now());
        let frame = CloseFrame { code: CloseCode::from(code), reason: reason.to_string().into() };
        let _ = self.ws.close(Some(frame));
        let _ = self.ws.flush();
    }

    fn on_text(&mut self, text: &str) -> Outcome {
        let msg = match BridgeMessage::parse(text) {
            Ok(m) => m,
            Err(e) => {
                self.send_error("", None, &e.to_string());
                return Outcome::Close(close::PROTOCOL, "malformed message".into());
            }
        };
        if self.in_seq.is_some_and(|last| msg.seq <= last) {
            let m = format!("seq {} does not increase", msg.seq);
            self.send_error(&msg.topic, Some(msg.seq), &m);
            return Outcome::Close(close::PROTOCOL, m);
        }
        self.in_seq = Some(msg.seq);
        if !msg.kind.from_client() {
            let m = format!("clients may not send {:?} messages", msg.kind);
            self.send_error(&msg.topic, Some(msg.seq), &m);
            return Outcome::Close(close::PROTOCOL, m);
        }
        match msg.kind {
            MessageType::Hello => {
                let body = self.hello_body();
                self.send(MessageType::Hello, "", body);
            }
            MessageType::Subscribe => self.subscribe(&msg),
            MessageType::Command => match self.command(&msg) {
                Ok(()) => self.send(MessageType::Command, &msg.topic, json!({ "ack": msg.seq })),
                Err(e) => self.send_error(&msg.topic, Some(msg.seq), &e),
            },
            MessageType::RecordCtl => match self.record_ctl(&msg) {
                Ok(on) => self.send(MessageType::RecordCtl, &msg.topic, json!({ "ack": msg.seq, "recording": on })),
                Err(e) => self.send_error(&msg.topic, Some(msg.seq), &e),
            },
            _ => unreachable!("server-only types are rejected above"),
        }
        Outcome::Continue
    }

    fn hello_body(&self) -> Json {
        json!({
            "protocol": PROTOCOL_VERSION,
            "station": self.ctx.station,
            "embodiment": self.ctx.embodiment,
            "topics": self.ctx.topics,
            "recording": self.ctx.recording.load(Ordering::Acquire),
            "recording_available": self.ctx.opts.record.is_some(),
        })
    }

    fn subscribe(&mut self, msg: &BridgeMessage) {
        let Some(info) = self.ctx.topic_role(&msg.topic) else {
            let m = format!("unknown topic `{}`", msg.topic);
            self.send_error(&msg.topic, Some(msg.seq), &m);
            return;
        };
        if self.subs.iter().any(|s| s.topic == msg.topic) {
            self.send(MessageType::Subscribe, &msg.topic, json!({ "ack": msg.seq }));
            return;
        }
        let rate = msg
            .body
            .get("rate_hz")
            .and_then(Json::as_f64)
            .filter(|r| *r > 0.0)
            .unwrap_or(self.ctx.opts.state_rate_hz)
            .min(self.ctx.opts.state_rate_hz)
            .min(MAX_STATE_RATE_HZ);
        let proxy = match self.ctx.connectors[&info.role].connect() {
            Ok(p) => p,
            Err(e) => {
                self.send_error(&msg.topic, Some(msg.seq), &e.to_string());
                return;
            }
        };
        let topic = info.name.clone();
        self.subs.push(Subscription { topic: topic.clone(), proxy, last_ts: Timestamp(0), down: Downsampler::new(rate), sent: 0 });
        self.send(MessageType::Subscribe, &topic, json!({ "ack": msg.seq, "rate_hz": rate }));
    }

    fn pump_state(&mut self, now: Timestamp) {
        let mut out = Vec::new();
        for s in &mut self.subs {
            if let Ok(sample) = s.proxy.latest() {
                if sample.ts > s.last_ts {
                    s.last_ts = sample.ts;
                    s.down.offer(sample);
                }
            }
            if let Some(sample) = s.down.poll(now) {
                s.sent += 1;
                out.push((s.topic.clone(), json!({ "ts": sample.ts.0, "values": payload_to_json(&sample.payload) })));
            }
        }
        for (topic, body) in out {
            self.send(MessageType::State, &topic, body);
        }
    }

    fn stats_body(&self) -> Json {
        let nodes: Vec<Json> = self
            .ctx
            .nodes
            .iter()
            .map(|(name, s)| {
                json!({
                    "name": name,
                    "ticks": s.ticks.load(Ordering::Acquire),
                    "requests": s.requests.load(Ordering::Acquire),
                    "achieved_rate_hz": s.achieved_rate_hz(),
                })
            })
            .collect();
        let topics: Map<String, Json> = self.subs.iter().map(|s| (s.topic.clone(), json!(s.sent))).collect();
        json!({
            "uptime_s": clock::now().since(self.ctx.started) as f64 * 1e-9,
            "recording": self.ctx.recording.load(Ordering::Acquire),
            "nodes": nodes,
            "topics": topics,
            "summary": self.ctx.summary.lock().unwrap().clone(),
        })
    }

    fn command(&mut self, msg: &BridgeMessage) -> Result<(), String> {
        let cmd = parse_command(&msg.body)?;
        match &self.ctx.opts.sink {
            CommandSink::Teleop(tx) => tx.send(cmd).map_err(|_| "teleop loop has stopped".to_string()),
            CommandSink::Direct => self.direct(cmd),
        }
    }

    fn direct(&mut self, cmd: TeleopCommand) -> Result<(), String> {
        let (role, method, args) = match cmd {
            TeleopCommand::EeDelta { arm, delta } => {
                let role = arm.or_else(|| self.ctx.first_role(ComponentKind::Arm)).ok_or("station has no arm")?;
                (role, "set_ee_delta", payload([("delta", Value::f64s(vec![delta.x, delta.y, delta.theta]))]))
            }
            TeleopCommand::Gripper { role, width } => {
                let role = role.or_else(|| self.ctx.first_role(ComponentKind::Gripper)).ok_or("station has no gripper")?;
                (role, "set_width", payload([("width", Value::f64(width))]))
            }
            TeleopCommand::Stop => return Ok(()),
        };
        if self.ctx.kinds.get(&role).is_none() {
            return Err(format!("unknown role `{role}`"));
        }
        if !self.proxies.contains_key(&role) {
            let p = self.ctx.connectors[&role].clone().with_timeout(DIRECT_CALL_TIMEOUT).connect().map_err(|e| e.to_string())?;
            self.proxies.insert(role.clone(), p);
        }
        let proxy = self.proxies.get_mut(&role).expect("inserted above");
        proxy.call(method, &args).map(|_| ()).map_err(|e| e.to_string())
    }

    fn record_ctl(&mut self, msg: &BridgeMessage) -> Result<bool, String> {
        let Some(tx) = &self.ctx.opts.record else {
            return Err("recording is not enabled on this gateway".into());
        };
        let ctl = match msg.body.get("action").and_then(Json::as_str) {
            Some("start") => RecordControl::Start {
                instruction: msg.body.get("instruction").and_then(Json::as_str).map(str::to_string),
            },
            Some("stop") => RecordControl::Stop,
            _ => return Err("record_ctl needs action `start` or `stop`".into()),
        };
        let on = matches!(ctl, RecordControl::Start { .. });
        tx.send(ctl).map_err(|_| "recorder has stopped".to_string())?;
        Ok(on)
    }
}

/// Maps a command body to a teleop command.
///
/// Accepted bodies: `{"ee_delta": [dx, dy, dtheta], "arm"?: role}`,
/// `{"gripper": width, "role"?: role}` and `{"stop": true}`. A stop is a
/// zero end-effector delta.
pub fn parse_command(body: &Json) -> Result<TeleopCommand, String> {
    let role = |key: &str| body.get(key).and_then(Json::as_str).map(str::to_string);
    if let Some(d) = body.get("ee_delta") {
        let v: Vec<f64> = d
            .as_array()
            .ok_or("ee_delta must be an array")?
            .iter()
            .map(|x| x.as_f64().ok_or("ee_delta entries must be numbers"))
            .collect::<Result<_, _>>()?;
        if !(2..=3).contains(&v.len()) || v.iter().any(|x| !x.is_finite()) {
            return Err("ee_delta needs 2 or 3 finite numbers".into());
        }
        let delta = Pose2D::new(v[0], v[1], v.get(2).copied().unwrap_or(0.0));
        return Ok(TeleopCommand::EeDelta { arm: role("arm"), delta });
    }
    if let Some(w) = body.get("gripper") {
        let width = w.as_f64().filter(|w| w.is_finite() && *w >= 0.0).ok_or("gripper width must be a non-negative number")?;
        return Ok(TeleopCommand::Gripper { role: role("role"), width });
    }
    if body.get("stop").and_then(Json::as_bool) == Some(true) {
        return Ok(TeleopCommand::EeDelta { arm: role("arm"), delta: Pose2D::new(0.0, 0.0, 0.0) });
    }
    Err("command needs `ee_delta`, `gripper` or `stop`".into())
}

#[derive(Clone, Debug)]
pub struct SessionOptions {
    pub gateway: GatewayOptions,
    pub teleop: TeleopOptions,
    /// Episodes go here; recording is refused when unset.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SessionReport {
    pub teleop: TeleopReport,
    pub episodes: Vec<EpisodeSummary>,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Teleop(#[from] TeleopRunError),
}

/// Teleoperation driven from the bridge, with record start/stop.
///
/// Runs until `opts.teleop.duration` elapses or a stop arrives on `stop`.
/// `ready` receives the bound address once the gateway is listening.
pub fn run_session(
    station: &mut RunningStation,
    opts: SessionOptions,
    stop: Option<Receiver<()>>,
    ready: impl FnOnce(&Gateway),
) -> Result<SessionReport, SessionError> {
    let (cmd_tx, cmd_rx) = unbounded();
    let (rec_tx, rec_rx) = unbounded();
    let mut gw_opts = opts.gateway.clone();
    gw_opts.sink = CommandSink::Teleop(cmd_tx.clone());
    gw_opts.record = opts.out_dir.as_ref().map(|_| rec_tx);
    let gateway = Gateway::serve(station, gw_opts)?;
    ready(&gateway);

    let forward = stop.map(|rx| {
        let tx = cmd_tx.clone();
        thread::spawn(move || {
            if rx.recv().is_ok() {
                let _ = tx.send(TeleopCommand::Stop);
            }
        })
    });
    drop(cmd_tx);

    let meta = EpisodeMeta::for_env(station.env_ref(), &opts.teleop.instruction);
    let mut writer: Option<EpisodeWriter> = None;
    let mut episodes = Vec::new();
    let out_dir = opts.out_dir.clone();
    let result = run_teleop(station, &opts.teleop, TeleopSource::Commands(cmd_rx), |step| {
        for ctl in rec_rx.try_iter() {
            match ctl {
                RecordControl::Start { instruction } if writer.is_none() => {
                    let dir = out_dir.as_ref().ok_or("recording is not enabled")?;
                    let mut m = meta.clone();
                    if let Some(i) = instruction {
                        m.instruction = i;
                    }
                    let path = next_episode_path(dir).map_err(|e| e.to_string())?;
                    writer = Some(EpisodeWriter::create(path, m).map_err(|e| e.to_string())?);
                    gateway.set_recording(true);
                }
                RecordControl::Stop => {
                    if let Some(w) = writer.take() {
                        episodes.push(w.finalize().map_err(|e| e.to_string())?);
                    }
                    gateway.set_recording(false);
                }
                RecordControl::Start { .. } => {}
            }
        }
        if let Some(w) = writer.as_mut() {
            w.record_step(step).map_err(|e| e.to_string())?;
        }
        Ok(())
    });
    if let Some(w) = writer.take() {
        if w.steps() > 0 {
            if let Ok(s) = w.finalize() {
                episodes.push(s);
            }
        }
    }
    gateway.set_recording(false);
    gateway.shutdown();
    drop(forward);
    Ok(SessionReport { teleop: result?, episodes })
}
