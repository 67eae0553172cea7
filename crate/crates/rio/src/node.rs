//! Node lifecycle: a server loop publishing state and answering requests,
//! paired with a client proxy built from the same spec.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rio_core::rpc::DEFAULT_QUEUE_CAPACITY;
use rio_core::schema::infer_schema;
use rio_core::{ApiMethod, ApiSchema, Payload, SchemaDescriptor, TimedSample, Timestamp};

use crate::clock::{self, Backoff, Event};
use crate::middleware::{BackendHandle, MiddlewareError, PublisherPort, ReplierPort, RequesterPort, SubscriberPort};

/// Which loop a node runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Pub,
    Req,
    PubReq,
}

impl Pattern {
    pub fn publishes(self) -> bool {
        matches!(self, Pattern::Pub | Pattern::PubReq)
    }

    pub fn serves(self) -> bool {
        matches!(self, Pattern::Req | Pattern::PubReq)
    }
}

/// One API method, described by example request and reply payloads.
/// An empty example means the method takes (or returns) no fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec {
    pub name: String,
    pub example_request: Payload,
    pub example_reply: Payload,
}

impl MethodSpec {
    pub fn new(name: &str, example_request: Payload, example_reply: Payload) -> Self {
        MethodSpec { name: name.into(), example_request, example_reply }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub name: String,
    pub rate_hz: f64,
    pub example_data: Payload,
    pub api: Vec<MethodSpec>,
    pub pattern: Pattern,
    /// Runs the complementary pattern in a second loop: requests for a `Pub`
    /// node, publishing for a `Req` node.
    pub worker_loop: bool,
    pub capacity: usize,
}

impl NodeSpec {
    pub fn new(name: &str, pattern: Pattern, rate_hz: f64, example_data: Payload) -> Self {
        NodeSpec {
            name: name.into(),
            rate_hz,
            example_data,
            api: Vec::new(),
            pattern,
            worker_loop: false,
            capacity: rio_core::ring::DEFAULT_CAPACITY,
        }
    }

    pub fn with_method(mut self, m: MethodSpec) -> Self {
        self.api.push(m);
        self
    }

    pub fn with_worker_loop(mut self) -> Self {
        self.worker_loop = true;
        self
    }

    pub fn state_topic(&self) -> String {
        format!("{}/state", self.name)
    }

    pub fn request_topic(&self) -> String {
        format!("{}/req", self.name)
    }

    fn publishes(&self) -> bool {
        self.pattern.publishes() || (self.worker_loop && self.pattern == Pattern::Req)
    }

    fn serves(&self) -> bool {
        self.pattern.serves() || (self.worker_loop && self.pattern == Pattern::Pub)
    }

    /// Infers the state schema and API schema from the examples.
    pub fn schemas(&self) -> Result<(Option<SchemaDescriptor>, ApiSchema), NodeError> {
        let bad = |m: String| NodeError::SchemaInference(format!("{}: {m}", self.name));
        if self.name.is_empty() || self.name.contains('/') {
            return Err(NodeError::InvalidSpec(format!("bad node name `{}`", self.name)));
        }
        if self.publishes() && !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(NodeError::InvalidSpec(format!("{}: publishing needs rate_hz > 0", self.name)));
        }
        let state = if self.example_data.is_empty() {
            if self.publishes() {
                return Err(bad("publishing node without example_data".into()));
            }
            None
        } else {
            Some(infer_schema(&self.example_data).map_err(|e| bad(e.to_string()))?)
        };
        let mut methods = Vec::with_capacity(self.api.len());
        for m in &self.api {
            let infer = |p: &Payload| {
                if p.is_empty() {
                    Ok(SchemaDescriptor::empty())
                } else {
                    infer_schema(p).map_err(|e| bad(format!("method `{}`: {e}", m.name)))
                }
            };
            methods.push(ApiMethod {
                name: m.name.clone(),
                request: infer(&m.example_request)?,
                reply: infer(&m.example_reply)?,
            });
        }
        let api = ApiSchema::new(methods).map_err(|e| bad(e.to_string()))?;
        Ok((state, api))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("schema inference failed: {0}")]
    SchemaInference(String),
    #[error("invalid node spec: {0}")]
    InvalidSpec(String),
    #[error("nodes not ready in time: {}", .0.join(", "))]
    ReadyTimeout(Vec<String>),
    #[error("node `{name}` failed: {message}")]
    Hook { name: String, message: String },
    #[error(transparent)]
    Backend(#[from] MiddlewareError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Error returned by a node hook.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HandlerError {
    /// The request is refused; the caller sees `RemoteError` and the node
    /// keeps running.
    #[error("{0}")]
    Rejected(String),
    /// The node cannot continue. It exits and clients see `Disconnected`.
    #[error("{0}")]
    Fatal(String),
}

impl From<MiddlewareError> for HandlerError {
    fn from(e: MiddlewareError) -> Self {
        HandlerError::Fatal(e.to_string())
    }
}

/// User logic hosted by a node.
pub trait NodeLogic: Send + 'static {
    /// Runs once before the node is ready.
    fn setup(&mut self, _ctx: &mut NodeContext) -> Result<(), HandlerError> {
        Ok(())
    }

    /// Called every publish tick.
    fn publish(&mut self, _ctx: &mut NodeContext) -> Result<(), HandlerError> {
        Ok(())
    }

    /// Called once per request, in arrival order.
    fn handle(&mut self, _ctx: &mut NodeContext, method: &str, _args: &Payload) -> Result<Payload, HandlerError> {
        Err(HandlerError::Rejected(format!("method `{method}` not implemented")))
    }

    fn teardown(&mut self) {}
}

struct PubSlot {
    port: Box<dyn PublisherPort>,
    last: Option<Timestamp>,
}

/// What a hook sees of its node.
pub struct NodeContext {
    name: String,
    publisher: Option<Arc<Mutex<PubSlot>>>,
    tick: u64,
    dt: f64,
}

impl NodeContext {
    /// A context with no state topic, for calling hooks outside a node.
    pub fn detached(name: &str, dt: f64) -> Self {
        NodeContext { name: name.into(), publisher: None, tick: 0, dt }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Publish ticks completed so far.
    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Seconds per publish tick.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn now(&self) -> Timestamp {
        clock::now()
    }

    /// Publishes on the node's state topic, stamped with the current time.
    pub fn publish(&mut self, payload: Payload) -> Result<Timestamp, HandlerError> {
        let slot = self.publisher.as_ref().ok_or_else(|| HandlerError::Fatal("node has no state topic".into()))?;
        let mut slot = slot.lock().unwrap();
        let mut ts = clock::now();
        if let Some(last) = slot.last {
            if ts <= last {
                ts = Timestamp(last.0 + 1);
            }
        }
        slot.port.publish(&TimedSample::new(ts, payload))?;
        slot.last = Some(ts);
        Ok(ts)
    }
}

/// Counters a running node keeps about itself.
#[derive(Debug, Default)]
pub struct NodeStats {
    pub ticks: AtomicU64,
    pub requests: AtomicU64,
    /// Time spent inside hooks.
    pub busy_ns: AtomicU64,
    pub started_ns: AtomicU64,
}

impl NodeStats {
    /// Achieved publish rate since the loop started.
    pub fn achieved_rate_hz(&self) -> f64 {
        let start = self.started_ns.load(Ordering::Acquire);
        if start == 0 {
            return 0.0;
        }
        let secs = clock::now().since(Timestamp(start)) as f64 * 1e-9;
        if secs <= 0.0 {
            0.0
        } else {
            self.ticks.load(Ordering::Acquire) as f64 / secs
        }
    }
}

/// Lifecycle of a launched node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeState {
    Created,
    Ready,
    Exited,
}

/// A launched server.
pub struct NodeHandle {
    name: String,
    ready: Arc<Event>,
    exit: Arc<Event>,
    stop: Arc<AtomicBool>,
    error: Arc<Mutex<Option<String>>>,
    stats: Arc<NodeStats>,
    thread: Option<JoinHandle<()>>,
}

impl NodeHandle {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ready_event(&self) -> &Event {
        &self.ready
    }

    pub fn exit_event(&self) -> &Event {
        &self.exit
    }

    pub fn stats(&self) -> &Arc<NodeStats> {
        &self.stats
    }

    pub fn state(&self) -> NodeState {
        if self.exit.is_set() {
            NodeState::Exited
        } else if self.ready.is_set() {
            NodeState::Ready
        } else {
            NodeState::Created
        }
    }

    /// The hook error that stopped the node, if any.
    pub fn error(&self) -> Option<String> {
        self.error.lock().unwrap().clone()
    }

    /// Signals exit and joins the loops. Idempotent.
    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Waits until every node is ready.
pub fn await_all_ready(handles: &[&NodeHandle], timeout: Duration) -> Result<(), NodeError> {
    let deadline = clock::now() + clock::duration_ns(timeout);
    let mut stragglers = Vec::new();
    for h in handles {
        let left = deadline.since(clock::now());
        if !h.ready.wait_timeout(Duration::from_nanos(left)) {
            stragglers.push(h.name.clone());
        }
    }
    if stragglers.is_empty() {
        Ok(())
    } else {
        Err(NodeError::ReadyTimeout(stragglers))
    }
}

pub fn shutdown_all(handles: &mut [NodeHandle]) {
    for h in handles.iter() {
        h.stop.store(true, Ordering::Release);
    }
    for h in handles.iter_mut() {
        h.shutdown();
    }
}

/// Launches the server side of a spec.
#[derive(Clone)]
pub struct ServerLauncher {
    spec: NodeSpec,
    state: Option<SchemaDescriptor>,
    api: ApiSchema,
    backend: BackendHandle,
}

/// Connects client proxies to a spec's server.
#[derive(Clone)]
pub struct ClientConnector {
    name: String,
    state: Option<SchemaDescriptor>,
    api: ApiSchema,
    backend: BackendHandle,
    timeout: Duration,
}

/// Builds the matched server launcher and client connector for `spec`.
pub fn make_pair(spec: NodeSpec, backend: &BackendHandle) -> Result<(ServerLauncher, ClientConnector), NodeError> {
    let (state, api) = spec.schemas()?;
    let connector = ClientConnector {
        name: spec.name.clone(),
        state: state.clone(),
        api: api.clone(),
        backend: backend.clone(),
        timeout: Duration::from_secs(2),
    };
    Ok((ServerLauncher { spec, state, api, backend: backend.clone() }, connector))
}

impl ServerLauncher {
    pub fn spec(&self) -> &NodeSpec {
        &self.spec
    }

    /// Opens the node's endpoints and starts its loop.
    pub fn launch<L: NodeLogic>(&self, logic: L) -> Result<NodeHandle, NodeError> {
        let spec = self.spec.clone();
        let publisher = match &self.state {
            Some(schema) => Some(Arc::new(Mutex::new(PubSlot {
                port: self.backend.publisher(&spec.state_topic(), schema, spec.capacity)?,
                last: None,
            }))),
            None => None,
        };
        let replier = if spec.serves() {
            Some(self.backend.replier(&spec.request_topic(), &self.api, DEFAULT_QUEUE_CAPACITY)?)
        } else {
            None
        };
        let ready = Arc::new(Event::new());
        let exit = Arc::new(Event::new());
        let stop = Arc::new(AtomicBool::new(false));
        let error = Arc::new(Mutex::new(None));
        let stats = Arc::new(NodeStats::default());
        let shared = Shared {
            spec: spec.clone(),
            logic: Arc::new(Mutex::new(logic)),
            ready: ready.clone(),
            stop: stop.clone(),
            error: error.clone(),
            stats: stats.clone(),
            publisher,
        };
        let exit2 = exit.clone();
        let thread = thread::Builder::new()
            .name(format!("node-{}", spec.name))
            .spawn(move || {
                run_server(shared, replier);
                exit2.set();
            })?;
        Ok(NodeHandle { name: spec.name, ready, exit, stop, error, stats, thread: Some(thread) })
    }
}

struct Shared<L> {
    spec: NodeSpec,
    logic: Arc<Mutex<L>>,
    ready: Arc<Event>,
    stop: Arc<AtomicBool>,
    error: Arc<Mutex<Option<String>>>,
    stats: Arc<NodeStats>,
    publisher: Option<Arc<Mutex<PubSlot>>>,
}

impl<L> Clone for Shared<L> {
    fn clone(&self) -> Self {
        Shared {
            spec: self.spec.clone(),
            logic: self.logic.clone(),
            ready: self.ready.clone(),
            stop: self.stop.clone(),
            error: self.error.clone(),
            stats: self.stats.clone(),
            publisher: self.publisher.clone(),
        }
    }
}

impl<L: NodeLogic> Shared<L> {
    fn ctx(&self) -> NodeContext {
        NodeContext {
            name: self.spec.name.clone(),
            publisher: self.publisher.clone(),
            tick: 0,
            dt: if self.spec.rate_hz > 0.0 { 1.0 / self.spec.rate_hz } else { 0.0 },
        }
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    fn fail(&self, message: String) {
        let mut e = self.error.lock().unwrap();
        if e.is_none() {
            *e = Some(message);
        }
        self.stop.store(true, Ordering::Release);
    }

    fn timed<T>(&self, f: impl FnOnce() -> T) -> T {
        let t0 = clock::now();
        let out = f();
        self.stats.busy_ns.fetch_add(clock::now().since(t0), Ordering::Relaxed);
        out
    }

    fn publish_tick(&self, ctx: &mut NodeContext) -> bool {
        let r = self.timed(|| self.logic.lock().unwrap().publish(ctx));
        ctx.tick += 1;
        self.stats.ticks.fetch_add(1, Ordering::Release);
        match r {
            Ok(()) => true,
            Err(e) => {
                self.fail(e.to_string());
                false
            }
        }
    }

    /// Drains and handles pending requests. Returns (alive, handled).
    fn serve_once(&self, ctx: &mut NodeContext, rep: &mut dyn ReplierPort) -> (bool, usize) {
        let reqs = match rep.drain() {
            Ok(r) => r,
            Err(e) => {
                self.fail(e.to_string());
                return (false, 0);
            }
        };
        let n = reqs.len();
        for r in reqs {
            let result = self.timed(|| self.logic.lock().unwrap().handle(ctx, &r.method, &r.args));
            self.stats.requests.fetch_add(1, Ordering::Relaxed);
            match result {
                Ok(p) => {
                    if let Err(e) = rep.reply(r.id, &r.method, Ok(p)) {
                        // a reply that does not fit the schema is a logic bug
                        let _ = rep.reply(r.id, &r.method, Err(e.to_string()));
                    }
                }
                Err(HandlerError::Rejected(m)) => {
                    let _ = rep.reply(r.id, &r.method, Err(m));
                }
                Err(HandlerError::Fatal(m)) => {
                    let _ = rep.reply(r.id, &r.method, Err(m.clone()));
                    self.fail(m);
                    return (false, n);
                }
            }
        }
        (true, n)
    }
}

fn publish_loop<L: NodeLogic>(s: &Shared<L>, mut rep: Option<&mut Box<dyn ReplierPort>>) {
    let mut ctx = s.ctx();
    let period = rio_core::time::period_ns(s.spec.rate_hz);
    let mut next = clock::now();
    while !s.stopped() {
        if let Some(rep) = rep.as_deref_mut() {
            if !s.serve_once(&mut ctx, rep.as_mut()).0 {
                return;
            }
        }
        if !s.publish_tick(&mut ctx) {
            return;
        }
        next = next + period;
        let now = clock::now();
        if now > next + period {
            // fell behind by more than a tick: skip instead of bursting
            next = now;
        }
        clock::sleep_until(next);
    }
}

fn serve_loop<L: NodeLogic>(s: &Shared<L>, rep: &mut Box<dyn ReplierPort>) {
    let mut ctx = s.ctx();
    let mut backoff = Backoff::new();
    while !s.stopped() {
        let (alive, n) = s.serve_once(&mut ctx, rep.as_mut());
        if !alive {
            return;
        }
        if n == 0 {
            rep.idle(&mut backoff);
        } else {
            backoff.reset();
        }
    }
}

fn run_server<L: NodeLogic>(s: Shared<L>, mut replier: Option<Box<dyn ReplierPort>>) {
    let mut ctx = s.ctx();
    let setup = s.logic.lock().unwrap().setup(&mut ctx);
    if let Err(e) = setup {
        s.fail(e.to_string());
    } else {
        s.stats.started_ns.store(clock::now().0, Ordering::Release);
        s.ready.set();
        let spec = &s.spec;
        match (spec.pattern, spec.worker_loop) {
            (Pattern::PubReq, _) => publish_loop(&s, replier.as_mut()),
            (Pattern::Pub, false) => publish_loop(&s, None),
            (Pattern::Req, false) => serve_loop(&s, replier.as_mut().expect("replier")),
            (Pattern::Pub, true) => {
                let mut rep = replier.take().expect("replier");
                let w = s.clone();
                let worker = thread::spawn(move || {
                    serve_loop(&w, &mut rep);
                    rep
                });
                publish_loop(&s, None);
                s.stop.store(true, Ordering::Release);
                replier = worker.join().ok();
            }
            (Pattern::Req, true) => {
                let w = s.clone();
                let worker = thread::spawn(move || publish_loop(&w, None));
                serve_loop(&s, replier.as_mut().expect("replier"));
                s.stop.store(true, Ordering::Release);
                let _ = worker.join();
            }
        }
    }
    if let Some(mut r) = replier {
        r.close();
    }
    if let Some(p) = &s.publisher {
        p.lock().unwrap().port.close();
    }
    s.logic.lock().unwrap().teardown();
}

impl ClientConnector {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_schema(&self) -> Option<&SchemaDescriptor> {
        self.state.as_ref()
    }

    pub fn api(&self) -> &ApiSchema {
        &self.api
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn connect(&self) -> Result<ClientProxy, NodeError> {
        let sub = match &self.state {
            Some(s) => Some(self.backend.subscriber(&format!("{}/state", self.name), s)?),
            None => None,
        };
        let req = if self.api.methods().is_empty() {
            None
        } else {
            Some(self.backend.requester(&format!("{}/req", self.name), &self.api)?)
        };
        Ok(ClientProxy { name: self.name.clone(), api: self.api.clone(), sub, req, timeout: self.timeout })
    }
}

/// Client side of a node: reads its state and calls its API.
pub struct ClientProxy {
    name: String,
    api: ApiSchema,
    sub: Option<Box<dyn SubscriberPort>>,
    req: Option<Box<dyn RequesterPort>>,
    timeout: Duration,
}

impl ClientProxy {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn api(&self) -> &ApiSchema {
        &self.api
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn sub(&mut self) -> Result<&mut Box<dyn SubscriberPort>, MiddlewareError> {
        let name = &self.name;
        self.sub.as_mut().ok_or_else(|| MiddlewareError::InvalidConfig(format!("node `{name}` has no state topic")))
    }

    fn req(&mut self) -> Result<&mut Box<dyn RequesterPort>, MiddlewareError> {
        let name = &self.name;
        self.req.as_mut().ok_or_else(|| MiddlewareError::InvalidConfig(format!("node `{name}` has no api")))
    }

    pub fn state_schema(&self) -> Option<&SchemaDescriptor> {
        self.sub.as_ref().map(|s| s.schema())
    }

    /// Most recent state sample. Never blocks.
    pub fn latest(&mut self) -> Result<TimedSample, MiddlewareError> {
        self.sub()?.latest()
    }

    pub fn last_k(&mut self, k: usize) -> Result<Vec<TimedSample>, MiddlewareError> {
        self.sub()?.last_k(k)
    }

    pub fn nearest(&mut self, t: Timestamp) -> Result<TimedSample, MiddlewareError> {
        self.sub()?.nearest(t)
    }

    /// Waits for a first sample.
    pub fn wait_latest(&mut self, timeout: Duration) -> Result<TimedSample, MiddlewareError> {
        let deadline = clock::now() + clock::duration_ns(timeout);
        let mut backoff = Backoff::with_max_sleep(Duration::from_millis(1));
        loop {
            match self.latest() {
                Err(MiddlewareError::Empty) if clock::now() < deadline => backoff.wait(),
                Err(MiddlewareError::Empty) => return Err(MiddlewareError::Timeout(timeout.as_millis() as u64)),
                other => return other,
            }
        }
    }

    /// Waits for a sample stamped after `after`.
    pub fn wait_newer(&mut self, after: Timestamp, timeout: Duration) -> Result<TimedSample, MiddlewareError> {
        let deadline = clock::now() + clock::duration_ns(timeout);
        let mut backoff = Backoff::with_max_sleep(Duration::from_millis(1));
        loop {
            match self.latest() {
                Ok(s) if s.ts > after => return Ok(s),
                Ok(_) | Err(MiddlewareError::Empty) if clock::now() < deadline => backoff.wait(),
                Ok(_) | Err(MiddlewareError::Empty) => {
                    return Err(MiddlewareError::Timeout(timeout.as_millis() as u64))
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Calls an API method and waits for its reply.
    pub fn call(&mut self, method: &str, args: &Payload) -> Result<Payload, MiddlewareError> {
        let timeout = self.timeout;
        self.req()?.call(method, args, timeout)
    }

    pub fn call_timeout(&mut self, method: &str, args: &Payload, timeout: Duration) -> Result<Payload, MiddlewareError> {
        self.req()?.call(method, args, timeout)
    }

    /// Sends a request without waiting for its reply.
    pub fn send(&mut self, method: &str, args: &Payload) -> Result<u64, MiddlewareError> {
        let timeout = self.timeout;
        self.req()?.send_until(method, args, timeout)
    }

    pub fn wait_reply(&mut self, id: u64, method: &str, timeout: Duration) -> Result<Payload, MiddlewareError> {
        self.req()?.wait_reply(id, method, timeout)
    }
}
