//! Transport backends behind one set of endpoint traits.
//!
//! * `inproc`: heap regions shared between threads of one process.
//! * `shm`: the same ring buffers and request channels in files under
//!   `/dev/shm/rio-{namespace}/`, shared between processes.
//! * `tcp`: a broker thread bound to `host:port`; endpoints connect to it
//!   over loopback or the network.

mod conformance;
mod ports;
mod region;
mod tcp;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rio_core::{
    ApiSchema, CodecError, CommandRequest, Payload, QueueError, RingError, SchemaDescriptor, TimedSample, Timestamp,
};
use serde::{Deserialize, Serialize};

pub use conformance::{conformance_suite, ConformanceReport, PropertyResult};
pub use region::shm_dir;

/// Environment variable overriding the shared-memory namespace.
pub const SHM_NAMESPACE_ENV: &str = "RIO_SHM_NAMESPACE";

#[derive(Debug, thiserror::Error)]
pub enum MiddlewareError {
    #[error("address in use: {0}")]
    AddressInUse(String),
    #[error("shared-memory namespace `{namespace}` is held by live process {pid}")]
    ShmNamespaceCollision { namespace: String, pid: i32 },
    #[error("no sample published yet")]
    Empty,
    #[error("peer disconnected")]
    Disconnected,
    #[error("timed out after {0} ms")]
    Timeout(u64),
    #[error("remote error: {0}")]
    RemoteError(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("request queue full")]
    QueueFull,
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend closed")]
    Closed,
    #[error(transparent)]
    Ring(RingError),
    #[error(transparent)]
    Queue(QueueError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<RingError> for MiddlewareError {
    fn from(e: RingError) -> Self {
        match e {
            RingError::Empty => MiddlewareError::Empty,
            RingError::SchemaHashMismatch => MiddlewareError::SchemaMismatch("ring schema hash differs".into()),
            other => MiddlewareError::Ring(other),
        }
    }
}

impl From<QueueError> for MiddlewareError {
    fn from(e: QueueError) -> Self {
        match e {
            QueueError::QueueFull => MiddlewareError::QueueFull,
            QueueError::UnknownMethod(m) => MiddlewareError::UnknownMethod(m),
            QueueError::ApiHashMismatch => MiddlewareError::SchemaMismatch("api hash differs".into()),
            other => MiddlewareError::Queue(other),
        }
    }
}

/// Which transport to use and how to reach it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendKind {
    Inproc,
    Shm {
        #[serde(default = "default_namespace")]
        namespace: String,
    },
    Tcp {
        #[serde(default = "default_host")]
        host: String,
        #[serde(default)]
        port: u16,
    },
}

fn default_namespace() -> String {
    "rio".into()
}

fn default_host() -> String {
    "127.0.0.1".into()
}

impl BackendKind {
    pub fn name(&self) -> &'static str {
        match self {
            BackendKind::Inproc => "inproc",
            BackendKind::Shm { .. } => "shm",
            BackendKind::Tcp { .. } => "tcp",
        }
    }

    /// Default configuration for a backend name. Shared memory picks up
    /// `RIO_SHM_NAMESPACE`; tcp binds an ephemeral loopback port.
    pub fn parse(name: &str) -> Result<Self, MiddlewareError> {
        match name {
            "inproc" => Ok(BackendKind::Inproc),
            "shm" => Ok(BackendKind::Shm { namespace: default_namespace() }),
            "tcp" => Ok(BackendKind::Tcp { host: default_host(), port: 0 }),
            other => Err(MiddlewareError::InvalidConfig(format!("unknown backend `{other}`"))),
        }
    }

    /// The namespace actually used, after the environment override.
    fn effective_namespace(namespace: &str) -> String {
        match std::env::var(SHM_NAMESPACE_ENV) {
            Ok(ns) if !ns.is_empty() => ns,
            _ => namespace.to_string(),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendKind::Inproc => write!(f, "inproc"),
            BackendKind::Shm { namespace } => write!(f, "shm:{namespace}"),
            BackendKind::Tcp { host, port } => write!(f, "tcp:{host}:{port}"),
        }
    }
}

/// Lifecycle of the producing side of a topic.
pub use rio_core::ring::WriterState;

pub trait PublisherPort: Send {
    fn topic(&self) -> &str;
    fn schema(&self) -> &SchemaDescriptor;
    fn publish(&mut self, sample: &TimedSample) -> Result<(), MiddlewareError>;
    /// Marks the topic's writer as exited. Idempotent.
    fn close(&mut self);
}

pub trait SubscriberPort: Send {
    fn topic(&self) -> &str;
    fn schema(&self) -> &SchemaDescriptor;
    fn latest(&mut self) -> Result<TimedSample, MiddlewareError>;
    fn last_k(&mut self, k: usize) -> Result<Vec<TimedSample>, MiddlewareError>;
    fn nearest(&mut self, t: Timestamp) -> Result<TimedSample, MiddlewareError>;
}

pub trait ReplierPort: Send {
    fn topic(&self) -> &str;
    fn api(&self) -> &ApiSchema;
    /// Every pending request in arrival order.
    fn drain(&mut self) -> Result<Vec<CommandRequest>, MiddlewareError>;
    fn reply(&mut self, id: u64, method: &str, result: Result<Payload, String>) -> Result<(), MiddlewareError>;
    /// Waits a little after a `drain` that returned nothing.
    fn idle(&mut self, backoff: &mut crate::clock::Backoff) {
        backoff.wait();
    }
    /// Marks the replier as exited; pending and future calls see
    /// `Disconnected`. Idempotent.
    fn close(&mut self);
}

pub trait RequesterPort: Send {
    fn topic(&self) -> &str;
    fn api(&self) -> &ApiSchema;
    /// Enqueues a request without waiting and returns its id.
    fn send(&mut self, method: &str, args: &Payload) -> Result<u64, MiddlewareError>;
    /// Waits for the reply to a request made with [`RequesterPort::send`].
    fn wait_reply(&mut self, id: u64, method: &str, timeout: Duration) -> Result<Payload, MiddlewareError>;

    fn call(&mut self, method: &str, args: &Payload, timeout: Duration) -> Result<Payload, MiddlewareError> {
        let id = self.send_until(method, args, timeout)?;
        self.wait_reply(id, method, timeout)
    }

    /// Like `send`, but retries while the queue is full, up to `timeout`.
    fn send_until(&mut self, method: &str, args: &Payload, timeout: Duration) -> Result<u64, MiddlewareError> {
        let deadline = crate::clock::now() + crate::clock::duration_ns(timeout);
        let mut backoff = crate::clock::Backoff::new();
        loop {
            match self.send(method, args) {
                Err(MiddlewareError::QueueFull) if crate::clock::now() < deadline => backoff.wait(),
                Err(MiddlewareError::QueueFull) => return Err(MiddlewareError::Timeout(timeout.as_millis() as u64)),
                other => return other,
            }
        }
    }
}

pub(crate) trait Transport: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn publisher(&self, topic: &str, schema: &SchemaDescriptor, capacity: usize)
        -> Result<Box<dyn PublisherPort>, MiddlewareError>;
    fn subscriber(&self, topic: &str, schema: &SchemaDescriptor) -> Result<Box<dyn SubscriberPort>, MiddlewareError>;
    fn replier(&self, topic: &str, api: &ApiSchema, capacity: usize) -> Result<Box<dyn ReplierPort>, MiddlewareError>;
    fn requester(&self, topic: &str, api: &ApiSchema) -> Result<Box<dyn RequesterPort>, MiddlewareError>;
    fn close(&self);
}

/// Shared handle to an open backend. Cloning is cheap; endpoints minted
/// from any clone talk to each other.
#[derive(Clone)]
pub struct BackendHandle {
    inner: Arc<dyn Transport>,
}

impl fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BackendHandle({})", self.inner.kind())
    }
}

impl BackendHandle {
    /// The resolved configuration (effective namespace, bound port).
    pub fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    pub fn publisher(
        &self,
        topic: &str,
        schema: &SchemaDescriptor,
        capacity: usize,
    ) -> Result<Box<dyn PublisherPort>, MiddlewareError> {
        self.inner.publisher(topic, schema, capacity)
    }

    pub fn subscriber(&self, topic: &str, schema: &SchemaDescriptor) -> Result<Box<dyn SubscriberPort>, MiddlewareError> {
        self.inner.subscriber(topic, schema)
    }

    pub fn replier(&self, topic: &str, api: &ApiSchema, capacity: usize) -> Result<Box<dyn ReplierPort>, MiddlewareError> {
        self.inner.replier(topic, api, capacity)
    }

    pub fn requester(&self, topic: &str, api: &ApiSchema) -> Result<Box<dyn RequesterPort>, MiddlewareError> {
        self.inner.requester(topic, api)
    }

    /// Releases the backend: unlinks shared memory and stops the broker.
    /// Idempotent.
    pub fn close(&self) {
        self.inner.close()
    }
}

/// Opens a backend as its owner. Shared memory takes the namespace lock and
/// tcp binds the broker.
pub fn open_backend(kind: &BackendKind) -> Result<BackendHandle, MiddlewareError> {
    let inner: Arc<dyn Transport> = match kind {
        BackendKind::Inproc => Arc::new(region::RegionTransport::inproc()),
        BackendKind::Shm { namespace } => {
            Arc::new(region::RegionTransport::shm_owner(&BackendKind::effective_namespace(namespace))?)
        }
        BackendKind::Tcp { host, port } => Arc::new(tcp::TcpTransport::bind(host, *port)?),
    };
    Ok(BackendHandle { inner })
}

/// Joins a backend opened by another process: shared memory without taking
/// the lock, tcp by connecting to the running broker.
pub fn attach_backend(kind: &BackendKind) -> Result<BackendHandle, MiddlewareError> {
    let inner: Arc<dyn Transport> = match kind {
        BackendKind::Inproc => {
            return Err(MiddlewareError::InvalidConfig("inproc backends cannot be attached".into()))
        }
        BackendKind::Shm { namespace } => {
            Arc::new(region::RegionTransport::shm_attach(&BackendKind::effective_namespace(namespace))?)
        }
        BackendKind::Tcp { host, port } => Arc::new(tcp::TcpTransport::connect(host, *port)?),
    };
    Ok(BackendHandle { inner })
}
