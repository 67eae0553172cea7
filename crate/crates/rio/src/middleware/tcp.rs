//! TCP backend: a broker thread plus endpoint connections.
//!
//! Every frame is a `u32` little-endian body length followed by the body.
//! The first body byte is the message type; see `docs/wire.md`.

use std::collections::HashMap;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use rio_core::codec::{self, frame_size, SAMPLE_HEADER_BYTES};
use rio_core::ring::{heap_region, WriterState};
use rio_core::{ApiSchema, CommandRequest, Payload, RingBuffer, SchemaDescriptor, TimedSample, Timestamp};

use super::{BackendKind, MiddlewareError, PublisherPort, ReplierPort, RequesterPort, SubscriberPort, Transport};
use crate::clock;

pub(crate) const MAX_FRAME: usize = 64 << 20;

pub(crate) const MSG_HELLO: u8 = 1;
pub(crate) const MSG_WELCOME: u8 = 2;
pub(crate) const MSG_SAMPLE: u8 = 3;
pub(crate) const MSG_REQUEST: u8 = 4;
pub(crate) const MSG_REPLY: u8 = 5;
pub(crate) const MSG_STATE: u8 = 6;
pub(crate) const MSG_ERROR: u8 = 7;
pub(crate) const MSG_BYE: u8 = 8;

pub(crate) const ROLE_PUB: u8 = 1;
pub(crate) const ROLE_SUB: u8 = 2;
pub(crate) const ROLE_SERVE: u8 = 3;
pub(crate) const ROLE_REQ: u8 = 4;

const STATUS_OK: u8 = 0;
const STATUS_REMOTE_ERROR: u8 = 1;
const STATUS_DISCONNECTED: u8 = 2;

/// Subscribers that cannot absorb a sample within this time are dropped.
const SUBSCRIBER_WRITE_TIMEOUT: Duration = Duration::from_millis(200);

fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)
}

fn read_frame(r: &mut impl Read, buf: &mut Vec<u8>) -> io::Result<()> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(io::Error::new(ErrorKind::InvalidData, format!("bad frame length {len}")));
    }
    buf.resize(len, 0);
    r.read_exact(buf)
}

/// Little-endian field reader over a frame body.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(io::Error::new(ErrorKind::InvalidData, "truncated frame"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> io::Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

fn hello(role: u8, topic: &str, hash: u64, clock_ns: u64) -> Vec<u8> {
    let mut b = vec![MSG_HELLO, role];
    b.extend_from_slice(&(topic.len() as u16).to_le_bytes());
    b.extend_from_slice(topic.as_bytes());
    b.extend_from_slice(&hash.to_le_bytes());
    b.extend_from_slice(&clock_ns.to_le_bytes());
    b
}

fn request_body(id: u64, ts: u64, method: u32, args: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(21 + args.len());
    b.push(MSG_REQUEST);
    b.extend_from_slice(&id.to_le_bytes());
    b.extend_from_slice(&ts.to_le_bytes());
    b.extend_from_slice(&method.to_le_bytes());
    b.extend_from_slice(args);
    b
}

fn reply_body(id: u64, status: u8, data: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(10 + data.len());
    b.push(MSG_REPLY);
    b.extend_from_slice(&id.to_le_bytes());
    b.push(status);
    b.extend_from_slice(data);
    b
}

fn error_body(msg: &str) -> Vec<u8> {
    let mut b = vec![MSG_ERROR];
    b.extend_from_slice(msg.as_bytes());
    b
}

fn state_body(state: WriterState) -> Vec<u8> {
    vec![MSG_STATE, state as u8]
}

// ---------------------------------------------------------------- broker

struct Conn {
    stream: Mutex<TcpStream>,
}

impl Conn {
    fn send(&self, body: &[u8]) -> io::Result<()> {
        write_frame(&mut *self.stream.lock().unwrap(), body)
    }

    fn shutdown(&self) {
        let _ = self.stream.lock().unwrap().shutdown(Shutdown::Both);
    }
}

#[derive(Default)]
struct TopicState {
    hash: Option<u64>,
    latest: Option<Vec<u8>>,
    subscribers: Vec<Arc<Conn>>,
    writer: Option<WriterState>,
    replier: Option<Arc<Conn>>,
    replier_exited: bool,
}

#[derive(Default)]
struct BrokerState {
    topics: HashMap<String, TopicState>,
    /// global request id -> (requester, requester's id, topic)
    pending: HashMap<u64, (Arc<Conn>, u64, String)>,
    next_id: u64,
    conns: Vec<Arc<Conn>>,
}

struct Broker {
    addr: SocketAddr,
    state: Arc<Mutex<BrokerState>>,
    stop: Arc<AtomicBool>,
}

impl Broker {
    fn start(listener: TcpListener) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(BrokerState::default()));
        let stop = Arc::new(AtomicBool::new(false));
        let (st, sp) = (state.clone(), stop.clone());
        thread::Builder::new().name("rio-broker".into()).spawn(move || {
            for stream in listener.incoming() {
                if sp.load(Ordering::Acquire) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let st = st.clone();
                let _ = thread::Builder::new().name("rio-broker-conn".into()).spawn(move || serve_conn(stream, st));
            }
        })?;
        Ok(Broker { addr, state, stop })
    }

    fn stop(&self) {
        if self.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        // wake the accept loop
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        let conns = std::mem::take(&mut self.state.lock().unwrap().conns);
        for c in conns {
            c.shutdown();
        }
    }
}

fn serve_conn(stream: TcpStream, state: Arc<Mutex<BrokerState>>) {
    let _ = stream.set_nodelay(true);
    let Ok(write_half) = stream.try_clone() else { return };
    let conn = Arc::new(Conn { stream: Mutex::new(write_half) });
    let mut reader = stream;
    let mut buf = Vec::new();
    if read_frame(&mut reader, &mut buf).is_err() {
        return;
    }
    let parsed = (|| -> io::Result<(u8, String, u64)> {
        let mut c = Cursor::new(&buf);
        if c.u8()? != MSG_HELLO {
            return Err(io::Error::new(ErrorKind::InvalidData, "expected HELLO"));
        }
        let role = c.u8()?;
        let n = c.u16()? as usize;
        let topic = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| io::Error::new(ErrorKind::InvalidData, "topic"))?;
        let hash = c.u64()?;
        let _client_clock = c.u64()?;
        Ok((role, topic, hash))
    })();
    let Ok((role, topic, hash)) = parsed else {
        let _ = conn.send(&error_body("malformed HELLO"));
        return;
    };

    {
        let mut st = state.lock().unwrap();
        st.conns.push(conn.clone());
        let t = st.topics.entry(topic.clone()).or_default();
        match t.hash {
            Some(h) if h != hash => {
                drop(st);
                let _ = conn.send(&error_body(&format!("schema hash {hash:#x} differs from topic hash {h:#x}")));
                return;
            }
            _ => t.hash = Some(hash),
        }
        let mut welcome = vec![MSG_WELCOME];
        welcome.extend_from_slice(&clock::now().0.to_le_bytes());
        if conn.send(&welcome).is_err() {
            return;
        }
        match role {
            ROLE_PUB => t.writer = Some(WriterState::Live),
            ROLE_SUB => {
                let _ = conn.stream.lock().unwrap().set_write_timeout(Some(SUBSCRIBER_WRITE_TIMEOUT));
                if let Some(latest) = &t.latest {
                    let _ = conn.send(latest);
                }
                if t.writer == Some(WriterState::Exited) {
                    let _ = conn.send(&state_body(WriterState::Exited));
                }
                t.subscribers.push(conn.clone());
            }
            ROLE_SERVE => {
                t.replier = Some(conn.clone());
                t.replier_exited = false;
            }
            ROLE_REQ => {}
            _ => {
                drop(st);
                let _ = conn.send(&error_body("unknown role"));
                return;
            }
        }
    }

    loop {
        if read_frame(&mut reader, &mut buf).is_err() {
            break;
        }
        let ok = match (role, buf[0]) {
            (_, MSG_BYE) => break,
            (ROLE_PUB, MSG_SAMPLE) => on_sample(&state, &topic, hash, &buf),
            (ROLE_REQ, MSG_REQUEST) => on_request(&state, &topic, &conn, &buf),
            (ROLE_SERVE, MSG_REPLY) => on_reply(&state, &buf),
            (ROLE_SUB, _) => true,
            _ => false,
        };
        if !ok {
            let _ = conn.send(&error_body("protocol violation"));
            break;
        }
    }

    let mut st = state.lock().unwrap();
    st.conns.retain(|c| !Arc::ptr_eq(c, &conn));
    match role {
        ROLE_PUB => {
            let subs = if let Some(t) = st.topics.get_mut(&topic) {
                t.writer = Some(WriterState::Exited);
                t.subscribers.clone()
            } else {
                Vec::new()
            };
            drop(st);
            for s in subs {
                let _ = s.send(&state_body(WriterState::Exited));
            }
        }
        ROLE_SUB => {
            if let Some(t) = st.topics.get_mut(&topic) {
                t.subscribers.retain(|c| !Arc::ptr_eq(c, &conn));
            }
        }
        ROLE_SERVE => {
            let mine = st.topics.get(&topic).and_then(|t| t.replier.as_ref()).is_some_and(|r| Arc::ptr_eq(r, &conn));
            if mine {
                let t = st.topics.get_mut(&topic).unwrap();
                t.replier = None;
                t.replier_exited = true;
                let orphaned: Vec<u64> =
                    st.pending.iter().filter(|(_, (_, _, tp))| *tp == topic).map(|(g, _)| *g).collect();
                let mut notify = Vec::new();
                for g in orphaned {
                    if let Some((req, cid, _)) = st.pending.remove(&g) {
                        notify.push((req, cid));
                    }
                }
                drop(st);
                for (req, cid) in notify {
                    let _ = req.send(&reply_body(cid, STATUS_DISCONNECTED, b""));
                }
            }
        }
        _ => {}
    }
}

fn on_sample(state: &Mutex<BrokerState>, topic: &str, hash: u64, body: &[u8]) -> bool {
    match codec::peek_header(&body[1..]) {
        Ok((h, _)) if h == hash => {}
        _ => return false,
    }
    let subs = {
        let mut st = state.lock().unwrap();
        let t = st.topics.get_mut(topic).unwrap();
        match &mut t.latest {
            Some(v) => {
                v.clear();
                v.extend_from_slice(body);
            }
            None => t.latest = Some(body.to_vec()),
        }
        t.subscribers.clone()
    };
    let mut dead = Vec::new();
    for s in subs {
        if s.send(body).is_err() {
            dead.push(s);
        }
    }
    if !dead.is_empty() {
        let mut st = state.lock().unwrap();
        if let Some(t) = st.topics.get_mut(topic) {
            t.subscribers.retain(|c| !dead.iter().any(|d| Arc::ptr_eq(c, d)));
        }
        for d in dead {
            d.shutdown();
        }
    }
    true
}

fn on_request(state: &Mutex<BrokerState>, topic: &str, from: &Arc<Conn>, body: &[u8]) -> bool {
    let mut c = Cursor::new(&body[1..]);
    let Ok(client_id) = c.u64() else { return false };
    let mut st = state.lock().unwrap();
    let (replier, exited) = match st.topics.get(topic) {
        Some(t) => (t.replier.clone(), t.replier_exited),
        None => (None, false),
    };
    match replier {
        Some(r) => {
            st.next_id += 1;
            let gid = st.next_id;
            st.pending.insert(gid, (from.clone(), client_id, topic.to_string()));
            drop(st);
            let mut fwd = body.to_vec();
            fwd[1..9].copy_from_slice(&gid.to_le_bytes());
            if r.send(&fwd).is_err() {
                let mut st = state.lock().unwrap();
                st.pending.remove(&gid);
                drop(st);
                let _ = from.send(&reply_body(client_id, STATUS_DISCONNECTED, b""));
            }
        }
        None if exited => {
            drop(st);
            let _ = from.send(&reply_body(client_id, STATUS_DISCONNECTED, b""));
        }
        // no replier yet: dropped, the caller times out
        None => {}
    }
    true
}

fn on_reply(state: &Mutex<BrokerState>, body: &[u8]) -> bool {
    let mut c = Cursor::new(&body[1..]);
    let Ok(gid) = c.u64() else { return false };
    let entry = state.lock().unwrap().pending.remove(&gid);
    if let Some((req, cid, _)) = entry {
        let mut fwd = body.to_vec();
        fwd[1..9].copy_from_slice(&cid.to_le_bytes());
        let _ = req.send(&fwd);
    }
    true
}

// ---------------------------------------------------------------- client side

fn resolve(host: &str, port: u16) -> Result<SocketAddr, MiddlewareError> {
    (host, port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| MiddlewareError::InvalidConfig(format!("cannot resolve {host}:{port}")))
}

/// Connects and completes the HELLO exchange. Returns the stream and the
/// estimated broker clock offset (broker minus local) in nanoseconds.
fn handshake(addr: SocketAddr, role: u8, topic: &str, hash: u64) -> Result<(TcpStream, i64), MiddlewareError> {
    let mut s = TcpStream::connect(addr).map_err(|e| match e.kind() {
        ErrorKind::ConnectionRefused => MiddlewareError::Disconnected,
        _ => e.into(),
    })?;
    s.set_nodelay(true)?;
    let t0 = clock::now().0;
    write_frame(&mut s, &hello(role, topic, hash, t0))?;
    let mut buf = Vec::new();
    read_frame(&mut s, &mut buf)?;
    let t1 = clock::now().0;
    match buf[0] {
        MSG_WELCOME => {
            let broker = Cursor::new(&buf[1..]).u64()?;
            let offset = broker as i64 - ((t0 / 2 + t1 / 2) as i64);
            Ok((s, offset))
        }
        MSG_ERROR => Err(MiddlewareError::SchemaMismatch(String::from_utf8_lossy(&buf[1..]).into_owned())),
        other => Err(MiddlewareError::Protocol(format!("unexpected message {other} during handshake"))),
    }
}

pub(crate) struct TcpTransport {
    kind: BackendKind,
    addr: SocketAddr,
    broker: Option<Broker>,
}

impl TcpTransport {
    pub(crate) fn bind(host: &str, port: u16) -> Result<Self, MiddlewareError> {
        let addr = resolve(host, port)?;
        let listener = TcpListener::bind(addr).map_err(|e| match e.kind() {
            ErrorKind::AddrInUse => MiddlewareError::AddressInUse(addr.to_string()),
            _ => e.into(),
        })?;
        let broker = Broker::start(listener)?;
        let addr = broker.addr;
        Ok(TcpTransport {
            kind: BackendKind::Tcp { host: host.to_string(), port: addr.port() },
            addr,
            broker: Some(broker),
        })
    }

    pub(crate) fn connect(host: &str, port: u16) -> Result<Self, MiddlewareError> {
        let addr = resolve(host, port)?;
        drop(TcpStream::connect(addr).map_err(|_| MiddlewareError::Disconnected)?);
        Ok(TcpTransport { kind: BackendKind::Tcp { host: host.to_string(), port }, addr, broker: None })
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        if let Some(b) = &self.broker {
            b.stop();
        }
    }
}

impl Transport for TcpTransport {
    fn kind(&self) -> BackendKind {
        self.kind.clone()
    }

    fn publisher(
        &self,
        topic: &str,
        schema: &SchemaDescriptor,
        _capacity: usize,
    ) -> Result<Box<dyn PublisherPort>, MiddlewareError> {
        let (stream, _) = handshake(self.addr, ROLE_PUB, topic, schema.hash64())?;
        let mut buf = vec![0u8; 5 + frame_size(schema)];
        buf[..4].copy_from_slice(&((1 + frame_size(schema)) as u32).to_le_bytes());
        buf[4] = MSG_SAMPLE;
        Ok(Box::new(TcpPublisher { topic: topic.into(), schema: schema.clone(), stream, buf, closed: false }))
    }

    fn subscriber(&self, topic: &str, schema: &SchemaDescriptor) -> Result<Box<dyn SubscriberPort>, MiddlewareError> {
        let (stream, _) = handshake(self.addr, ROLE_SUB, topic, schema.hash64())?;
        TcpSubscriber::start(topic, schema, stream).map(|s| Box::new(s) as Box<dyn SubscriberPort>)
    }

    fn replier(&self, topic: &str, api: &ApiSchema, _capacity: usize) -> Result<Box<dyn ReplierPort>, MiddlewareError> {
        let (stream, _) = handshake(self.addr, ROLE_SERVE, topic, api.hash64())?;
        TcpReplier::start(topic, api, stream).map(|r| Box::new(r) as Box<dyn ReplierPort>)
    }

    fn requester(&self, topic: &str, api: &ApiSchema) -> Result<Box<dyn RequesterPort>, MiddlewareError> {
        let (stream, _) = handshake(self.addr, ROLE_REQ, topic, api.hash64())?;
        TcpRequester::start(topic, api, stream).map(|r| Box::new(r) as Box<dyn RequesterPort>)
    }

    fn close(&self) {
        if let Some(b) = &self.broker {
            b.stop();
        }
    }
}

struct TcpPublisher {
    topic: String,
    schema: SchemaDescriptor,
    stream: TcpStream,
    /// length prefix, type byte and a sample frame, reused for every publish
    buf: Vec<u8>,
    closed: bool,
}

impl PublisherPort for TcpPublisher {
    fn topic(&self) -> &str {
        &self.topic
    }

    fn schema(&self) -> &SchemaDescriptor {
        &self.schema
    }

    fn publish(&mut self, sample: &TimedSample) -> Result<(), MiddlewareError> {
        if self.closed {
            return Err(MiddlewareError::Closed);
        }
        codec::encode_sample_into(&self.schema, sample, &mut self.buf[5..])
            .map_err(|e| MiddlewareError::SchemaMismatch(e.to_string()))?;
        self.stream.write_all(&self.buf).map_err(|_| MiddlewareError::Disconnected)
    }

    fn close(&mut self) {
        if !self.closed {
            self.closed = true;
            let _ = write_frame(&mut self.stream, &[MSG_BYE]);
            let _ = self.stream.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TcpPublisher {
    fn drop(&mut self) {
        self.close();
    }
}

struct TcpSubscriber {
    topic: String,
    ring: RingBuffer<Arc<[std::sync::atomic::AtomicU64]>>,
    stream: TcpStream,
}

impl TcpSubscriber {
    fn start(topic: &str, schema: &SchemaDescriptor, stream: TcpStream) -> Result<Self, MiddlewareError> {
        let capacity = rio_core::ring::DEFAULT_CAPACITY;
        let region = heap_region(RingBuffer::<Arc<_>>::region_words(schema, capacity));
        let mut writer = RingBuffer::create(region.clone(), schema, capacity)?;
        let ring = RingBuffer::attach(region, schema)?;
        let mut reader = stream.try_clone()?;
        let payload_bytes = schema.payload_size();
        thread::Builder::new().name(format!("rio-sub-{topic}")).spawn(move || {
            let mut buf = Vec::new();
            while read_frame(&mut reader, &mut buf).is_ok() {
                match buf[0] {
                    MSG_SAMPLE if buf.len() == 1 + SAMPLE_HEADER_BYTES + payload_bytes => {
                        let ts = Timestamp(u64::from_le_bytes(buf[13..21].try_into().unwrap()));
                        // replays of the cached sample are not newer and are skipped
                        if writer.last_timestamp().is_none_or(|last| ts > last) {
                            let _ = writer.put_bytes(ts, &buf[1 + SAMPLE_HEADER_BYTES..]);
                            writer.set_writer_state(WriterState::Live);
                        }
                    }
                    MSG_STATE if buf.len() == 2 && buf[1] == WriterState::Exited as u8 => {
                        writer.set_writer_state(WriterState::Exited);
                    }
                    _ => {}
                }
            }
        })?;
        Ok(TcpSubscriber { topic: topic.into(), ring, stream })
    }

    fn check(&self) -> Result<(), MiddlewareError> {
        match self.ring.writer_state() {
            WriterState::Exited => Err(MiddlewareError::Disconnected),
            _ => Ok(()),
        }
    }
}

impl Drop for TcpSubscriber {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl SubscriberPort for TcpSubscriber {
    fn topic(&self) -> &str {
        &self.topic
    }

    fn schema(&self) -> &SchemaDescriptor {
        self.ring.schema()
    }

    fn latest(&mut self) -> Result<TimedSample, MiddlewareError> {
        self.check()?;
        Ok(self.ring.latest()?)
    }

    fn last_k(&mut self, k: usize) -> Result<Vec<TimedSample>, MiddlewareError> {
        self.check()?;
        Ok(self.ring.last_k(k)?)
    }

    fn nearest(&mut self, t: Timestamp) -> Result<TimedSample, MiddlewareError> {
        self.check()?;
        Ok(self.ring.nearest(t)?)
    }
}

struct TcpReplier {
    topic: String,
    api: ApiSchema,
    stream: TcpStream,
    rx: Receiver<Result<CommandRequest, String>>,
    closed: bool,
}

impl TcpReplier {
    fn start(topic: &str, api: &ApiSchema, stream: TcpStream) -> Result<Self, MiddlewareError> {
        let (tx, rx) = crossbeam_channel::unbounded();
        let mut reader = stream.try_clone()?;
        let api2 = api.clone();
        thread::Builder::new().name(format!("rio-serve-{topic}")).spawn(move || {
            let mut buf = Vec::new();
            while read_frame(&mut reader, &mut buf).is_ok() {
                if buf[0] != MSG_REQUEST {
                    continue;
                }
                let decoded = (|| -> Result<CommandRequest, String> {
                    let mut c = Cursor::new(&buf[1..]);
                    let id = c.u64().map_err(|e| e.to_string())?;
                    let ts = c.u64().map_err(|e| e.to_string())?;
                    let idx = c.u32().map_err(|e| e.to_string())? as usize;
                    let m = api2.methods().get(idx).ok_or_else(|| format!("unknown method index {idx}"))?;
                    let args = codec::decode_payload(&m.request, c.rest()).map_err(|e| e.to_string())?;
                    Ok(CommandRequest { id, ts: Timestamp(ts), method: m.name.clone(), args })
                })();
                if tx.send(decoded).is_err() {
                    break;
                }
            }
        })?;
        Ok(TcpReplier { topic: topic.into(), api: api.clone(), stream, rx, closed: false })
    }
}

impl ReplierPort for TcpReplier {
    fn topic(&self) -> &str {
        &self.topic
    }

    fn api(&self) -> &ApiSchema {
        &self.api
    }

    fn drain(&mut self) -> Result<Vec<CommandRequest>, MiddlewareError> {
        let mut out = Vec::new();
        for r in self.rx.try_iter() {
            out.push(r.map_err(MiddlewareError::Protocol)?);
        }
        Ok(out)
    }

    fn reply(&mut self, id: u64, method: &str, result: Result<Payload, String>) -> Result<(), MiddlewareError> {
        let body = match result {
            Ok(p) => {
                let m = self.api.method(method).ok_or_else(|| MiddlewareError::UnknownMethod(method.into()))?;
                reply_body(id, STATUS_OK, &codec::encode_payload(&m.reply, &p)?)
            }
            Err(msg) => reply_body(id, STATUS_REMOTE_ERROR, msg.as_bytes()),
        };
        write_frame(&mut self.stream, &body).map_err(|_| MiddlewareError::Disconnected)
    }

    fn close(&mut self) {
        if !self.closed {
            self.closed = true;
            let _ = write_frame(&mut self.stream, &[MSG_BYE]);
            let _ = self.stream.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TcpReplier {
    fn drop(&mut self) {
        self.close();
    }
}

struct TcpRequester {
    topic: String,
    api: ApiSchema,
    stream: TcpStream,
    rx: Receiver<(u64, u8, Vec<u8>)>,
    next_id: AtomicU64,
    broker_gone: Arc<AtomicBool>,
}

impl TcpRequester {
    fn start(topic: &str, api: &ApiSchema, stream: TcpStream) -> Result<Self, MiddlewareError> {
        let (tx, rx): (Sender<(u64, u8, Vec<u8>)>, _) = crossbeam_channel::unbounded();
        let mut reader = stream.try_clone()?;
        let gone = Arc::new(AtomicBool::new(false));
        let gone2 = gone.clone();
        thread::Builder::new().name(format!("rio-req-{topic}")).spawn(move || {
            let mut buf = Vec::new();
            while read_frame(&mut reader, &mut buf).is_ok() {
                if buf[0] != MSG_REPLY || buf.len() < 10 {
                    continue;
                }
                let id = u64::from_le_bytes(buf[1..9].try_into().unwrap());
                if tx.send((id, buf[9], buf[10..].to_vec())).is_err() {
                    break;
                }
            }
            gone2.store(true, Ordering::Release);
        })?;
        Ok(TcpRequester { topic: topic.into(), api: api.clone(), stream, rx, next_id: AtomicU64::new(1), broker_gone: gone })
    }
}

impl Drop for TcpRequester {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl RequesterPort for TcpRequester {
    fn topic(&self) -> &str {
        &self.topic
    }

    fn api(&self) -> &ApiSchema {
        &self.api
    }

    fn send(&mut self, method: &str, args: &Payload) -> Result<u64, MiddlewareError> {
        let idx = self.api.index_of(method).ok_or_else(|| MiddlewareError::UnknownMethod(method.into()))?;
        let bytes = codec::encode_payload(&self.api.methods()[idx].request, args)
            .map_err(|e| MiddlewareError::SchemaMismatch(e.to_string()))?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        write_frame(&mut self.stream, &request_body(id, clock::now().0, idx as u32, &bytes))
            .map_err(|_| MiddlewareError::Disconnected)?;
        Ok(id)
    }

    fn wait_reply(&mut self, id: u64, method: &str, timeout: Duration) -> Result<Payload, MiddlewareError> {
        let m = self.api.method(method).ok_or_else(|| MiddlewareError::UnknownMethod(method.into()))?.clone();
        let deadline = clock::now() + clock::duration_ns(timeout);
        loop {
            let left = deadline.since(clock::now());
            match self.rx.recv_timeout(Duration::from_nanos(left)) {
                Ok((rid, status, data)) if rid == id => {
                    return match status {
                        STATUS_OK => Ok(codec::decode_payload(&m.reply, &data)?),
                        STATUS_REMOTE_ERROR => Err(MiddlewareError::RemoteError(String::from_utf8_lossy(&data).into_owned())),
                        _ => Err(MiddlewareError::Disconnected),
                    };
                }
                // replies to earlier fire-and-forget or timed-out requests
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => return Err(MiddlewareError::Timeout(timeout.as_millis() as u64)),
                Err(RecvTimeoutError::Disconnected) => {
                    debug_assert!(self.broker_gone.load(Ordering::Acquire));
                    return Err(MiddlewareError::Disconnected);
                }
            }
        }
    }
}
