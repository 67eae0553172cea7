//! Request queue and reply mailboxes living in one word region.
//!
//! Requests go through a bounded many-producer FIFO (Vyukov-style cells with
//! per-cell sequence numbers). The producer's successful claim of the
//! enqueue position is the admission sequence, so drain order equals
//! admission order even with concurrent producers. Request ids come from a
//! shared counter in the header and are unique across every requester
//! attached to the region, in any process.
//!
//! Replies are written by the single consumer into mailbox `id % mailboxes`
//! using the same odd/even stamp protocol as the ring buffer slots.
//!
//! Region layout (u64 words):
//!
//! ```text
//! 0 magic   1 api hash   2 capacity   3 cell words   4 enqueue pos
//! 5 dequeue pos   6 replier state   7 next id   8 mailbox count
//! 9 mailbox words   10..16 reserved
//! cells:     [seq, id, ts, method index, args words...] * capacity
//! mailboxes: [stamp, status, byte length, data words...] * mailbox count
//! ```

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Deref;
use core::sync::atomic::{fence, AtomicU64, Ordering};

use crate::codec::{self, CodecError};
use crate::ring::WriterState;
use crate::schema::{Fnv64, Payload, SchemaDescriptor};
use crate::time::Timestamp;
use crate::words::{load_bytes, store_bytes, words_for_bytes};

pub const RPC_MAGIC: u64 = u64::from_le_bytes(*b"RIOREQQ1");
const HEADER_WORDS: usize = 16;
const H_MAGIC: usize = 0;
const H_HASH: usize = 1;
const H_CAPACITY: usize = 2;
const H_CELL_WORDS: usize = 3;
const H_ENQ: usize = 4;
const H_DEQ: usize = 5;
const H_REPLIER: usize = 6;
const H_NEXT_ID: usize = 7;
const H_MAILBOXES: usize = 8;
const H_MAILBOX_WORDS: usize = 9;
const CELL_META: usize = 4;
const MAILBOX_META: usize = 3;

/// Error messages carried in replies are truncated to this many bytes.
pub const MAX_ERROR_BYTES: usize = 256;
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;
pub const DEFAULT_MAILBOXES: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiMethod {
    pub name: String,
    pub request: SchemaDescriptor,
    pub reply: SchemaDescriptor,
}

/// The request/reply schemas of every method a node exposes.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ApiSchema {
    methods: Vec<ApiMethod>,
}

impl ApiSchema {
    pub fn new(methods: Vec<ApiMethod>) -> Result<Self, QueueError> {
        for (i, m) in methods.iter().enumerate() {
            if m.name.is_empty() {
                return Err(QueueError::EmptyMethod);
            }
            if methods[..i].iter().any(|o| o.name == m.name) {
                return Err(QueueError::DuplicateMethod(m.name.clone()));
            }
        }
        Ok(ApiSchema { methods })
    }

    pub fn methods(&self) -> &[ApiMethod] {
        &self.methods
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.methods.iter().position(|m| m.name == name)
    }

    pub fn method(&self, name: &str) -> Option<&ApiMethod> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn max_request_bytes(&self) -> usize {
        self.methods.iter().map(|m| m.request.payload_size()).max().unwrap_or(0)
    }

    pub fn max_reply_bytes(&self) -> usize {
        self.methods.iter().map(|m| m.reply.payload_size()).max().unwrap_or(0)
    }

    pub fn hash64(&self) -> u64 {
        let mut h = Fnv64::new();
        for m in &self.methods {
            h.write(m.name.as_bytes());
            h.write(&m.request.hash64().to_le_bytes());
            h.write(&m.reply.hash64().to_le_bytes());
        }
        h.finish()
    }
}

/// A timestamped API invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandRequest {
    pub id: u64,
    pub ts: Timestamp,
    pub method: String,
    pub args: Payload,
}

/// Reply to a [`CommandRequest`]; `result` is the handler's payload or its
/// error message.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandReply {
    pub id: u64,
    pub result: Result<Payload, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum QueueError {
    #[error("request queue full")]
    QueueFull,
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("method name is empty")]
    EmptyMethod,
    #[error("duplicate method `{0}`")]
    DuplicateMethod(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("region holds a channel for a different api")]
    ApiHashMismatch,
    #[error("region not initialized")]
    NotInitialized,
    #[error("region of {got} words, need {need}")]
    RegionTooSmall { need: usize, got: usize },
    #[error("capacity must be positive")]
    ZeroCapacity,
}

pub struct RequestChannel<R> {
    region: R,
    api: ApiSchema,
    capacity: usize,
    cell_words: usize,
    mailboxes: usize,
    mailbox_words: usize,
    scratch: Vec<u8>,
}

fn cell_words_for(api: &ApiSchema) -> usize {
    CELL_META + words_for_bytes(api.max_request_bytes())
}

fn mailbox_words_for(api: &ApiSchema) -> usize {
    MAILBOX_META + words_for_bytes(api.max_reply_bytes().max(MAX_ERROR_BYTES))
}

fn truncate_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

impl<R: Deref<Target = [AtomicU64]>> RequestChannel<R> {
    pub fn region_words(api: &ApiSchema, capacity: usize, mailboxes: usize) -> usize {
        HEADER_WORDS + capacity * cell_words_for(api) + mailboxes * mailbox_words_for(api)
    }

    pub fn is_initialized(region: &[AtomicU64]) -> bool {
        region.len() > H_MAGIC && region[H_MAGIC].load(Ordering::Acquire) == RPC_MAGIC
    }

    /// Initializes a zeroed region; the magic word is published last.
    pub fn create(region: R, api: &ApiSchema, capacity: usize, mailboxes: usize) -> Result<Self, QueueError> {
        if capacity == 0 || mailboxes == 0 {
            return Err(QueueError::ZeroCapacity);
        }
        let need = Self::region_words(api, capacity, mailboxes);
        if region.len() < need {
            return Err(QueueError::RegionTooSmall { need, got: region.len() });
        }
        let cell_words = cell_words_for(api);
        let mailbox_words = mailbox_words_for(api);
        for w in &region[1..need] {
            w.store(0, Ordering::Relaxed);
        }
        region[H_HASH].store(api.hash64(), Ordering::Relaxed);
        region[H_CAPACITY].store(capacity as u64, Ordering::Relaxed);
        region[H_CELL_WORDS].store(cell_words as u64, Ordering::Relaxed);
        region[H_NEXT_ID].store(1, Ordering::Relaxed);
        region[H_MAILBOXES].store(mailboxes as u64, Ordering::Relaxed);
        region[H_MAILBOX_WORDS].store(mailbox_words as u64, Ordering::Relaxed);
        for i in 0..capacity {
            region[HEADER_WORDS + i * cell_words].store(i as u64, Ordering::Relaxed);
        }
        region[H_MAGIC].store(RPC_MAGIC, Ordering::Release);
        Ok(Self::from_parts(region, api, capacity, mailboxes))
    }

    pub fn attach(region: R, api: &ApiSchema) -> Result<Self, QueueError> {
        if !Self::is_initialized(&region) {
            return Err(QueueError::NotInitialized);
        }
        if region[H_HASH].load(Ordering::Relaxed) != api.hash64() {
            return Err(QueueError::ApiHashMismatch);
        }
        let capacity = region[H_CAPACITY].load(Ordering::Relaxed) as usize;
        let mailboxes = region[H_MAILBOXES].load(Ordering::Relaxed) as usize;
        let need = Self::region_words(api, capacity, mailboxes);
        if region.len() < need {
            return Err(QueueError::RegionTooSmall { need, got: region.len() });
        }
        Ok(Self::from_parts(region, api, capacity, mailboxes))
    }

    fn from_parts(region: R, api: &ApiSchema, capacity: usize, mailboxes: usize) -> Self {
        let scratch_len = api.max_request_bytes().max(api.max_reply_bytes()).max(MAX_ERROR_BYTES);
        RequestChannel {
            region,
            api: api.clone(),
            capacity,
            cell_words: cell_words_for(api),
            mailboxes,
            mailbox_words: mailbox_words_for(api),
            scratch: alloc::vec![0u8; scratch_len],
        }
    }

    pub fn region(&self) -> &R {
        &self.region
    }

    pub fn api(&self) -> &ApiSchema {
        &self.api
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn replier_state(&self) -> WriterState {
        match self.region[H_REPLIER].load(Ordering::Acquire) {
            1 => WriterState::Live,
            2 => WriterState::Exited,
            _ => WriterState::Absent,
        }
    }

    pub fn set_replier_state(&self, state: WriterState) {
        self.region[H_REPLIER].store(state as u64, Ordering::Release);
    }

    /// Allocates a request id unique within this region.
    pub fn allocate_id(&self) -> u64 {
        self.region[H_NEXT_ID].fetch_add(1, Ordering::AcqRel)
    }

    /// Requests admitted but not yet drained.
    pub fn pending(&self) -> usize {
        let enq = self.region[H_ENQ].load(Ordering::Acquire);
        let deq = self.region[H_DEQ].load(Ordering::Acquire);
        enq.saturating_sub(deq) as usize
    }

    fn cell(&self, pos: u64) -> &[AtomicU64] {
        let base = HEADER_WORDS + (pos % self.capacity as u64) as usize * self.cell_words;
        &self.region[base..base + self.cell_words]
    }

    fn mailbox(&self, id: u64) -> &[AtomicU64] {
        let base = HEADER_WORDS
            + self.capacity * self.cell_words
            + (id % self.mailboxes as u64) as usize * self.mailbox_words;
        &self.region[base..base + self.mailbox_words]
    }

    /// Admits a request. Returns `QueueFull` when the consumer has fallen
    /// `capacity` requests behind.
    pub fn put(&mut self, req: &CommandRequest) -> Result<(), QueueError> {
        let idx = self
            .api
            .index_of(&req.method)
            .ok_or_else(|| {
                if req.method.is_empty() {
                    QueueError::EmptyMethod
                } else {
                    QueueError::UnknownMethod(req.method.clone())
                }
            })?;
        let schema = &self.api.methods[idx].request;
        let len = schema.payload_size();
        codec::encode_payload_into(schema, &req.args, &mut self.scratch[..len])?;

        let enq = &self.region[H_ENQ];
        let mut pos = enq.load(Ordering::Relaxed);
        loop {
            let cell = self.cell(pos);
            let seq = cell[0].load(Ordering::Acquire);
            let diff = seq as i64 - pos as i64;
            if diff == 0 {
                match enq.compare_exchange_weak(pos, pos + 1, Ordering::Relaxed, Ordering::Relaxed) {
                    Ok(_) => {
                        cell[1].store(req.id, Ordering::Relaxed);
                        cell[2].store(req.ts.0, Ordering::Relaxed);
                        cell[3].store(idx as u64, Ordering::Relaxed);
                        store_bytes(&cell[CELL_META..], &self.scratch[..len]);
                        cell[0].store(pos + 1, Ordering::Release);
                        return Ok(());
                    }
                    Err(actual) => pos = actual,
                }
            } else if diff < 0 {
                return Err(QueueError::QueueFull);
            } else {
                pos = enq.load(Ordering::Relaxed);
            }
        }
    }

    /// Pops the oldest admitted request. Single consumer only.
    pub fn pop(&mut self) -> Result<Option<CommandRequest>, QueueError> {
        let mut scratch = core::mem::take(&mut self.scratch);
        let out = self.pop_with(&mut scratch);
        self.scratch = scratch;
        out
    }

    fn pop_with(&self, scratch: &mut [u8]) -> Result<Option<CommandRequest>, QueueError> {
        let deq = &self.region[H_DEQ];
        let pos = deq.load(Ordering::Relaxed);
        let cell = self.cell(pos);
        let seq = cell[0].load(Ordering::Acquire);
        if seq != pos + 1 {
            return Ok(None);
        }
        let id = cell[1].load(Ordering::Relaxed);
        let ts = Timestamp(cell[2].load(Ordering::Relaxed));
        let idx = cell[3].load(Ordering::Relaxed) as usize;
        let method = self.api.methods.get(idx).cloned();
        let result = match method {
            Some(m) => {
                let len = m.request.payload_size();
                load_bytes(&cell[CELL_META..], &mut scratch[..len]);
                codec::decode_payload(&m.request, &scratch[..len])
                    .map(|args| CommandRequest { id, ts, method: m.name, args })
                    .map_err(QueueError::from)
            }
            None => Err(QueueError::UnknownMethod(idx.to_string())),
        };
        cell[0].store(pos + self.capacity as u64, Ordering::Release);
        deq.store(pos + 1, Ordering::Release);
        result.map(Some)
    }

    /// Removes and returns every pending request in admission order.
    pub fn drain(&mut self) -> Result<Vec<CommandRequest>, QueueError> {
        let mut out = Vec::new();
        while let Some(r) = self.pop()? {
            out.push(r);
        }
        Ok(out)
    }

    /// Writes the reply for `reply.id`. Single replier only.
    pub fn reply(&mut self, method: &str, reply: &CommandReply) -> Result<(), QueueError> {
        let (status, len) = match &reply.result {
            Ok(payload) => {
                let m = self
                    .api
                    .method(method)
                    .ok_or_else(|| QueueError::UnknownMethod(method.into()))?;
                let len = m.reply.payload_size();
                codec::encode_payload_into(&m.reply, payload, &mut self.scratch[..len])?;
                (0u64, len)
            }
            Err(msg) => {
                let msg = truncate_utf8(msg, MAX_ERROR_BYTES);
                self.scratch[..msg.len()].copy_from_slice(msg.as_bytes());
                (1u64, msg.len())
            }
        };
        let id = reply.id;
        let mb = self.mailbox(id);
        mb[0].store(2 * id + 1, Ordering::Relaxed);
        fence(Ordering::Release);
        mb[1].store(status, Ordering::Relaxed);
        mb[2].store(len as u64, Ordering::Relaxed);
        store_bytes(&mb[MAILBOX_META..], &self.scratch[..len]);
        mb[0].store(2 * id + 2, Ordering::Release);
        Ok(())
    }

    /// Returns the reply for `id` if it has been written.
    pub fn poll_reply(&self, id: u64, method: &str) -> Result<Option<CommandReply>, QueueError> {
        let m = self
            .api
            .method(method)
            .ok_or_else(|| QueueError::UnknownMethod(method.into()))?;
        let mb = self.mailbox(id);
        let want = 2 * id + 2;
        if mb[0].load(Ordering::Acquire) != want {
            return Ok(None);
        }
        let status = mb[1].load(Ordering::Relaxed);
        let len = (mb[2].load(Ordering::Relaxed) as usize).min((self.mailbox_words - MAILBOX_META) * 8);
        let mut buf = alloc::vec![0u8; len];
        load_bytes(&mb[MAILBOX_META..], &mut buf);
        fence(Ordering::Acquire);
        if mb[0].load(Ordering::Relaxed) != want {
            return Ok(None);
        }
        let result = if status == 0 {
            Ok(codec::decode_payload(&m.reply, &buf)?)
        } else {
            Err(String::from_utf8_lossy(&buf).into_owned())
        };
        Ok(Some(CommandReply { id, result }))
    }
}
