//! Timestamped overwrite-oldest ring buffer living in a word region.
//!
//! One writer, many readers. Each slot carries a sequence stamp: while the
//! writer fills write index `n` the slot stamp is `2n + 1`, once complete it
//! is `2n + 2`. A reader that wants index `j` accepts the slot only if the
//! stamp reads `2j + 2` both before and after copying the data, so a torn or
//! lapped slot is never returned. Readers never block the writer.
//!
//! Region layout (u64 words):
//!
//! ```text
//! 0  magic            4  write index (completed puts)
//! 1  schema hash      5  last timestamp
//! 2  capacity         6  writer state
//! 3  payload bytes    7  reserved
//! 8.. slots: [stamp, ts, payload words...] * capacity
//! ```

use alloc::vec::Vec;
use core::ops::Deref;
use core::sync::atomic::{fence, AtomicU64, Ordering};

use crate::codec::{self, CodecError};
use crate::schema::{Payload, SchemaDescriptor, TimedSample};
use crate::time::Timestamp;
use crate::words::{load_bytes, store_bytes, words_for_bytes};

pub const RING_MAGIC: u64 = u64::from_le_bytes(*b"RIORING1");
const HEADER_WORDS: usize = 8;
const H_MAGIC: usize = 0;
const H_HASH: usize = 1;
const H_CAPACITY: usize = 2;
const H_PAYLOAD: usize = 3;
const H_WRITE_INDEX: usize = 4;
const H_LAST_TS: usize = 5;
const H_WRITER_STATE: usize = 6;

/// Reads give up after this many lapped attempts and report `Contended`.
const MAX_READ_RETRIES: usize = 64;

/// Default slot count when a node does not configure one.
pub const DEFAULT_CAPACITY: usize = 128;

/// Lifecycle of the (single) writer, stored in the region header so readers
/// in other threads or processes can tell a silent writer from a dead one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriterState {
    Absent = 0,
    Live = 1,
    Exited = 2,
}

impl WriterState {
    fn from_word(w: u64) -> Self {
        match w {
            1 => WriterState::Live,
            2 => WriterState::Exited,
            _ => WriterState::Absent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RingError {
    #[error("ring buffer is empty")]
    Empty,
    #[error("requested {requested} samples but only {available} are retained")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("no sample at or before {0}")]
    NoSampleBefore(Timestamp),
    #[error("timestamp {got} is not after last stored {last}")]
    NonMonotoneTimestamp { last: Timestamp, got: Timestamp },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("region holds a ring for a different schema")]
    SchemaHashMismatch,
    #[error("region not initialized")]
    NotInitialized,
    #[error("region of {got} words, need {need}")]
    RegionTooSmall { need: usize, got: usize },
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("reader lapped by writer repeatedly")]
    Contended,
}

pub struct RingBuffer<R> {
    region: R,
    schema: SchemaDescriptor,
    capacity: usize,
    payload_bytes: usize,
    slot_words: usize,
    scratch: Vec<u8>,
}

impl<R: Deref<Target = [AtomicU64]>> RingBuffer<R> {
    /// Words needed to hold a ring of `capacity` slots for `schema`.
    pub fn region_words(schema: &SchemaDescriptor, capacity: usize) -> usize {
        HEADER_WORDS + capacity * (2 + words_for_bytes(schema.payload_size()))
    }

    /// Returns true once a writer has finished initializing the region.
    pub fn is_initialized(region: &[AtomicU64]) -> bool {
        region.len() > H_MAGIC && region[H_MAGIC].load(Ordering::Acquire) == RING_MAGIC
    }

    /// Initializes a zeroed region. The magic word is published last.
    pub fn create(region: R, schema: &SchemaDescriptor, capacity: usize) -> Result<Self, RingError> {
        if capacity == 0 {
            return Err(RingError::ZeroCapacity);
        }
        let need = Self::region_words(schema, capacity);
        if region.len() < need {
            return Err(RingError::RegionTooSmall { need, got: region.len() });
        }
        region[H_HASH].store(schema.hash64(), Ordering::Relaxed);
        region[H_CAPACITY].store(capacity as u64, Ordering::Relaxed);
        region[H_PAYLOAD].store(schema.payload_size() as u64, Ordering::Relaxed);
        region[H_WRITE_INDEX].store(0, Ordering::Relaxed);
        region[H_LAST_TS].store(0, Ordering::Relaxed);
        region[H_WRITER_STATE].store(WriterState::Absent as u64, Ordering::Relaxed);
        for w in &region[HEADER_WORDS..need] {
            w.store(0, Ordering::Relaxed);
        }
        region[H_MAGIC].store(RING_MAGIC, Ordering::Release);
        Ok(Self::from_parts(region, schema, capacity))
    }

    /// Attaches to a region initialized by [`RingBuffer::create`].
    pub fn attach(region: R, schema: &SchemaDescriptor) -> Result<Self, RingError> {
        if !Self::is_initialized(&region) {
            return Err(RingError::NotInitialized);
        }
        if region[H_HASH].load(Ordering::Relaxed) != schema.hash64() {
            return Err(RingError::SchemaHashMismatch);
        }
        let capacity = region[H_CAPACITY].load(Ordering::Relaxed) as usize;
        let need = Self::region_words(schema, capacity);
        if region.len() < need {
            return Err(RingError::RegionTooSmall { need, got: region.len() });
        }
        Ok(Self::from_parts(region, schema, capacity))
    }

    fn from_parts(region: R, schema: &SchemaDescriptor, capacity: usize) -> Self {
        let payload_bytes = schema.payload_size();
        RingBuffer {
            region,
            schema: schema.clone(),
            capacity,
            payload_bytes,
            slot_words: 2 + words_for_bytes(payload_bytes),
            scratch: alloc::vec![0u8; payload_bytes],
        }
    }

    pub fn schema(&self) -> &SchemaDescriptor {
        &self.schema
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of completed puts since creation.
    pub fn write_index(&self) -> u64 {
        self.region[H_WRITE_INDEX].load(Ordering::Acquire)
    }

    /// Number of samples currently retained.
    pub fn len(&self) -> usize {
        (self.write_index() as usize).min(self.capacity)
    }

    pub fn is_empty(&self) -> bool {
        self.write_index() == 0
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        if self.is_empty() {
            None
        } else {
            Some(Timestamp(self.region[H_LAST_TS].load(Ordering::Acquire)))
        }
    }

    pub fn writer_state(&self) -> WriterState {
        WriterState::from_word(self.region[H_WRITER_STATE].load(Ordering::Acquire))
    }

    pub fn set_writer_state(&self, state: WriterState) {
        self.region[H_WRITER_STATE].store(state as u64, Ordering::Release);
    }

    fn slot(&self, index: u64) -> &[AtomicU64] {
        let base = HEADER_WORDS + (index % self.capacity as u64) as usize * self.slot_words;
        &self.region[base..base + self.slot_words]
    }

    /// Publishes a sample. The caller must be the only writer of this region.
    pub fn put(&mut self, sample: &TimedSample) -> Result<(), RingError> {
        self.put_payload(sample.ts, &sample.payload)
    }

    pub fn put_payload(&mut self, ts: Timestamp, payload: &Payload) -> Result<(), RingError> {
        self.check_ts(ts)?;
        let mut scratch = core::mem::take(&mut self.scratch);
        let r = codec::encode_payload_into(&self.schema, payload, &mut scratch);
        if r.is_ok() {
            self.write_slot(ts, &scratch);
        }
        self.scratch = scratch;
        r.map_err(RingError::from)
    }

    /// Publishes an already packed payload.
    pub fn put_bytes(&mut self, ts: Timestamp, bytes: &[u8]) -> Result<(), RingError> {
        if bytes.len() != self.payload_bytes {
            return Err(RingError::Codec(CodecError::Length {
                expected: self.payload_bytes,
                got: bytes.len(),
            }));
        }
        self.check_ts(ts)?;
        self.write_slot(ts, bytes);
        Ok(())
    }

    fn check_ts(&self, ts: Timestamp) -> Result<(), RingError> {
        if let Some(last) = self.last_timestamp() {
            if ts <= last {
                return Err(RingError::NonMonotoneTimestamp { last, got: ts });
            }
        }
        Ok(())
    }

    fn write_slot(&self, ts: Timestamp, bytes: &[u8]) {
        let n = self.region[H_WRITE_INDEX].load(Ordering::Relaxed);
        let slot = self.slot(n);
        slot[0].store(2 * n + 1, Ordering::Relaxed);
        fence(Ordering::Release);
        slot[1].store(ts.0, Ordering::Relaxed);
        store_bytes(&slot[2..], bytes);
        slot[0].store(2 * n + 2, Ordering::Release);
        self.region[H_LAST_TS].store(ts.0, Ordering::Release);
        self.region[H_WRITE_INDEX].store(n + 1, Ordering::Release);
    }

    /// Copies write index `index` into `out`; `None` if the slot no longer
    /// (or not yet) holds that index.
    fn read_index(&self, index: u64, out: &mut [u8]) -> Option<Timestamp> {
        let slot = self.slot(index);
        let want = 2 * index + 2;
        if slot[0].load(Ordering::Acquire) != want {
            return None;
        }
        let ts = slot[1].load(Ordering::Relaxed);
        load_bytes(&slot[2..], out);
        fence(Ordering::Acquire);
        if slot[0].load(Ordering::Relaxed) != want {
            return None;
        }
        Some(Timestamp(ts))
    }

    fn read_ts(&self, index: u64) -> Option<Timestamp> {
        self.read_index(index, &mut [])
    }

    fn decode(&self, ts: Timestamp, bytes: &[u8]) -> Result<TimedSample, RingError> {
        Ok(TimedSample {
            ts,
            payload: codec::decode_payload(&self.schema, bytes)?,
        })
    }

    /// Copies the newest packed payload into `out` (resized as needed).
    pub fn latest_bytes(&self, out: &mut Vec<u8>) -> Result<Timestamp, RingError> {
        out.resize(self.payload_bytes, 0);
        for _ in 0..MAX_READ_RETRIES {
            let n = self.write_index();
            if n == 0 {
                return Err(RingError::Empty);
            }
            if let Some(ts) = self.read_index(n - 1, out) {
                return Ok(ts);
            }
        }
        Err(RingError::Contended)
    }

    /// The sample with the highest timestamp.
    pub fn latest(&self) -> Result<TimedSample, RingError> {
        let mut buf = Vec::new();
        let ts = self.latest_bytes(&mut buf)?;
        self.decode(ts, &buf)
    }

    /// The `k` most recent samples in ascending timestamp order.
    pub fn last_k(&self, k: usize) -> Result<Vec<TimedSample>, RingError> {
        let mut raw: Vec<(Timestamp, Vec<u8>)> = Vec::with_capacity(k);
        'retry: for _ in 0..MAX_READ_RETRIES {
            raw.clear();
            let n = self.write_index();
            if n == 0 {
                return Err(RingError::Empty);
            }
            let available = (n as usize).min(self.capacity);
            if k > available {
                return Err(RingError::NotEnoughSamples { requested: k, available });
            }
            for j in n - k as u64..n {
                let mut buf = alloc::vec![0u8; self.payload_bytes];
                match self.read_index(j, &mut buf) {
                    Some(ts) => raw.push((ts, buf)),
                    None => continue 'retry,
                }
            }
            return raw.iter().map(|(ts, b)| self.decode(*ts, b)).collect();
        }
        Err(RingError::Contended)
    }

    /// The sample with the greatest timestamp at or before `t`.
    pub fn nearest(&self, t: Timestamp) -> Result<TimedSample, RingError> {
        'retry: for _ in 0..MAX_READ_RETRIES {
            let n = self.write_index();
            if n == 0 {
                return Err(RingError::Empty);
            }
            let lo = n.saturating_sub(self.capacity as u64);
            let Some(oldest) = self.read_ts(lo) else { continue 'retry };
            if oldest > t {
                return Err(RingError::NoSampleBefore(t));
            }
            // invariant: ts(lo) <= t; search the last index with ts <= t
            let (mut lo, mut hi) = (lo, n);
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                let Some(ts) = self.read_ts(mid) else { continue 'retry };
                if ts <= t {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let mut buf = alloc::vec![0u8; self.payload_bytes];
            let Some(ts) = self.read_index(lo, &mut buf) else { continue 'retry };
            return self.decode(ts, &buf);
        }
        Err(RingError::Contended)
    }
}

/// Allocates a zeroed heap region of `words` words.
pub fn heap_region(words: usize) -> alloc::sync::Arc<[AtomicU64]> {
    (0..words).map(|_| AtomicU64::new(0)).collect()
}
