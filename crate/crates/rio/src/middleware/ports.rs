//! Endpoints over word regions (in-process and shared-memory backends).

use std::sync::Arc;
use std::time::Duration;

use rio_core::ring::WriterState;
use rio_core::rpc::RequestChannel;
use rio_core::{ApiSchema, CommandReply, CommandRequest, Payload, RingBuffer, RingError, SchemaDescriptor, TimedSample, Timestamp};

use super::region::{Region, RegionStore};
use super::{MiddlewareError, PublisherPort, ReplierPort, RequesterPort, SubscriberPort};
use crate::clock::{self, Backoff};

pub(crate) struct RingPublisher {
    topic: String,
    ring: RingBuffer<Region>,
    closed: bool,
}

impl RingPublisher {
    pub(crate) fn new(topic: &str, ring: RingBuffer<Region>) -> Self {
        ring.set_writer_state(WriterState::Live);
        RingPublisher { topic: topic.into(), ring, closed: false }
    }
}

impl PublisherPort for RingPublisher {
    fn topic(&self) -> &str {
        &self.topic
    }

    fn schema(&self) -> &SchemaDescriptor {
        self.ring.schema()
    }

    fn publish(&mut self, sample: &TimedSample) -> Result<(), MiddlewareError> {
        if self.closed {
            return Err(MiddlewareError::Closed);
        }
        self.ring.put(sample).map_err(|e| match e {
            RingError::Codec(c) => MiddlewareError::SchemaMismatch(c.to_string()),
            other => other.into(),
        })
    }

    fn close(&mut self) {
        if !self.closed {
            self.closed = true;
            self.ring.set_writer_state(WriterState::Exited);
        }
    }
}

impl Drop for RingPublisher {
    fn drop(&mut self) {
        self.close();
    }
}

pub(crate) struct RingSubscriber {
    topic: String,
    schema: SchemaDescriptor,
    store: Arc<dyn RegionStore>,
    ring: Option<RingBuffer<Region>>,
}

impl RingSubscriber {
    pub(crate) fn new(topic: &str, schema: SchemaDescriptor, store: Arc<dyn RegionStore>) -> Self {
        RingSubscriber { topic: topic.into(), schema, store, ring: None }
    }

    fn try_attach(&self) -> Result<Option<RingBuffer<Region>>, MiddlewareError> {
        let Some(region) = self.store.open(&self.topic)? else {
            return Ok(None);
        };
        if !RingBuffer::<Region>::is_initialized(&region) {
            return Ok(None);
        }
        Ok(Some(RingBuffer::attach(region, &self.schema)?))
    }

    /// Returns the attached ring, re-attaching when the writer has exited
    /// and a new one may have replaced it.
    fn ring(&mut self) -> Result<&RingBuffer<Region>, MiddlewareError> {
        let stale = match &self.ring {
            None => true,
            Some(r) => r.writer_state() == WriterState::Exited,
        };
        if stale {
            if let Some(fresh) = self.try_attach()? {
                if self.ring.is_none() || fresh.writer_state() == WriterState::Live {
                    self.ring = Some(fresh);
                }
            }
        }
        match &self.ring {
            None => Err(MiddlewareError::Empty),
            Some(r) if r.writer_state() == WriterState::Exited => Err(MiddlewareError::Disconnected),
            Some(r) => Ok(r),
        }
    }
}

impl SubscriberPort for RingSubscriber {
    fn topic(&self) -> &str {
        &self.topic
    }

    fn schema(&self) -> &SchemaDescriptor {
        &self.schema
    }

    fn latest(&mut self) -> Result<TimedSample, MiddlewareError> {
        Ok(self.ring()?.latest()?)
    }

    fn last_k(&mut self, k: usize) -> Result<Vec<TimedSample>, MiddlewareError> {
        Ok(self.ring()?.last_k(k)?)
    }

    fn nearest(&mut self, t: Timestamp) -> Result<TimedSample, MiddlewareError> {
        Ok(self.ring()?.nearest(t)?)
    }
}

/// Longest single block on a region bell before rechecking state.
const BELL_SLICE: Duration = Duration::from_millis(2);

pub(crate) struct ChannelReplier {
    topic: String,
    chan: RequestChannel<Region>,
    seen: u32,
    closed: bool,
}

impl ChannelReplier {
    pub(crate) fn new(topic: &str, chan: RequestChannel<Region>) -> Self {
        chan.set_replier_state(WriterState::Live);
        chan.region().ring_bell();
        let seen = chan.region().bell_seq();
        ChannelReplier { topic: topic.into(), chan, seen, closed: false }
    }
}

impl ReplierPort for ChannelReplier {
    fn topic(&self) -> &str {
        &self.topic
    }

    fn api(&self) -> &ApiSchema {
        self.chan.api()
    }

    fn drain(&mut self) -> Result<Vec<CommandRequest>, MiddlewareError> {
        self.seen = self.chan.region().bell_seq();
        Ok(self.chan.drain()?)
    }

    fn reply(&mut self, id: u64, method: &str, result: Result<Payload, String>) -> Result<(), MiddlewareError> {
        self.chan.reply(method, &CommandReply { id, result })?;
        self.chan.region().ring_bell();
        Ok(())
    }

    fn idle(&mut self, _backoff: &mut Backoff) {
        self.chan.region().wait_bell(self.seen, BELL_SLICE);
    }

    fn close(&mut self) {
        if !self.closed {
            self.closed = true;
            self.chan.set_replier_state(WriterState::Exited);
            self.chan.region().ring_bell();
        }
    }
}

impl Drop for ChannelReplier {
    fn drop(&mut self) {
        self.close();
    }
}

pub(crate) struct ChannelRequester {
    topic: String,
    api: ApiSchema,
    store: Arc<dyn RegionStore>,
    chan: Option<RequestChannel<Region>>,
}

impl ChannelRequester {
    pub(crate) fn new(topic: &str, api: ApiSchema, store: Arc<dyn RegionStore>) -> Self {
        ChannelRequester { topic: topic.into(), api, store, chan: None }
    }

    /// Attaches lazily, and re-attaches when the replier was replaced.
    fn chan(&mut self) -> Result<Option<&mut RequestChannel<Region>>, MiddlewareError> {
        let stale = match &self.chan {
            None => true,
            Some(c) => c.replier_state() == WriterState::Exited,
        };
        if stale {
            if let Some(region) = self.store.open(&self.topic)? {
                if RequestChannel::<Region>::is_initialized(&region) {
                    let fresh = RequestChannel::attach(region, &self.api)?;
                    if self.chan.is_none() || fresh.replier_state() == WriterState::Live {
                        self.chan = Some(fresh);
                    }
                }
            }
        }
        Ok(self.chan.as_mut())
    }
}

impl RequesterPort for ChannelRequester {
    fn topic(&self) -> &str {
        &self.topic
    }

    fn api(&self) -> &ApiSchema {
        &self.api
    }

    fn send(&mut self, method: &str, args: &Payload) -> Result<u64, MiddlewareError> {
        if self.api.method(method).is_none() {
            return Err(MiddlewareError::UnknownMethod(method.into()));
        }
        let Some(chan) = self.chan()? else {
            // nobody serves this topic yet; the reply wait will time out
            return Ok(0);
        };
        if chan.replier_state() == WriterState::Exited {
            return Err(MiddlewareError::Disconnected);
        }
        let id = chan.allocate_id();
        let req = CommandRequest { id, ts: clock::now(), method: method.into(), args: args.clone() };
        chan.put(&req)?;
        chan.region().ring_bell();
        Ok(id)
    }

    fn wait_reply(&mut self, id: u64, method: &str, timeout: Duration) -> Result<Payload, MiddlewareError> {
        let deadline = clock::now() + clock::duration_ns(timeout);
        let mut backoff = Backoff::new();
        loop {
            let mut seen = None;
            if id != 0 {
                if let Some(chan) = self.chan.as_ref() {
                    seen = Some(chan.region().bell_seq());
                    if let Some(reply) = chan.poll_reply(id, method)? {
                        return reply.result.map_err(MiddlewareError::RemoteError);
                    }
                    if chan.replier_state() == WriterState::Exited {
                        return Err(MiddlewareError::Disconnected);
                    }
                }
            }
            let now = clock::now();
            if now >= deadline {
                return Err(MiddlewareError::Timeout(timeout.as_millis() as u64));
            }
            match (seen, self.chan.as_ref()) {
                (Some(seen), Some(chan)) => {
                    let left = Duration::from_nanos(deadline.since(now));
                    chan.region().wait_bell(seen, left.min(BELL_SLICE));
                }
                _ => backoff.wait(),
            }
        }
    }
}
