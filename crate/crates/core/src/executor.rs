//! Asynchronous action-chunk executor.
//!
//! [`AsyncExecutor`] is a clock-free state machine. A driver calls
//! [`AsyncExecutor::on_tick`] once per control tick, performs the inference
//! request when [`AsyncExecutor::dispatch_due`] says so and hands replies to
//! [`AsyncExecutor::receive`]. [`simulate`] drives it in virtual time with a
//! fixed inference latency; the `rio` crate drives it in real time.
//!
//! Per tick:
//! 1. a pending chunk is adopted once the active chunk is exhausted;
//! 2. the next action of the active chunk is executed, or the tick is
//!    recorded as starved;
//! 3. when at least `ceil(trigger_fraction * H)` actions of the active chunk
//!    have been consumed and nothing is outstanding, one request is
//!    scheduled.
//!
//! With [`Dispatch::LatencyAware`] the scheduled request is held back so
//! that its reply is expected just before the tick it will be adopted at,
//! which keeps the observation it carries as fresh as possible.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use crate::time::{period_ns, Timestamp};

pub const DEFAULT_BLEND_STEPS: usize = 4;
pub const DEFAULT_MARGIN_NS: u64 = 25_000_000;
/// Round trips remembered for the latency estimate.
pub const RTT_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dispatch {
    /// Send as soon as the trigger fires.
    Immediate,
    /// Send `estimate + margin` before the tick the chunk is needed at.
    LatencyAware { margin_ns: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutorConfig {
    pub control_rate_hz: f64,
    pub horizon: usize,
    pub trigger_fraction: f64,
    pub blend_steps: usize,
    pub dispatch: Dispatch,
}

impl ExecutorConfig {
    pub fn new(control_rate_hz: f64, horizon: usize, trigger_fraction: f64) -> Self {
        ExecutorConfig {
            control_rate_hz,
            horizon,
            trigger_fraction,
            blend_steps: DEFAULT_BLEND_STEPS,
            dispatch: Dispatch::LatencyAware { margin_ns: DEFAULT_MARGIN_NS },
        }
    }

    pub fn validate(&self) -> Result<(), ExecutorError> {
        let bad = |m: &str| Err(ExecutorError::InvalidConfig(String::from(m)));
        if !(self.control_rate_hz > 0.0 && self.control_rate_hz.is_finite()) {
            return bad("control_rate_hz must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.trigger_fraction > 0.0 && self.trigger_fraction <= 1.0) {
            return bad("trigger_fraction must be in (0, 1]");
        }
        if self.trigger_fraction * (self.horizon as f64) < 1.0 {
            return bad("trigger_fraction * horizon must be at least 1");
        }
        Ok(())
    }

    pub fn period_ns(&self) -> u64 {
        period_ns(self.control_rate_hz)
    }

    /// Actions consumed before the next request is scheduled.
    pub fn trigger_step(&self) -> usize {
        let s = libm::ceil(self.trigger_fraction * self.horizon as f64 - 1e-9) as usize;
        s.clamp(1, self.horizon)
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ExecutorError {
    #[error("invalid executor config: {0}")]
    InvalidConfig(String),
    #[error("chunk must be a non-empty matrix of finite values with equal rows")]
    InvalidChunk,
    #[error("reply for request {0} was not expected")]
    UnexpectedReply(u64),
    #[error("no request is due")]
    NothingDue,
}

/// What happened at one control tick.
#[derive(Clone, Debug, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    pub exec_ts: Timestamp,
    pub chunk_id: Option<u64>,
    pub index: Option<usize>,
    /// Timestamp of the observation the executed chunk was computed from.
    pub obs_ts: Option<Timestamp>,
    pub starved: bool,
    pub action: Option<Vec<f64>>,
}

/// A request the driver must send now.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InferenceRequest {
    pub id: u64,
    /// Tick at which the resulting chunk is expected to start.
    pub base_timestep: u64,
}

#[derive(Clone, Debug)]
struct Chunk {
    id: u64,
    actions: Vec<Vec<f64>>,
    obs_ts: Timestamp,
}

#[derive(Clone, Debug)]
struct Active {
    chunk: Chunk,
    next: usize,
    blend_from: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
enum Request {
    Scheduled { dispatch_at: Timestamp, target_tick: u64 },
    InFlight { id: u64, sent: Timestamp, obs_ts: Timestamp },
}

#[derive(Clone, Debug)]
pub struct AsyncExecutor {
    cfg: ExecutorConfig,
    period: u64,
    start: Timestamp,
    active: Option<Active>,
    pending: Option<Chunk>,
    request: Option<Request>,
    rtts: VecDeque<u64>,
    next_chunk_id: u64,
    next_request_id: u64,
    last_action: Option<Vec<f64>>,
}

impl AsyncExecutor {
    /// `start` is the time of tick 0.
    pub fn new(cfg: ExecutorConfig, start: Timestamp) -> Result<Self, ExecutorError> {
        cfg.validate()?;
        Ok(AsyncExecutor {
            period: cfg.period_ns(),
            cfg,
            start,
            active: None,
            pending: None,
            request: None,
            rtts: VecDeque::with_capacity(RTT_WINDOW),
            next_chunk_id: 0,
            next_request_id: 1,
            last_action: None,
        })
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.cfg
    }

    pub fn tick_time(&self, tick: u64) -> Timestamp {
        self.start + tick * self.period
    }

    /// Largest of the recent round trips.
    pub fn latency_estimate_ns(&self) -> Option<u64> {
        self.rtts.iter().copied().max()
    }

    /// Installs the first chunk, obtained by a blocking call before tick 0.
    pub fn prime(&mut self, actions: Vec<Vec<f64>>, obs_ts: Timestamp, rtt_ns: u64) -> Result<u64, ExecutorError> {
        validate_chunk(&actions)?;
        self.record_rtt(rtt_ns);
        let chunk = self.new_chunk(actions, obs_ts);
        let id = chunk.id;
        self.active = Some(Active { chunk, next: 0, blend_from: None });
        Ok(id)
    }

    pub fn has_outstanding(&self) -> bool {
        self.request.is_some()
    }

    pub fn in_flight(&self) -> Option<u64> {
        match self.request {
            Some(Request::InFlight { id, .. }) => Some(id),
            _ => None,
        }
    }

    /// When the scheduled request should be sent, if one is waiting.
    pub fn next_dispatch_at(&self) -> Option<Timestamp> {
        match self.request {
            Some(Request::Scheduled { dispatch_at, .. }) => Some(dispatch_at),
            _ => None,
        }
    }

    pub fn dispatch_due(&self, now: Timestamp) -> bool {
        self.next_dispatch_at().is_some_and(|t| now >= t)
    }

    /// Marks the scheduled request as sent with an observation taken at
    /// `obs_ts`.
    pub fn dispatch(&mut self, now: Timestamp, obs_ts: Timestamp) -> Result<InferenceRequest, ExecutorError> {
        let target_tick = match self.request {
            Some(Request::Scheduled { target_tick, .. }) => target_tick,
            _ => return Err(ExecutorError::NothingDue),
        };
        let id = self.next_request_id;
        self.next_request_id += 1;
        self.request = Some(Request::InFlight { id, sent: now, obs_ts });
        Ok(InferenceRequest { id, base_timestep: target_tick })
    }

    /// Accepts the reply to request `id`, received at `now`.
    pub fn receive(&mut self, id: u64, actions: Vec<Vec<f64>>, now: Timestamp) -> Result<u64, ExecutorError> {
        let (sent, obs_ts) = match self.request {
            Some(Request::InFlight { id: want, sent, obs_ts }) if want == id => (sent, obs_ts),
            _ => return Err(ExecutorError::UnexpectedReply(id)),
        };
        self.request = None;
        validate_chunk(&actions)?;
        self.record_rtt(now.since(sent));
        let chunk = self.new_chunk(actions, obs_ts);
        let cid = chunk.id;
        self.pending = Some(chunk);
        Ok(cid)
    }

    /// Drops the in-flight request `id` so that a new one can be scheduled.
    pub fn fail(&mut self, id: u64) {
        if self.in_flight() == Some(id) {
            self.request = None;
        }
    }

    pub fn on_tick(&mut self, tick: u64, now: Timestamp) -> TickRecord {
        let exhausted = self.active.as_ref().is_none_or(|a| a.next >= a.chunk.actions.len());
        if exhausted {
            if let Some(chunk) = self.pending.take() {
                let blend_from = if self.cfg.blend_steps > 0 { self.last_action.clone() } else { None };
                self.active = Some(Active { chunk, next: 0, blend_from });
            }
        }

        let mut record = TickRecord {
            tick,
            exec_ts: now,
            chunk_id: None,
            index: None,
            obs_ts: None,
            starved: true,
            action: None,
        };
        if let Some(active) = self.active.as_mut() {
            if active.next < active.chunk.actions.len() {
                let i = active.next;
                let raw = &active.chunk.actions[i];
                let action = match &active.blend_from {
                    Some(prev) if i < self.cfg.blend_steps && prev.len() == raw.len() => {
                        let w = (i + 1) as f64 / (self.cfg.blend_steps + 1) as f64;
                        prev.iter().zip(raw).map(|(p, r)| (1.0 - w) * p + w * r).collect()
                    }
                    _ => raw.clone(),
                };
                active.next += 1;
                record.chunk_id = Some(active.chunk.id);
                record.index = Some(i);
                record.obs_ts = Some(active.chunk.obs_ts);
                record.starved = false;
                self.last_action = Some(action.clone());
                record.action = Some(action);
            }
        }

        self.maybe_schedule(tick, now);
        record
    }

    fn maybe_schedule(&mut self, tick: u64, now: Timestamp) {
        if self.request.is_some() || self.pending.is_some() {
            return;
        }
        let (consumed, remaining) = match &self.active {
            Some(a) => (a.next, a.chunk.actions.len() - a.next),
            None => (usize::MAX, 0),
        };
        if consumed < self.cfg.trigger_step() {
            return;
        }
        // first tick with nothing left to execute
        let exhaust_tick = tick + remaining as u64 + 1;
        let (dispatch_at, target_tick) = match (self.cfg.dispatch, self.latency_estimate_ns()) {
            (Dispatch::LatencyAware { margin_ns }, Some(lat)) => {
                let lead = lat + margin_ns;
                let ready_tick = self.first_tick_at_or_after(now + lead);
                let target = exhaust_tick.max(ready_tick);
                let at = (self.tick_time(target) - lead).max(now);
                (at, target)
            }
            _ => (now, exhaust_tick),
        };
        self.request = Some(Request::Scheduled { dispatch_at, target_tick });
    }

    fn first_tick_at_or_after(&self, t: Timestamp) -> u64 {
        let d = t.since(self.start);
        d.div_ceil(self.period)
    }

    fn record_rtt(&mut self, rtt: u64) {
        if self.rtts.len() == RTT_WINDOW {
            self.rtts.pop_front();
        }
        self.rtts.push_back(rtt);
    }

    fn new_chunk(&mut self, actions: Vec<Vec<f64>>, obs_ts: Timestamp) -> Chunk {
        let id = self.next_chunk_id;
        self.next_chunk_id += 1;
        Chunk { id, actions, obs_ts }
    }
}

fn validate_chunk(actions: &[Vec<f64>]) -> Result<(), ExecutorError> {
    let dim = actions.first().map(Vec::len).ok_or(ExecutorError::InvalidChunk)?;
    if dim == 0 || actions.iter().any(|r| r.len() != dim || r.iter().any(|x| !x.is_finite())) {
        return Err(ExecutorError::InvalidChunk);
    }
    Ok(())
}

/// Runs the executor for `ticks` control ticks in virtual time, with every
/// inference taking exactly `latency_ns`. `policy(obs_ts, base_timestep)`
/// produces each chunk. The first chunk is primed at time 0 and tick 0 runs
/// at `latency_ns`.
pub fn simulate<F>(cfg: ExecutorConfig, ticks: u64, latency_ns: u64, mut policy: F) -> Result<Vec<TickRecord>, ExecutorError>
where
    F: FnMut(Timestamp, u64) -> Vec<Vec<f64>>,
{
    let mut ex = AsyncExecutor::new(cfg, Timestamp(latency_ns))?;
    ex.prime(policy(Timestamp(0), 0), Timestamp(0), latency_ns)?;
    let mut in_flight: Option<(u64, Timestamp, Vec<Vec<f64>>)> = None;
    let mut trace = Vec::with_capacity(ticks as usize);
    for k in 0..ticks {
        let now = ex.tick_time(k);
        loop {
            if let Some(at) = ex.next_dispatch_at() {
                if at <= now {
                    let req = ex.dispatch(at, at)?;
                    in_flight = Some((req.id, at + latency_ns, policy(at, req.base_timestep)));
                    continue;
                }
            }
            match in_flight.take() {
                Some((id, arrival, actions)) if arrival <= now => {
                    ex.receive(id, actions, arrival)?;
                }
                other => {
                    in_flight = other;
                    break;
                }
            }
        }
        trace.push(ex.on_tick(k, now));
    }
    Ok(trace)
}

/// Observation age at the first executed action of every chunk after the
/// primed one, in nanoseconds.
pub fn fresh_chunk_obs_ages(trace: &[TickRecord]) -> Vec<u64> {
    trace
        .iter()
        .filter(|r| r.index == Some(0) && r.chunk_id.is_some_and(|c| c > 0))
        .filter_map(|r| r.obs_ts.map(|o| r.exec_ts.since(o)))
        .collect()
}

pub fn starved_ticks(trace: &[TickRecord]) -> usize {
    trace.iter().filter(|r| r.starved).count()
}

/// Number of switches from one chunk to the next.
pub fn chunk_switches(trace: &[TickRecord]) -> usize {
    fresh_chunk_obs_ages(trace).len()
}
