//! Latest-wins rate limiter.

use crate::time::{period_ns, Timestamp};

/// Keeps only the newest offered item and releases at most one per output
/// period.
#[derive(Clone, Debug)]
pub struct Downsampler<T> {
    period_ns: u64,
    next_emit: Option<Timestamp>,
    pending: Option<T>,
}

impl<T> Downsampler<T> {
    pub fn new(rate_out_hz: f64) -> Self {
        Downsampler { period_ns: period_ns(rate_out_hz), next_emit: None, pending: None }
    }

    pub fn period_ns(&self) -> u64 {
        self.period_ns
    }

    /// Replaces any pending item.
    pub fn offer(&mut self, item: T) {
        self.pending = Some(item);
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Releases the pending item if the current output period is open.
    pub fn poll(&mut self, now: Timestamp) -> Option<T> {
        if self.pending.is_none() {
            return None;
        }
        match self.next_emit {
            Some(next) if now < next => None,
            _ => {
                let mut next = self.next_emit.unwrap_or(now) + self.period_ns;
                // after silence, restart the grid rather than bursting
                while next <= now {
                    next = next + self.period_ns;
                }
                self.next_emit = Some(next);
                self.pending.take()
            }
        }
    }
}
