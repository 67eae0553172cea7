//! Process-wide monotonic clock and waiting helpers.

use std::thread;
use std::time::Duration;

use rio_core::Timestamp;

/// Reads `CLOCK_MONOTONIC`, which is shared by every process on the host.
pub fn now() -> Timestamp {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: valid pointer to a timespec; CLOCK_MONOTONIC always exists on Linux.
    unsafe {
        libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts);
    }
    Timestamp(ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64)
}

/// Sleeps until `deadline`; returns immediately when it has passed.
pub fn sleep_until(deadline: Timestamp) {
    let t = now();
    if deadline > t {
        thread::sleep(Duration::from_nanos(deadline.since(t)));
    }
}

pub fn duration_ns(d: Duration) -> u64 {
    d.as_nanos().min(u64::MAX as u128) as u64
}

/// Polling backoff: a few yields, then short sleeps growing to `max_sleep`.
#[derive(Debug)]
pub struct Backoff {
    step: u32,
    max_sleep: Duration,
}

impl Backoff {
    pub fn new() -> Self {
        Backoff { step: 0, max_sleep: Duration::from_micros(200) }
    }

    pub fn with_max_sleep(max_sleep: Duration) -> Self {
        Backoff { step: 0, max_sleep }
    }

    pub fn reset(&mut self) {
        self.step = 0;
    }

    pub fn wait(&mut self) {
        if self.step < 4 {
            thread::yield_now();
        } else {
            let us = 20u64 << (self.step - 4).min(6);
            thread::sleep(Duration::from_micros(us).min(self.max_sleep));
        }
        self.step = self.step.saturating_add(1);
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new()
    }
}

/// One-shot event that any thread can wait on.
#[derive(Debug, Default)]
pub struct Event {
    fired: std::sync::Mutex<bool>,
    cv: std::sync::Condvar,
}

impl Event {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fires the event. Returns false when it had already fired.
    pub fn set(&self) -> bool {
        let mut f = self.fired.lock().unwrap();
        let first = !*f;
        *f = true;
        self.cv.notify_all();
        first
    }

    pub fn is_set(&self) -> bool {
        *self.fired.lock().unwrap()
    }

    /// Waits up to `timeout`; returns whether the event fired.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let f = self.fired.lock().unwrap();
        let (f, _) = self.cv.wait_timeout_while(f, timeout, |f| !*f).unwrap();
        *f
    }

    pub fn wait(&self) {
        let f = self.fired.lock().unwrap();
        let _f = self.cv.wait_while(f, |f| !*f).unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_is_monotone() {
        let a = now();
        let b = now();
        assert!(b >= a);
    }

    #[test]
    fn event_fires_once() {
        let e = Event::new();
        assert!(!e.wait_timeout(Duration::from_millis(1)));
        assert!(e.set());
        assert!(!e.set());
        assert!(e.wait_timeout(Duration::from_millis(1)));
    }
}
