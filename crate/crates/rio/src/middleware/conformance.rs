//! Behavioural checks every backend must pass.

use std::thread;
use std::time::Duration;

use rio_core::schema::payload;
use rio_core::{ApiMethod, ApiSchema, DType, Field, SchemaDescriptor, TimedSample, Value};

use super::{open_backend, BackendHandle, BackendKind, MiddlewareError};
use crate::clock;

#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct ConformanceReport {
    pub backend: String,
    pub properties: Vec<PropertyResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> Vec<&PropertyResult> {
        self.properties.iter().filter(|p| !p.passed).collect()
    }
}

const CONCURRENT_REQUESTERS: usize = 4;
const CALLS_PER_REQUESTER: usize = 25;
const NO_REPLIER_TIMEOUT: Duration = Duration::from_millis(50);
const CALL_TIMEOUT: Duration = Duration::from_secs(5);

fn sample_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![Field::new("x", DType::F64, &[3]), Field::new("n", DType::I64, &[])]).unwrap()
}

fn echo_api() -> ApiSchema {
    let s = SchemaDescriptor::new(vec![Field::new("v", DType::I64, &[])]).unwrap();
    ApiSchema::new(vec![ApiMethod { name: "echo".into(), request: s.clone(), reply: s }]).unwrap()
}

/// Serves `echo` on `topic` until it has answered `calls` requests.
fn spawn_echo(h: &BackendHandle, topic: &str, calls: usize) -> Result<thread::JoinHandle<()>, MiddlewareError> {
    let mut rep = h.replier(topic, &echo_api(), rio_core::rpc::DEFAULT_QUEUE_CAPACITY)?;
    Ok(thread::spawn(move || {
        let mut served = 0;
        let deadline = clock::now() + clock::duration_ns(CALL_TIMEOUT * 2);
        let mut backoff = clock::Backoff::new();
        while served < calls && clock::now() < deadline {
            let reqs = rep.drain().unwrap_or_default();
            if reqs.is_empty() {
                backoff.wait();
                continue;
            }
            backoff.reset();
            for r in reqs {
                let _ = rep.reply(r.id, &r.method, Ok(r.args));
                served += 1;
            }
        }
        // linger so late replies are fetched before the replier exits
        thread::sleep(Duration::from_millis(20));
    }))
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(), String>) -> PropertyResult {
    match f() {
        Ok(()) => PropertyResult { name, passed: true, detail: String::new() },
        Err(detail) => PropertyResult { name, passed: false, detail },
    }
}

fn err(e: MiddlewareError) -> String {
    e.to_string()
}

/// Opens a fresh backend of `kind` and runs every property against it.
pub fn conformance_suite(kind: &BackendKind) -> Result<ConformanceReport, MiddlewareError> {
    let h = open_backend(kind)?;
    let mut properties = Vec::new();

    properties.push(check("empty_before_publish", || {
        let mut sub = h.subscriber("conf/empty", &sample_schema()).map_err(err)?;
        match sub.latest() {
            Err(MiddlewareError::Empty) => Ok(()),
            other => Err(format!("expected Empty, got {other:?}")),
        }
    }));

    properties.push(check("publish_then_latest", || {
        let schema = sample_schema();
        let mut publ = h.publisher("conf/pub", &schema, 8).map_err(err)?;
        let mut sub = h.subscriber("conf/pub", &schema).map_err(err)?;
        let mut last = None;
        for i in 0..3 {
            let s = TimedSample::new(
                clock::now(),
                payload([("x", Value::f64s(vec![i as f64, 1.5, -2.0])), ("n", Value::i64(i))]),
            );
            publ.publish(&s).map_err(err)?;
            last = Some(s);
        }
        let want = last.unwrap();
        let deadline = clock::now() + clock::duration_ns(Duration::from_secs(2));
        loop {
            match sub.latest() {
                Ok(got) if got.ts == want.ts && rio_core::schema::payload_bit_eq(&got.payload, &want.payload) => {
                    return Ok(())
                }
                Ok(_) | Err(MiddlewareError::Empty) if clock::now() < deadline => {
                    thread::sleep(Duration::from_millis(1))
                }
                other => return Err(format!("latest sample never arrived: {other:?}")),
            }
        }
    }));

    properties.push(check("call_returns_same_id_payload", || {
        let server = spawn_echo(&h, "conf/echo", 1).map_err(err)?;
        let mut req = h.requester("conf/echo", &echo_api()).map_err(err)?;
        let got = req.call("echo", &payload([("v", Value::i64(42))]), CALL_TIMEOUT).map_err(err)?;
        server.join().map_err(|_| "echo thread panicked".to_string())?;
        match got.get("v").and_then(Value::as_i64) {
            Some(42) => Ok(()),
            other => Err(format!("echo returned {other:?}")),
        }
    }));

    properties.push(check("no_replier_times_out", || {
        let mut req = h.requester("conf/nobody", &echo_api()).map_err(err)?;
        let t0 = clock::now();
        match req.call("echo", &payload([("v", Value::i64(1))]), NO_REPLIER_TIMEOUT) {
            Err(MiddlewareError::Timeout(_)) => {
                let waited = clock::now().since(t0);
                if waited >= clock::duration_ns(NO_REPLIER_TIMEOUT) {
                    Ok(())
                } else {
                    Err(format!("timed out early after {waited} ns"))
                }
            }
            other => Err(format!("expected Timeout, got {other:?}")),
        }
    }));

    properties.push(check("concurrent_requesters_match_ids", || {
        let total = CONCURRENT_REQUESTERS * CALLS_PER_REQUESTER;
        let server = spawn_echo(&h, "conf/many", total).map_err(err)?;
        let mut workers = Vec::new();
        for w in 0..CONCURRENT_REQUESTERS {
            let mut req = h.requester("conf/many", &echo_api()).map_err(err)?;
            workers.push(thread::spawn(move || -> Result<(), String> {
                for i in 0..CALLS_PER_REQUESTER {
                    let v = (w * 1000 + i) as i64;
                    let got = req.call("echo", &payload([("v", Value::i64(v))]), CALL_TIMEOUT).map_err(err)?;
                    let back = got.get("v").and_then(Value::as_i64);
                    if back != Some(v) {
                        return Err(format!("requester {w} sent {v}, got {back:?}"));
                    }
                }
                Ok(())
            }));
        }
        for w in workers {
            w.join().map_err(|_| "requester panicked".to_string())??;
        }
        server.join().map_err(|_| "echo thread panicked".to_string())
    }));

    properties.push(check("exited_writer_disconnects", || {
        let schema = sample_schema();
        let mut publ = h.publisher("conf/exit", &schema, 8).map_err(err)?;
        let mut sub = h.subscriber("conf/exit", &schema).map_err(err)?;
        publ.publish(&TimedSample::new(clock::now(), payload([("x", Value::f64s(vec![0.0; 3])), ("n", Value::i64(0))])))
            .map_err(err)?;
        publ.close();
        let deadline = clock::now() + clock::duration_ns(Duration::from_secs(2));
        loop {
            match sub.latest() {
                Err(MiddlewareError::Disconnected) => return Ok(()),
                _ if clock::now() < deadline => thread::sleep(Duration::from_millis(1)),
                other => return Err(format!("expected Disconnected, got {other:?}")),
            }
        }
    }));

    properties.push(check("exited_replier_disconnects", || {
        let mut rep = h.replier("conf/gone", &echo_api(), 8).map_err(err)?;
        let mut req = h.requester("conf/gone", &echo_api()).map_err(err)?;
        rep.close();
        thread::sleep(Duration::from_millis(20));
        match req.call("echo", &payload([("v", Value::i64(1))]), Duration::from_secs(2)) {
            Err(MiddlewareError::Disconnected) => Ok(()),
            other => Err(format!("expected Disconnected, got {other:?}")),
        }
    }));

    properties.push(check("schema_mismatch_rejected", || {
        let other = SchemaDescriptor::new(vec![Field::new("y", DType::F64, &[2])]).unwrap();
        let _publ = h.publisher("conf/typed", &sample_schema(), 8).map_err(err)?;
        match h.subscriber("conf/typed", &other).and_then(|mut s| s.latest()) {
            Err(MiddlewareError::SchemaMismatch(_)) => Ok(()),
            other => Err(format!("expected SchemaMismatch, got {other:?}")),
        }
    }));

    let backend = h.kind().to_string();
    h.close();
    Ok(ConformanceReport { backend, properties })
}
