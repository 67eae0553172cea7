//! Middleware latency benchmark and end-to-end pipeline profiling.

use std::fs;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rio_core::schema::payload;
use rio_core::stats::{latency_statistic, median, StatsError};
use rio_core::{Payload, Value};
use serde::{Deserialize, Serialize};

use crate::clock;
use crate::middleware::{open_backend, BackendKind, MiddlewareError};
use crate::node::{make_pair, HandlerError, MethodSpec, NodeContext, NodeError, NodeLogic, NodeSpec, Pattern};
use crate::policy::{deploy, DeployError, DeployOptions, Mode, PolicyKind, RolloutTrace, Span, MAIN_SPAN};
use crate::station::{build_station, StationConfig};

pub const DEFAULT_PAYLOAD_BYTES: usize = 2048;
pub const DEFAULT_PASSES: usize = 1000;
pub const WARMUP_PASSES: usize = 100;
pub const ECHO_NODE: &str = "echo";
pub const ECHO: &str = "echo";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Backend(#[from] MiddlewareError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Station(#[from] crate::station::StationError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Result of one latency run. Field names are stable; they are the JSON
/// keys and CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub backend: String,
    pub payload_bytes: usize,
    pub passes: usize,
    pub kept: usize,
    pub latency_ms: f64,
    pub stddev_ms: f64,
    pub rtt_p50_ms: f64,
    pub rtt_p90_ms: f64,
    pub rtt_p99_ms: f64,
}

/// Applies the latency statistic to measured or injected round trips.
pub fn report_from_rtts(backend: &str, payload_bytes: usize, rtts_ms: &[f64]) -> Result<LatencyReport, BenchError> {
    let s = latency_statistic(rtts_ms)?;
    Ok(LatencyReport {
        backend: backend.into(),
        payload_bytes,
        passes: s.passes,
        kept: s.kept,
        latency_ms: s.latency_ms,
        stddev_ms: s.stddev_ms,
        rtt_p50_ms: s.rtt_p50_ms,
        rtt_p90_ms: s.rtt_p90_ms,
        rtt_p99_ms: s.rtt_p99_ms,
    })
}

/// Log-normal round trips around `median_ms`, reproducible from `seed`.
pub fn synthetic_rtts(seed: u64, passes: usize, median_ms: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = LogNormal::new(median_ms.ln(), 0.25).expect("finite parameters");
    (0..passes).map(|_| dist.sample(&mut rng)).collect()
}

pub fn synthetic_bench(seed: u64, payload_bytes: usize, passes: usize) -> Result<LatencyReport, BenchError> {
    report_from_rtts("synthetic", payload_bytes, &synthetic_rtts(seed, passes, 1.0))
}

struct Echo;

impl NodeLogic for Echo {
    fn handle(&mut self, _ctx: &mut NodeContext, method: &str, args: &Payload) -> Result<Payload, HandlerError> {
        match method {
            ECHO => Ok(args.clone()),
            other => Err(HandlerError::Rejected(format!("unknown method `{other}`"))),
        }
    }
}

fn echo_payload(bytes: usize) -> Payload {
    payload([("data", Value::u8_array(&[bytes], (0..bytes).map(|i| i as u8).collect()))])
}

/// Serial request/reply round trips against an echo node: 100 untimed
/// warm-up passes, then `passes` timed ones.
pub fn latency_bench(kind: &BackendKind, payload_bytes: usize, passes: usize) -> Result<LatencyReport, BenchError> {
    let rtts = measure_rtts(kind, payload_bytes, passes)?;
    report_from_rtts(kind.name(), payload_bytes, &rtts)
}

/// Raw round trips in milliseconds.
pub fn measure_rtts(kind: &BackendKind, payload_bytes: usize, passes: usize) -> Result<Vec<f64>, BenchError> {
    let backend = open_backend(kind)?;
    let example = echo_payload(payload_bytes);
    let spec = NodeSpec::new(ECHO_NODE, Pattern::Req, 0.0, Payload::new())
        .with_method(MethodSpec::new(ECHO, example.clone(), example.clone()));
    let (launcher, connector) = make_pair(spec, &backend)?;
    let mut handle = launcher.launch(Echo)?;
    handle.ready_event().wait_timeout(Duration::from_secs(5));
    let mut proxy = connector.connect()?;
    for _ in 0..WARMUP_PASSES {
        proxy.call(ECHO, &example)?;
    }
    let mut rtts = Vec::with_capacity(passes);
    for _ in 0..passes {
        let t0 = clock::now();
        proxy.call(ECHO, &example)?;
        rtts.push(clock::now().since(t0) as f64 * 1e-6);
    }
    drop(proxy);
    handle.shutdown();
    backend.close();
    Ok(rtts)
}

/// Work done by one node during a profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeActivity {
    pub name: String,
    pub ticks: u64,
    pub requests: u64,
    pub busy_ms: f64,
    pub achieved_rate_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineProfile {
    pub station: String,
    pub mode: Mode,
    pub policy: PolicyKind,
    pub control_rate_hz: f64,
    pub achieved_rate_hz: f64,
    pub ticks: u64,
    pub starved: usize,
    /// Async: observation age at each fresh chunk's first action. Sync:
    /// observation to action per cycle.
    pub latencies_ms: Vec<f64>,
    pub median_latency_ms: f64,
    /// Fraction of the rollout the main loop spent outside sleeps.
    pub main_loop_utilization: f64,
    pub median_main_span_ms: f64,
    pub nodes: Vec<NodeActivity>,
    pub spans: Vec<Span>,
}

/// Sum of main-loop span time over the rollout's wall time.
pub fn main_loop_utilization(trace: &RolloutTrace) -> f64 {
    let main: Vec<&Span> = trace.spans.iter().filter(|s| s.name == MAIN_SPAN).collect();
    let (Some(first), Some(last)) = (main.iter().map(|s| s.start_ns).min(), main.iter().map(|s| s.end_ns).max()) else {
        return 0.0;
    };
    if last <= first {
        return 0.0;
    }
    main.iter().map(|s| s.duration_ns()).sum::<u64>() as f64 / (last - first) as f64
}

fn achieved_rate(trace: &RolloutTrace) -> f64 {
    let (Some(a), Some(b)) = (trace.records.first(), trace.records.last()) else { return 0.0 };
    if b.tick <= a.tick || b.exec_ns <= a.exec_ns {
        return 0.0;
    }
    (b.tick - a.tick) as f64 / ((b.exec_ns - a.exec_ns) as f64 * 1e-9)
}

/// Builds the station, deploys the policy and profiles one rollout.
pub fn pipeline_profile(cfg: &StationConfig, opts: &DeployOptions) -> Result<PipelineProfile, BenchError> {
    let mut station = build_station(cfg)?;
    let (report, trace) = deploy(&mut station, opts)?;
    let nodes = station
        .handles()
        .iter()
        .map(|h| {
            let s = h.stats();
            NodeActivity {
                name: h.name().to_string(),
                ticks: s.ticks.load(Ordering::Acquire),
                requests: s.requests.load(Ordering::Acquire),
                busy_ms: s.busy_ns.load(Ordering::Acquire) as f64 * 1e-6,
                achieved_rate_hz: s.achieved_rate_hz(),
            }
        })
        .collect();
    let mains: Vec<f64> =
        trace.spans.iter().filter(|s| s.name == MAIN_SPAN).map(|s| s.duration_ns() as f64 * 1e-6).collect();
    Ok(PipelineProfile {
        station: report.station,
        mode: opts.mode,
        policy: opts.policy,
        control_rate_hz: opts.executor.control_rate_hz,
        achieved_rate_hz: achieved_rate(&trace),
        ticks: report.rollout.ticks,
        starved: report.rollout.starved,
        latencies_ms: trace.latencies_ms(),
        median_latency_ms: report.rollout.median_latency_ms,
        main_loop_utilization: main_loop_utilization(&trace),
        median_main_span_ms: median(&mains),
        nodes,
        spans: trace.spans,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }

    /// Chosen from the file extension, JSON otherwise.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

/// One CSV row per profiled cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub station: String,
    pub mode: Mode,
    pub cycle: usize,
    pub latency_ms: f64,
}

pub trait Report: Serialize {
    fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<(), csv::Error>;
}

impl Report for LatencyReport {
    fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<(), csv::Error> {
        w.serialize(self)
    }
}

impl Report for Vec<LatencyReport> {
    fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<(), csv::Error> {
        self.iter().try_for_each(|r| w.serialize(r))
    }
}

impl Report for PipelineProfile {
    fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<(), csv::Error> {
        for (cycle, latency_ms) in self.latencies_ms.iter().enumerate() {
            w.serialize(ProfileRow { station: self.station.clone(), mode: self.mode, cycle, latency_ms: *latency_ms })?;
        }
        Ok(())
    }
}

pub fn render_report<R: Report>(report: &R, format: ReportFormat) -> Result<String, BenchError> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report).map_err(std::io::Error::other)? + "\n"),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            report.write_csv(&mut w)?;
            let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
            Ok(String::from_utf8(bytes).map_err(std::io::Error::other)?)
        }
    }
}

pub fn emit_report<R: Report>(report: &R, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), BenchError> {
    fs::write(path, render_report(report, format)?)?;
    Ok(())
}
