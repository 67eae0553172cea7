mod common;

use std::time::Instant;

use common::oracle::{lists, ORACLE};
use common::{config, timing_lock};
use rio::bench::{
    emit_report, latency_bench, measure_rtts, pipeline_profile, render_report, report_from_rtts, synthetic_bench,
    LatencyReport, ReportFormat,
};
use rio::middleware::BackendKind;
use rio::policy::{DeployOptions, Mode, PolicyKind};
use rio_core::stats::median;

#[test]
fn statistic_matches_frozen_oracle_exactly() {
    let t = Instant::now();
    for ((name, rtts), (oname, kept, latency)) in lists().into_iter().zip(ORACLE) {
        assert_eq!(name, oname);
        let r = report_from_rtts("synthetic", 2048, &rtts).unwrap();
        assert_eq!(r.kept, kept, "{name}");
        assert_eq!(r.latency_ms.to_bits(), latency.to_bits(), "{name}: {} vs {latency}", r.latency_ms);
    }
    assert!(t.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn too_few_passes_rejected() {
    assert!(report_from_rtts("x", 8, &[1.0; 99]).is_err());
}

#[test]
fn synthetic_mode_is_deterministic() {
    let a = synthetic_bench(7, 2048, 1000).unwrap();
    let b = synthetic_bench(7, 2048, 1000).unwrap();
    assert_eq!(render_report(&a, ReportFormat::Json).unwrap(), render_report(&b, ReportFormat::Json).unwrap());
    assert_ne!(a, synthetic_bench(8, 2048, 1000).unwrap());
    assert!((a.latency_ms - 0.5).abs() < 0.05, "{a:?}");
}

#[test]
fn json_round_trips_and_csv_has_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let r = synthetic_bench(1, 2048, 200).unwrap();
    let p = dir.path().join("r.json");
    emit_report(&r, ReportFormat::Json, &p).unwrap();
    let back: LatencyReport = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(back, r);
    let csv = render_report(&vec![r.clone(), r], ReportFormat::Csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "backend,payload_bytes,passes,kept,latency_ms,stddev_ms,rtt_p50_ms,rtt_p90_ms,rtt_p99_ms"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn local_backends_measure_and_order() {
    let _g = timing_lock();
    let inproc = measure_rtts(&BackendKind::Inproc, 2048, 1000).unwrap();
    let tcp = measure_rtts(&common::kind("tcp", "bench"), 2048, 1000).unwrap();
    assert!(median(&inproc) <= median(&tcp), "inproc {} tcp {}", median(&inproc), median(&tcp));
    let shm = latency_bench(&common::kind("shm", "bench"), 2048, 1000).unwrap();
    assert_eq!((shm.passes, shm.payload_bytes, shm.backend.as_str()), (1000, 2048, "shm"));
    assert!(shm.latency_ms > 0.0);
}

#[test]
fn async_main_loop_is_mostly_idle() {
    let _g = timing_lock();
    let opts = DeployOptions {
        policy: PolicyKind::Latency,
        duration: std::time::Duration::from_secs(4),
        ..DeployOptions::default()
    };
    let p = pipeline_profile(&config("single_arm.toml", None), &opts).unwrap();
    assert_eq!(p.mode, Mode::Async);
    assert!(p.main_loop_utilization < 0.2, "{}", p.main_loop_utilization);
    assert!(p.spans.iter().all(|s| s.end_ns >= s.start_ns));
    assert!((p.achieved_rate_hz - 15.0).abs() < 0.75, "{}", p.achieved_rate_hz);
    assert!(p.nodes.iter().any(|n| n.name == "policy" && n.requests > 0));
    let csv = render_report(&p, ReportFormat::Csv).unwrap();
    assert!(csv.starts_with("station,mode,cycle,latency_ms\n"));

    let sync = pipeline_profile(&config("single_arm.toml", None), &DeployOptions { mode: Mode::Sync, ..opts }).unwrap();
    assert!(p.median_latency_ms < sync.median_latency_ms);
}
