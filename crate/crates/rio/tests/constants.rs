//! Published constants checked against the reference text at the workspace
//! root, when it is present.

use std::path::PathBuf;

use rio::bench::{DEFAULT_PASSES, DEFAULT_PAYLOAD_BYTES};
use rio::policy::FORWARD_PASS_MS;

fn reference() -> Option<String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../paper.md");
    std::fs::read_to_string(path).ok()
}

/// `(name, mean ms)` rows of the middleware latency table.
fn latency_rows(text: &str) -> Vec<(String, f64)> {
    let start = text.find("Middleware & Latency (ms)").expect("latency table");
    let end = start + text[start..].find("\\bottomrule").expect("table end");
    text[start..end]
        .lines()
        .filter_map(|l| {
            let (name, rest) = l.split_once('&')?;
            let mean = rest.trim().split_whitespace().next()?.parse().ok()?;
            Some((name.trim().to_string(), mean))
        })
        .collect()
}

#[test]
fn forward_pass_matches_the_reference() {
    let Some(text) = reference() else { return };
    assert!(text.contains(&format!("{FORWARD_PASS_MS}$\\,ms")));
}

#[test]
fn bench_defaults_match_the_reference() {
    let Some(text) = reference() else { return };
    assert_eq!(DEFAULT_PASSES, 1000);
    assert!(text.contains("1,000 passes"));
    assert!(text.contains(&format!("{DEFAULT_PAYLOAD_BYTES} bytes")));
}

#[test]
fn local_backends_fall_inside_the_acceptance_band() {
    let Some(text) = reference() else { return };
    let rows = latency_rows(&text);
    assert_eq!(rows.len(), 5, "{rows:?}");
    let get = |n: &str| rows.iter().find(|(name, _)| name == n).map(|r| r.1).unwrap();
    assert_eq!(get("Shared Memory"), 0.5413);
    assert_eq!(get("Thread"), 0.9877);
    let lo = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    assert_eq!((lo, hi), (0.4287, 1.9699));
    // the local band asserted by the acceptance suite
    assert!(get("Shared Memory") < 2.0 && get("Thread") < 2.0);
}

#[test]
fn recording_rate_lies_in_the_reference_band() {
    let Some(text) = reference() else { return };
    assert!(text.contains("50--80\\,Hz"));
    let rate = 60.0;
    assert!((50.0..=80.0).contains(&rate));
}
