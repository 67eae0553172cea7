//! Acceptance suite: one PASS/FAIL line per criterion, then a nonzero exit
//! status if any criterion failed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::oracle::{lists, ORACLE};
use common::{config, config_path, CONFIGS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rio::bench::{latency_bench, report_from_rtts, DEFAULT_PASSES, DEFAULT_PAYLOAD_BYTES};
use rio::middleware::{conformance_suite, BackendKind};
use rio::policy::{deploy, DeployOptions, Mode, PolicyKind};
use rio::recorder::{self, export, load, mix, read_rows, EpisodeMeta, EpisodeWriter, EMBODIMENT_COLUMN};
use rio::station::{build_station, ComponentKind, RunningStation};
use rio::teleop::{run_teleop, TeleopOptions, TeleopSource};
use rio_core::codec::encode_payload;
use rio_core::executor::ExecutorConfig;
use rio_core::kinematics::{fk, jacobian, solve_ik, ArmModel, DEFAULT_DAMPING, DEFAULT_LINKS};
use rio_core::morphology::observation_keys;
use rio_core::step::StepRecord;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn latency_statistic() -> Outcome {
    let t = Instant::now();
    let mut worst = String::new();
    let mut exact = 0;
    for ((name, rtts), (_, kept, latency)) in lists().into_iter().zip(ORACLE) {
        let r = report_from_rtts("synthetic", DEFAULT_PAYLOAD_BYTES, &rtts).map_err(|e| e.to_string())?;
        if r.kept == kept && r.latency_ms.to_bits() == latency.to_bits() {
            exact += 1;
        } else {
            worst = format!("; {name}: kept {} latency {} vs {kept} {latency}", r.kept, r.latency_ms);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(exact == 10 && secs < 1.0, format!("{exact}/10 lists exact, {secs:.3} s{worst}"))
}

fn local_backend_band() -> Outcome {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, limit) in [("inproc", 2.0), ("shm", 2.0), ("tcp", 10.0)] {
        let kind = match name {
            "shm" => BackendKind::Shm { namespace: format!("acc-{}", std::process::id()) },
            other => BackendKind::parse(other).unwrap(),
        };
        let r = latency_bench(&kind, DEFAULT_PAYLOAD_BYTES, DEFAULT_PASSES).map_err(|e| e.to_string())?;
        ok &= r.latency_ms < limit;
        parts.push(format!("{name} {:.4} ms (< {limit})", r.latency_ms));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(ok && secs < 30.0, format!("{}, {secs:.1} s", parts.join(", ")))
}

/// Path of the node-kernel test binary, built if needed.
fn node_suite_binary() -> Result<String, String> {
    let out = Command::new(env!("CARGO"))
        .args(["test", "-p", "rio", "--test", "node", "--no-run", "--message-format=json", "--quiet"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .map_err(|e| e.to_string())?;
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|v| v["target"]["name"] == "node")
        .find_map(|v| v["executable"].as_str().map(str::to_string))
        .ok_or_else(|| format!("could not build the node suite: {}", String::from_utf8_lossy(&out.stderr)))
}

fn backend_substitutability() -> Outcome {
    let t = Instant::now();
    let mut conformance = BTreeMap::new();
    for kind in [
        BackendKind::Inproc,
        BackendKind::Shm { namespace: format!("acc-conf-{}", std::process::id()) },
        BackendKind::Tcp { host: "127.0.0.1".into(), port: 0 },
    ] {
        let r = conformance_suite(&kind).map_err(|e| e.to_string())?;
        let results: Vec<(String, bool)> = r.properties.iter().map(|p| (p.name.to_string(), p.passed)).collect();
        conformance.insert(kind.name(), results);
    }
    let conf_ok = conformance.values().all(|r| r == &conformance["inproc"] && r.iter().all(|(_, p)| *p));
    let properties = conformance["inproc"].len();

    let exe = node_suite_binary()?;
    let out = Command::new(&exe).arg("--test-threads=1").output().map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    // per backend: test name -> outcome
    let mut per: BTreeMap<&str, BTreeMap<String, String>> = BTreeMap::new();
    let mut shared = 0;
    for line in text.lines().filter_map(|l| l.strip_prefix("test ")) {
        let Some((name, outcome)) = line.split_once(" ... ") else { continue };
        match name.split_once("::") {
            Some((b @ ("inproc" | "shm" | "tcp"), test)) => {
                per.entry(b).or_default().insert(test.to_string(), outcome.to_string());
            }
            _ => shared += usize::from(outcome == "ok"),
        }
    }
    let node_ok = out.status.success()
        && per.len() == 3
        && per.values().all(|m| m.keys().eq(per["inproc"].keys()) && m.values().all(|o| o == "ok"));
    let per_backend = per.get("inproc").map_or(0, |m| m.len());
    let secs = t.elapsed().as_secs_f64();
    ensure(
        conf_ok && node_ok && secs < 120.0,
        format!(
            "conformance {properties} properties identical on 3 backends: {conf_ok}; node suite {per_backend} tests x 3 backends identical: {node_ok} (+{shared} backend-free); {secs:.1} s"
        ),
    )
}

fn latency_rollout(trigger: f64, mode: Mode) -> Result<rio::policy::DeployReport, String> {
    let mut st = build_station(&config("single_arm.toml", None)).map_err(|e| e.to_string())?;
    let opts = DeployOptions {
        policy: PolicyKind::Latency,
        mode,
        executor: ExecutorConfig::new(15.0, 16, trigger),
        duration: Duration::from_secs(30),
        ..DeployOptions::default()
    };
    let (report, _) = deploy(&mut st, &opts).map_err(|e| e.to_string())?;
    Ok(report)
}

fn async_masking(half: &rio::policy::DeployReport, full: &rio::policy::DeployReport) -> Outcome {
    let (h, f) = (&half.rollout, &full.rollout);
    let boundaries = f.chunks.saturating_sub(1);
    ensure(
        h.starved == 0 && boundaries > 0 && f.starved_boundaries >= boundaries && f.starved >= boundaries,
        format!(
            "trigger 0.5: {} ticks, {} starved; trigger 1.0: {} chunks, {} of {} boundaries starved ({} starved ticks)",
            h.ticks, h.starved, f.chunks, f.starved_boundaries, boundaries, f.starved
        ),
    )
}

fn async_vs_sync(asy: &rio::policy::DeployReport, sync: &rio::policy::DeployReport) -> Outcome {
    let (a, s) = (asy.rollout.median_latency_ms, sync.rollout.median_latency_ms);
    ensure(a < s, format!("async median obs age {a:.1} ms < sync median obs->action {s:.1} ms"))
}

fn expected_keys(st: &RunningStation) -> BTreeSet<String> {
    let cams: Vec<&str> =
        st.roles().iter().filter(|(_, k)| **k == ComponentKind::Camera).map(|(r, _)| r.as_str()).collect();
    observation_keys(st.env_ref().kind(), &cams).into_iter().collect()
}

fn config_only_reconfiguration() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for file in CONFIGS {
        let cfg = rio::station::StationConfig::load(config_path(file)).map_err(|e| e.to_string())?;
        let mut st = build_station(&cfg).map_err(|e| e.to_string())?;
        let want = expected_keys(&st);
        let opts = TeleopOptions { duration: Duration::from_secs(2), ..TeleopOptions::default() };
        let t = run_teleop(&mut st, &opts, TeleopSource::Scripted, |_| Ok(())).map_err(|e| e.to_string())?;
        let teleop_keys: BTreeSet<String> = t.observation_keys.into_iter().collect();
        drop(st);
        let mut st = build_station(&cfg).map_err(|e| e.to_string())?;
        let opts = DeployOptions { duration: Duration::from_secs(3), ..DeployOptions::default() };
        let (d, _) = deploy(&mut st, &opts).map_err(|e| e.to_string())?;
        let deploy_keys: BTreeSet<String> = d.observation_keys.into_iter().collect();
        let good = t.steps > 0 && d.rollout.ticks > 0 && teleop_keys == want && deploy_keys == want;
        ok &= good;
        parts.push(format!(
            "{file}: teleop {} steps, deploy {} ticks, {} keys match schema: {good}",
            t.steps,
            d.rollout.ticks,
            want.len()
        ));
    }
    ensure(ok, parts.join("; "))
}

fn same_bytes(a: &StepRecord, b: &StepRecord, m: &EpisodeMeta) -> bool {
    a.timestep == b.timestep
        && a.instruction == b.instruction
        && a.metadata == b.metadata
        && encode_payload(&m.observation, &a.observation).ok() == encode_payload(&m.observation, &b.observation).ok()
        && encode_payload(&m.action, &a.action).ok() == encode_payload(&m.action, &b.action).ok()
}

fn recorder_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut st = build_station(&config("single_arm.toml", None)).map_err(|e| e.to_string())?;
    let opts = TeleopOptions { rate_hz: 60.0, max_steps: Some(100), instruction: "wave".into(), ..TeleopOptions::default() };
    let single_dir = dir.path().join("single");
    std::fs::create_dir_all(&single_dir).map_err(|e| e.to_string())?;
    let path = recorder::next_episode_path(&single_dir).map_err(|e| e.to_string())?;
    let meta = EpisodeMeta::for_env(st.env_ref(), "wave");
    let mut w = EpisodeWriter::create(&path, meta.clone()).map_err(|e| e.to_string())?;
    let mut seen = Vec::new();
    let report = run_teleop(&mut st, &opts, TeleopSource::Scripted, |s| {
        seen.push(s.clone());
        w.record_step(s).map_err(|e| e.to_string())
    })
    .map_err(|e| e.to_string())?;
    w.finalize().map_err(|e| e.to_string())?;
    drop(st);
    let ep = load(&path).map_err(|e| e.to_string())?;
    let exact = ep.steps.len() == seen.len() && seen.iter().zip(&ep.steps).all(|(a, b)| same_bytes(a, b, &meta));
    let contiguous = ep.steps.iter().enumerate().all(|(i, s)| s.timestep == i as u64);

    let mut bi = build_station(&config("bimanual.toml", None)).map_err(|e| e.to_string())?;
    let bi_dir = dir.path().join("bimanual");
    let bopts = TeleopOptions { rate_hz: 60.0, max_steps: Some(40), ..TeleopOptions::default() };
    recorder::record(&mut bi, &bopts, TeleopSource::Scripted, &bi_dir).map_err(|e| e.to_string())?;
    drop(bi);
    let a = export(&recorder::episode_paths(&single_dir).map_err(|e| e.to_string())?, dir.path().join("flat_single"))
        .map_err(|e| e.to_string())?;
    let b = export(&recorder::episode_paths(&bi_dir).map_err(|e| e.to_string())?, dir.path().join("flat_bi"))
        .map_err(|e| e.to_string())?;
    let out = dir.path().join("mixed");
    let mixed = mix(&[dir.path().join("flat_single"), dir.path().join("flat_bi")], &out).map_err(|e| e.to_string())?;
    let rows = read_rows(&out).map_err(|e| e.to_string())?;
    let tagged = |e: &str| rows.iter().filter(|r| r[EMBODIMENT_COLUMN] == e).count() as u64;
    let (ts, tb) = (tagged("single_arm"), tagged("bimanual"));
    let mix_ok = mixed.rows == a.rows + b.rows && rows.len() as u64 == mixed.rows && ts == a.rows && tb == b.rows;
    ensure(
        report.steps == 100 && exact && contiguous && mix_ok,
        format!(
            "{} steps at {:.1} Hz, bit-exact: {exact}, no dropped steps: {contiguous}; mix rows {} = {} + {} (tags {ts} single_arm, {tb} bimanual)",
            ep.steps.len(),
            report.achieved_rate_hz,
            mixed.rows,
            a.rows,
            b.rows
        ),
    )
}

fn simulation_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pi = std::f64::consts::PI;
    let h = 1e-6;
    let mut worst_jac: f64 = 0.0;
    for _ in 0..100 {
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-pi..pi)).collect();
        let jac = jacobian(&DEFAULT_LINKS, &q);
        for col in 0..3 {
            let (mut qp, mut qm) = (q.clone(), q.clone());
            qp[col] += h;
            qm[col] -= h;
            let (a, b) = (fk(&DEFAULT_LINKS, &qp), fk(&DEFAULT_LINKS, &qm));
            let fd = [(a.x - b.x) / (2.0 * h), (a.y - b.y) / (2.0 * h), (a.theta - b.theta) / (2.0 * h)];
            for (row, d) in fd.iter().enumerate() {
                worst_jac = worst_jac.max((jac.get(row, col) - d).abs());
            }
        }
    }
    let model = ArmModel::default();
    let mut worst_ik: f64 = 0.0;
    let mut max_iters = 0;
    let mut solved = 0;
    while solved < 100 {
        let goal: Vec<f64> = (0..3).map(|_| rng.random_range(-pi..pi)).collect();
        let target = model.fk(&goal);
        if target.x.hypot(target.y) > 0.9 * model.reach() {
            continue;
        }
        let start: Vec<f64> = (0..3).map(|_| rng.random_range(-pi..pi)).collect();
        let sol = solve_ik(&model, &start, target, DEFAULT_DAMPING, 200, 1e-6);
        worst_ik = worst_ik.max(sol.error);
        max_iters = max_iters.max(sol.iterations);
        solved += 1;
    }
    let mut st = build_station(&config("single_arm.toml", None)).map_err(|e| e.to_string())?;
    let opts = TeleopOptions { duration: Duration::from_secs(5), ..TeleopOptions::default() };
    let t = run_teleop(&mut st, &opts, TeleopSource::Scripted, |_| Ok(())).map_err(|e| e.to_string())?;
    ensure(
        worst_jac < 1e-6 && worst_ik < 1e-6 && t.ee_rms_error_m < 0.02,
        format!(
            "jacobian max |analytic - central diff| {worst_jac:.2e} over 100 configs; ik max error {worst_ik:.2e} (<= {max_iters} iterations) over 100 targets; teleop ee rms {:.4} m",
            t.ee_rms_error_m
        ),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {name} [{:.1} s]: {detail}", t.elapsed().as_secs_f64());
    outcome.is_ok()
}

fn main() -> ExitCode {
    // libtest flags passed through by cargo are ignored; a name filter that
    // matches nothing here skips the suite
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    println!("acceptance criteria");
    let mut ok = true;
    ok &= run("latency-statistic", latency_statistic);
    ok &= run("local-backend-latency-band", local_backend_band);
    ok &= run("backend-substitutability", backend_substitutability);
    let rollouts = (|| -> Result<_, String> {
        Ok((
            latency_rollout(0.5, Mode::Async)?,
            latency_rollout(1.0, Mode::Async)?,
            latency_rollout(0.5, Mode::Sync)?,
        ))
    })();
    match &rollouts {
        Ok((half, full, sync)) => {
            ok &= run("async-masks-inference-latency", || async_masking(half, full));
            ok &= run("async-beats-sync", || async_vs_sync(half, sync));
        }
        Err(e) => {
            ok &= run("async-masks-inference-latency", || Err(e.clone()));
            ok &= run("async-beats-sync", || Err(e.clone()));
        }
    }
    ok &= run("config-only-reconfiguration", config_only_reconfiguration);
    ok &= run("recorder-fidelity", recorder_fidelity);
    ok &= run("simulation-numerics", simulation_numerics);
    println!("acceptance: {}", if ok { "all criteria pass" } else { "some criteria FAILED" });
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
