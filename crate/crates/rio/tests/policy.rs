mod common;

use std::time::{Duration, Instant};

use common::{config, timing_lock, CONFIGS};
use rio::middleware::{open_backend, BackendKind, MiddlewareError};
use rio::policy::{
    deploy, read_trace, run_async_executor, run_sync_baseline, serve_policy, ActionChunk, DeployOptions, LatencyPolicy,
    Mode, Policy, PolicyError, PolicyKind, ScriptedPolicy, FORWARD_PASS_MS, INFER,
};
use rio::station::build_station;
use rio_core::executor::ExecutorConfig;
use rio_core::morphology::{ActionLayout, EmbodimentKind};
use rio_core::schema::payload;
use rio_core::{DType, Field, SchemaDescriptor, Value};

fn layout() -> ActionLayout {
    ActionLayout::from_segments(vec![("arm".into(), 3), ("gripper".into(), 1)])
}

fn scripted(h: usize) -> ScriptedPolicy {
    ScriptedPolicy::new(layout(), vec!["joint_pos".into()], h, 15.0)
}

fn obs_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![Field::new("timestamp_ns", DType::I64, &[]), Field::new("joint_pos", DType::F64, &[3])]).unwrap()
}

fn obs_args(base: i64) -> rio_core::Payload {
    payload([
        ("timestamp_ns", Value::i64(5)),
        ("joint_pos", Value::f64s(vec![0.0; 3])),
        ("base_timestep", Value::i64(base)),
    ])
}

#[test]
fn node_reply_equals_direct_call() {
    let backend = open_backend(&BackendKind::Inproc).unwrap();
    let (_h, c) = serve_policy(scripted(16), "policy", &obs_schema(), &backend).unwrap();
    let mut proxy = c.connect().unwrap();
    let reply = ActionChunk::from_payload(&proxy.call(INFER, &obs_args(40)).unwrap()).unwrap();
    let mut direct = scripted(16);
    let input = direct.convert_obs(&obs_args(40)).unwrap();
    let want = direct.infer(&input, 40).unwrap();
    assert_eq!(reply.actions, want.actions);
    assert_eq!(reply.base_timestep, 40);
    assert_eq!(reply.actions.len(), 16);
    assert_eq!(reply.actions[0].len(), 4);
}

#[test]
fn missing_key_is_policy_error() {
    let p = scripted(4);
    let obs = payload([("timestamp_ns", Value::i64(0))]);
    assert_eq!(p.convert_obs(&obs), Err(PolicyError::MissingKey("joint_pos".into())));

    let backend = open_backend(&BackendKind::Inproc).unwrap();
    let narrow = SchemaDescriptor::new(vec![Field::new("timestamp_ns", DType::I64, &[])]).unwrap();
    let (_h, c) = serve_policy(scripted(4), "policy", &narrow, &backend).unwrap();
    let mut proxy = c.connect().unwrap();
    let args = payload([("timestamp_ns", Value::i64(0)), ("base_timestep", Value::i64(0))]);
    match proxy.call(INFER, &args) {
        Err(MiddlewareError::RemoteError(m)) => assert!(m.contains("joint_pos"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_params_rejected() {
    let mut p = scripted(4);
    let params = serde_json::json!({"bogus": 1}).as_object().unwrap().clone();
    assert!(matches!(p.init(&params), Err(PolicyError::BadParam(_))));
    let mut l = LatencyPolicy::forward_pass(scripted(4));
    let params = serde_json::json!({"latency_ms": 5, "amplitude": 0.1}).as_object().unwrap().clone();
    l.init(&params).unwrap();
}

#[test]
fn latency_policy_reply_takes_forward_pass() {
    let _g = timing_lock();
    for kind in ["inproc", "shm", "tcp"] {
        let backend = common::open(kind, "lat");
        let (_h, c) = serve_policy(LatencyPolicy::forward_pass(scripted(8)), "policy", &obs_schema(), &backend).unwrap();
        let mut proxy = c.connect().unwrap();
        for _ in 0..3 {
            let t = Instant::now();
            proxy.call(INFER, &obs_args(0)).unwrap();
            let ms = t.elapsed().as_secs_f64() * 1e3;
            assert!(ms >= FORWARD_PASS_MS, "{kind}: {ms} ms");
        }
    }
}

#[test]
fn concurrent_requests_are_served_in_order() {
    let backend = open_backend(&BackendKind::Inproc).unwrap();
    let (_h, c) = serve_policy(scripted(2), "policy", &obs_schema(), &backend).unwrap();
    let mut a = c.connect().unwrap();
    let mut b = c.connect().unwrap();
    let ia = a.send(INFER, &obs_args(1)).unwrap();
    let ib = b.send(INFER, &obs_args(2)).unwrap();
    let rb = ActionChunk::from_payload(&b.wait_reply(ib, INFER, Duration::from_secs(2)).unwrap()).unwrap();
    let ra = ActionChunk::from_payload(&a.wait_reply(ia, INFER, Duration::from_secs(2)).unwrap()).unwrap();
    assert_eq!((ra.base_timestep, rb.base_timestep), (1, 2));
    assert!(ra.issued_ts <= rb.issued_ts);
}

fn async_run(trigger: f64, blend: usize, secs: u64) -> rio::policy::RolloutTrace {
    let mut st = build_station(&config("single_arm.toml", None)).unwrap();
    let schema = st.env_ref().observation_schema().clone();
    let policy = LatencyPolicy::forward_pass(ScriptedPolicy::for_env(st.env_ref(), 16, 15.0));
    let backend = st.backend().clone();
    let (h, c) = serve_policy(policy, "policy", &schema, &backend).unwrap();
    st.adopt(h);
    let mut cfg = ExecutorConfig::new(15.0, 16, trigger);
    cfg.blend_steps = blend;
    run_async_executor(st.env(), &c, cfg, Duration::from_secs(secs)).unwrap()
}

#[test]
fn half_trigger_never_starves_and_follows_the_script() {
    let _g = timing_lock();
    let trace = async_run(0.5, 0, 6);
    let s = trace.summary();
    assert_eq!(s.ticks, 90);
    assert_eq!(s.starved, 0, "{s:?}");
    assert!(s.chunks >= 5, "{s:?}");
    let reference = ScriptedPolicy::new(layout(), vec![], 16, 15.0);
    for r in &trace.records {
        // base timestep of each chunk is the tick it starts at
        assert_eq!(r.action.as_deref(), Some(&reference.action_at(r.tick)[..]), "tick {}", r.tick);
    }
    let mut last = 0;
    for r in &trace.records {
        let c = r.chunk_id.unwrap();
        assert!(c >= last);
        last = c;
    }
}

#[test]
fn full_trigger_starves_at_every_boundary() {
    let _g = timing_lock();
    let s = async_run(1.0, 4, 6).summary();
    assert!(s.chunks >= 3, "{s:?}");
    assert_eq!(s.starved_boundaries, s.chunks - 1, "{s:?}");
    assert!(s.starved >= s.chunks - 1);
}

#[test]
fn async_obs_age_beats_sync_latency() {
    let _g = timing_lock();
    let async_s = async_run(0.5, 4, 6).summary();

    let mut st = build_station(&config("single_arm.toml", None)).unwrap();
    let schema = st.env_ref().observation_schema().clone();
    let policy = LatencyPolicy::forward_pass(ScriptedPolicy::for_env(st.env_ref(), 16, 15.0));
    let backend = st.backend().clone();
    let (h, c) = serve_policy(policy, "policy", &schema, &backend).unwrap();
    st.adopt(h);
    let sync = run_sync_baseline(st.env(), &c, 15.0, Duration::from_secs(4)).unwrap();
    let lat = sync.latencies_ms();
    assert!(lat.iter().all(|l| *l >= FORWARD_PASS_MS), "{lat:?}");
    let sync_s = sync.summary();
    assert!(async_s.median_latency_ms < sync_s.median_latency_ms, "async {async_s:?} sync {sync_s:?}");
}

#[test]
fn zero_latency_sync_is_one_tick() {
    let _g = timing_lock();
    let mut st = build_station(&config("single_arm.toml", None)).unwrap();
    let schema = st.env_ref().observation_schema().clone();
    let backend = st.backend().clone();
    let (h, c) = serve_policy(ScriptedPolicy::for_env(st.env_ref(), 4, 15.0), "policy", &schema, &backend).unwrap();
    st.adopt(h);
    let lat = run_sync_baseline(st.env(), &c, 15.0, Duration::from_secs(2)).unwrap().latencies_ms();
    // one control period plus the age of the arm sample
    assert!(lat.iter().all(|l| *l < 66.7 + 15.0), "{lat:?}");
}

#[test]
fn deploy_runs_on_every_config_and_policy() {
    let _g = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    for file in CONFIGS {
        for policy in [PolicyKind::Scripted, PolicyKind::Latency] {
            let mut st = build_station(&config(file, None)).unwrap();
            let opts = DeployOptions { policy, duration: Duration::from_secs(2), ..DeployOptions::default() };
            let (report, trace) = deploy(&mut st, &opts).unwrap();
            assert_eq!(report.rollout.ticks, 30);
            assert_eq!(report.rollout.starved, 0, "{file} {policy:?}");
            assert_eq!(report.observation_keys, st.env_ref().observation_keys());
            let want = if file == "bimanual.toml" { EmbodimentKind::Bimanual } else { EmbodimentKind::SingleArm };
            assert_eq!(report.embodiment, want.name());
            let path = dir.path().join("t.jsonl");
            trace.write_jsonl(&path).unwrap();
            assert_eq!(read_trace(&path).unwrap(), trace.records);
        }
    }
}

#[test]
fn sync_mode_deploys_too() {
    let _g = timing_lock();
    let mut st = build_station(&config("bimanual.toml", None)).unwrap();
    let opts = DeployOptions { mode: Mode::Sync, duration: Duration::from_secs(1), ..DeployOptions::default() };
    let (report, _) = deploy(&mut st, &opts).unwrap();
    assert!(report.rollout.ticks >= 5);
}
