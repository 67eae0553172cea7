mod common;

use std::time::Duration;

use common::{config, timing_lock, CONFIGS};
use rio::station::{build_station, StationConfig, StationError};
use rio::teleop::{run_teleop, TeleopOptions, TeleopSource};
use rio_core::morphology::{self, EmbodimentKind};
use rio_core::Value;

#[test]
fn single_arm_builds_three_proxies() {
    let _g = timing_lock();
    let st = build_station(&config("single_arm.toml", None)).unwrap();
    assert_eq!(st.handles().len(), 3);
    assert_eq!(st.roles().len(), 3);
    assert_eq!(st.env_ref().kind(), EmbodimentKind::SingleArm);
    assert_eq!(st.topics(), ["arm/state", "gripper/state", "wrist_camera/state"]);
}

#[test]
fn bimanual_builds_six_proxies() {
    let _g = timing_lock();
    let st = build_station(&config("bimanual.toml", None)).unwrap();
    assert_eq!(st.handles().len(), 6);
    assert_eq!(st.env_ref().kind(), EmbodimentKind::Bimanual);
    assert_eq!(st.env_ref().arm_roles(), ["arm", "arm2"]);
}

#[test]
fn unregistered_spec_is_unknown_role() {
    let cfg = StationConfig::parse(
        "name = \"x\"\nmiddleware = \"inproc\"\n[components.arm]\nspec = \"sim_arm\"\n[components.lidar]\nspec = \"velodyne\"\n",
    )
    .unwrap();
    match build_station(&cfg) {
        Err(StationError::UnknownRole { role, spec }) => assert_eq!((role.as_str(), spec.as_str()), ("lidar", "velodyne")),
        other => panic!("expected UnknownRole, got {:?}", other.err()),
    }
}

#[test]
fn middleware_accepts_table_form() {
    let cfg = StationConfig::parse(
        "name = \"x\"\n[middleware]\nkind = \"tcp\"\nport = 0\n[components.arm]\nspec = \"sim_arm\"\n",
    )
    .unwrap();
    assert!(matches!(cfg.middleware, rio::middleware::BackendKind::Tcp { .. }));
}

#[test]
fn arm_without_gripper_reports_zero_width() {
    let _g = timing_lock();
    let cfg = StationConfig::parse("name = \"x\"\nmiddleware = \"inproc\"\n[components.arm]\nspec = \"sim_arm\"\n").unwrap();
    let mut st = build_station(&cfg).unwrap();
    let obs = st.env().get_state().unwrap();
    assert_eq!(obs["gripper_width"].as_f64(), Some(0.0));
    assert_eq!(st.env_ref().action_layout().dim(), 3);
}

#[test]
fn gripper_alone_has_no_embodiment() {
    let cfg = StationConfig::parse("name = \"x\"\nmiddleware = \"inproc\"\n[components.gripper]\nspec = \"sim_gripper\"\n").unwrap();
    assert!(matches!(build_station(&cfg), Err(StationError::Morphology(_))));
}

#[test]
fn observation_keys_match_morphology_table() {
    let _g = timing_lock();
    let cases: [(&str, EmbodimentKind, &[&str]); 2] = [
        ("single_arm.toml", EmbodimentKind::SingleArm, &["wrist_camera"]),
        ("bimanual.toml", EmbodimentKind::Bimanual, &["left_camera", "right_camera"]),
    ];
    for (file, kind, cams) in cases {
        let mut st = build_station(&config(file, None)).unwrap();
        let obs = st.env().get_state().unwrap();
        let keys: Vec<String> = obs.keys().cloned().collect();
        assert_eq!(keys, morphology::observation_keys(kind, cams), "{file}");
        st.env_ref().observation_schema().check(&obs).unwrap();
    }
}

#[test]
fn reset_returns_home_zeros() {
    let _g = timing_lock();
    let mut st = build_station(&config("single_arm.toml", None)).unwrap();
    let env = st.env();
    env.move_to(&[("arm".into(), vec![0.2, -0.1, 0.3])]).unwrap();
    let obs = env.reset().unwrap();
    assert_eq!(obs["joint_pos"].as_f64s(), Some(&[0.0, 0.0, 0.0][..]));
    assert_eq!(env.timestep(), 0);
}

#[test]
fn wrong_action_arity_is_rejected() {
    let _g = timing_lock();
    let mut st = build_station(&config("single_arm.toml", None)).unwrap();
    let err = st.env().step(&[0.0; 3]).unwrap_err();
    assert!(matches!(err, StationError::Morphology(_)), "{err}");
    let rec = st.env().step(&[0.1, 0.0, 0.0, 0.02]).unwrap();
    assert_eq!(rec.timestep, 0);
    assert_eq!(rec.action["arm"], Value::f64s(vec![0.1, 0.0, 0.0]));
    assert_eq!(rec.metadata["embodiment"], "single_arm");
}

#[test]
fn scripted_teleop_tracks_on_both_configs() {
    let _g = timing_lock();
    for file in CONFIGS {
        let mut st = build_station(&config(file, None)).unwrap();
        let opts = TeleopOptions { duration: Duration::from_secs(2), ..TeleopOptions::default() };
        let mut n = 0;
        let report = run_teleop(&mut st, &opts, TeleopSource::Scripted, |_| {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(report.steps, n);
        assert!(report.steps >= 95, "{file}: {} steps", report.steps);
        assert!(report.ee_rms_error_m < 0.02, "{file}: rms {}", report.ee_rms_error_m);
        assert_eq!(report.observation_keys, st.env_ref().observation_keys());
    }
}

#[test]
fn teleop_runs_on_shm_and_tcp() {
    let _g = timing_lock();
    for backend in ["shm", "tcp"] {
        let mut st = build_station(&config("single_arm.toml", Some((backend, "teleop")))).unwrap();
        let opts = TeleopOptions { max_steps: Some(25), ..TeleopOptions::default() };
        let report = run_teleop(&mut st, &opts, TeleopSource::Scripted, |_| Ok(())).unwrap();
        assert_eq!(report.steps, 25, "{backend}");
        assert!(report.ee_rms_error_m < 0.02, "{backend}: rms {}", report.ee_rms_error_m);
    }
}
