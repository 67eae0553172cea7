mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use common::{config, timing_lock};
use crossbeam_channel::unbounded;
use rio::gateway::{
    close, parse_command, serve_bridge, static_path, BridgeMessage, Gateway, GatewayError, GatewayOptions, MessageType,
    SessionOptions,
};
use rio::recorder::load;
use rio::station::{build_station, RunningStation};
use rio::teleop::{ready_pose, TeleopCommand, TeleopOptions};
use rio_core::kinematics::{Pose2D, DEFAULT_DAMPING};
use rio_core::teleop::ee_delta_to_joints;
use serde_json::{json, Value as Json};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn station() -> RunningStation {
    build_station(&config("single_arm.toml", None)).unwrap()
}

fn gateway(st: &RunningStation) -> Gateway {
    Gateway::serve(st, GatewayOptions { port: 0, ..GatewayOptions::default() }).unwrap()
}

fn client(gw: &Gateway) -> Client {
    let (ws, _) = tungstenite::connect(gw.url()).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
    }
    ws
}

struct Peer {
    ws: Client,
    seq: u64,
}

impl Peer {
    fn new(gw: &Gateway) -> Self {
        Peer { ws: client(gw), seq: 0 }
    }

    fn send(&mut self, kind: &str, topic: &str, body: Json) -> u64 {
        self.seq += 1;
        let text = json!({ "type": kind, "topic": topic, "seq": self.seq, "body": body }).to_string();
        self.ws.send(Message::text(text)).unwrap();
        self.seq
    }

    /// Next message of `kind`, skipping others.
    fn expect(&mut self, kind: MessageType, timeout: Duration) -> BridgeMessage {
        let end = Instant::now() + timeout;
        while Instant::now() < end {
            if let Some(m) = self.next() {
                if m.kind == kind {
                    return m;
                }
            }
        }
        panic!("no {kind:?} message within {timeout:?}");
    }

    fn next(&mut self) -> Option<BridgeMessage> {
        match self.ws.read() {
            Ok(Message::Text(t)) => Some(BridgeMessage::parse(t.as_str()).unwrap()),
            Ok(_) => None,
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                None
            }
            Err(e) => panic!("read failed: {e}"),
        }
    }

    /// Reads until the server closes; returns the close code.
    fn close_code(&mut self) -> u16 {
        let end = Instant::now() + Duration::from_secs(3);
        while Instant::now() < end {
            match self.ws.read() {
                Ok(Message::Close(Some(f))) => return u16::from(f.code),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => panic!("closed without a close frame: {e}"),
            }
        }
        panic!("server did not close");
    }
}

#[test]
fn hello_lists_station_and_topics() {
    let st = station();
    let gw = gateway(&st);
    let mut p = Peer::new(&gw);
    p.send("hello", "", json!({}));
    let h = p.expect(MessageType::Hello, Duration::from_secs(2));
    assert_eq!(h.body["station"], "sim_single_arm");
    assert_eq!(h.body["embodiment"], json!(st.env_ref().kind()));
    let topics: Vec<&str> = h.body["topics"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(topics, ["arm/state", "gripper/state", "wrist_camera/state"]);
    assert_eq!(h.body["protocol"], 1);
    assert_eq!(h.body["recording_available"], false);
}

#[test]
fn state_stream_is_downsampled_with_monotone_seq_and_source_ts() {
    let _g = timing_lock();
    let st = station();
    let gw = gateway(&st);
    let mut p = Peer::new(&gw);
    let sub = p.send("subscribe", "arm/state", json!({}));
    let ack = p.expect(MessageType::Subscribe, Duration::from_secs(2));
    assert_eq!(ack.body["ack"], sub);
    // the arm publishes at 100 Hz; the bridge caps each topic at 30 Hz
    let start = Instant::now();
    let mut states = Vec::new();
    let mut last_seq = ack.seq;
    while start.elapsed() < Duration::from_secs(1) {
        if let Some(m) = p.next() {
            assert!(m.seq > last_seq);
            last_seq = m.seq;
            if m.kind == MessageType::State {
                states.push(m);
            }
        }
    }
    assert!((28..=32).contains(&states.len()), "{} state messages", states.len());
    let ts: Vec<u64> = states.iter().map(|m| m.body["ts"].as_u64().unwrap()).collect();
    assert!(ts.windows(2).all(|w| w[0] < w[1]));
    assert!(states.iter().all(|m| m.topic == "arm/state" && m.body["values"]["joint_pos"].is_array()));
}

#[test]
fn ee_delta_command_moves_the_arm_within_200ms() {
    let _g = timing_lock();
    let mut st = station();
    let model = st.env_ref().arm_model("arm").unwrap().clone();
    st.env().move_to(&[("arm".into(), ready_pose(model.n_joints()))]).unwrap();
    let q0 = st.env().client("arm").unwrap().latest().unwrap().payload["joint_pos"].as_f64s().unwrap().to_vec();
    let before = model.fk(&q0);
    // the arm takes one damped least-squares step toward the delta
    let delta = Pose2D::new(0.01, 0.0, 0.0);
    let want = model.fk(&ee_delta_to_joints(&q0, delta, &model, DEFAULT_DAMPING));
    assert!(want.x > before.x);
    let gw = gateway(&st);
    let mut p = Peer::new(&gw);
    let t0 = Instant::now();
    let seq = p.send("command", "arm", json!({ "ee_delta": [0.01, 0.0, 0.0] }));
    let ack = p.expect(MessageType::Command, Duration::from_secs(2));
    assert_eq!(ack.body["ack"], seq);
    loop {
        let now = st.env().ee_pose("arm").unwrap();
        if (now.x - want.x).abs() < 1e-6 && (now.y - want.y).abs() < 1e-6 {
            break;
        }
        assert!(t0.elapsed() < Duration::from_millis(200), "ee at {now:?}, expected {want:?}");
        std::thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn bad_requests_get_errors_and_keep_the_connection() {
    let st = station();
    let gw = gateway(&st);
    let mut p = Peer::new(&gw);
    let s1 = p.send("subscribe", "nope/state", json!({}));
    let e = p.expect(MessageType::Error, Duration::from_secs(2));
    assert_eq!(e.body["ack"], s1);
    let s2 = p.send("command", "arm", json!({ "ee_delta": [1.0] }));
    assert_eq!(p.expect(MessageType::Error, Duration::from_secs(2)).body["ack"], s2);
    let s3 = p.send("record_ctl", "", json!({ "action": "start" }));
    assert_eq!(p.expect(MessageType::Error, Duration::from_secs(2)).body["ack"], s3);
    let s4 = p.send("command", "arm", json!({ "ee_delta": [0.0, 0.0, 0.0], "arm": "elbow" }));
    assert_eq!(p.expect(MessageType::Error, Duration::from_secs(2)).body["ack"], s4);
    p.send("hello", "", json!({}));
    p.expect(MessageType::Hello, Duration::from_secs(2));
}

#[test]
fn protocol_violations_close_the_connection() {
    let st = station();
    let gw = gateway(&st);

    let mut p = Peer::new(&gw);
    p.ws.send(Message::text("{not json")).unwrap();
    p.expect(MessageType::Error, Duration::from_secs(2));
    assert_eq!(p.close_code(), close::PROTOCOL);

    let mut p = Peer::new(&gw);
    p.send("hello", "", json!({}));
    p.seq = 0;
    p.send("hello", "", json!({}));
    assert_eq!(p.close_code(), close::PROTOCOL);

    let mut p = Peer::new(&gw);
    p.send("state", "arm/state", json!({}));
    assert_eq!(p.close_code(), close::PROTOCOL);

    let mut p = Peer::new(&gw);
    p.ws.send(Message::binary(vec![1u8, 2, 3])).unwrap();
    assert_eq!(p.close_code(), close::UNSUPPORTED);
}

#[test]
fn stats_arrive_at_two_hertz() {
    let _g = timing_lock();
    let st = station();
    let gw = gateway(&st);
    gw.publish_summary(json!({ "latency_ms": 0.5 }));
    let mut p = Peer::new(&gw);
    let start = Instant::now();
    let mut stats = Vec::new();
    while start.elapsed() < Duration::from_millis(2100) {
        if let Some(m) = p.next() {
            if m.kind == MessageType::Stats {
                stats.push(m);
            }
        }
    }
    assert!((4..=6).contains(&stats.len()), "{} stats messages", stats.len());
    let last = stats.last().unwrap();
    assert_eq!(last.body["summary"]["latency_ms"], 0.5);
    let nodes: Vec<&str> = last.body["nodes"].as_array().unwrap().iter().map(|n| n["name"].as_str().unwrap()).collect();
    assert!(nodes.contains(&"arm"));
}

#[test]
fn address_in_use_is_reported() {
    let st = station();
    let gw = gateway(&st);
    let port = gw.local_addr().port();
    assert!(matches!(serve_bridge(&st, port), Err(GatewayError::AddressInUse(_))));
}

#[test]
fn stalled_console_does_not_slow_the_station() {
    let _g = timing_lock();
    let st = station();
    let arm = st.handles().iter().find(|h| h.name() == "arm").unwrap().stats().clone();
    let window = Duration::from_secs(2);
    let rate = || {
        let t0 = Instant::now();
        let k0 = arm.ticks.load(Ordering::Acquire);
        std::thread::sleep(window);
        (arm.ticks.load(Ordering::Acquire) - k0) as f64 / t0.elapsed().as_secs_f64()
    };
    let baseline = rate();
    let gw = gateway(&st);
    let mut p = Peer::new(&gw);
    for t in ["arm/state", "gripper/state", "wrist_camera/state"] {
        p.send("subscribe", t, json!({}));
    }
    // never read again
    std::thread::sleep(Duration::from_millis(300));
    let stalled = rate();
    let change = (stalled - baseline).abs() / baseline;
    assert!(change < 0.02, "baseline {baseline:.2} Hz, stalled {stalled:.2} Hz");
    drop(gw);
}

#[test]
fn session_records_between_start_and_stop() {
    let _g = timing_lock();
    let mut st = station();
    let dir = tempfile::tempdir().unwrap();
    let (stop_tx, stop_rx) = unbounded();
    let opts = SessionOptions {
        gateway: GatewayOptions { port: 0, ..GatewayOptions::default() },
        teleop: TeleopOptions { duration: Duration::from_secs(20), instruction: "wave".into(), ..TeleopOptions::default() },
        out_dir: Some(dir.path().to_path_buf()),
    };
    let (url_tx, url_rx) = unbounded();
    let driver = std::thread::spawn(move || {
        let url: String = url_rx.recv().unwrap();
        let (ws, _) = tungstenite::connect(url).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
        }
        let mut p = Peer { ws, seq: 0 };
        p.send("record_ctl", "", json!({ "action": "start", "instruction": "push left" }));
        let on = p.expect(MessageType::RecordCtl, Duration::from_secs(2));
        assert_eq!(on.body["recording"], true);
        // the loop picks up the start once homing is done
        let flagged = loop {
            let s = p.expect(MessageType::Stats, Duration::from_secs(5));
            if s.body["recording"] == true {
                break true;
            }
        };
        for _ in 0..10 {
            p.send("command", "arm", json!({ "ee_delta": [-0.002, 0.001] }));
            p.expect(MessageType::Command, Duration::from_secs(2));
            std::thread::sleep(Duration::from_millis(40));
        }
        p.send("record_ctl", "", json!({ "action": "stop" }));
        let off = p.expect(MessageType::RecordCtl, Duration::from_secs(2));
        assert_eq!(off.body["recording"], false);
        std::thread::sleep(Duration::from_millis(200));
        p.send("command", "arm", json!({ "stop": true }));
        p.expect(MessageType::Command, Duration::from_secs(2));
        stop_tx.send(()).unwrap();
        flagged
    });
    let report = rio::gateway::run_session(&mut st, opts, Some(stop_rx), |gw| url_tx.send(gw.url()).unwrap()).unwrap();
    assert!(driver.join().unwrap());
    assert_eq!(report.episodes.len(), 1);
    let ep = load(&report.episodes[0].path).unwrap();
    assert_eq!(ep.header.instruction, "push left");
    assert!(ep.steps.len() >= 20, "{} steps", ep.steps.len());
    assert!((ep.steps.len() as u64) < report.teleop.steps);
}

fn http_get(gw: &Gateway, path: &str) -> (u16, String) {
    let mut s = TcpStream::connect(gw.local_addr()).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    let code = out.split_whitespace().nth(1).unwrap().parse().unwrap();
    (code, out.split("\r\n\r\n").nth(1).unwrap_or("").to_string())
}

#[test]
fn console_is_served_only_when_built() {
    let st = station();
    let gw = gateway(&st);
    assert_eq!(http_get(&gw, "/").0, 404);
    drop(gw);

    let dir = tempfile::tempdir().unwrap();
    let opts = |d: &Path| GatewayOptions { port: 0, console_dir: Some(d.to_path_buf()), ..GatewayOptions::default() };
    let gw = Gateway::serve(&st, opts(dir.path())).unwrap();
    let (code, body) = http_get(&gw, "/");
    assert_eq!(code, 404);
    assert!(body.contains("not built"));
    drop(gw);

    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    std::fs::write(dir.path().join("app.js"), "1").unwrap();
    let gw = Gateway::serve(&st, opts(dir.path())).unwrap();
    assert_eq!(http_get(&gw, "/"), (200, "<html>console</html>".into()));
    assert_eq!(http_get(&gw, "/app.js?v=2"), (200, "1".into()));
    assert_eq!(http_get(&gw, "/../secret").0, 404);
    // the bridge still works next to the static files
    let mut p = Peer::new(&gw);
    p.send("hello", "", json!({}));
    p.expect(MessageType::Hello, Duration::from_secs(2));
}

#[test]
fn static_paths_stay_inside_the_root() {
    let root = Path::new("/srv/console");
    assert_eq!(static_path(root, "/"), Some(root.join("index.html")));
    assert_eq!(static_path(root, "/a/b.js"), Some(root.join("a/b.js")));
    assert_eq!(static_path(root, "/a/"), Some(root.join("a/index.html")));
    assert_eq!(static_path(root, "/../etc/passwd"), None);
    assert_eq!(static_path(root, "/a/../../x"), None);
}

#[test]
fn command_bodies_map_to_teleop_commands() {
    let c = parse_command(&json!({ "ee_delta": [0.01, 0, 0] })).unwrap();
    let TeleopCommand::EeDelta { arm: None, delta } = c else { panic!("{c:?}") };
    assert_eq!((delta.x, delta.y, delta.theta), (0.01, 0.0, 0.0));
    let c = parse_command(&json!({ "ee_delta": [0.0, -0.01], "arm": "left_arm" })).unwrap();
    assert!(matches!(c, TeleopCommand::EeDelta { arm: Some(ref a), .. } if a == "left_arm"));
    let c = parse_command(&json!({ "stop": true })).unwrap();
    let TeleopCommand::EeDelta { delta, .. } = c else { panic!("{c:?}") };
    assert_eq!((delta.x, delta.y, delta.theta), (0.0, 0.0, 0.0));
    assert_eq!(parse_command(&json!({ "gripper": 0.03 })).unwrap(), TeleopCommand::Gripper { role: None, width: 0.03 });
    assert!(parse_command(&json!({ "gripper": -1.0 })).is_err());
    assert!(parse_command(&json!({ "ee_delta": [0.1, "x"] })).is_err());
    assert!(parse_command(&json!({})).is_err());
}

#[test]
fn messages_round_trip_as_text() {
    let m = BridgeMessage::new(MessageType::RecordCtl, "", 7, json!({ "action": "start" }));
    let text = m.to_text();
    assert!(text.contains(r#""type":"record_ctl""#));
    assert_eq!(BridgeMessage::parse(&text).unwrap(), m);
    let minimal = BridgeMessage::parse(r#"{"type":"hello","seq":1}"#).unwrap();
    assert_eq!((minimal.topic.as_str(), minimal.body.is_null()), ("", true));
    assert!(BridgeMessage::parse(r#"{"type":"shout","seq":1}"#).is_err());
}
