use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant};

use hdspace_core::dataset::{read_episode, Mode};
use hdspace_core::expert::expert_action;
use hdspace_core::hdspace::{place_start, sample_start, segment_task};
use hdspace_core::rng;
use hdspace_core::sim::{self, Action, Grip, TaskId};
use hdspace_gateway::{Server, ServerMessage, SessionConfig, StateMsg};
use serde_json::{json, Value};

fn start_server(dir: &Path) -> SocketAddr {
    let cfg = SessionConfig { default_task: TaskId::Teacup, default_belt_speed: Some(0.08), out_dir: dir.to_path_buf() };
    let server = Server::bind("127.0.0.1:0", cfg).unwrap();
    let addr = server.local_addr().unwrap();
    server.spawn();
    addr
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: SocketAddr) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        s.set_nodelay(true).unwrap();
        Client { writer: s.try_clone().unwrap(), reader: BufReader::new(s) }
    }

    fn send(&mut self, v: Value) {
        self.writer.write_all(format!("{v}\n").as_bytes()).unwrap();
    }

    fn recv(&mut self) -> Option<ServerMessage> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(serde_json::from_str(&line).unwrap()),
        }
    }

    fn state(&mut self) -> StateMsg {
        loop {
            match self.recv().expect("connection open") {
                ServerMessage::State(s) => return s,
                _ => continue,
            }
        }
    }

    fn hello(&mut self) {
        self.send(json!({"type": "hello", "proto": 1}));
        assert_eq!(self.recv(), Some(ServerMessage::Hello { proto: 1 }));
    }
}

fn cmd(a: &Action, seq: u64) -> Value {
    let grip = match a.grip {
        Grip::Open => "open",
        Grip::Close => "close",
        Grip::Hold => "hold",
    };
    json!({"type": "cmd", "dx": a.dx, "dy": a.dy, "dth": a.dtheta, "grip": grip, "seq": seq})
}

#[test]
fn hello_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::connect(start_server(dir.path()));
    c.hello();
}

#[test]
fn oversized_cmd_is_clipped_like_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::connect(start_server(dir.path()));
    c.hello();
    c.send(json!({"type": "begin", "task": "teacup", "mode": "naive", "seed": 3}));
    let before = c.state();
    c.send(json!({"type": "cmd", "dx": 0.5, "dy": 0.0, "dth": 0.0, "grip": "hold", "seq": 1}));
    let after = loop {
        let s = c.state();
        if s.applied_seq == Some(1) {
            break s;
        }
    };
    assert!((after.ee.x - before.ee.x - 0.02).abs() < 1e-12);
    assert_eq!(after.ee.y, before.ee.y);
    assert_eq!(after.frames, 1);
}

#[test]
fn protocol_violations_close_the_session_only() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start_server(dir.path());
    let mut c = Client::connect(addr);
    c.send(json!({"type": "cmd", "dx": 0.0}));
    assert!(matches!(c.recv(), Some(ServerMessage::Error { .. })));
    assert_eq!(c.recv(), None);

    let mut c = Client::connect(addr);
    c.hello();
    c.writer.write_all(b"{not json\n").unwrap();
    assert!(matches!(c.recv(), Some(ServerMessage::Error { .. })));
    assert_eq!(c.recv(), None);

    let mut c = Client::connect(addr);
    c.hello();
    c.send(json!({"type": "cmd", "dx": 0.01, "seq": 1}));
    assert!(matches!(c.recv(), Some(ServerMessage::Error { .. })));
}

/// Drives an hd episode with the scripted expert over a replica of the
/// session state, one command per tick, then commits it.
#[test]
fn hd_commit_round_trip_replays() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::connect(start_server(dir.path()));
    c.hello();
    let (task, seed, index) = (TaskId::Teacup, 11, 2);
    c.send(json!({"type": "begin", "task": "teacup", "mode": "hd", "space": index, "seed": seed}));
    let Some(ServerMessage::Start { pose, space, .. }) = c.recv() else { panic!("expected start") };
    assert_eq!(space, index);

    let base = sim::init_task(task, seed, None).unwrap();
    let sp = &segment_task(task)[index];
    let p = sample_start(sp, &base, &mut rng::stream(seed, &[0x6864, index as u64])).unwrap();
    assert_eq!((p.x, p.y, p.theta), (pose.x, pose.y, pose.theta));
    let start = place_start(&base, sp, p).unwrap();
    let mut replica = start.clone();

    let first = c.state();
    assert_eq!(first.frames, 0);
    let mut seq = 1;
    let mut sent = expert_action(&replica, Some(sp)).unwrap();
    c.send(cmd(&sent, seq));
    let mut last_applied = None;
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        assert!(Instant::now() < deadline, "episode did not finish");
        let s = c.state();
        if s.frames == 0 && s.applied_seq.is_none() {
            continue;
        }
        let a = if s.applied_seq != last_applied { sent } else { Action::new(0.0, 0.0, 0.0, Grip::Hold) };
        last_applied = s.applied_seq;
        replica = sim::step(&replica, &a);
        assert_eq!((replica.ee.x, replica.ee.y), (s.ee.x, s.ee.y));
        if hdspace_core::hdspace::is_terminal(sp, &start, &replica) {
            break;
        }
        if s.applied_seq == Some(seq) {
            seq += 1;
            sent = expert_action(&replica, Some(sp)).unwrap();
            c.send(cmd(&sent, seq));
        }
    }
    c.send(json!({"type": "end", "commit": true}));
    let path = loop {
        match c.recv().unwrap() {
            ServerMessage::Saved { path } => break path,
            ServerMessage::State(_) => continue,
            other => panic!("unexpected {other:?}"),
        }
    };
    let ep = read_episode(Path::new(&path)).unwrap();
    assert_eq!(ep.header.mode, Mode::Hd);
    assert_eq!(ep.header.space_index, 2);
    assert_eq!(ep.header.source, "teleop");
    assert!(ep.header.success);

    let mut s = start;
    for f in &ep.frames {
        assert_eq!(f.proprio, sim::proprio(&s).to_f32());
        assert_eq!(f.grid, sim::rasterize(&s));
        s = sim::step(&s, &Action::from_array(f.action));
    }
    assert!(hdspace_core::hdspace::is_terminal(sp, &place_start(&base, sp, p).unwrap(), &s));
}

#[test]
fn flooding_applies_at_most_one_cmd_per_tick() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::connect(start_server(dir.path()));
    c.hello();
    c.send(json!({"type": "begin", "task": "teacup", "mode": "naive", "seed": 5}));
    let before = c.state();
    let mut burst = String::new();
    for seq in 1..=200u64 {
        burst.push_str(&format!("{}\n", json!({"type": "cmd", "dx": 0.001, "dy": 0.0, "seq": seq})));
    }
    c.writer.write_all(burst.as_bytes()).unwrap();
    let mut prev = before;
    let mut applied = 0;
    let mut ticks = 0;
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let s = c.state();
        ticks += 1;
        if s.applied_seq != prev.applied_seq {
            applied += 1;
            assert!(s.applied_seq > prev.applied_seq);
            assert!((s.ee.x - prev.ee.x - 0.001).abs() < 1e-9);
        } else {
            assert_eq!(s.ee.x, prev.ee.x);
        }
        let done = s.applied_seq == Some(200);
        prev = s;
        if done || Instant::now() > deadline {
            break;
        }
    }
    assert_eq!(prev.applied_seq, Some(200));
    assert!(applied <= ticks);
    assert!(applied < 200, "a burst must collapse onto fewer ticks, applied {applied}");
}

#[test]
fn tick_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::connect(start_server(dir.path()));
    c.hello();
    c.send(json!({"type": "begin", "task": "pens", "mode": "naive", "seed": 1}));
    c.state();
    let mut stamps = Vec::with_capacity(301);
    for _ in 0..301 {
        c.state();
        stamps.push(Instant::now());
    }
    let period = 1.0 / 30.0;
    let intervals: Vec<f64> = stamps.windows(2).map(|w| (w[1] - w[0]).as_secs_f64()).collect();
    let mean = intervals.iter().sum::<f64>() / intervals.len() as f64;
    let within = intervals.iter().filter(|&&d| (d - period).abs() <= 0.2 * period).count();
    println!("mean interval {mean:.5}s, {within}/300 within ±20%");
    assert!((mean - period).abs() <= 0.02 * period, "mean interval {mean}");
    assert!(within >= 285, "{within}/300 intervals within ±20%");
}

#[test]
fn websocket_carries_the_same_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start_server(dir.path());
    let (mut ws, _) = tungstenite::connect(format!("ws://{addr}/")).unwrap();
    ws.send(tungstenite::Message::text(json!({"type": "hello", "proto": 1}).to_string())).unwrap();
    let reply = ws.read().unwrap();
    let m: ServerMessage = serde_json::from_str(reply.to_text().unwrap()).unwrap();
    assert_eq!(m, ServerMessage::Hello { proto: 1 });
    ws.send(tungstenite::Message::text(
        json!({"type": "begin", "task": "belt-spoon", "mode": "naive", "seed": 2, "belt_speed": 0.16}).to_string(),
    ))
    .unwrap();
    let m: ServerMessage = serde_json::from_str(ws.read().unwrap().to_text().unwrap()).unwrap();
    let ServerMessage::State(s) = m else { panic!("expected state") };
    assert_eq!(s.frames, 0);
    assert_eq!(s.subtasks, vec![false, false]);
}
