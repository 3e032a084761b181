//! Single-owner session state. The server's ticker thread is the only
//! caller; everything here is synchronous and deterministic.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use hdspace_core::dataset::{write_episode, Episode, EpisodeHeader, Frame, Mode};
use hdspace_core::hdspace::{self, AtomicSpace};
use hdspace_core::rng;
use hdspace_core::sim::{self, Action, Grip, TaskId, WorkspaceState};

use crate::protocol::{ClientMessage, Cmd, ServerMessage, StateMsg, PROTO};

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub default_task: TaskId,
    pub default_belt_speed: Option<f64>,
    pub out_dir: PathBuf,
}

struct ActiveEpisode {
    task: TaskId,
    mode: Mode,
    seed: u64,
    belt_speed: Option<f64>,
    space: Option<AtomicSpace>,
    base: WorkspaceState,
    start: WorkspaceState,
    state: WorkspaceState,
    rng: ChaCha8Rng,
    frames: Vec<Frame>,
    /// The first command has arrived; the clock runs from here.
    running: bool,
    /// Recording stopped at the first terminal step.
    finished: bool,
    applied_seq: Option<u64>,
}

impl ActiveEpisode {
    fn done(&self) -> bool {
        match &self.space {
            Some(space) => hdspace::is_terminal(space, &self.start, &self.state),
            None => sim::subtask_status(&self.state).all_done(),
        }
    }

    fn state_msg(&self) -> ServerMessage {
        ServerMessage::State(StateMsg::from_state(&self.state, self.frames.len(), self.applied_seq))
    }
}

enum Phase {
    AwaitHello,
    Idle,
    Active(Box<ActiveEpisode>),
}

pub struct Session {
    cfg: SessionConfig,
    phase: Phase,
}

/// Replies to a control message and whether the session must close.
#[derive(Debug, Default, PartialEq)]
pub struct Reply {
    pub messages: Vec<ServerMessage>,
    pub close: bool,
}

impl Reply {
    fn one(m: ServerMessage) -> Self {
        Reply { messages: vec![m], close: false }
    }

    fn violation(message: impl Into<String>) -> Self {
        Reply { messages: vec![ServerMessage::Error { message: message.into() }], close: true }
    }
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Self {
        Session { cfg, phase: Phase::AwaitHello }
    }

    pub fn active(&self) -> bool {
        matches!(self.phase, Phase::Active(_))
    }

    /// Checks that a command may be queued now.
    pub fn accepts_cmd(&self) -> Result<(), String> {
        match self.phase {
            Phase::Active(_) => Ok(()),
            Phase::AwaitHello => Err("expected hello".into()),
            Phase::Idle => Err("cmd outside an episode".into()),
        }
    }

    pub fn control(&mut self, msg: ClientMessage) -> Reply {
        match (&mut self.phase, msg) {
            (Phase::AwaitHello, ClientMessage::Hello { proto }) if proto == PROTO => {
                self.phase = Phase::Idle;
                Reply::one(ServerMessage::Hello { proto: PROTO })
            }
            (Phase::AwaitHello, ClientMessage::Hello { proto }) => {
                Reply::violation(format!("unsupported protocol version {proto} (expected {PROTO})"))
            }
            (Phase::AwaitHello, _) => Reply::violation("expected hello"),
            (Phase::Idle, ClientMessage::Begin { task, mode, space, seed, belt_speed }) => {
                self.begin(task.unwrap_or(self.cfg.default_task), mode, space, seed, belt_speed)
            }
            (Phase::Active(ep), ClientMessage::ProposeStart {}) => {
                if ep.running {
                    return Reply::violation("propose_start after the episode started");
                }
                let Some(space) = ep.space.clone() else {
                    return Reply::violation("propose_start in a naive episode");
                };
                match propose(&space, &ep.base, &mut ep.rng) {
                    Ok((start, msg)) => {
                        ep.start = start.clone();
                        ep.state = start;
                        Reply { messages: vec![msg, ep.state_msg()], close: false }
                    }
                    Err(e) => Reply::violation(e),
                }
            }
            (Phase::Active(_), ClientMessage::End { commit }) => {
                let Phase::Active(ep) = std::mem::replace(&mut self.phase, Phase::Idle) else { unreachable!() };
                Reply::one(finish(*ep, commit, &self.cfg.out_dir))
            }
            (_, ClientMessage::Hello { .. }) => Reply::violation("repeated hello"),
            (Phase::Active(_), ClientMessage::Begin { .. }) => Reply::violation("begin while an episode is active"),
            (_, ClientMessage::Cmd(_)) => Reply::violation("cmd outside an episode"),
            (Phase::Idle, m) => Reply::violation(format!("{} outside an episode", kind(&m))),
        }
    }

    fn begin(&mut self, task: TaskId, mode: Mode, space: Option<usize>, seed: u64, belt_speed: Option<f64>) -> Reply {
        let belt_speed = belt_speed.or(if task.is_belt() { self.cfg.default_belt_speed } else { None });
        let base = match sim::init_task(task, seed, belt_speed) {
            Ok(s) => s,
            Err(e) => return Reply::violation(e.to_string()),
        };
        let spaces = hdspace::segment_task(task);
        let (space, index) = match (mode, space) {
            (Mode::Naive, None) => (None, 0),
            (Mode::Naive, Some(_)) => return Reply::violation("naive episodes take no space"),
            (Mode::Hd, None) => return Reply::violation("hd episodes need a space index"),
            (Mode::Hd, Some(i)) => match spaces.get(i) {
                Some(s) => (Some(s.clone()), i),
                None => return Reply::violation(format!("space {i} out of range ({} spaces)", spaces.len())),
            },
        };
        let mut r = rng::stream(seed, &[0x6864, index as u64]);
        let mut messages = Vec::new();
        let start = match &space {
            Some(sp) => match propose(sp, &base, &mut r) {
                Ok((start, msg)) => {
                    messages.push(msg);
                    start
                }
                Err(e) => return Reply::violation(e),
            },
            None => base.clone(),
        };
        let ep = ActiveEpisode {
            task,
            mode,
            seed,
            belt_speed: task.is_belt().then_some(base.belt_speed),
            space,
            base,
            state: start.clone(),
            start,
            rng: r,
            frames: Vec::new(),
            running: false,
            finished: false,
            applied_seq: None,
        };
        messages.push(ep.state_msg());
        self.phase = Phase::Active(Box::new(ep));
        Reply { messages, close: false }
    }

    /// One control tick: applies `cmd` (the newest queued command, if any),
    /// records the frame and returns the state message.
    pub fn tick(&mut self, cmd: Option<Cmd>) -> Option<ServerMessage> {
        let Phase::Active(ep) = &mut self.phase else { return None };
        if let Some(c) = &cmd {
            ep.running = true;
            ep.applied_seq = c.seq.or(ep.applied_seq);
        }
        if !ep.running {
            return Some(ep.state_msg());
        }
        let action = cmd.map_or(Action::new(0.0, 0.0, 0.0, Grip::Hold), |c| c.action()).clipped();
        if !ep.finished {
            ep.frames.push(Frame {
                grid: sim::rasterize(&ep.state),
                proprio: sim::proprio(&ep.state).to_f32(),
                action: action.to_array(),
            });
        }
        ep.state = sim::step(&ep.state, &action);
        if !ep.finished && ep.done() {
            ep.finished = true;
        }
        Some(ep.state_msg())
    }
}

fn kind(m: &ClientMessage) -> &'static str {
    match m {
        ClientMessage::Hello { .. } => "hello",
        ClientMessage::Begin { .. } => "begin",
        ClientMessage::ProposeStart {} => "propose_start",
        ClientMessage::Cmd(_) => "cmd",
        ClientMessage::End { .. } => "end",
    }
}

fn propose(
    space: &AtomicSpace,
    base: &WorkspaceState,
    r: &mut ChaCha8Rng,
) -> Result<(WorkspaceState, ServerMessage), String> {
    let pose = hdspace::sample_start(space, base, r).map_err(|e| e.to_string())?;
    let start = hdspace::place_start(base, space, pose).map_err(|e| e.to_string())?;
    let resolved = hdspace::resolve_region(space, base).map_err(|e| e.to_string())?;
    Ok((start, ServerMessage::start(space, resolved, pose)))
}

fn finish(ep: ActiveEpisode, commit: bool, out: &Path) -> ServerMessage {
    let discard = |reason: &str| ServerMessage::Discarded { reason: reason.into() };
    if !commit {
        return discard("discarded by operator");
    }
    if !ep.finished {
        return discard("episode did not reach its termination predicate");
    }
    let mut header = EpisodeHeader::new(ep.task, ep.mode, ep.seed, ep.space.as_ref().map(|s| s.index));
    header.belt_speed = ep.belt_speed;
    header.space = ep.space.clone();
    header.source = "teleop".into();
    header.success = true;
    header.frame_count = ep.frames.len();
    let path = out.join(header.file_name());
    if path.exists() {
        return discard(&format!("{} already exists", path.display()));
    }
    let episode = Episode { header, frames: ep.frames };
    if let Err(e) = episode.validate() {
        return discard(&e.to_string());
    }
    match write_episode(&episode, &path) {
        Ok(()) => ServerMessage::Saved { path: path.display().to_string() },
        Err(e) => discard(&e.to_string()),
    }
}
