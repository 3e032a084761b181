//! Session messages. One JSON object per line, tagged by `type`.

use serde::{Deserialize, Serialize};

use hdspace_core::dataset::Mode;
use hdspace_core::hdspace::AtomicSpace;
use hdspace_core::sim::{self, Action, Category, Grip, Pose2, TaskId, WorkspaceState};

pub const PROTO: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripCmd {
    Open,
    Close,
    Hold,
}

impl From<GripCmd> for Grip {
    fn from(g: GripCmd) -> Grip {
        match g {
            GripCmd::Open => Grip::Open,
            GripCmd::Close => Grip::Close,
            GripCmd::Hold => Grip::Hold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cmd {
    #[serde(default)]
    pub dx: f64,
    #[serde(default)]
    pub dy: f64,
    #[serde(default)]
    pub dth: f64,
    #[serde(default = "hold")]
    pub grip: GripCmd,
    /// Client sequence number, echoed in `state.applied_seq`.
    #[serde(default)]
    pub seq: Option<u64>,
}

fn hold() -> GripCmd {
    GripCmd::Hold
}

impl Cmd {
    pub fn action(&self) -> Action {
        Action::new(self.dx, self.dy, self.dth, self.grip.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        proto: u32,
    },
    Begin {
        #[serde(default)]
        task: Option<TaskId>,
        mode: Mode,
        #[serde(default)]
        space: Option<usize>,
        seed: u64,
        #[serde(default)]
        belt_speed: Option<f64>,
    },
    ProposeStart {},
    Cmd(Cmd),
    End {
        commit: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMsg {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl From<Pose2> for PoseMsg {
    fn from(p: Pose2) -> Self {
        PoseMsg { x: p.x, y: p.y, theta: p.theta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMsg {
    pub id: u32,
    pub category: Category,
    pub pose: PoseMsg,
    pub attached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMsg {
    pub center: PoseMsg,
    pub half_width: f64,
    pub theta_half_range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub t: u64,
    pub ee: PoseMsg,
    pub aperture: f64,
    pub attached: Option<u32>,
    pub objects: Vec<ObjectMsg>,
    pub subtasks: Vec<bool>,
    pub frames: usize,
    pub lid_angle: f64,
    pub applied_seq: Option<u64>,
}

impl StateMsg {
    pub fn from_state(s: &WorkspaceState, frames: usize, applied_seq: Option<u64>) -> Self {
        StateMsg {
            t: s.t,
            ee: s.ee.into(),
            aperture: s.aperture,
            attached: s.attached_id,
            objects: s
                .objects
                .iter()
                .map(|o| ObjectMsg { id: o.id, category: o.category, pose: o.pose.into(), attached: o.attached })
                .collect(),
            subtasks: sim::subtask_status(s).flags,
            frames,
            lid_angle: s.lid_angle,
            applied_seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        proto: u32,
    },
    Start {
        pose: PoseMsg,
        space: usize,
        name: String,
        region: RegionMsg,
    },
    State(StateMsg),
    Saved {
        path: String,
    },
    Discarded {
        reason: String,
    },
    Error {
        message: String,
    },
}

impl ServerMessage {
    pub fn start(space: &AtomicSpace, resolved: Pose2, pose: Pose2) -> Self {
        ServerMessage::Start {
            pose: pose.into(),
            space: space.index,
            name: space.name.clone(),
            region: RegionMsg {
                center: resolved.into(),
                half_width: space.start_region.half_width,
                theta_half_range: space.oriented.then_some(space.start_region.theta_half_range),
            },
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

pub fn parse_client(line: &str) -> Result<ClientMessage, String> {
    serde_json::from_str(line).map_err(|e| format!("malformed message: {e}"))
}
