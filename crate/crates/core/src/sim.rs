//! Deterministic 2D kinematic workspace for the teacup, conveyor-belt and
//! pen-sorting task families.
//!
//! The workspace is the unit square seen from above. Lengths are in meters
//! at 1 cm = 0.01 units, so belt speeds keep their physical values. Control
//! runs at [`CONTROL_HZ`]; one call to [`step`] is one control tick.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTROL_HZ: u32 = 30;
/// Per-step translation limit (m).
pub const MAX_STEP: f64 = 0.02;
/// Per-step rotation limit (rad).
pub const MAX_ROT: f64 = 0.15;
/// Grasp point capture radius (m).
pub const GRASP_TOL: f64 = 0.02;
/// Orientation tolerance for flagged grasp points (rad, modulo π).
pub const ANGLE_TOL: f64 = 0.3;
/// Steps the gripper stays busy after it changes state.
pub const GRIP_DWELL: u8 = 3;
pub const BELT_SPEEDS: [f64; 2] = [0.08, 0.16];
pub const HOME: Pose2 = Pose2 { x: 0.5, y: 0.9, theta: -FRAC_PI_2 };

pub const GRID_CHANNELS: usize = 6;
pub const GRID_SIZE: usize = 32;
pub const GRID_LEN: usize = GRID_CHANNELS * GRID_SIZE * GRID_SIZE;
pub const PROPRIO_DIM: usize = 6;
pub const ACTION_DIM: usize = 4;

pub const EE_RADIUS: f64 = 0.03;
pub const GRIP_MARK_RADIUS: f64 = 0.015;

// Teacup scene.
pub const BOX_CENTER: [f64; 2] = [0.75, 0.5];
pub const BOX_HALF: f64 = 0.09;
/// Cup centers within this half-extent of the box center count as inside.
pub const BOX_INTERIOR_HALF: f64 = 0.06;
pub const LID_HINGE_Y: f64 = BOX_CENTER[1] + BOX_HALF;
pub const LID_DEPTH: f64 = 2.0 * BOX_HALF;
pub const LID_MIN_VISIBLE: f64 = 0.02;
pub const HANDLE_CLOSED: [f64; 2] = [0.75, 0.38];
pub const PULL_DIR: [f64; 2] = [0.0, -1.0];
pub const PULL_LEN: f64 = 0.10;
pub const HANDLE_SLIP: f64 = 0.05;
pub const LID_OPEN_THRESHOLD: f64 = FRAC_PI_2 - 0.05;
pub const LID_CLOSED_THRESHOLD: f64 = 0.05;
pub const CUP_REGION: [[f64; 2]; 2] = [[0.15, 0.4], [0.3, 0.7]];
pub const CUP_RADIUS: f64 = 0.03;
pub const HANDLE_RADIUS: f64 = 0.02;

// Belt scenes.
pub const BELT_Y: f64 = 0.5;
pub const BELT_HALF_WIDTH: f64 = 0.1;
pub const BELT_MAX_PREROLL: u64 = 45;
pub const BOWL_RADIUS: f64 = 0.06;
pub const BOWL_RIM_POINTS: usize = 8;
pub const SPOON_HALF_LEN: f64 = 0.045;
pub const SPOON_RADIUS: f64 = 0.016;
pub const SPOON_HANDLE_OFFSET: f64 = 0.025;
/// A belt target whose center reaches this y has been lifted off the belt.
pub const LIFT_Y: f64 = 0.7;

// Pen scene.
pub const PEN_COUNT: usize = 5;
pub const PEN_REGION: [[f64; 2]; 2] = [[0.1, 0.62], [0.3, 0.75]];
pub const PEN_MIN_SEPARATION: f64 = 0.13;
pub const PEN_HALF_LEN: f64 = 0.05;
pub const PEN_RADIUS: f64 = 0.014;
pub const TRAY_CENTER: [f64; 2] = [0.85, 0.18];
pub const TRAY_HALF: f64 = 0.09;

/// Normalizes an angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Smallest rotation separating two orientations of a symmetric
/// (parallel-jaw) grasp, i.e. the angular distance modulo π.
pub fn axial_angle_error(a: f64, b: f64) -> f64 {
    let e = normalize_angle(a - b).abs();
    e.min(PI - e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 { x, y, theta }
    }

    pub fn in_workspace(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    pub fn dist(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }

    /// Maps a point given in this pose's frame into the world frame.
    pub fn transform(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * local[0] - s * local[1], self.y + s * local[0] + c * local[1]]
    }

    /// Expresses `other` in this pose's frame.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2 { x: c * dx + s * dy, y: -s * dx + c * dy, theta: other.theta - self.theta }
    }

    pub fn compose(&self, rel: &Pose2) -> Pose2 {
        let [x, y] = self.transform([rel.x, rel.y]);
        Pose2 { x, y, theta: normalize_angle(self.theta + rel.theta) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    Teacup,
    BeltBowl,
    BeltSpoon,
    Pens,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Teacup, TaskId::BeltBowl, TaskId::BeltSpoon, TaskId::Pens];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Teacup => "teacup",
            TaskId::BeltBowl => "belt-bowl",
            TaskId::BeltSpoon => "belt-spoon",
            TaskId::Pens => "pens",
        }
    }

    pub fn is_belt(&self) -> bool {
        matches!(self, TaskId::BeltBowl | TaskId::BeltSpoon)
    }

    /// Number of sequential subtasks tracked by [`subtask_status`].
    pub fn max_completed(&self) -> usize {
        match self {
            TaskId::Teacup => 4,
            TaskId::BeltBowl | TaskId::BeltSpoon => 2,
            TaskId::Pens => PEN_COUNT,
        }
    }

    /// Step budget for a full-task rollout from home.
    pub fn horizon(&self) -> usize {
        match self {
            TaskId::Teacup => 700,
            TaskId::BeltBowl | TaskId::BeltSpoon => 400,
            TaskId::Pens => 1200,
        }
    }

    fn intended(&self, category: Category) -> bool {
        match self {
            TaskId::Teacup => matches!(category, Category::Cup | Category::BoxLid),
            TaskId::BeltBowl => category == Category::Bowl,
            TaskId::BeltSpoon => category == Category::Spoon,
            TaskId::Pens => category == Category::Pen,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grip {
    Open,
    Close,
    Hold,
}

impl Grip {
    /// Scalar encoding used in recorded actions and policy outputs.
    pub fn code(self) -> f64 {
        match self {
            Grip::Open => -1.0,
            Grip::Hold => 0.0,
            Grip::Close => 1.0,
        }
    }

    pub fn from_code(v: f64) -> Grip {
        if v > 0.5 {
            Grip::Close
        } else if v < -0.5 {
            Grip::Open
        } else {
            Grip::Hold
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub grip: Grip,
}

impl Action {
    pub const HOLD: Action = Action { dx: 0.0, dy: 0.0, dtheta: 0.0, grip: Grip::Hold };

    pub fn new(dx: f64, dy: f64, dtheta: f64, grip: Grip) -> Self {
        Action { dx, dy, dtheta, grip }
    }

    /// Applies the per-step limits. Non-finite components become zero.
    pub fn clipped(&self) -> Action {
        let fin = |v: f64| if v.is_finite() { v } else { 0.0 };
        let (mut dx, mut dy) = (fin(self.dx), fin(self.dy));
        let norm = dx.hypot(dy);
        if norm > MAX_STEP {
            let s = MAX_STEP / norm;
            dx *= s;
            dy *= s;
        }
        Action { dx, dy, dtheta: fin(self.dtheta).clamp(-MAX_ROT, MAX_ROT), grip: self.grip }
    }

    pub fn is_legal(&self) -> bool {
        self.dx.hypot(self.dy) <= MAX_STEP + 1e-12 && self.dtheta.abs() <= MAX_ROT + 1e-12
    }

    /// Recorded form: `[dx, dy, dtheta, grip code]`.
    pub fn to_array(&self) -> [f32; ACTION_DIM] {
        [self.dx as f32, self.dy as f32, self.dtheta as f32, self.grip.code() as f32]
    }

    pub fn from_array(a: [f32; ACTION_DIM]) -> Action {
        Action {
            dx: a[0] as f64,
            dy: a[1] as f64,
            dtheta: a[2] as f64,
            grip: Grip::from_code(a[3] as f64),
        }
    }

    /// Per-coordinate scale used to express actions in the unit box.
    pub const LIMITS: [f64; ACTION_DIM] = [MAX_STEP, MAX_STEP, MAX_ROT, 1.0];

    pub fn from_normalized(v: &[f64]) -> Action {
        Action {
            dx: v[0] * MAX_STEP,
            dy: v[1] * MAX_STEP,
            dtheta: v[2] * MAX_ROT,
            grip: Grip::from_code(v[3]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Cup,
    BoxBase,
    BoxLid,
    Bowl,
    Spoon,
    Pen,
    Tray,
    BeltItem,
}

impl Category {
    pub fn graspable(&self) -> bool {
        !matches!(self, Category::BoxBase | Category::Tray)
    }

    /// Raster channel the footprint is painted into.
    pub fn channel(&self) -> usize {
        match self {
            Category::Cup | Category::Spoon | Category::Pen | Category::BeltItem => 2,
            Category::BoxBase | Category::Tray | Category::Bowl => 3,
            Category::BoxLid => 4,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            Category::Cup => Shape::Disc { r: CUP_RADIUS },
            Category::BoxBase => Shape::Rect { hx: BOX_HALF, hy: BOX_HALF },
            Category::BoxLid => Shape::Disc { r: HANDLE_RADIUS },
            Category::Bowl => Shape::Disc { r: BOWL_RADIUS },
            Category::Spoon => Shape::Capsule { half_len: SPOON_HALF_LEN, r: SPOON_RADIUS },
            Category::Pen => Shape::Capsule { half_len: PEN_HALF_LEN, r: PEN_RADIUS },
            Category::Tray => Shape::Rect { hx: TRAY_HALF, hy: TRAY_HALF },
            Category::BeltItem => Shape::Disc { r: 0.03 },
        }
    }
}

/// Footprint geometry in the object frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disc { r: f64 },
    /// Segment along the local x axis, inflated by `r`.
    Capsule { half_len: f64, r: f64 },
    /// Axis-aligned in the world frame.
    Rect { hx: f64, hy: f64 },
}

impl Shape {
    pub fn contains(&self, pose: &Pose2, p: [f64; 2]) -> bool {
        let dx = p[0] - pose.x;
        let dy = p[1] - pose.y;
        match *self {
            Shape::Disc { r } => dx * dx + dy * dy <= r * r,
            Shape::Capsule { half_len, r } => {
                let (s, c) = pose.theta.sin_cos();
                let along = (c * dx + s * dy).clamp(-half_len, half_len);
                let ex = dx - along * c;
                let ey = dy - along * s;
                ex * ex + ey * ey <= r * r
            }
            Shape::Rect { hx, hy } => dx.abs() <= hx && dy.abs() <= hy,
        }
    }

    /// Conservative world-frame half extent used to bound raster scans.
    pub fn reach(&self) -> f64 {
        match *self {
            Shape::Disc { r } => r,
            Shape::Capsule { half_len, r } => half_len + r,
            Shape::Rect { hx, hy } => hx.max(hy) * std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPoint {
    /// Offset in the object frame.
    pub offset: [f64; 2],
    /// Whether the end-effector orientation must match the object's axis.
    pub oriented: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeltTrack {
    pub spawn_x: f64,
    pub spawn_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: u32,
    pub category: Category,
    pub pose: Pose2,
    pub grasp_points: Vec<GraspPoint>,
    pub attached: bool,
    /// Present while the object is carried by the belt.
    pub belt: Option<BeltTrack>,
    /// Container this object rests in, with the in-container offset.
    pub rides_on: Option<(u32, [f64; 2])>,
    /// Stored in the tray (pens only); no longer graspable.
    pub placed: bool,
    /// Carried past the end of the belt.
    pub exited: bool,
}

impl ObjectState {
    fn new(id: u32, category: Category, pose: Pose2, grasp_points: Vec<GraspPoint>) -> Self {
        ObjectState {
            id,
            category,
            pose,
            grasp_points,
            attached: false,
            belt: None,
            rides_on: None,
            placed: false,
            exited: false,
        }
    }

    pub fn grasp_world(&self, gp: &GraspPoint) -> [f64; 2] {
        self.pose.transform(gp.offset)
    }

    pub fn can_be_grasped(&self) -> bool {
        self.category.graspable() && !self.attached && !self.placed && !self.exited
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceState {
    pub task: TaskId,
    pub seed: u64,
    pub t: u64,
    pub ee: Pose2,
    pub aperture: f64,
    pub attached_id: Option<u32>,
    /// Pose of the attached object in the end-effector frame.
    pub attach_offset: Option<Pose2>,
    pub grip_timer: u8,
    pub objects: Vec<ObjectState>,
    pub lid_angle: f64,
    pub belt_speed: f64,
    /// Belt ticks since the belt item was spawned (the belt phase).
    pub belt_steps: u64,
    /// Id of the object the task wants grasped (belt tasks).
    pub target_id: Option<u32>,
    /// Sticky subtask flags, refreshed after every step.
    pub milestones: Vec<bool>,
}

impl WorkspaceState {
    pub fn object(&self, id: u32) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: u32) -> Option<&mut ObjectState> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn first_of(&self, category: Category) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.category == category)
    }

    pub fn attached(&self) -> Option<&ObjectState> {
        self.attached_id.and_then(|id| self.object(id))
    }

    pub fn target(&self) -> Option<&ObjectState> {
        self.target_id.and_then(|id| self.object(id))
    }

    pub fn gripper_closed(&self) -> bool {
        self.aperture < 0.5
    }

    /// Handle position implied by the current lid angle.
    pub fn handle_rest(&self) -> [f64; 2] {
        let s = self.lid_angle / FRAC_PI_2 * PULL_LEN;
        [HANDLE_CLOSED[0] + PULL_DIR[0] * s, HANDLE_CLOSED[1] + PULL_DIR[1] * s]
    }

    /// Checks the structural invariants of the state.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.ee.in_workspace() {
            return Err(format!("end-effector outside workspace: {:?}", self.ee));
        }
        if !(0.0..=1.0).contains(&self.aperture) {
            return Err(format!("aperture {} out of range", self.aperture));
        }
        if !(0.0..=FRAC_PI_2 + 1e-12).contains(&self.lid_angle) {
            return Err(format!("lid angle {} out of range", self.lid_angle));
        }
        if self.belt_speed != 0.0 && !BELT_SPEEDS.contains(&self.belt_speed) {
            return Err(format!("belt speed {} not allowed", self.belt_speed));
        }
        let attached: Vec<_> = self.objects.iter().filter(|o| o.attached).collect();
        if attached.len() > 1 {
            return Err("more than one object attached".into());
        }
        match (self.attached_id, attached.first()) {
            (None, None) => {}
            (Some(id), Some(o)) if o.id == id && o.category.graspable() => {}
            other => return Err(format!("attachment bookkeeping inconsistent: {other:?}")),
        }
        for o in &self.objects {
            if !o.pose.in_workspace() {
                return Err(format!("object {} outside workspace", o.id));
            }
            if o.category.graspable() && o.grasp_points.is_empty() {
                return Err(format!("graspable object {} has no grasp points", o.id));
            }
        }
        Ok(())
    }
}

fn grasp_center() -> Vec<GraspPoint> {
    vec![GraspPoint { offset: [0.0, 0.0], oriented: false }]
}

fn bowl_rim() -> Vec<GraspPoint> {
    (0..BOWL_RIM_POINTS)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / BOWL_RIM_POINTS as f64;
            GraspPoint { offset: [BOWL_RADIUS * a.cos(), BOWL_RADIUS * a.sin()], oriented: false }
        })
        .collect()
}

/// Index of the rim point the scripted expert grasps (the side facing home).
pub const BOWL_PREFERRED_RIM: usize = BOWL_RIM_POINTS / 4;

fn uniform_angle(rng: &mut ChaCha8Rng) -> f64 {
    normalize_angle(rng.random_range(-PI..PI))
}

/// Builds the randomized initial state of a task.
pub fn init_task(task: TaskId, seed: u64, belt_speed: Option<f64>) -> Result<WorkspaceState> {
    let speed = match (task.is_belt(), belt_speed) {
        (false, Some(_)) => return Err(Error::BeltSpeedForStaticTask(task)),
        (false, None) => 0.0,
        (true, None) => BELT_SPEEDS[1],
        (true, Some(v)) if BELT_SPEEDS.contains(&v) => v,
        (true, Some(v)) => return Err(Error::InvalidBeltSpeed(v)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::new();
    let mut belt_steps = 0;
    let mut target_id = None;
    match task {
        TaskId::Teacup => {
            let cx = rng.random_range(CUP_REGION[0][0]..=CUP_REGION[0][1]);
            let cy = rng.random_range(CUP_REGION[1][0]..=CUP_REGION[1][1]);
            objects.push(ObjectState::new(0, Category::Cup, Pose2::new(cx, cy, 0.0), grasp_center()));
            objects.push(ObjectState::new(
                1,
                Category::BoxBase,
                Pose2::new(BOX_CENTER[0], BOX_CENTER[1], 0.0),
                Vec::new(),
            ));
            objects.push(ObjectState::new(
                2,
                Category::BoxLid,
                Pose2::new(HANDLE_CLOSED[0], HANDLE_CLOSED[1], 0.0),
                grasp_center(),
            ));
        }
        TaskId::BeltBowl | TaskId::BeltSpoon => {
            belt_steps = rng.random_range(0..=BELT_MAX_PREROLL);
            let x = belt_steps as f64 * speed / CONTROL_HZ as f64;
            let mut bowl = ObjectState::new(0, Category::Bowl, Pose2::new(x, BELT_Y, 0.0), bowl_rim());
            bowl.belt = Some(BeltTrack { spawn_x: 0.0, spawn_step: 0 });
            objects.push(bowl);
            if task == TaskId::BeltSpoon {
                let theta = uniform_angle(&mut rng);
                let mut spoon = ObjectState::new(
                    1,
                    Category::Spoon,
                    Pose2::new(x, BELT_Y, theta),
                    vec![GraspPoint { offset: [SPOON_HANDLE_OFFSET, 0.0], oriented: true }],
                );
                spoon.rides_on = Some((0, [0.0, 0.0]));
                objects.push(spoon);
                target_id = Some(1);
            } else {
                target_id = Some(0);
            }
        }
        TaskId::Pens => {
            let mut placed: Vec<[f64; 2]> = Vec::new();
            while placed.len() < PEN_COUNT {
                let x = rng.random_range(PEN_REGION[0][0]..=PEN_REGION[0][1]);
                let y = rng.random_range(PEN_REGION[1][0]..=PEN_REGION[1][1]);
                let theta = uniform_angle(&mut rng);
                if placed.iter().all(|p| (p[0] - x).hypot(p[1] - y) >= PEN_MIN_SEPARATION) {
                    let id = placed.len() as u32;
                    objects.push(ObjectState::new(id, Category::Pen, Pose2::new(x, y, theta), grasp_center()));
                    placed.push([x, y]);
                }
            }
            objects.push(ObjectState::new(
                PEN_COUNT as u32,
                Category::Tray,
                Pose2::new(TRAY_CENTER[0], TRAY_CENTER[1], 0.0),
                Vec::new(),
            ));
        }
    }
    let mut state = WorkspaceState {
        task,
        seed,
        t: 0,
        ee: HOME,
        aperture: 1.0,
        attached_id: None,
        attach_offset: None,
        grip_timer: 0,
        objects,
        lid_angle: 0.0,
        belt_speed: speed,
        belt_steps,
        target_id,
        milestones: vec![false; task.max_completed()],
    };
    state.milestones = subtask_status(&state).flags;
    Ok(state)
}

/// Notable things that happened during one step; consumed by the evaluator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    pub close_fired: bool,
    pub attached: Option<u32>,
    /// A close landed within position tolerance of a flagged grasp point but
    /// outside its orientation tolerance.
    pub angle_miss: bool,
    /// A close found no grasp point within position tolerance.
    pub empty_close: bool,
    /// The attached object is not one the task intends to move.
    pub unintended_attach: bool,
    pub released: Option<u32>,
    pub slipped: bool,
}

pub fn step(state: &WorkspaceState, action: &Action) -> WorkspaceState {
    step_with_events(state, action).0
}

pub fn step_with_events(state: &WorkspaceState, action: &Action) -> (WorkspaceState, StepEvents) {
    let mut s = state.clone();
    let mut ev = StepEvents::default();
    let a = action.clipped();

    s.ee.x = (s.ee.x + a.dx).clamp(0.0, 1.0);
    s.ee.y = (s.ee.y + a.dy).clamp(0.0, 1.0);
    s.ee.theta = normalize_angle(s.ee.theta + a.dtheta);

    match a.grip {
        Grip::Close => {
            if s.gripper_closed() {
                s.grip_timer = s.grip_timer.saturating_sub(1);
            } else {
                s.aperture = 0.0;
                s.grip_timer = GRIP_DWELL;
            }
            ev.close_fired = true;
            if s.attached_id.is_none() {
                try_attach(&mut s, &mut ev);
            }
        }
        Grip::Open => {
            if s.gripper_closed() {
                s.aperture = 1.0;
                s.grip_timer = GRIP_DWELL;
            } else {
                s.grip_timer = s.grip_timer.saturating_sub(1);
            }
            if let Some(id) = s.attached_id {
                release(&mut s, id);
                ev.released = Some(id);
            }
        }
        Grip::Hold => s.grip_timer = s.grip_timer.saturating_sub(1),
    }

    follow_attachment(&mut s, &mut ev);
    advance_belt(&mut s);
    s.t += 1;
    s.milestones = subtask_status(&s).flags;
    (s, ev)
}

fn try_attach(s: &mut WorkspaceState, ev: &mut StepEvents) {
    let ee = s.ee;
    let mut best: Option<(f64, u32)> = None;
    for o in s.objects.iter().filter(|o| o.can_be_grasped()) {
        for gp in &o.grasp_points {
            let d = ee.dist(o.grasp_world(gp));
            if d > GRASP_TOL {
                continue;
            }
            if gp.oriented && axial_angle_error(ee.theta, o.pose.theta) > ANGLE_TOL {
                ev.angle_miss = true;
                continue;
            }
            if best.is_none_or(|(bd, bid)| d < bd || (d == bd && o.id < bid)) {
                best = Some((d, o.id));
            }
        }
    }
    match best {
        Some((_, id)) => {
            ev.angle_miss = false;
            let task = s.task;
            let o = s.object_mut(id).expect("candidate exists");
            o.attached = true;
            o.belt = None;
            o.rides_on = None;
            let pose = o.pose;
            ev.unintended_attach = !task.intended(o.category);
            s.attached_id = Some(id);
            s.attach_offset = Some(ee.relative(&pose));
            ev.attached = Some(id);
        }
        None => ev.empty_close = !ev.angle_miss,
    }
}

fn release(s: &mut WorkspaceState, id: u32) {
    s.attached_id = None;
    s.attach_offset = None;
    if let Some(o) = s.object_mut(id) {
        o.attached = false;
        if o.category == Category::Pen && in_tray(&o.pose) {
            o.placed = true;
        }
    }
}

pub fn in_tray(p: &Pose2) -> bool {
    (p.x - TRAY_CENTER[0]).abs() <= TRAY_HALF && (p.y - TRAY_CENTER[1]).abs() <= TRAY_HALF
}

pub fn in_box_interior(p: &Pose2) -> bool {
    (p.x - BOX_CENTER[0]).abs() <= BOX_INTERIOR_HALF && (p.y - BOX_CENTER[1]).abs() <= BOX_INTERIOR_HALF
}

fn clamp_pose(p: Pose2) -> Pose2 {
    Pose2 { x: p.x.clamp(0.0, 1.0), y: p.y.clamp(0.0, 1.0), theta: p.theta }
}

fn follow_attachment(s: &mut WorkspaceState, ev: &mut StepEvents) {
    let Some(id) = s.attached_id else { return };
    let ee = s.ee;
    let category = s.object(id).map(|o| o.category);
    if category == Some(Category::BoxLid) {
        // The handle runs on a straight rope line; pull distance maps
        // linearly onto the lid angle.
        let along = (ee.x - HANDLE_CLOSED[0]) * PULL_DIR[0] + (ee.y - HANDLE_CLOSED[1]) * PULL_DIR[1];
        let pull = along.clamp(0.0, PULL_LEN);
        let hx = HANDLE_CLOSED[0] + PULL_DIR[0] * pull;
        let hy = HANDLE_CLOSED[1] + PULL_DIR[1] * pull;
        s.lid_angle = pull / PULL_LEN * FRAC_PI_2;
        if let Some(o) = s.object_mut(id) {
            o.pose.x = hx;
            o.pose.y = hy;
        }
        if ee.dist([hx, hy]) > HANDLE_SLIP {
            release(s, id);
            ev.slipped = true;
        }
        return;
    }
    let offset = s.attach_offset.expect("attached object has an offset");
    let pose = clamp_pose(ee.compose(&offset));
    if let Some(o) = s.object_mut(id) {
        o.pose = pose;
    }
    update_riders(s);
}

fn update_riders(s: &mut WorkspaceState) {
    let carriers: Vec<(u32, Pose2)> = s.objects.iter().map(|o| (o.id, o.pose)).collect();
    for o in s.objects.iter_mut() {
        if let Some((cid, off)) = o.rides_on {
            if let Some((_, cp)) = carriers.iter().find(|(id, _)| *id == cid) {
                o.pose.x = cp.x + off[0];
                o.pose.y = cp.y + off[1];
            }
        }
    }
}

fn advance_belt(s: &mut WorkspaceState) {
    if !s.task.is_belt() {
        return;
    }
    s.belt_steps += 1;
    let per_step = s.belt_speed / CONTROL_HZ as f64;
    let n = s.belt_steps;
    let mut exited = Vec::new();
    for o in s.objects.iter_mut() {
        if let Some(track) = o.belt {
            if o.attached || o.exited {
                continue;
            }
            let x = track.spawn_x + (n - track.spawn_step) as f64 * per_step;
            if x >= 1.0 {
                o.pose.x = 1.0;
                o.exited = true;
                o.belt = None;
                exited.push(o.id);
            } else {
                o.pose.x = x;
            }
        }
    }
    for o in s.objects.iter_mut() {
        if let Some((cid, _)) = o.rides_on {
            if exited.contains(&cid) {
                o.exited = true;
            }
        }
    }
    update_riders(s);
}

/// Ordered subtask flags and the completed count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskStatus {
    pub flags: Vec<bool>,
    pub completed: usize,
}

impl SubtaskStatus {
    pub fn all_done(&self) -> bool {
        self.flags.iter().all(|&f| f)
    }
}

pub fn subtask_status(state: &WorkspaceState) -> SubtaskStatus {
    let sticky = |i: usize| state.milestones.get(i).copied().unwrap_or(false);
    let flags = match state.task {
        TaskId::Teacup => {
            let cup = state.first_of(Category::Cup);
            let opened = sticky(0) || state.lid_angle >= LID_OPEN_THRESHOLD;
            let grasped = sticky(1) || cup.is_some_and(|c| c.attached);
            let placed = sticky(2) || (opened && cup.is_some_and(|c| !c.attached && in_box_interior(&c.pose)));
            let closed = sticky(3) || (placed && state.lid_angle <= LID_CLOSED_THRESHOLD);
            vec![opened, grasped, placed, closed]
        }
        TaskId::BeltBowl | TaskId::BeltSpoon => {
            let target = state.target();
            let grasped = sticky(0) || target.is_some_and(|o| o.attached && !o.exited);
            let lifted = sticky(1) || target.is_some_and(|o| o.attached && o.pose.y >= LIFT_Y);
            vec![grasped, lifted]
        }
        TaskId::Pens => state
            .objects
            .iter()
            .filter(|o| o.category == Category::Pen)
            .map(|o| o.placed)
            .collect(),
    };
    let completed = if state.task == TaskId::Pens {
        flags.iter().filter(|&&f| f).count()
    } else {
        flags.iter().take_while(|&&f| f).count()
    };
    SubtaskStatus { flags, completed }
}

/// 6×32×32 semantic raster; index `channel * 1024 + row * 32 + col`, where
/// cell `(row, col)` has center `((col + 0.5) / 32, (row + 0.5) / 32)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationGrid {
    pub values: Vec<f32>,
}

impl Default for ObservationGrid {
    fn default() -> Self {
        ObservationGrid { values: vec![0.0; GRID_LEN] }
    }
}

impl ObservationGrid {
    pub fn index(channel: usize, row: usize, col: usize) -> usize {
        (channel * GRID_SIZE + row) * GRID_SIZE + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.values[Self::index(channel, row, col)]
    }

    pub fn cell_center(row: usize, col: usize) -> [f64; 2] {
        [(col as f64 + 0.5) / GRID_SIZE as f64, (row as f64 + 0.5) / GRID_SIZE as f64]
    }

    pub fn is_valid(&self) -> bool {
        self.values.len() == GRID_LEN && self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    fn paint(&mut self, channel: usize, shape: &Shape, pose: &Pose2) {
        let reach = shape.reach();
        let n = GRID_SIZE as f64;
        let lo = |v: f64| (((v - reach) * n - 0.5).floor().max(0.0)) as usize;
        let hi = |v: f64| ((((v + reach) * n - 0.5).ceil()).min(n - 1.0)).max(0.0) as usize;
        for row in lo(pose.y)..=hi(pose.y) {
            for col in lo(pose.x)..=hi(pose.x) {
                if shape.contains(pose, Self::cell_center(row, col)) {
                    self.values[Self::index(channel, row, col)] = 1.0;
                }
            }
        }
    }
}

/// Footprints painted for a state, as `(channel, shape, pose)`.
pub fn footprints(state: &WorkspaceState, include_ee: bool) -> Vec<(usize, Shape, Pose2)> {
    let mut out = Vec::new();
    if include_ee {
        out.push((0, Shape::Disc { r: EE_RADIUS }, state.ee));
        if state.gripper_closed() {
            out.push((1, Shape::Disc { r: GRIP_MARK_RADIUS }, state.ee));
        }
    }
    for o in &state.objects {
        out.push((o.category.channel(), o.category.shape(), o.pose));
        if o.category == Category::BoxLid {
            let depth = (LID_DEPTH * state.lid_angle.cos()).max(LID_MIN_VISIBLE);
            let center = Pose2::new(BOX_CENTER[0], LID_HINGE_Y - depth / 2.0, 0.0);
            out.push((4, Shape::Rect { hx: BOX_HALF, hy: depth / 2.0 }, center));
        }
    }
    if state.task.is_belt() {
        out.push((5, Shape::Rect { hx: 0.5, hy: BELT_HALF_WIDTH }, Pose2::new(0.5, BELT_Y, 0.0)));
    }
    out
}

pub fn rasterize(state: &WorkspaceState) -> ObservationGrid {
    rasterize_scene(state, true)
}

/// Rasterizes the scene, optionally leaving out the end-effector layers.
pub fn rasterize_scene(state: &WorkspaceState, include_ee: bool) -> ObservationGrid {
    let mut grid = ObservationGrid::default();
    for (channel, shape, pose) in footprints(state, include_ee) {
        grid.paint(channel, &shape, &pose);
    }
    grid
}

/// `[x, y, sin θ, cos θ, aperture, attached]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProprioVec(pub [f64; PROPRIO_DIM]);

impl ProprioVec {
    pub fn to_f32(&self) -> [f32; PROPRIO_DIM] {
        self.0.map(|v| v as f32)
    }
}

pub fn proprio(state: &WorkspaceState) -> ProprioVec {
    let (s, c) = state.ee.theta.sin_cos();
    ProprioVec([
        state.ee.x,
        state.ee.y,
        s,
        c,
        state.aperture,
        if state.attached_id.is_some() { 1.0 } else { 0.0 },
    ])
}

/// Stable digest of a state, used to fingerprint rollouts.
pub fn state_hash(state: &WorkspaceState) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(state).expect("state serializes");
    hex::encode(Sha256::digest(&bytes))
}
