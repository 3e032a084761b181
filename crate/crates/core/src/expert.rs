//! Reactive scripted demonstrator.
//!
//! The script is a pure function of the workspace state: the current phase
//! of the task is read off the subtask flags and the attachment, and the
//! expert steps straight toward the phase's waypoint. Moving targets are
//! pursued at their instantaneous grasp point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdspace::{self, nearest_axial, AtomicSpace};
use crate::sim::{
    self, normalize_angle, Action, Category, Grip, ObjectState, ObservationGrid, Pose2, ProprioVec, TaskId,
    WorkspaceState, BOWL_PREFERRED_RIM, BOX_CENTER, CONTROL_HZ, GRASP_TOL, HANDLE_CLOSED, LIFT_Y, MAX_ROT, MAX_STEP,
    PULL_DIR, PULL_LEN, TRAY_CENTER,
};

/// Arrival tolerance for release and transport waypoints.
pub const PLACE_TOL: f64 = 0.005;
/// Arrival tolerance for grasp waypoints.
pub const EXPERT_GRASP_TOL: f64 = 0.01;
/// Orientation tolerance before an aligned grasp is attempted.
pub const ALIGN_TOL: f64 = 0.05;
const LID_OVERSHOOT: f64 = 0.01;
const LIFT_MARGIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub target: Pose2,
    pub grip_on_arrival: Grip,
    pub arrival_tolerance: f64,
    /// Rotate toward `target.theta` and require alignment on arrival.
    pub align: bool,
    /// Per-step velocity of the target, matched while aligning in place.
    pub drift: [f64; 2],
}

impl Waypoint {
    fn at(target: [f64; 2], theta: f64, grip: Grip, tol: f64) -> Self {
        Waypoint {
            target: Pose2::new(target[0], target[1], theta),
            grip_on_arrival: grip,
            arrival_tolerance: tol,
            align: false,
            drift: [0.0, 0.0],
        }
    }

    pub fn arrived(&self, ee: &Pose2) -> bool {
        ee.dist([self.target.x, self.target.y]) <= self.arrival_tolerance && (!self.align || self.angle_ok(ee))
    }

    fn angle_ok(&self, ee: &Pose2) -> bool {
        normalize_angle(self.target.theta - ee.theta).abs() <= ALIGN_TOL
    }

    /// One legal action toward the waypoint.
    pub fn action(&self, ee: &Pose2) -> Action {
        let d = ee.dist([self.target.x, self.target.y]);
        if d <= self.arrival_tolerance {
            if !self.align || self.angle_ok(ee) {
                return Action::new(0.0, 0.0, 0.0, self.grip_on_arrival);
            }
            return Action::new(self.drift[0], self.drift[1], self.rotation(ee), Grip::Hold);
        }
        let step = d.min(MAX_STEP);
        let dx = (self.target.x - ee.x) / d * step;
        let dy = (self.target.y - ee.y) / d * step;
        let dtheta = if self.align { self.rotation(ee) } else { 0.0 };
        Action::new(dx, dy, dtheta, Grip::Hold)
    }

    fn rotation(&self, ee: &Pose2) -> f64 {
        let e = normalize_angle(self.target.theta - ee.theta);
        e.clamp(-MAX_ROT, MAX_ROT)
    }
}

fn grasp_wp(ee: &Pose2, p: [f64; 2]) -> Waypoint {
    Waypoint::at(p, ee.theta, Grip::Close, EXPERT_GRASP_TOL)
}

fn release_here(ee: &Pose2) -> Waypoint {
    Waypoint::at([ee.x, ee.y], ee.theta, Grip::Open, GRASP_TOL)
}

fn nearest_free_pen<'a>(state: &'a WorkspaceState) -> Option<&'a ObjectState> {
    let ee = state.ee;
    state
        .objects
        .iter()
        .filter(|o| o.category == Category::Pen && o.can_be_grasped())
        .min_by(|a, b| {
            ee.dist([a.pose.x, a.pose.y]).total_cmp(&ee.dist([b.pose.x, b.pose.y])).then(a.id.cmp(&b.id))
        })
}

/// Waypoint of the phase the state is in.
pub fn current_waypoint(state: &WorkspaceState) -> Result<Waypoint> {
    let ee = state.ee;
    let exhausted = || Error::ScriptExhausted { t: state.t };
    let attached = state.attached().map(|o| o.category);
    let flags = sim::subtask_status(state).flags;
    if attached.is_none() && state.gripper_closed() {
        return Ok(release_here(&ee));
    }
    match state.task {
        TaskId::Teacup => {
            let along = |d: f64| [HANDLE_CLOSED[0] + PULL_DIR[0] * d, HANDLE_CLOSED[1] + PULL_DIR[1] * d];
            let open_point = along(PULL_LEN + LID_OVERSHOOT);
            let closed_point = along(-LID_OVERSHOOT);
            match attached {
                Some(Category::BoxLid) if flags[2] => Ok(Waypoint::at(closed_point, ee.theta, Grip::Open, PLACE_TOL)),
                Some(Category::BoxLid) => Ok(Waypoint::at(open_point, ee.theta, Grip::Open, PLACE_TOL)),
                Some(Category::Cup) => Ok(Waypoint::at(BOX_CENTER, ee.theta, Grip::Open, PLACE_TOL)),
                Some(_) => Ok(release_here(&ee)),
                None => {
                    let handle = state.first_of(Category::BoxLid).ok_or_else(exhausted)?;
                    let cup = state.first_of(Category::Cup).ok_or_else(exhausted)?;
                    if !flags[0] || (flags[2] && !flags[3]) {
                        Ok(grasp_wp(&ee, handle.grasp_world(&handle.grasp_points[0])))
                    } else if !flags[2] {
                        Ok(grasp_wp(&ee, cup.grasp_world(&cup.grasp_points[0])))
                    } else {
                        Err(exhausted())
                    }
                }
            }
        }
        TaskId::Pens => match attached {
            Some(Category::Pen) => Ok(Waypoint::at(TRAY_CENTER, ee.theta, Grip::Open, PLACE_TOL)),
            Some(_) => Ok(release_here(&ee)),
            None => {
                let pen = nearest_free_pen(state).ok_or_else(exhausted)?;
                Ok(grasp_wp(&ee, pen.grasp_world(&pen.grasp_points[0])))
            }
        },
        TaskId::BeltBowl | TaskId::BeltSpoon => {
            let target = state.target().ok_or_else(exhausted)?;
            if target.attached {
                let lift = (LIFT_Y - target.pose.y).max(0.0) + LIFT_MARGIN;
                return Ok(Waypoint::at([ee.x, (ee.y + lift).min(1.0)], ee.theta, Grip::Hold, PLACE_TOL));
            }
            if attached.is_some() {
                return Ok(release_here(&ee));
            }
            if target.exited {
                return Err(exhausted());
            }
            let drift = [state.belt_speed / CONTROL_HZ as f64, 0.0];
            let wp = match target.category {
                Category::Bowl => Waypoint {
                    drift,
                    ..grasp_wp(&ee, target.grasp_world(&target.grasp_points[BOWL_PREFERRED_RIM]))
                },
                _ => {
                    let gp = &target.grasp_points[0];
                    let theta = if gp.oriented { nearest_axial(ee.theta, target.pose.theta) } else { ee.theta };
                    let p = target.grasp_world(gp);
                    Waypoint {
                        target: Pose2::new(p[0], p[1], theta),
                        grip_on_arrival: Grip::Close,
                        arrival_tolerance: EXPERT_GRASP_TOL,
                        align: gp.oriented,
                        drift,
                    }
                }
            };
            Ok(wp)
        }
    }
}

/// Next expert action. While the gripper is actuating, the expert repeats
/// the grip command without moving. Between grip changes the command keeps
/// the gripper's current state (close while closed, open while open).
pub fn expert_action(state: &WorkspaceState, space: Option<&AtomicSpace>) -> Result<Action> {
    if let Some(space) = space {
        if space.task != state.task {
            return Err(Error::TaskMismatch { space: space.index, expected: space.task, actual: state.task });
        }
    }
    if state.grip_timer > 0 {
        let grip = if state.gripper_closed() { Grip::Close } else { Grip::Open };
        return Ok(Action::new(0.0, 0.0, 0.0, grip));
    }
    let mut a = current_waypoint(state)?.action(&state.ee);
    if a.grip == Grip::Hold {
        a.grip = if state.gripper_closed() { Grip::Close } else { Grip::Open };
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFrame {
    pub grid: ObservationGrid,
    pub proprio: ProprioVec,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRun {
    /// Recorded triples; empty for unrecorded rollouts.
    pub frames: Vec<ExpertFrame>,
    pub actions: Vec<Action>,
    pub terminal: WorkspaceState,
    pub success: bool,
    pub failure: Option<String>,
}

impl ExpertRun {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Space termination, or full-task success when no space is given.
pub fn is_done(space: Option<&AtomicSpace>, start: &WorkspaceState, state: &WorkspaceState) -> bool {
    match space {
        Some(space) => hdspace::is_terminal(space, start, state),
        None => sim::subtask_status(state).all_done(),
    }
}

fn rollout(state: &WorkspaceState, space: Option<&AtomicSpace>, cap: usize, record: bool) -> Result<ExpertRun> {
    if cap == 0 {
        return Err(Error::ZeroCap);
    }
    if let Some(space) = space {
        if space.task != state.task {
            return Err(Error::TaskMismatch { space: space.index, expected: space.task, actual: state.task });
        }
    }
    let mut s = state.clone();
    let mut frames = Vec::new();
    let mut actions = Vec::new();
    let mut failure = None;
    while !is_done(space, state, &s) {
        if actions.len() == cap {
            failure = Some(format!("cap of {cap} steps reached"));
            break;
        }
        let a = match expert_action(&s, space) {
            Ok(a) => a,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        if record {
            frames.push(ExpertFrame { grid: sim::rasterize(&s), proprio: sim::proprio(&s), action: a });
        }
        actions.push(a);
        s = sim::step(&s, &a);
    }
    Ok(ExpertRun { frames, actions, terminal: s, success: failure.is_none(), failure })
}

/// Runs the expert until termination or `cap`, recording every
/// `(observation, proprio, action)` triple before its step.
pub fn expert_rollout(state: &WorkspaceState, space: Option<&AtomicSpace>, cap: usize) -> Result<ExpertRun> {
    rollout(state, space, cap, true)
}

/// Same as [`expert_rollout`] without rasterizing observations.
pub fn expert_rollout_unrecorded(
    state: &WorkspaceState,
    space: Option<&AtomicSpace>,
    cap: usize,
) -> Result<ExpertRun> {
    rollout(state, space, cap, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdspace::{place_start, sample_start, segment_task, ATOMIC_CAP};
    use crate::rng;
    use crate::sim::{init_task, HOME};

    #[test]
    fn far_waypoint_gives_full_step() {
        let state = init_task(TaskId::Pens, 0, None).unwrap();
        let wp = Waypoint::at([state.ee.x + 0.3, state.ee.y - 0.0], state.ee.theta, Grip::Close, GRASP_TOL);
        let a = wp.action(&Pose2::new(0.3, 0.5, 0.0));
        assert_eq!(a.grip, Grip::Hold);
        assert!((a.dx.hypot(a.dy) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn arrival_closes_without_moving() {
        let wp = Waypoint::at([0.5, 0.5], 0.0, Grip::Close, GRASP_TOL);
        let a = wp.action(&Pose2::new(0.515, 0.5, 0.0));
        assert_eq!(a, Action::new(0.0, 0.0, 0.0, Grip::Close));
    }

    #[test]
    fn full_teacup_from_home() {
        let state = init_task(TaskId::Teacup, 11, None).unwrap();
        let run = expert_rollout(&state, None, TaskId::Teacup.horizon()).unwrap();
        assert!(run.success, "{:?}", run.failure);
        assert_eq!(sim::subtask_status(&run.terminal).completed, 4);
        assert_eq!(run.frames.len(), run.steps());
    }

    #[test]
    fn full_runs_succeed_on_every_task() {
        for task in TaskId::ALL {
            for seed in 0..20 {
                let state = init_task(task, seed, None).unwrap();
                let run = expert_rollout_unrecorded(&state, None, task.horizon()).unwrap();
                assert!(run.success, "{task} seed {seed}: {:?}", run.failure);
                for a in &run.actions {
                    assert!(a.is_legal());
                }
            }
        }
    }

    #[test]
    fn atomic_space_is_shorter_than_full_run() {
        let state = init_task(TaskId::Teacup, 11, None).unwrap();
        let full = expert_rollout_unrecorded(&state, None, 700).unwrap();
        let space = &segment_task(TaskId::Teacup)[2];
        let mut r = rng::stream(11, &[1]);
        let pose = sample_start(space, &state, &mut r).unwrap();
        let start = place_start(&state, space, pose).unwrap();
        let run = expert_rollout(&start, Some(space), ATOMIC_CAP).unwrap();
        assert!(run.success);
        assert!(run.steps() < full.steps());
    }

    #[test]
    fn cap_one_reports_failure_with_one_frame() {
        let state = init_task(TaskId::Teacup, 1, None).unwrap();
        let run = expert_rollout(&state, None, 1).unwrap();
        assert!(!run.success);
        assert_eq!(run.frames.len(), 1);
        assert!(matches!(expert_rollout(&state, None, 0), Err(Error::ZeroCap)));
    }

    #[test]
    fn straight_place_terminates_within_kinematic_bound() {
        let state = init_task(TaskId::Pens, 3, None).unwrap();
        let space = &segment_task(TaskId::Pens)[1];
        let start_pose = Pose2::new(TRAY_CENTER[0] - 0.3, TRAY_CENTER[1], HOME.theta);
        let start = place_start(&state, space, start_pose).unwrap();
        let run = expert_rollout_unrecorded(&start, Some(space), ATOMIC_CAP).unwrap();
        assert!(run.success);
        let bound = (0.3f64 / 0.02).ceil() as usize + 6;
        assert!(run.steps() <= bound, "{} > {bound}", run.steps());
    }

    #[test]
    fn exhausted_script_is_an_error() {
        let state = init_task(TaskId::Pens, 1, None).unwrap();
        let run = expert_rollout_unrecorded(&state, None, 1200).unwrap();
        assert!(matches!(current_waypoint(&run.terminal), Err(Error::ScriptExhausted { .. })));
    }
}
