//! Atomic task segmentation and hierarchical start-pose sampling.
//!
//! Each task is cut into a declarative sequence of [`AtomicSpace`]s. A space
//! owns a start region around a target point, a canonical initializer that
//! reproduces the outcome of the preceding subtasks, and a termination
//! predicate. Termination of space `i` requires the end-effector to sit in the
//! start region of space `i + 1`, so consecutive spaces chain.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert;
use crate::rng;
use crate::sim::{
    self, normalize_angle, Category, Pose2, TaskId, WorkspaceState, BOWL_PREFERRED_RIM, BOX_CENTER, EE_RADIUS,
    HOME, TRAY_CENTER,
};

pub const DEFAULT_HALF_WIDTH: f64 = 0.12;
pub const DEFAULT_THETA_HALF_RANGE: f64 = 0.5;
/// Step cap for a single atomic-space episode.
pub const ATOMIC_CAP: usize = 200;
const MAX_REJECTIONS: usize = 100_000;

/// Object a moving start region is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorRef {
    LidHandle,
    Cup,
    BeltTarget,
    PenTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum AnchorMode {
    FixedAnchor,
    ObjectRelative { anchor: AnchorRef },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartRegion {
    /// Absolute center for fixed anchors; offset from the resolved anchor
    /// for object-relative ones.
    pub center: Pose2,
    pub half_width: f64,
    pub theta_half_range: f64,
    pub anchor_mode: AnchorMode,
}

impl StartRegion {
    /// Axis-aligned box test on position plus the orientation window.
    pub fn contains(&self, resolved_center: &Pose2, pose: &Pose2) -> bool {
        const EPS: f64 = 1e-9;
        (pose.x - resolved_center.x).abs() <= self.half_width + EPS
            && (pose.y - resolved_center.y).abs() <= self.half_width + EPS
            && normalize_angle(pose.theta - resolved_center.theta).abs() <= self.theta_half_range + EPS
    }

    /// `[x_lo, x_hi, y_lo, y_hi]` of the region clipped to the workspace, if
    /// the intersection is non-empty.
    pub fn clipped_bounds(&self, resolved_center: &Pose2) -> Option<[f64; 4]> {
        let lo_x = (resolved_center.x - self.half_width).max(0.0);
        let hi_x = (resolved_center.x + self.half_width).min(1.0);
        let lo_y = (resolved_center.y - self.half_width).max(0.0);
        let hi_y = (resolved_center.y + self.half_width).min(1.0);
        (lo_x <= hi_x && lo_y <= hi_y).then_some([lo_x, hi_x, lo_y, hi_y])
    }
}

/// Canonical state initializers reproducing the outcome of earlier subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precondition {
    Fresh,
    LidOpen,
    LidOpenCupAttached,
    LidOpenCupInBox,
    BeltLive,
    PensPick,
    PensCarry,
}

impl Precondition {
    pub fn id(&self) -> &'static str {
        match self {
            Precondition::Fresh => "fresh",
            Precondition::LidOpen => "lid-open",
            Precondition::LidOpenCupAttached => "lid-open-cup-attached",
            Precondition::LidOpenCupInBox => "lid-open-cup-in-box",
            Precondition::BeltLive => "belt-live",
            Precondition::PensPick => "pens-pick",
            Precondition::PensCarry => "pens-carry",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    LidOpenedHandoff,
    CupGraspedHandoff,
    CupPlacedHandoff,
    LidClosed,
    TargetLifted,
    PenAttachedHandoff,
    PenPlaced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptId {
    OpenLid,
    PickCup,
    PlaceInBox,
    CloseLid,
    BeltGrasp,
    PickPen,
    PlacePen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicSpace {
    pub task: TaskId,
    pub index: usize,
    pub name: String,
    pub start_region: StartRegion,
    /// The space's grasp requires a matching end-effector orientation.
    pub oriented: bool,
    pub precondition: Precondition,
    pub termination: Termination,
    pub expert_script: ScriptId,
}

fn region(anchor: Option<AnchorRef>, center: Pose2, theta_half_range: f64) -> StartRegion {
    StartRegion {
        center,
        half_width: DEFAULT_HALF_WIDTH,
        theta_half_range,
        anchor_mode: match anchor {
            Some(anchor) => AnchorMode::ObjectRelative { anchor },
            None => AnchorMode::FixedAnchor,
        },
    }
}

/// Declarative segmentation of a task into its atomic spaces.
pub fn segment_task(task: TaskId) -> Vec<AtomicSpace> {
    let rel = Pose2::new(0.0, 0.0, 0.0);
    let space = |index: usize,
                 name: &str,
                 start_region: StartRegion,
                 oriented: bool,
                 precondition: Precondition,
                 termination: Termination,
                 expert_script: ScriptId| AtomicSpace {
        task,
        index,
        name: name.to_string(),
        start_region,
        oriented,
        precondition,
        termination,
        expert_script,
    };
    match task {
        TaskId::Teacup => vec![
            space(
                0,
                "open-lid",
                region(Some(AnchorRef::LidHandle), rel, 0.0),
                false,
                Precondition::Fresh,
                Termination::LidOpenedHandoff,
                ScriptId::OpenLid,
            ),
            space(
                1,
                "pick-cup",
                region(Some(AnchorRef::Cup), rel, 0.0),
                false,
                Precondition::LidOpen,
                Termination::CupGraspedHandoff,
                ScriptId::PickCup,
            ),
            space(
                2,
                "place-in-box",
                region(None, Pose2::new(BOX_CENTER[0], BOX_CENTER[1], HOME.theta), 0.0),
                false,
                Precondition::LidOpenCupAttached,
                Termination::CupPlacedHandoff,
                ScriptId::PlaceInBox,
            ),
            space(
                3,
                "close-lid",
                region(Some(AnchorRef::LidHandle), rel, 0.0),
                false,
                Precondition::LidOpenCupInBox,
                Termination::LidClosed,
                ScriptId::CloseLid,
            ),
        ],
        TaskId::BeltBowl => vec![space(
            0,
            "grasp-moving-bowl",
            region(Some(AnchorRef::BeltTarget), rel, 0.0),
            false,
            Precondition::BeltLive,
            Termination::TargetLifted,
            ScriptId::BeltGrasp,
        )],
        TaskId::BeltSpoon => vec![space(
            0,
            "grasp-moving-spoon",
            region(Some(AnchorRef::BeltTarget), rel, DEFAULT_THETA_HALF_RANGE),
            true,
            Precondition::BeltLive,
            Termination::TargetLifted,
            ScriptId::BeltGrasp,
        )],
        TaskId::Pens => vec![
            space(
                0,
                "pick-pen",
                region(Some(AnchorRef::PenTarget), rel, 0.0),
                false,
                Precondition::PensPick,
                Termination::PenAttachedHandoff,
                ScriptId::PickPen,
            ),
            space(
                1,
                "place-in-tray",
                region(None, Pose2::new(TRAY_CENTER[0], TRAY_CENTER[1], HOME.theta), 0.0),
                false,
                Precondition::PensCarry,
                Termination::PenPlaced,
                ScriptId::PlacePen,
            ),
        ],
    }
}

/// Even split of `total` episodes over `spaces` spaces, remainder to the
/// lowest indices.
pub fn hd_quotas(total: usize, spaces: usize) -> Vec<usize> {
    if spaces == 0 {
        return Vec::new();
    }
    (0..spaces).map(|i| total / spaces + usize::from(i < total % spaces)).collect()
}

fn check_task(space: &AtomicSpace, state: &WorkspaceState) -> Result<()> {
    if space.task != state.task {
        return Err(Error::TaskMismatch { space: space.index, expected: space.task, actual: state.task });
    }
    Ok(())
}

fn precondition_error(p: Precondition, reason: impl Into<String>) -> Error {
    Error::Precondition { precondition: p.id().to_string(), reason: reason.into() }
}

/// Which pens the pick/carry initializers pre-place, and which pen they
/// single out. Derived from the episode seed so that sampling and placement
/// agree.
fn pens_layout(state: &WorkspaceState, space_index: usize) -> Result<(Vec<u32>, u32)> {
    let pens: Vec<u32> =
        state.objects.iter().filter(|o| o.category == Category::Pen).map(|o| o.id).collect();
    let mut r = rng::stream(state.seed, &[0x7065_6e73, space_index as u64]);
    let k = r.random_range(0..pens.len());
    let mut order: Vec<u32> = sample(&mut r, pens.len(), pens.len()).into_iter().map(|i| pens[i]).collect();
    let target = order[k];
    order.truncate(k);
    order.sort_unstable();
    Ok((order, target))
}

fn set_lid(state: &mut WorkspaceState, angle: f64) {
    state.lid_angle = angle;
    let [hx, hy] = state.handle_rest();
    if let Some(h) = state.objects.iter_mut().find(|o| o.category == Category::BoxLid) {
        h.pose.x = hx;
        h.pose.y = hy;
        h.attached = false;
    }
}

fn detach_all(state: &mut WorkspaceState) {
    for o in state.objects.iter_mut() {
        o.attached = false;
    }
    state.attached_id = None;
    state.attach_offset = None;
    state.grip_timer = 0;
}

/// Applies the space's canonical layout. The end-effector is left where it is
/// and nothing is attached; [`place_start`] finishes the job.
pub fn apply_precondition(state: &WorkspaceState, space: &AtomicSpace) -> Result<WorkspaceState> {
    check_task(space, state)?;
    let p = space.precondition;
    let mut s = state.clone();
    match p {
        Precondition::Fresh => {
            detach_all(&mut s);
            set_lid(&mut s, 0.0);
            s.aperture = 1.0;
            s.milestones = vec![false; 4];
        }
        Precondition::LidOpen | Precondition::LidOpenCupAttached | Precondition::LidOpenCupInBox => {
            let cup = s.first_of(Category::Cup).ok_or_else(|| precondition_error(p, "no cup"))?.clone();
            if p == Precondition::LidOpen && (cup.attached || sim::in_box_interior(&cup.pose)) {
                return Err(precondition_error(p, "cup is not on the table"));
            }
            detach_all(&mut s);
            set_lid(&mut s, FRAC_PI_2);
            s.aperture = 1.0;
            s.milestones = vec![true, false, false, false];
            if p == Precondition::LidOpenCupInBox {
                let c = s.object_mut(cup.id).expect("cup present");
                c.pose = Pose2::new(BOX_CENTER[0], BOX_CENTER[1], cup.pose.theta);
                s.milestones = vec![true, true, true, false];
            }
            if p == Precondition::LidOpenCupAttached {
                s.milestones = vec![true, true, false, false];
            }
        }
        Precondition::BeltLive => {
            let target = s.target().ok_or_else(|| precondition_error(p, "no belt target"))?;
            if target.exited || target.attached || target.belt.is_none() && target.rides_on.is_none() {
                return Err(precondition_error(p, "target is not riding the belt"));
            }
            if s.attached_id.is_some() {
                return Err(precondition_error(p, "an object is attached"));
            }
        }
        Precondition::PensPick | Precondition::PensCarry => {
            if s.objects.iter().any(|o| o.category == Category::Pen && (o.placed || o.attached)) {
                return Err(precondition_error(p, "pens already moved"));
            }
            let (placed, _) = pens_layout(&s, space.index)?;
            for id in placed {
                let o = s.object_mut(id).expect("pen present");
                o.pose = Pose2::new(TRAY_CENTER[0], TRAY_CENTER[1], o.pose.theta);
                o.placed = true;
            }
            detach_all(&mut s);
            s.aperture = 1.0;
        }
    }
    s.milestones = sim::subtask_status(&s).flags;
    Ok(s)
}

/// World-frame anchor of an object-relative region on a laid-out state.
fn anchor_point(space: &AtomicSpace, laid_out: &WorkspaceState, anchor: AnchorRef) -> Result<Pose2> {
    let p = space.precondition;
    let missing = |what: &str| precondition_error(p, format!("no {what} to anchor on"));
    match anchor {
        AnchorRef::LidHandle => {
            let h = laid_out.first_of(Category::BoxLid).ok_or_else(|| missing("lid handle"))?;
            Ok(Pose2::new(h.pose.x, h.pose.y, HOME.theta))
        }
        AnchorRef::Cup => {
            let c = laid_out.first_of(Category::Cup).ok_or_else(|| missing("cup"))?;
            let g = c.grasp_world(&c.grasp_points[0]);
            Ok(Pose2::new(g[0], g[1], HOME.theta))
        }
        AnchorRef::BeltTarget => {
            let t = laid_out.target().ok_or_else(|| missing("belt target"))?;
            let (g, theta) = match t.category {
                Category::Bowl => (t.grasp_world(&t.grasp_points[BOWL_PREFERRED_RIM]), HOME.theta),
                _ => (t.grasp_world(&t.grasp_points[0]), nearest_axial(HOME.theta, t.pose.theta)),
            };
            Ok(Pose2::new(g[0], g[1], theta))
        }
        AnchorRef::PenTarget => {
            let (_, id) = pens_layout(laid_out, space.index)?;
            let pen = laid_out.object(id).ok_or_else(|| missing("pen"))?;
            let g = pen.grasp_world(&pen.grasp_points[0]);
            Ok(Pose2::new(g[0], g[1], HOME.theta))
        }
    }
}

/// Live center of the space's start region on `state`.
pub fn resolve_region(space: &AtomicSpace, state: &WorkspaceState) -> Result<Pose2> {
    let r = &space.start_region;
    match r.anchor_mode {
        AnchorMode::FixedAnchor => Ok(r.center),
        AnchorMode::ObjectRelative { anchor } => {
            let laid_out = apply_precondition(state, space)?;
            let a = anchor_point(space, &laid_out, anchor)?;
            Ok(Pose2::new(a.x + r.center.x, a.y + r.center.y, normalize_angle(a.theta + r.center.theta)))
        }
    }
}

/// Region center on a state that already satisfies the preceding
/// subtasks (e.g. the terminal state of the previous space). Only the target
/// pen choice depends on the initializer, so pen anchors fall back to the
/// nearest unplaced pen.
pub fn resolve_region_live(space: &AtomicSpace, state: &WorkspaceState) -> Result<Pose2> {
    match space.start_region.anchor_mode {
        AnchorMode::ObjectRelative { anchor: AnchorRef::PenTarget } => {
            let pen = state
                .objects
                .iter()
                .filter(|o| o.category == Category::Pen && o.can_be_grasped())
                .min_by(|a, b| {
                    state.ee.dist([a.pose.x, a.pose.y]).total_cmp(&state.ee.dist([b.pose.x, b.pose.y]))
                })
                .ok_or_else(|| precondition_error(space.precondition, "no pen left"))?;
            let g = pen.grasp_world(&pen.grasp_points[0]);
            Ok(Pose2::new(g[0], g[1], HOME.theta))
        }
        AnchorMode::ObjectRelative { anchor: AnchorRef::LidHandle } => {
            let h = state.first_of(Category::BoxLid).ok_or_else(|| Error::Precondition {
                precondition: space.precondition.id().into(),
                reason: "no lid handle".into(),
            })?;
            Ok(Pose2::new(h.pose.x, h.pose.y, HOME.theta))
        }
        _ => resolve_region(space, state),
    }
}

/// Object the space is about, excluded from the start collision test.
fn target_object(space: &AtomicSpace, laid_out: &WorkspaceState) -> Option<u32> {
    match space.start_region.anchor_mode {
        AnchorMode::ObjectRelative { anchor: AnchorRef::PenTarget } => {
            pens_layout(laid_out, space.index).ok().map(|(_, id)| id)
        }
        AnchorMode::ObjectRelative { anchor: AnchorRef::BeltTarget } => laid_out.target_id,
        AnchorMode::ObjectRelative { anchor: AnchorRef::Cup } => laid_out.first_of(Category::Cup).map(|o| o.id),
        AnchorMode::ObjectRelative { anchor: AnchorRef::LidHandle } => {
            laid_out.first_of(Category::BoxLid).map(|o| o.id)
        }
        AnchorMode::FixedAnchor => None,
    }
}

/// A start pose collides when the end-effector disc overlaps a free-standing
/// graspable object other than the space's target. Containers and stored
/// objects never collide.
pub fn start_collides(space: &AtomicSpace, laid_out: &WorkspaceState, pose: &Pose2) -> bool {
    let target = target_object(space, laid_out);
    laid_out.objects.iter().any(|o| {
        Some(o.id) != target
            && o.can_be_grasped()
            && o.rides_on.is_none()
            && !matches!(o.category, Category::Bowl | Category::BoxLid)
            && inflated_contains(o, pose)
    })
}

fn inflated_contains(o: &sim::ObjectState, pose: &Pose2) -> bool {
    let inflated = match o.category.shape() {
        sim::Shape::Disc { r } => sim::Shape::Disc { r: r + EE_RADIUS },
        sim::Shape::Capsule { half_len, r } => sim::Shape::Capsule { half_len, r: r + EE_RADIUS },
        sim::Shape::Rect { hx, hy } => sim::Shape::Rect { hx: hx + EE_RADIUS, hy: hy + EE_RADIUS },
    };
    inflated.contains(&o.pose, [pose.x, pose.y])
}

/// Draws a start pose uniformly from the space's region on the live state,
/// rejecting poses outside the workspace or in collision.
pub fn sample_start<R: Rng + ?Sized>(space: &AtomicSpace, state: &WorkspaceState, rng: &mut R) -> Result<Pose2> {
    let laid_out = apply_precondition(state, space)?;
    let center = resolve_region(space, state)?;
    let r = &space.start_region;
    if r.clipped_bounds(&center).is_none() {
        return Err(Error::EmptyStartRegion { space: space.index });
    }
    let hw = r.half_width;
    let th = r.theta_half_range;
    for _ in 0..MAX_REJECTIONS {
        let ox = if hw > 0.0 { rng.random_range(-hw..=hw) } else { 0.0 };
        let oy = if hw > 0.0 { rng.random_range(-hw..=hw) } else { 0.0 };
        let ot = if th > 0.0 { rng.random_range(-th..=th) } else { 0.0 };
        let pose = Pose2::new(center.x + ox, center.y + oy, normalize_angle(center.theta + ot));
        if pose.in_workspace() && !start_collides(space, &laid_out, &pose) {
            return Ok(pose);
        }
    }
    Err(Error::EmptyStartRegion { space: space.index })
}

/// Teleports the end-effector to `pose` and applies the space's initializer.
pub fn place_start(state: &WorkspaceState, space: &AtomicSpace, pose: Pose2) -> Result<WorkspaceState> {
    if !pose.in_workspace() {
        return Err(precondition_error(space.precondition, "start pose outside the workspace"));
    }
    let mut s = apply_precondition(state, space)?;
    s.ee = Pose2::new(pose.x, pose.y, normalize_angle(pose.theta));
    let carried = match space.precondition {
        Precondition::LidOpenCupAttached => s.first_of(Category::Cup).map(|o| o.id),
        Precondition::PensCarry => Some(pens_layout(state, space.index)?.1),
        _ => None,
    };
    if let Some(id) = carried {
        let ee = s.ee;
        let o = s.object_mut(id).expect("carried object present");
        o.pose = Pose2::new(ee.x, ee.y, o.pose.theta);
        o.attached = true;
        let rel = ee.relative(&o.pose);
        s.attached_id = Some(id);
        s.attach_offset = Some(rel);
        s.aperture = 0.0;
    }
    s.milestones = sim::subtask_status(&s).flags;
    debug_assert!(s.validate().is_ok(), "{:?}", s.validate());
    Ok(s)
}

/// Whether the space's termination predicate holds. `start` is the state the
/// atomic episode began from.
pub fn is_terminal(space: &AtomicSpace, start: &WorkspaceState, state: &WorkspaceState) -> bool {
    let status = sim::subtask_status(state);
    let idle = state.grip_timer == 0;
    let attached_cat = state.attached().map(|o| o.category);
    let in_next = || {
        let spaces = segment_task(space.task);
        match spaces.get(space.index + 1) {
            Some(next) => resolve_region_live(next, state)
                .map(|c| next.start_region.contains(&c, &state.ee))
                .unwrap_or(false),
            None => true,
        }
    };
    match space.termination {
        Termination::LidOpenedHandoff => status.flags[0] && attached_cat.is_none() && idle && in_next(),
        Termination::CupGraspedHandoff => attached_cat == Some(Category::Cup) && idle && in_next(),
        Termination::CupPlacedHandoff => status.flags[2] && attached_cat.is_none() && idle && in_next(),
        Termination::LidClosed => status.flags[3] && attached_cat.is_none() && idle,
        Termination::TargetLifted => status.all_done(),
        Termination::PenAttachedHandoff => attached_cat == Some(Category::Pen) && idle && in_next(),
        Termination::PenPlaced => {
            let placed = |s: &WorkspaceState| s.objects.iter().filter(|o| o.placed).count();
            placed(state) > placed(start) && attached_cat.is_none() && idle
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub from: usize,
    pub to: usize,
    pub trials: usize,
    pub contained: usize,
    pub expert_failures: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub task: TaskId,
    pub seed: u64,
    pub boundaries: Vec<BoundaryReport>,
}

impl OverlapReport {
    pub fn passes(&self) -> bool {
        self.boundaries.iter().all(|b| b.fraction == 1.0 && b.expert_failures == 0)
    }
}

/// Runs the scripted expert from sampled starts of every space that has a
/// successor and measures how often it ends inside the successor's region.
pub fn verify_overlap(task: TaskId, trials: usize, seed: u64) -> Result<OverlapReport> {
    if trials == 0 {
        return Err(Error::NoTrials);
    }
    let spaces = segment_task(task);
    let mut boundaries = Vec::new();
    for pair in spaces.windows(2) {
        let (cur, next) = (&pair[0], &pair[1]);
        let mut contained = 0;
        let mut failures = 0;
        for trial in 0..trials {
            let episode_seed = rng::derive_seed(seed, &[cur.index as u64, trial as u64]);
            let state = sim::init_task(task, episode_seed, None)?;
            let mut r = rng::stream(episode_seed, &[0x7374_6172]);
            let pose = sample_start(cur, &state, &mut r)?;
            let start = place_start(&state, cur, pose)?;
            let run = expert::expert_rollout_unrecorded(&start, Some(cur), ATOMIC_CAP)?;
            if !run.success {
                failures += 1;
                continue;
            }
            let center = resolve_region_live(next, &run.terminal)?;
            if next.start_region.contains(&center, &run.terminal.ee) {
                contained += 1;
            }
        }
        boundaries.push(BoundaryReport {
            from: cur.index,
            to: next.index,
            trials,
            contained,
            expert_failures: failures,
            fraction: contained as f64 / trials as f64,
        });
    }
    Ok(OverlapReport { task, seed, boundaries })
}

/// Angle in (-π, π] offset by `k·π` from `axis` that is closest to `from`.
pub fn nearest_axial(from: f64, axis: f64) -> f64 {
    let d = normalize_angle(axis - from);
    let d = if d > PI / 2.0 {
        d - PI
    } else if d <= -PI / 2.0 {
        d + PI
    } else {
        d
    };
    normalize_angle(from + d)
}
