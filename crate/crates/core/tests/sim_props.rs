use proptest::prelude::*;

use hdspace_core::expert::expert_action;
use hdspace_core::sim::*;

fn task_strategy() -> impl Strategy<Value = TaskId> {
    prop::sample::select(TaskId::ALL.to_vec())
}

fn action_strategy(scale: f64) -> impl Strategy<Value = Action> {
    (-scale..scale, -scale..scale, -4.0 * scale..4.0 * scale, 0..3usize).prop_map(|(dx, dy, dt, g)| {
        let grip = [Grip::Open, Grip::Hold, Grip::Close][g];
        Action::new(dx, dy, dt, grip)
    })
}

fn init(task: TaskId, seed: u64) -> WorkspaceState {
    init_task(task, seed, task.is_belt().then_some(BELT_SPEEDS[(seed % 2) as usize])).unwrap()
}

/// Walk from the task start that follows the scripted expert except where
/// `actions` holds a perturbation; every visited state.
fn walk(task: TaskId, seed: u64, actions: &[Option<Action>]) -> Vec<WorkspaceState> {
    let mut s = init(task, seed);
    let mut out = vec![s.clone()];
    for a in actions {
        let a = match a {
            Some(a) => *a,
            None => expert_action(&s, None).unwrap_or(Action::new(0.0, 0.0, 0.0, Grip::Open)),
        };
        s = step(&s, &a);
        out.push(s.clone());
    }
    out
}

fn perturbed(scale: f64, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Option<Action>>> {
    prop::collection::vec(prop::option::weighted(0.3, action_strategy(scale)), len)
}

fn channel_of(c: Category) -> usize {
    match c {
        Category::Cup | Category::Spoon | Category::Pen | Category::BeltItem => 2,
        Category::BoxBase | Category::Tray | Category::Bowl => 3,
        Category::BoxLid => 4,
    }
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0) };
    ((p[0] - a[0] - t * vx).powi(2) + (p[1] - a[1] - t * vy).powi(2)).sqrt()
}

fn in_disc(p: [f64; 2], c: &Pose2, r: f64) -> bool {
    ((p[0] - c.x).powi(2) + (p[1] - c.y).powi(2)).sqrt() <= r
}

fn in_capsule(p: [f64; 2], c: &Pose2, half: f64, r: f64) -> bool {
    let (ux, uy) = (c.theta.cos() * half, c.theta.sin() * half);
    seg_dist(p, [c.x - ux, c.y - uy], [c.x + ux, c.y + uy]) <= r
}

fn in_rect(p: [f64; 2], cx: f64, cy: f64, hx: f64, hy: f64) -> bool {
    (p[0] - cx).abs() <= hx && (p[1] - cy).abs() <= hy
}

/// Occupancy computed cell by cell from object geometry.
fn oracle_raster(s: &WorkspaceState) -> Vec<f32> {
    let n = GRID_SIZE;
    let mut out = vec![0.0f32; GRID_LEN];
    for row in 0..n {
        for col in 0..n {
            let p = [(col as f64 + 0.5) / n as f64, (row as f64 + 0.5) / n as f64];
            let mut set = |ch: usize| out[ch * n * n + row * n + col] = 1.0;
            if in_disc(p, &s.ee, EE_RADIUS) {
                set(0);
            }
            if s.aperture < 0.5 && in_disc(p, &s.ee, GRIP_MARK_RADIUS) {
                set(1);
            }
            for o in &s.objects {
                let c = &o.pose;
                let inside = match o.category {
                    Category::Cup => in_disc(p, c, CUP_RADIUS),
                    Category::BoxLid => in_disc(p, c, HANDLE_RADIUS),
                    Category::Bowl => in_disc(p, c, BOWL_RADIUS),
                    Category::BeltItem => in_disc(p, c, 0.03),
                    Category::Spoon => in_capsule(p, c, SPOON_HALF_LEN, SPOON_RADIUS),
                    Category::Pen => in_capsule(p, c, PEN_HALF_LEN, PEN_RADIUS),
                    Category::BoxBase => in_rect(p, c.x, c.y, BOX_HALF, BOX_HALF),
                    Category::Tray => in_rect(p, c.x, c.y, TRAY_HALF, TRAY_HALF),
                };
                if inside {
                    set(channel_of(o.category));
                }
                if o.category == Category::BoxLid {
                    let depth = (LID_DEPTH * s.lid_angle.cos()).max(LID_MIN_VISIBLE);
                    if in_rect(p, BOX_CENTER[0], LID_HINGE_Y - depth / 2.0, BOX_HALF, depth / 2.0) {
                        set(4);
                    }
                }
            }
            if s.task.is_belt() && (p[1] - BELT_Y).abs() <= BELT_HALF_WIDTH {
                set(5);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stepping_is_deterministic(task in task_strategy(), seed in 0u64..10_000,
                                 actions in perturbed(0.05, 1..120)) {
        let a = walk(task, seed, &actions);
        let b = walk(task, seed, &actions);
        prop_assert_eq!(state_hash(a.last().unwrap()), state_hash(b.last().unwrap()));
        prop_assert_eq!(a.last().unwrap(), b.last().unwrap());
    }

    #[test]
    fn motion_never_exceeds_the_step_limits(task in task_strategy(), seed in 0u64..10_000,
                                            actions in perturbed(1.0, 1..80)) {
        let states = walk(task, seed, &actions);
        for w in states.windows(2) {
            prop_assert!((w[1].ee.x - w[0].ee.x).abs() <= MAX_STEP + 1e-12);
            prop_assert!((w[1].ee.y - w[0].ee.y).abs() <= MAX_STEP + 1e-12);
            prop_assert!(normalize_angle(w[1].ee.theta - w[0].ee.theta).abs() <= MAX_ROT + 1e-12);
            prop_assert!(w[1].ee.in_workspace());
            prop_assert_eq!(w[1].t, w[0].t + 1);
        }
    }

    #[test]
    fn at_most_one_object_is_attached(task in task_strategy(), seed in 0u64..10_000,
                                      actions in perturbed(0.03, 1..200)) {
        for s in walk(task, seed, &actions) {
            let attached: Vec<u32> = s.objects.iter().filter(|o| o.attached).map(|o| o.id).collect();
            prop_assert!(attached.len() <= 1);
            prop_assert_eq!(attached.first().copied(), s.attached_id);
            prop_assert!(s.validate().is_ok(), "{:?}", s.validate());
        }
    }

    #[test]
    fn subtask_flags_are_monotone(task in task_strategy(), seed in 0u64..10_000,
                                  actions in perturbed(0.03, 1..200)) {
        let states = walk(task, seed, &actions);
        for w in states.windows(2) {
            let (a, b) = (subtask_status(&w[0]), subtask_status(&w[1]));
            prop_assert!(a.flags.iter().zip(&b.flags).all(|(x, y)| !x || *y));
            prop_assert!(b.completed >= a.completed);
            prop_assert!(b.completed <= task.max_completed());
        }
    }

    #[test]
    fn raster_matches_geometry_oracle(task in task_strategy(), seed in 0u64..10_000,
                                      actions in perturbed(0.03, 0..60)) {
        let s = walk(task, seed, &actions).pop().unwrap();
        let grid = rasterize(&s);
        prop_assert!(grid.is_valid());
        prop_assert_eq!(grid.values, oracle_raster(&s));
    }

    #[test]
    fn free_belt_items_advance_at_belt_speed(seed in 0u64..10_000, fast in any::<bool>(), spoon in any::<bool>()) {
        let task = if spoon { TaskId::BeltSpoon } else { TaskId::BeltBowl };
        let speed = BELT_SPEEDS[fast as usize];
        let mut s = init_task(task, seed, Some(speed)).unwrap();
        let hold = Action::new(0.0, 0.0, 0.0, Grip::Hold);
        for _ in 0..400 {
            let next = step(&s, &hold);
            for (a, b) in s.objects.iter().zip(&next.objects) {
                if a.belt.is_some() && !b.exited {
                    prop_assert!((b.pose.x - a.pose.x - speed / CONTROL_HZ as f64).abs() < 1e-9);
                    prop_assert_eq!(a.pose.y, b.pose.y);
                }
                if b.exited {
                    prop_assert_eq!(b.pose.x, 1.0);
                }
                prop_assert!(!(a.exited && !b.exited), "exit is permanent");
            }
            s = next;
        }
        prop_assert!(s.target().unwrap().exited, "target leaves the belt within the horizon");
    }
}

#[test]
fn oracle_agrees_on_every_initial_scene() {
    for task in TaskId::ALL {
        for seed in 0..50 {
            let s = init(task, seed);
            assert_eq!(rasterize(&s).values, oracle_raster(&s), "{task} seed {seed}");
        }
    }
}
