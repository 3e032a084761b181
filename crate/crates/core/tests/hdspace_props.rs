use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hdspace_core::dataset::{collect_corpus, Mode};
use hdspace_core::hdspace::*;
use hdspace_core::sim::{self, normalize_angle, Category, TaskId, HOME};
use hdspace_core::verify::{chi_square, sampler_bins};

fn spaces() -> Vec<(TaskId, usize)> {
    TaskId::ALL.iter().flat_map(|&t| (0..segment_task(t).len()).map(move |i| (t, i))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn samples_stay_in_the_clipped_region(which in prop::sample::select(spaces()), seed in 0u64..100_000) {
        let (task, index) = which;
        let state = sim::init_task(task, seed, None).unwrap();
        let space = &segment_task(task)[index];
        let center = resolve_region(space, &state).unwrap();
        let laid_out = apply_precondition(&state, space).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = sample_start(space, &state, &mut r).unwrap();
            prop_assert!(p.in_workspace());
            prop_assert!(space.start_region.contains(&center, &p));
            prop_assert!(!start_collides(space, &laid_out, &p));
            let placed = place_start(&state, space, p).unwrap();
            prop_assert!(placed.validate().is_ok());
            prop_assert_eq!(placed.ee, sim::Pose2::new(p.x, p.y, normalize_angle(p.theta)));
        }
    }

    #[test]
    fn regions_follow_their_anchor(seed in 0u64..100_000, dx in -0.02f64..0.02, dy in -0.02f64..0.02, belt in any::<bool>()) {
        let (task, category) = if belt { (TaskId::BeltBowl, Category::Bowl) } else { (TaskId::Teacup, Category::Cup) };
        let index = if belt { 0 } else { 1 };
        let space = &segment_task(task)[index];
        let state = sim::init_task(task, seed, None).unwrap();
        let mut moved = state.clone();
        let id = moved.first_of(category).unwrap().id;
        let o = moved.object_mut(id).unwrap();
        o.pose.x += dx;
        o.pose.y += dy;
        let (c0, c1) = (resolve_region(space, &state).unwrap(), resolve_region(space, &moved).unwrap());
        prop_assert!((c1.x - c0.x - dx).abs() < 1e-12 && (c1.y - c0.y - dy).abs() < 1e-12);
        let whole = |c: &sim::Pose2| {
            let hw = space.start_region.half_width;
            c.x - hw >= 0.0 && c.x + hw <= 1.0 && c.y - hw >= 0.0 && c.y + hw <= 1.0
        };
        let laid0 = apply_precondition(&state, space).unwrap();
        let laid1 = apply_precondition(&moved, space).unwrap();
        prop_assume!(whole(&c0) && whole(&c1));
        let mut r0 = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut r1 = r0.clone();
        for _ in 0..10 {
            let p0 = sample_start(space, &state, &mut r0).unwrap();
            let p1 = sample_start(space, &moved, &mut r1).unwrap();
            prop_assume!(!start_collides(space, &laid1, &sim::Pose2::new(p0.x + dx, p0.y + dy, p0.theta)));
            prop_assume!(!start_collides(space, &laid0, &sim::Pose2::new(p1.x - dx, p1.y - dy, p1.theta)));
            prop_assert!((p1.x - p0.x - dx).abs() < 1e-12, "{p0:?} {p1:?}");
            prop_assert!((p1.y - p0.y - dy).abs() < 1e-12);
            prop_assert!((p1.theta - p0.theta).abs() < 1e-12);
        }
    }
}

#[test]
fn every_space_passes_chi_square_on_several_scenes() {
    for (task, index) in spaces() {
        for seed in [2, 3] {
            let (obs, exp) = sampler_bins(task, index, seed, 10_000).unwrap();
            let (stat, dof, p) = chi_square(&obs, &exp);
            assert!(p > 0.01, "{task} space {index} seed {seed}: chi2 {stat} dof {dof} p {p}");
        }
    }
}

#[test]
fn hd_regions_cover_the_anchor_box_and_naive_starts_are_a_single_pose() {
    for task in TaskId::ALL {
        let state = sim::init_task(task, 3, None).unwrap();
        for space in segment_task(task) {
            if let AnchorMode::ObjectRelative { .. } = space.start_region.anchor_mode {
                let c = resolve_region(&space, &state).unwrap();
                let hw = space.start_region.half_width;
                assert!(hw >= DEFAULT_HALF_WIDTH - 1e-12);
                for (ox, oy) in [(-hw, -hw), (hw, hw), (-hw, hw), (hw, -hw)] {
                    let corner = sim::Pose2::new(c.x + ox, c.y + oy, c.theta);
                    assert!(space.start_region.contains(&c, &corner), "{task} space {}", space.index);
                }
            }
        }
        let speed = task.is_belt().then_some(0.16);
        let starts = |mode: Mode| -> BTreeSet<[u64; 3]> {
            collect_corpus(task, mode, 12, 40, speed, None)
                .unwrap()
                .iter()
                .map(|e| e.frames[0].proprio)
                .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64].map(f64::to_bits))
                .collect()
        };
        let naive = starts(Mode::Naive);
        assert_eq!(naive.len(), 1, "{task}");
        let home = [HOME.x, HOME.y, HOME.theta.sin()].map(|v| (v as f32) as f64).map(f64::to_bits);
        assert!(naive.contains(&home));
        assert!(starts(Mode::Hd).len() > 1, "{task}");
    }
}

#[test]
fn boundaries_overlap_for_more_seeds() {
    for task in TaskId::ALL {
        for seed in [11, 12] {
            let r = verify_overlap(task, 300, seed).unwrap();
            assert!(r.passes(), "{r:?}");
        }
    }
}
