mod common;

use std::collections::VecDeque;

use bevinstructor::simworld::dataset::DataSpec;
use bevinstructor::simworld::features::feature_channels;
use bevinstructor::simworld::follower::follow_instruction;
use bevinstructor::simworld::grammar::{parse_instruction, render_clauses};
use bevinstructor::simworld::render::render_view;
use bevinstructor::simworld::trajectory::replay;
use bevinstructor::simworld::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::oracle_depth;

fn empty_room(g: usize) -> Scene {
    let mut walls = Vec::new();
    for i in 0..g {
        let f = i as f64;
        let gf = g as f64;
        walls.push(Segment { x0: f, y0: 0.0, x1: f + 1.0, y1: 0.0 });
        walls.push(Segment { x0: f, y0: gf, x1: f + 1.0, y1: gf });
        walls.push(Segment { x0: 0.0, y0: f, x1: 0.0, y1: f + 1.0 });
        walls.push(Segment { x0: gf, y0: f, x1: gf, y1: f + 1.0 });
    }
    Scene {
        id: 0,
        grid_size: g,
        bounds: [0.0, 0.0, g as f64, g as f64],
        wall_height: 2.5,
        walls,
        objects: vec![],
        start: (0, 0),
        goal: (1, 0),
    }
}

fn object(cell: (usize, usize), category: usize, color: usize) -> SceneObject {
    SceneObject {
        category,
        color,
        center: [cell.0 as f64 + 0.5, cell.1 as f64 + 0.5, 0.4],
        size: [0.8, 0.8, 0.8],
    }
}

/// Independent flood fill over the wall list (no scene helpers).
fn oracle_path_exists(s: &Scene) -> bool {
    let g = s.grid_size;
    let blocked_edge = |a: (usize, usize), b: (usize, usize)| {
        let (xa, ya, xb, yb) = (a.0 as f64, a.1 as f64, b.0 as f64, b.1 as f64);
        s.walls.iter().any(|w| {
            if ya == yb {
                let x = xa.max(xb);
                w.x0 == x && w.x1 == x && w.y0 <= ya && w.y1 >= ya + 1.0
            } else {
                let y = ya.max(yb);
                w.y0 == y && w.y1 == y && w.x0 <= xa && w.x1 >= xa + 1.0
            }
        })
    };
    let occupied = |c: (usize, usize)| {
        s.objects
            .iter()
            .any(|o| (o.center[0] - (c.0 as f64 + 0.5)).abs() < 1e-9 && (o.center[1] - (c.1 as f64 + 0.5)).abs() < 1e-9)
    };
    let mut seen = vec![false; g * g];
    let mut q = VecDeque::from([s.start]);
    seen[s.start.1 * g + s.start.0] = true;
    while let Some(c) = q.pop_front() {
        if c == s.goal {
            return true;
        }
        let mut ns = Vec::new();
        if c.0 + 1 < g {
            ns.push((c.0 + 1, c.1));
        }
        if c.0 > 0 {
            ns.push((c.0 - 1, c.1));
        }
        if c.1 + 1 < g {
            ns.push((c.0, c.1 + 1));
        }
        if c.1 > 0 {
            ns.push((c.0, c.1 - 1));
        }
        for n in ns {
            if !seen[n.1 * g + n.0] && !occupied(n) && !blocked_edge(c, n) {
                seen[n.1 * g + n.0] = true;
                q.push_back(n);
            }
        }
    }
    false
}

#[test]
fn generated_scenes_have_paths_and_valid_objects() {
    let p = WorldParams::default();
    for seed in 1..=100 {
        let s = generate_scene(seed, &p).unwrap();
        assert!(oracle_path_exists(&s), "seed {seed}");
        for (i, o) in s.objects.iter().enumerate() {
            assert!(o.size.iter().all(|&v| v > 0.0));
            assert!(o.min()[0] >= s.bounds[0] && o.max()[0] <= s.bounds[2]);
            assert!(o.min()[1] >= s.bounds[1] && o.max()[1] <= s.bounds[3]);
            for b in &s.objects[i + 1..] {
                assert_ne!(o.center, b.center);
            }
        }
    }
}

#[test]
fn trajectories_replay_exactly() {
    let p = WorldParams::default();
    for seed in 0..100 {
        let s = generate_scene(seed + 500, &p).unwrap();
        let t = sample_trajectory(&s, seed).unwrap();
        assert_eq!(t.actions.last().unwrap().kind, ActionKind::Stop);
        assert_eq!(replay(&t.poses[0], &t.actions), t.poses);
        for (pose, a) in t.poses.iter().zip(&t.actions) {
            assert_eq!(a.view_index == 0, a.kind == ActionKind::Stop);
            assert!((0.0..2.0 * std::f64::consts::PI).contains(&pose.heading));
            if a.kind == ActionKind::Forward {
                assert!(s.step(pose.cell(), pose.dir()).is_some(), "collision in seed {seed}");
            }
        }
        assert_eq!(t.poses.last().unwrap().cell(), s.goal);
    }
}

#[test]
fn wall_two_meters_ahead() {
    let s = empty_room(6);
    let rig = CameraRig {
        image_w: 33,
        image_h: 33,
        ..CameraRig::default()
    };
    let pose = Pose {
        position: [4.0, 2.5, 0.0],
        heading: 0.0,
        elevation: 0.0,
    };
    let cam = rig.cameras()[0];
    let v = render_view(&s, &pose, &cam, &rig);
    let center = 16 * 33 + 16;
    assert!((v.depth[center] - 2.0).abs() <= 1e-9);
    assert_eq!(v.category[center], 0);
}

#[test]
fn empty_direction_reads_max_range() {
    // Upward-looking rows above a low wall escape the room.
    let mut s = empty_room(6);
    s.wall_height = 1.0;
    let rig = CameraRig::default();
    let pose = Pose {
        position: [3.5, 3.5, 0.0],
        heading: 0.0,
        elevation: 0.0,
    };
    let v = render_view(&s, &pose, &rig.cameras()[0], &rig);
    assert_eq!(v.category[0], 0);
    assert_eq!(v.depth[0], rig.max_range);
}

#[test]
fn rendered_depth_matches_brute_force_oracle() {
    let p = WorldParams::default();
    let rig = CameraRig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for seed in 0..12 {
        let s = generate_scene(seed, &p).unwrap();
        let free = s.free_cells();
        let pose = Pose::at_cell(free[rng.random_range(0..free.len())], rng.random_range(0..4));
        for cam in rig.cameras() {
            let v = render_view(&s, &pose, &cam, &rig);
            for row in 0..rig.image_h {
                for col in 0..rig.image_w {
                    let (o, d) = cam.pixel_ray(&pose, row, col);
                    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    let u = d.map(|x| x / n);
                    let want = oracle_depth(&s, o, u, rig.max_range);
                    worst = worst.max((v.depth[row * rig.image_w + col] - want).abs());
                }
            }
        }
    }
    assert!(worst <= 1e-9, "max depth error {worst}");
}

#[test]
fn visible_object_category_appears() {
    let rig = CameraRig::default();
    for category in 0..8 {
        let mut s = empty_room(8);
        s.objects.push(object((5, 3), category, category % 4));
        let pose = Pose::at_cell((2, 3), 0);
        let cam = rig.cameras()[0];
        // Containment oracle: all eight box corners project inside the image.
        let (lo, hi) = (s.objects[0].min(), s.objects[0].max());
        for c in 0..8 {
            let p = [
                if c & 1 == 0 { lo[0] } else { hi[0] },
                if c & 2 == 0 { lo[1] } else { hi[1] },
                if c & 4 == 0 { lo[2] } else { hi[2] },
            ];
            assert!(cam.project(p, &pose).is_some());
        }
        let v = render_view(&s, &pose, &cam, &rig);
        assert!(v.category.contains(&((category + 1) as u8)));
    }
}

#[test]
fn pose_outside_bounds_is_an_error() {
    let s = empty_room(6);
    let pose = Pose {
        position: [-1.0, 2.0, 0.0],
        heading: 0.0,
        elevation: 0.0,
    };
    assert!(render_observation(&s, &pose, &CameraRig::default(), 0).is_err());
}

#[test]
fn feature_histograms_are_normalized() {
    let p = WorldParams::default();
    let rig = CameraRig::default();
    let s = generate_scene(3, &p).unwrap();
    let pose = Pose::at_cell(s.start, 1);
    let obs = render_observation(&s, &pose, &rig, 0).unwrap();
    for v in &obs.views {
        let f = extract_view_features(v, 4, 8, 4).unwrap();
        assert_eq!(f.data.shape(), &[feature_channels(8, 4), 8, 8]);
        let d = f.data.data();
        for cell in 0..64 {
            let cat: f64 = (0..9).map(|c| d[c * 64 + cell]).sum();
            assert!((cat - 1.0).abs() < 1e-12);
            let col: f64 = (9..13).map(|c| d[c * 64 + cell]).sum();
            let objects = 1.0 - d[cell];
            assert!(if objects > 0.0 { (col - 1.0).abs() < 1e-12 } else { col == 0.0 });
        }
        assert_eq!(f, extract_view_features(v, 4, 8, 4).unwrap());
    }
    assert!(matches!(extract_view_features(&obs.views[0], 5, 8, 4), Err(bevinstructor::Error::Config(_))));
}

#[test]
fn free_space_view_features() {
    let view = RenderedView {
        width: 8,
        height: 8,
        category: vec![0; 64],
        color: vec![0; 64],
        depth: vec![10.0; 64],
        forward_depth: vec![10.0; 64],
        heading: 0.0,
        elevation: 0.0,
    };
    let f = extract_view_features(&view, 4, 8, 4).unwrap();
    let d = f.data.data();
    for cell in 0..4 {
        assert_eq!(d[cell], 1.0);
        for c in 1..13 {
            assert_eq!(d[c * 4 + cell], 0.0);
        }
        assert_eq!(d[13 * 4 + cell], 10.0);
        assert_eq!(d[14 * 4 + cell], 10.0);
    }
}

#[test]
fn red_sofa_instruction() {
    let mut s = empty_room(6);
    s.objects.push(object((3, 2), 2, 0));
    s.start = (1, 2);
    s.goal = (2, 2);
    let poses = vec![Pose::at_cell((1, 2), 0), Pose::at_cell((2, 2), 0)];
    let traj = Trajectory {
        poses,
        actions: vec![ActionStep::new(ActionKind::Forward), ActionStep::new(ActionKind::Stop)],
    };
    let (tokens, landmarks) = synthesize_instruction(&s, &traj);
    assert_eq!(tokens.join(" "), "walk forward . stop at the red sofa .");
    assert_eq!(landmarks.iter().map(|l| l.phrase()).collect::<Vec<_>>(), vec!["red sofa"]);
}

#[test]
fn no_salient_objects_gives_motion_only() {
    let mut s = empty_room(8);
    s.objects.push(object((7, 7), 1, 1));
    s.start = (0, 0);
    s.goal = (2, 0);
    let traj = Trajectory {
        poses: vec![Pose::at_cell((0, 0), 0), Pose::at_cell((1, 0), 0), Pose::at_cell((2, 0), 0)],
        actions: vec![
            ActionStep::new(ActionKind::Forward),
            ActionStep::new(ActionKind::Forward),
            ActionStep::new(ActionKind::Stop),
        ],
    };
    let (tokens, landmarks) = synthesize_instruction(&s, &traj);
    assert!(landmarks.is_empty());
    assert_eq!(tokens.join(" "), "walk forward . walk forward . stop .");
}

fn corridor() -> Scene {
    let mut s = empty_room(6);
    for i in 0..6 {
        let f = i as f64;
        s.walls.push(Segment { x0: f, y0: 2.0, x1: f + 1.0, y1: 2.0 });
        s.walls.push(Segment { x0: f, y0: 3.0, x1: f + 1.0, y1: 3.0 });
    }
    s.start = (0, 2);
    s.goal = (3, 2);
    s
}

#[test]
fn follower_corner_cases() {
    let s = corridor();
    let start = Pose::at_cell(s.start, 0);
    let ok: Vec<&str> = "walk forward . walk forward . walk forward . stop .".split(' ').collect();
    assert!(follow_instruction(&s, &start, &ok).success);
    let wrong: Vec<&str> = "turn left . walk forward . walk forward . walk forward . stop .".split(' ').collect();
    assert!(!follow_instruction(&s, &start, &wrong).success);
    let empty: Vec<&str> = vec![];
    let r = follow_instruction(&s, &start, &empty);
    assert_eq!(r.end_pose, start);
    assert!(!r.success);
}

#[test]
fn corpus_round_trip_and_split_hygiene() {
    let spec = DataSpec {
        world: WorldParams::default(),
        rig: CameraRig::default(),
        patch: 4,
        n_train: 24,
        n_seen: 6,
        n_unseen: 6,
        seed: 5,
    };
    let ds = Dataset::generate(&spec).unwrap();
    assert!(ds.scene_ids(Split::Train).is_disjoint(&ds.scene_ids(Split::Unseen)));
    assert!(ds.scene_ids(Split::Seen).is_subset(&ds.scene_ids(Split::Train)));
    for ep in &ds.episodes {
        let scene = ds.episode_scene(ep).unwrap();
        let r = follow_instruction(&scene, &ep.trajectory.poses[0], &ep.instruction);
        assert!(r.success, "episode {} '{}'", ep.id, ep.instruction.join(" "));
        let (clauses, skipped) = parse_instruction(&ep.instruction);
        assert_eq!(skipped, 0);
        assert_eq!(render_clauses(&clauses), ep.instruction);
        assert!(ep.instruction.len() <= 128);
        // Landmark words form a subsequence of the instruction.
        let words: Vec<&str> = ep.landmarks.iter().flat_map(|l| l.words()).collect();
        let mut it = ep.instruction.iter();
        assert!(words.iter().all(|w| it.any(|x| x == w)));
    }
    let dir = tempfile::tempdir().unwrap();
    let m1 = ds.save(dir.path(), spec.seed, "cfg").unwrap();
    let (back, m2) = Dataset::load(dir.path()).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(back.episodes.len(), ds.episodes.len());
    for (a, b) in back.episodes.iter().zip(&ds.episodes) {
        assert_eq!(a.features, b.features);
        assert_eq!(a.instruction, b.instruction);
        assert_eq!(a.landmarks, b.landmarks);
    }
    let again = Dataset::generate(&spec).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    assert_eq!(again.save(dir2.path(), spec.seed, "cfg").unwrap(), m1);
}
