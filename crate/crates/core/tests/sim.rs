mod common;

use planar_reloc::geometry::{angle_between_deg, transform_plane, Vec2};
use planar_reloc::sim::*;

fn spec(seed: u64) -> SceneSpec {
    SceneSpec {
        camera: CameraSpec { width: 80, height: 60, hfov_deg: 60.0 },
        camera_count: 5,
        min_visible_pixels: 50,
        rng_seed: seed,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_scene() {
    assert_eq!(synth_scene(&spec(1)).unwrap(), synth_scene(&spec(1)).unwrap());
    assert_ne!(synth_scene(&spec(1)).unwrap(), synth_scene(&spec(2)).unwrap());
}

#[test]
fn every_query_sees_enough_primitives() {
    for seed in 0..5 {
        let s = spec(seed);
        let scene = synth_scene(&s).unwrap();
        assert_eq!(scene.queries.len(), s.camera_count);
        for q in &scene.queries {
            assert!(q.primitives.len() >= s.min_visible);
            assert!(q.primitives.iter().all(|p| p.area >= s.min_visible_pixels));
            assert_eq!(q.primitives.len(), q.source_map_index.len());
        }
    }
}

#[test]
fn depth_agrees_with_ray_casting() {
    let mut s = spec(3);
    s.noise.scale_range = [0.5, 2.0];
    let scene = synth_scene(&s).unwrap();
    for q in &scene.queries {
        assert!((0.5..=2.0).contains(&q.scale));
        let k = q.intrinsics;
        for row in (0..k.height).step_by(3) {
            for col in (0..k.width).step_by(3) {
                let u = Vec2::new(col as f64, row as f64);
                if common::near_projected_edge(&scene.map, &q.pose, &k, &u, 1.0) {
                    continue;
                }
                let hit = common::ray_cast(&scene.map, &q.pose, &k, &u);
                match (q.depth.at(col, row), hit) {
                    (Some(z), Some((want, _))) => assert!((z * q.scale - want).abs() < 1e-4 * want),
                    (None, None) => {}
                    other => panic!("pixel ({col}, {row}): {other:?}"),
                }
            }
        }
    }
}

#[test]
fn query_planes_are_scaled_map_planes() {
    let mut s = spec(4);
    s.noise.scale_range = [0.7, 1.4];
    let scene = synth_scene(&s).unwrap();
    for q in &scene.queries {
        let to_cam = q.pose.inverse();
        for (p, &j) in q.primitives.iter().zip(&q.source_map_index) {
            let want = transform_plane(&to_cam, &scene.map[j].plane);
            assert!(angle_between_deg(&p.plane.normal, &want.normal) < 1e-9);
            assert!((p.plane.offset * q.scale - want.offset).abs() < 1e-9);
        }
    }
}

#[test]
fn visible_primitives_label_their_source() {
    let scene = synth_scene(&spec(5)).unwrap();
    for q in &scene.queries {
        assert!(q.labels.is_consistent(q.primitives.len(), scene.map.len()));
        for (i, &j) in q.source_map_index.iter().enumerate() {
            assert_eq!(q.labels.map_index_of(i), Some(j));
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = spec(6);
    s.min_visible = 0;
    assert!(matches!(synth_scene(&s), Err(SimError::InvalidSpec(_))));
    let mut s = spec(6);
    s.noise.scale_range = [2.0, 1.0];
    assert!(s.validate().is_err());
    let mut s = spec(6);
    s.min_visible = 50;
    s.max_attempts = 5;
    assert!(matches!(synth_scene(&s), Err(SimError::SamplingExhausted(5))));
}

#[test]
fn corrupted_correspondences_keep_inlier_truth() {
    let pose = corner_scene(2).1;
    let gt = random_correspondences(20, &pose, 3);
    let c = corrupt_correspondences(&gt, 0.3, 0.0, 0.0, 1.0, 4);
    assert_eq!(c.correspondences.len(), 20);
    for i in 0..20 {
        let same = c.correspondences[i].query == gt[i].query;
        assert_eq!(same, c.inliers.contains(&i));
    }
}
