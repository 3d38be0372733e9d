use planar_reloc::geometry::{Intrinsics, Pose};
use planar_reloc::io::*;
use planar_reloc::matching::MatcherWeights;
use planar_reloc::raster::DepthMap;
use planar_reloc::sim::{random_pose, synth_scene, CameraSpec, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_depth(w: usize, h: usize, seed: u64) -> DepthMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = DepthMap::new(w, h, DepthMap::DEFAULT_INVALID);
    for v in d.data.iter_mut() {
        if rng.random_bool(0.9) {
            *v = rng.random_range(0.1f32..20.0);
        }
    }
    d
}

#[test]
fn depth_round_trip_is_bit_exact() {
    let d = random_depth(37, 23, 1);
    let back = decode_depth(&encode_depth(&d), "mem").unwrap();
    assert_eq!(back.width, 37);
    assert!(d.data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/d.dpth");
    write_depth(&path, &d).unwrap();
    assert_eq!(read_depth(&path).unwrap(), d);
}

#[test]
fn truncated_depth_is_a_parse_error() {
    let bytes = encode_depth(&random_depth(8, 8, 2));
    for cut in [0, 3, 15, 16, bytes.len() - 1] {
        assert!(matches!(decode_depth(&bytes[..cut], "mem"), Err(IoError::Parse { .. })), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_depth(&bad, "mem"), Err(IoError::VersionMismatch { .. })));
}

#[test]
fn pose_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..20 {
        let p = random_pose(10.0, &mut rng);
        let path = dir.path().join(format!("p{i}.json"));
        write_pose(&path, &p).unwrap();
        assert_eq!(read_pose(&path).unwrap(), p);
    }
}

#[test]
fn weights_round_trip() {
    let w = MatcherWeights::random(16, 4, 2, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    write_weights(&path, &w).unwrap();
    assert_eq!(read_weights(&path).unwrap(), w);
}

#[test]
fn unknown_fields_are_ignored() {
    let p = Pose::identity();
    let mut v = serde_json::to_value(PoseFile { format_version: FORMAT_VERSION, pose: p }).unwrap();
    v["comment"] = serde_json::json!("extra");
    let back: PoseFile = from_json_str(&v.to_string(), "mem").unwrap();
    assert_eq!(back.pose, p);
}

#[test]
fn version_mismatch_and_missing_version() {
    let text = r#"{"format_version": 2, "pose": null}"#;
    assert!(matches!(from_json_str::<PoseFile>(text, "mem"), Err(IoError::VersionMismatch { .. })));
    let text = r#"{"pose": null}"#;
    assert!(matches!(from_json_str::<PoseFile>(text, "mem"), Err(IoError::Parse { .. })));
}

#[test]
fn parse_errors_name_the_field() {
    let text = r#"{"format_version": 1, "pose": {"rotation": "oops"}}"#;
    let err = from_json_str::<PoseFile>(text, "mem").unwrap_err().to_string();
    assert!(err.contains("pose"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_pose(&dir.path().join("absent.json")), Err(IoError::Io { .. })));
}

#[test]
fn scene_save_load_round_trip() {
    let spec = SceneSpec {
        camera: CameraSpec { width: 64, height: 48, hfov_deg: 60.0 },
        camera_count: 3,
        min_visible_pixels: 30,
        rng_seed: 4,
        ..Default::default()
    };
    let scene = synth_scene(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let saved = save_scene(dir.path(), &spec, &scene).unwrap();
    let (manifest, back) = load_scene(dir.path()).unwrap();
    assert_eq!(manifest, saved);
    assert_eq!(manifest.spec, spec);
    assert_eq!(back, scene);
}

#[test]
fn pgm_header_and_size() {
    let px = vec![7u8; 6];
    let bytes = encode_pgm(3, 2, &px);
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(bytes.len(), 11 + 6);
    let k = Intrinsics::from_fov(4, 3, 60.0);
    let d = DepthMap::filled(k.width, k.height, 2.0);
    assert_eq!(depth_raster(&d).len(), 12);
}
