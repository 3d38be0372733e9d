use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use planar_reloc::geometry::{Intrinsics, Pose};
use planar_reloc::io::{
    load_scene, read_json, write_depth, write_intrinsics, EstimateRecord, EstimatesFile, PrimitivesFile,
    FORMAT_VERSION,
};
use planar_reloc::raster::DepthMap;
use planar_reloc::render::render_depth;
use planar_reloc::sim::corner_scene;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_planar-reloc"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_spec(dir: &Path, seed: u64, cameras: usize) -> PathBuf {
    let spec = serde_json::json!({
        "format_version": 1,
        "scene": {"rng_seed": seed, "camera_count": cameras, "camera": {"width": 160, "height": 120, "hfov_deg": 60.0}}
    });
    let p = dir.join(format!("spec_{seed}.json"));
    fs::write(&p, spec.to_string()).unwrap();
    p
}

fn synth(dir: &Path, seed: u64, cameras: usize, name: &str) -> PathBuf {
    let spec = write_spec(dir, seed, cameras);
    let o = run(&["synth", spec.to_str().unwrap(), "--out", name], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join(name)
}

/// Every file under `a` exists under `b` with identical bytes, and vice versa.
fn assert_same_tree(a: &Path, b: &Path) {
    fn files(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out.sort();
        out
    }
    let (fa, fb) = (files(a), files(b));
    assert_eq!(fa, fb);
    assert!(!fa.is_empty());
    for f in fa {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn synth_is_deterministic_and_prints_manifest() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), 3, 3, "a");
    let b = synth(tmp.path(), 3, 3, "b");
    assert_same_tree(&a, &b);
    let o = run(&["synth", "spec_3.json", "--out", "c"], tmp.path());
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["queries"].as_array().unwrap().len(), 3);
}

#[test]
fn malformed_spec_exits_2() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.json"), r#"{"format_version": 1, "scene": {"room": "big"}}"#).unwrap();
    let o = run(&["synth", "bad.json", "--out", "s"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("room"));
    fs::write(tmp.path().join("old.json"), r#"{"format_version": 0, "scene": {}}"#).unwrap();
    assert_eq!(code(&run(&["synth", "old.json", "--out", "s"], tmp.path())), 2);
    fs::write(tmp.path().join("neg.json"), r#"{"format_version": 1, "scene": {"min_visible": 0}}"#).unwrap();
    assert_eq!(code(&run(&["synth", "neg.json", "--out", "s"], tmp.path())), 2);
}

fn gt_estimates(scene: &Path) -> EstimatesFile {
    let (_, s) = load_scene(scene).unwrap();
    EstimatesFile {
        format_version: FORMAT_VERSION,
        estimates: s
            .queries
            .iter()
            .map(|q| EstimateRecord {
                pose: q.pose,
                scale: 1.0,
                inlier_indices: vec![],
                degenerate: false,
                fallback_used: false,
            })
            .collect(),
    }
}

#[test]
fn evaluate_ground_truth_gives_zero_error() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 4, 4, "scene");
    fs::write(tmp.path().join("est.json"), serde_json::to_string(&gt_estimates(&tmp.path().join("scene"))).unwrap()).unwrap();
    let o = run(&["evaluate", "--estimates", "est.json", "--scene", "scene", "--out", "ev"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["pose"]["mean_rotation_deg"].as_f64().unwrap(), 0.0);
    assert_eq!(m["pose"]["mean_translation_m"].as_f64().unwrap(), 0.0);
    assert!(m["pose"]["recalls"].as_array().unwrap().iter().all(|r| r["recall"] == 1.0));
    // No prediction file: nothing predicted, precision taken as zero.
    assert_eq!(m["matching"]["precision"].as_f64().unwrap(), 0.0);
    assert_eq!(m["matching"]["predicted"].as_u64().unwrap(), 0);
    let csv = fs::read_to_string(tmp.path().join("ev/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn evaluate_length_mismatch_exits_4() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 5, 3, "scene");
    let mut est = gt_estimates(&tmp.path().join("scene"));
    est.estimates.pop();
    fs::write(tmp.path().join("est.json"), serde_json::to_string(&est).unwrap()).unwrap();
    let o = run(&["evaluate", "--estimates", "est.json", "--scene", "scene", "--out", "ev"], tmp.path());
    assert_eq!(code(&o), 4);
}

#[test]
fn evaluate_hand_built_case() {
    let tmp = TempDir::new().unwrap();
    let scene = synth(tmp.path(), 6, 2, "scene");
    let (_, s) = load_scene(&scene).unwrap();
    let mut est = gt_estimates(&scene);
    // Query 0 off by 9 cm: recalled only at the loosest two thresholds.
    est.estimates[0].pose.translation.x += 0.09;
    fs::write(tmp.path().join("est.json"), serde_json::to_string(&est).unwrap()).unwrap();
    // One correct prediction and one wrong one on query 1.
    let (qi, mj) = s.queries[1].labels.pairs[0];
    let wrong = (mj + 1) % s.map.len();
    let preds = serde_json::json!({
        "format_version": 1,
        "queries": [[], [
            {"query_idx": qi, "map_idx": mj, "score": 0.9, "iou": 0.9},
            {"query_idx": qi, "map_idx": wrong, "score": 0.4, "iou": 0.0}
        ]]
    });
    fs::write(tmp.path().join("pred.json"), preds.to_string()).unwrap();
    let o = run(
        &["evaluate", "--estimates", "est.json", "--scene", "scene", "--predictions", "pred.json", "--out", "ev"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("ev/metrics.json")).unwrap()).unwrap();
    let recalls: Vec<f64> = m["pose"]["recalls"].as_array().unwrap().iter().map(|r| r["recall"].as_f64().unwrap()).collect();
    assert_eq!(recalls, vec![0.5, 1.0, 1.0]);
    let n_gt = s.queries.iter().map(|q| q.labels.pairs.len()).sum::<usize>() as f64;
    assert_eq!(m["matching"]["precision"].as_f64().unwrap(), 0.5);
    assert!((m["matching"]["recall"].as_f64().unwrap() - 1.0 / n_gt).abs() < 1e-12);
    let pr = fs::read_to_string(tmp.path().join("ev/pr_curve.csv")).unwrap();
    assert_eq!(pr.lines().count(), 3);
}

fn write_depth_input(dir: &Path, depth: &DepthMap, k: &Intrinsics) {
    write_depth(&dir.join("d.dpth"), depth).unwrap();
    write_intrinsics(&dir.join("k.json"), k).unwrap();
}

fn fit(dir: &Path, out: &str, seed: &str) -> Output {
    run(&["fit-planes", "d.dpth", "--intrinsics", "k.json", "--seed", seed, "--out", out], dir)
}

#[test]
fn fit_planes_single_plane_and_corner() {
    let tmp = TempDir::new().unwrap();
    let k = Intrinsics::from_fov(160, 120, 60.0);
    write_depth_input(tmp.path(), &DepthMap::filled(160, 120, 2.5), &k);
    let o = fit(tmp.path(), "one", "1");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let prims: PrimitivesFile = read_json(&tmp.path().join("one/primitives.json")).unwrap();
    assert_eq!(prims.primitives.len(), 1);
    assert!(fs::read(tmp.path().join("one/masks.pgm")).unwrap().starts_with(b"P5\n160 120\n255\n"));

    let (map, pose) = corner_scene(11);
    write_depth_input(tmp.path(), &render_depth(&map, &pose, &k), &k);
    assert_eq!(code(&fit(tmp.path(), "corner", "2")), 0);
    let prims: PrimitivesFile = read_json(&tmp.path().join("corner/primitives.json")).unwrap();
    assert_eq!(prims.primitives.len(), 3);
    assert_eq!(code(&fit(tmp.path(), "corner2", "2")), 0);
    assert_same_tree(&tmp.path().join("corner"), &tmp.path().join("corner2"));
}

#[test]
fn fit_planes_without_planes_exits_3() {
    let tmp = TempDir::new().unwrap();
    let k = Intrinsics::from_fov(64, 48, 60.0);
    write_depth_input(tmp.path(), &DepthMap::new(64, 48, DepthMap::DEFAULT_INVALID), &k);
    assert_eq!(code(&fit(tmp.path(), "none", "0")), 3);
    let wrong = Intrinsics::from_fov(32, 24, 60.0);
    write_intrinsics(&tmp.path().join("k.json"), &wrong).unwrap();
    write_depth(&tmp.path().join("d.dpth"), &DepthMap::filled(64, 48, 2.0)).unwrap();
    assert_eq!(code(&fit(tmp.path(), "none", "0")), 2);
}

#[test]
fn missing_depth_file_exits_4() {
    let tmp = TempDir::new().unwrap();
    write_intrinsics(&tmp.path().join("k.json"), &Intrinsics::from_fov(64, 48, 60.0)).unwrap();
    assert_eq!(code(&fit(tmp.path(), "x", "0")), 4);
}

#[test]
fn relocalize_requires_weights_or_synthetic_embeddings() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 7, 2, "scene");
    let o = run(&["relocalize", "scene", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 2);
    fs::write(tmp.path().join("cfg.json"), r#"{"format_version": 1, "weights": "absent.json"}"#).unwrap();
    let o = run(&["relocalize", "scene", "--config", "cfg.json", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.json"));
}

#[test]
fn relocalize_with_synthetic_embeddings_and_refinement() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 8, 4, "scene");
    let o = run(&["relocalize", "scene", "--synthetic-embeddings", "--refine", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let est: EstimatesFile = read_json(&tmp.path().join("r/estimates.json")).unwrap();
    assert_eq!(est.estimates.len(), 4);
    assert!(est.estimates.iter().all(|e| e.pose.is_rigid(1e-9)));
    let costs = fs::read_to_string(tmp.path().join("r/refinement.csv")).unwrap();
    for line in costs.lines().skip(1) {
        let f: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!(f[1] <= f[0], "{line}");
    }
    let trace = fs::read_to_string(tmp.path().join("r/traces/query_000_cost.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iteration,cost"));
    assert_eq!(trace.lines().count(), 201);
    for f in ["metrics.json", "metrics.csv", "pr_curve.csv", "predictions.json", "poses/query_003.json"] {
        assert!(tmp.path().join("r").join(f).exists(), "{f}");
    }
}

#[test]
fn relocalize_output_is_independent_of_thread_count() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 9, 4, "scene");
    for (dir, threads) in [("a", "1"), ("b", "3")] {
        let o = run(
            &["relocalize", "scene", "--synthetic-embeddings", "--seed", "5", "--threads", threads, "--out", dir],
            tmp.path(),
        );
        assert_eq!(code(&o), 0);
    }
    assert_same_tree(&tmp.path().join("a"), &tmp.path().join("b"));
    let pose: Pose = read_json::<planar_reloc::io::PoseFile>(&tmp.path().join("a/poses/query_000.json")).unwrap().pose;
    assert!(pose.is_rigid(1e-9));
}
