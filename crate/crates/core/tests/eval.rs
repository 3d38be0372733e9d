use planar_reloc::eval::*;
use planar_reloc::geometry::{so3_exp, Pose, Vec3};
use planar_reloc::matching::MatchLabels;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn offset_pose(deg: f64, meters: f64) -> Pose {
    Pose::new(so3_exp(&(Vec3::z() * deg.to_radians())), Vec3::new(meters, 0.0, 0.0))
}

#[test]
fn recall_matches_hand_count() {
    let truth = vec![Pose::identity(); 5];
    let est = vec![
        offset_pose(1.0, 0.01),
        offset_pose(6.0, 0.01),
        offset_pose(1.0, 0.2),
        offset_pose(15.0, 0.08),
        offset_pose(30.0, 1.0),
    ];
    let m = pose_metrics(&est, &truth, &default_thresholds()).unwrap();
    let r: Vec<f64> = m.recalls.iter().map(|r| r.recall).collect();
    assert_eq!(r, vec![0.2, 0.4, 0.8]);
    assert!((m.median_rotation_deg - 6.0).abs() < 1e-9);
    assert!((m.mean_translation_m - 1.3 / 5.0).abs() < 1e-9);
}

#[test]
fn thresholds_are_inclusive() {
    let t = [RecallThreshold { meters: 0.5, degrees: 10.0 }];
    let per = vec![
        PoseError { rotation_deg: 10.0, translation_m: 0.5 },
        PoseError { rotation_deg: 10.000001, translation_m: 0.5 },
    ];
    assert_eq!(summarize(per, &t).recalls[0].recall, 0.5);
}

#[test]
fn length_mismatch_is_an_error() {
    let err = pose_metrics(&[Pose::identity()], &[], &default_thresholds()).unwrap_err();
    assert_eq!(err, EvalError::LengthMismatch { estimates: 1, ground_truth: 0 });
}

/// Mean of precision at each true positive, over all ground truth; equal to
/// the staircase area when scores are distinct.
fn ap_oracle(items: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut s = items.to_vec();
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0;
    let mut sum = 0.0;
    for (rank, (_, t)) in s.iter().enumerate() {
        if *t {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    sum / n_gt as f64
}

#[test]
fn ap_matches_oracle_and_is_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let mut items: Vec<(f64, bool)> = (0..n).map(|_| (rng.random::<f64>(), rng.random_bool(0.5))).collect();
        let n_gt = items.iter().filter(|x| x.1).count() + rng.random_range(0..5);
        if n_gt == 0 {
            continue;
        }
        let m = metrics_from_classified(&items, n_gt);
        assert!((m.ap - ap_oracle(&items, n_gt)).abs() < 1e-12);
        let rescaled: Vec<(f64, bool)> = items.iter().map(|&(s, t)| ((3.0 * s).exp() - 7.0, t)).collect();
        assert!((metrics_from_classified(&rescaled, n_gt).ap - m.ap).abs() < 1e-12);
        items.shuffle(&mut rng);
        assert!((metrics_from_classified(&items, n_gt).ap - m.ap).abs() < 1e-12);
    }
}

#[test]
fn match_metrics_by_hand() {
    let labels = MatchLabels {
        pairs: vec![(0, 0), (1, 2), (2, 1)],
        unmatched_query: vec![3],
        unmatched_map: vec![],
    };
    let pair = |q, m, score, iou| ScoredPair { query_idx: q, map_idx: m, score, iou };
    let preds = [pair(0, 0, 0.9, 0.8), pair(1, 1, 0.8, 0.9), pair(2, 1, 0.7, 0.1), pair(3, 2, 0.6, 0.5)];
    let m = match_metrics(&preds, &labels, DEFAULT_IOU_MIN);
    assert_eq!(m.true_positives, 1);
    assert!((m.precision - 0.25).abs() < 1e-12);
    assert!((m.recall - 1.0 / 3.0).abs() < 1e-12);
    assert!((m.ap - 1.0 / 3.0).abs() < 1e-12);
    let pr = pr_curve(&classify(&preds, &labels, DEFAULT_IOU_MIN), 3);
    assert_eq!(pr.len(), 4);
    assert_eq!(pr[0].precision, 1.0);
}
