//! Per-query pipeline: planes from depth, embeddings, matching, robust pose,
//! optional refinement, clamping and metrics.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use planar_reloc::eval::{classify, pose_error, summarize, PoseError, ScoredPair};
use planar_reloc::extraction::{downsample_depth, sequential_ransac_depth, unproject_depth, MapPrimitive, QueryPrimitive};
use planar_reloc::geometry::{Intrinsics, Pose, Vec3};
use planar_reloc::io::{
    depth_raster, encode_pgm, label_raster, load_scene, read_json, read_weights, write_bytes, write_json, write_pose,
    CorrespondencesFile, EmbeddingsFile, EstimateRecord, EstimatesFile, QueryEntry, FORMAT_VERSION,
};
use planar_reloc::matching::{
    extract_correspondences, generate_labels, mask_iou, matcher_forward, project_map_masks, raw_similarity_assignment,
    Mat, Match, MatchLabels, MatcherWeights,
};
use planar_reloc::refine::refine_pose_with_offsets;
use planar_reloc::render::render_depth;
use planar_reloc::sim::{synth_embeddings, QueryRecord};
use planar_reloc::solver::{clamp_pose_to_bounds, estimate_pose, Bounds, PlaneCorrespondence};
use rayon::prelude::*;

use crate::config::{stage_seed, ExperimentConfig, STAGE_EMBED, STAGE_EXTRACT, STAGE_REFINE, STAGE_SOLVE};
use crate::error::{CliError, CliResult};
use crate::report::{MetricsReport, PredictionsFile};

struct QueryOutcome {
    estimate: EstimateRecord,
    error: PoseError,
    matches: Vec<Match>,
    predictions: Vec<ScoredPair>,
    labels: MatchLabels,
    cost_trace: Option<Vec<f64>>,
    /// Full-set depth cost before and after refinement.
    refine_costs: Option<(f64, f64)>,
    mask_pgm: Vec<u8>,
    depth_pgm: Vec<u8>,
}

enum Matcher {
    Weights(MatcherWeights),
    RawSimilarity,
}

pub fn run(scene_dir: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    let out = cfg.out_dir()?;
    let matcher = match (&cfg.weights, cfg.synthetic_embeddings || cfg.oracle_matches) {
        (Some(p), _) => Matcher::Weights(read_weights(p).map_err(CliError::config)?),
        (None, true) => Matcher::RawSimilarity,
        (None, false) => {
            return Err(CliError::Config(
                "no matcher weights configured; set `weights` or pass --synthetic-embeddings".into(),
            ))
        }
    };
    if !cfg.synthetic_embeddings && !cfg.oracle_matches && cfg.embeddings.is_none() {
        return Err(CliError::Config(
            "no embedding source; set `embeddings` or pass --synthetic-embeddings".into(),
        ));
    }
    let (manifest, scene) = load_scene(scene_dir)?;
    let bounds = Bounds::of_map(&scene.map).ok_or_else(|| CliError::Io("scene map is empty".into()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(CliError::config)?;
    info!("relocalizing {} queries", scene.queries.len());
    let outcomes: Vec<QueryOutcome> = pool.install(|| {
        scene
            .queries
            .par_iter()
            .zip(&manifest.queries)
            .enumerate()
            .map(|(i, (q, entry))| process_query(i, q, entry, &scene.map, &bounds, &matcher, cfg))
            .collect::<CliResult<Vec<_>>>()
    })?;

    let names: Vec<String> = manifest.queries.iter().map(|e| e.name.clone()).collect();
    for (name, o) in names.iter().zip(&outcomes) {
        write_pose(&out.join("poses").join(format!("{name}.json")), &o.estimate.pose)?;
        write_json(
            &out.join("correspondences").join(format!("{name}.json")),
            &CorrespondencesFile {
                format_version: FORMAT_VERSION,
                matches: o.matches.clone(),
            },
        )?;
        write_bytes(&out.join("rasters").join(format!("{name}_masks.pgm")), &o.mask_pgm)?;
        write_bytes(&out.join("rasters").join(format!("{name}_depth.pgm")), &o.depth_pgm)?;
        if let Some(trace) = &o.cost_trace {
            let mut csv = String::from("iteration,cost\n");
            for (it, c) in trace.iter().enumerate() {
                writeln!(csv, "{it},{c}").unwrap();
            }
            write_bytes(&out.join("traces").join(format!("{name}_cost.csv")), csv.as_bytes())?;
        }
    }
    if cfg.refine {
        let mut csv = String::from("query,initial_cost,final_cost\n");
        for (name, o) in names.iter().zip(&outcomes) {
            if let Some((a, b)) = o.refine_costs {
                writeln!(csv, "{name},{a},{b}").unwrap();
            }
        }
        write_bytes(&out.join("refinement.csv"), csv.as_bytes())?;
    }
    write_json(
        &out.join("estimates.json"),
        &EstimatesFile {
            format_version: FORMAT_VERSION,
            estimates: outcomes.iter().map(|o| o.estimate.clone()).collect(),
        },
    )?;
    write_json(
        &out.join("predictions.json"),
        &PredictionsFile {
            format_version: FORMAT_VERSION,
            queries: outcomes.iter().map(|o| o.predictions.clone()).collect(),
        },
    )?;
    let classified: Vec<(f64, bool)> = outcomes
        .iter()
        .flat_map(|o| classify(&o.predictions, &o.labels, cfg.matching.iou_min))
        .collect();
    let n_gt = outcomes.iter().map(|o| o.labels.pairs.len()).sum();
    let pose = summarize(outcomes.iter().map(|o| o.error).collect(), &cfg.thresholds);
    let report = MetricsReport::new(pose, &classified, n_gt);
    report.write(out, &names)?;
    println!("{}", planar_reloc::io::to_json_string(&report.pose.recalls));
    Ok(())
}

fn process_query(
    index: usize,
    q: &QueryRecord,
    entry: &QueryEntry,
    map: &[MapPrimitive],
    bounds: &Bounds,
    matcher: &Matcher,
    cfg: &ExperimentConfig,
) -> CliResult<QueryOutcome> {
    let (depth, k) = downsample_depth(&q.depth, &q.intrinsics, cfg.extraction.downsample);
    let cloud = unproject_depth(&depth, &k).map_err(|e| CliError::Io(format!("{}: {e}", entry.name)))?;
    let mut extraction = cfg.extraction.clone();
    extraction.rng_seed = stage_seed(cfg.seed, index, STAGE_EXTRACT);
    extraction.downsample = 1;
    let prims = match sequential_ransac_depth(&cloud, &extraction) {
        Ok(p) => p,
        Err(e) => {
            warn!("{}: {e}; no query planes", entry.name);
            Vec::new()
        }
    };
    let projected = project_map_masks(map, &q.pose, &k);
    let labels = generate_labels(&prims, map, &q.pose, &k, cfg.matching.label_iou)
        .map_err(|e| CliError::Io(format!("{}: {e}", entry.name)))?;

    let matches = if cfg.oracle_matches {
        labels
            .pairs
            .iter()
            .map(|&(i, j)| Match {
                query_idx: i,
                map_idx: j,
                score: 1.0,
            })
            .collect()
    } else if prims.is_empty() {
        Vec::new()
    } else {
        let (qe, me) = embeddings(index, entry, &prims, map, &labels, matcher, cfg)?;
        let assignment = match matcher {
            Matcher::Weights(w) => {
                let qn: Vec<Vec3> = prims.iter().map(|p| p.plane.normal).collect();
                let mn: Vec<Vec3> = map.iter().map(|p| p.plane.normal).collect();
                let mut out = matcher_forward(&qe, &qn, &me, &mn, w)
                    .map_err(|e| CliError::Config(format!("{}: {e}", entry.name)))?;
                out.assignments.pop().expect("at least one layer")
            }
            Matcher::RawSimilarity => raw_similarity_assignment(&qe, &me),
        };
        extract_correspondences(&assignment, cfg.matching.tau)
    };

    let predictions: Vec<ScoredPair> = matches
        .iter()
        .map(|m| ScoredPair {
            query_idx: m.query_idx,
            map_idx: m.map_idx,
            score: m.score,
            iou: mask_iou(&prims[m.query_idx].mask, &projected[m.map_idx]).unwrap_or(0.0),
        })
        .collect();
    let corrs: Vec<PlaneCorrespondence> = matches
        .iter()
        .map(|m| PlaneCorrespondence {
            query: prims[m.query_idx].plane,
            map: map[m.map_idx].plane,
            weight: prims[m.query_idx].area as f64,
            query_index: m.query_idx,
            map_index: m.map_idx,
        })
        .collect();
    let mut solver = cfg.solver.clone();
    solver.rng_seed = stage_seed(cfg.seed, index, STAGE_SOLVE);
    let est = estimate_pose(&corrs, map, &solver);
    if est.degenerate {
        warn!("{}: degenerate estimate, coarse fallback used", entry.name);
    }

    let mut pose = est.pose;
    let mut cost_trace = None;
    let mut refine_costs = None;
    if cfg.refine && !prims.is_empty() {
        let mut rc = cfg.refinement.clone();
        rc.rng_seed = stage_seed(cfg.seed, index, STAGE_REFINE);
        let r = refine_pose_with_offsets(&pose, &prims, &vec![est.scale; prims.len()], map, &k, &rc);
        pose = r.pose;
        cost_trace = Some(r.trace);
        refine_costs = Some((r.initial_full_cost, r.final_full_cost));
    }
    let pose = clamp_pose_to_bounds(&pose, bounds);

    let masks: Vec<_> = prims.iter().map(|p| &p.mask).collect();
    Ok(QueryOutcome {
        error: pose_error(&pose, &q.pose),
        estimate: EstimateRecord {
            pose,
            scale: est.scale,
            inlier_indices: est.inliers,
            degenerate: est.degenerate,
            fallback_used: est.fallback_used,
        },
        matches,
        predictions,
        labels,
        cost_trace,
        refine_costs,
        mask_pgm: encode_pgm(k.width, k.height, &label_raster(k.width, k.height, &masks)),
        depth_pgm: rendered_depth_pgm(map, &pose, &k),
    })
}

fn rendered_depth_pgm(map: &[MapPrimitive], pose: &Pose, k: &Intrinsics) -> Vec<u8> {
    let d = render_depth(map, pose, k);
    encode_pgm(d.width, d.height, &depth_raster(&d))
}

fn embeddings(
    index: usize,
    entry: &QueryEntry,
    prims: &[QueryPrimitive],
    map: &[MapPrimitive],
    labels: &MatchLabels,
    matcher: &Matcher,
    cfg: &ExperimentConfig,
) -> CliResult<(Mat<f64>, Mat<f64>)> {
    if cfg.synthetic_embeddings {
        let c = match matcher {
            Matcher::Weights(w) => w.c,
            Matcher::RawSimilarity => cfg.matching.embedding_dim,
        };
        let seed = stage_seed(cfg.seed, index, STAGE_EMBED);
        return Ok(synth_embeddings(labels, prims.len(), map.len(), c, cfg.matching.separation, seed));
    }
    let dir = cfg.embeddings.as_ref().expect("checked before the run");
    let path = dir.join(format!("{}_embeddings.json", entry.name));
    let file: EmbeddingsFile = read_json(&path)?;
    let (qe, me) = file.matrices(&path.display().to_string())?;
    if qe.rows != prims.len() || me.rows != map.len() {
        return Err(CliError::Io(format!(
            "{}: {}×{} embeddings for {} query and {} map primitives",
            path.display(),
            qe.rows,
            me.rows,
            prims.len(),
            map.len()
        )));
    }
    Ok((qe, me))
}
