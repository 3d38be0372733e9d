use std::path::Path;

use planar_reloc::eval::{classify, pose_metrics, ScoredPair};
use planar_reloc::extraction::{downsample_depth, sequential_ransac_depth, unproject_depth, ExtractionError};
use planar_reloc::io::{
    encode_pgm, label_raster, load_scene, read_depth, read_intrinsics, read_json, save_scene, to_json_string,
    write_bytes, write_primitives, EstimatesFile, FORMAT_VERSION,
};
use planar_reloc::sim::{synth_scene, SceneSpec};
use serde::{Deserialize, Serialize};

use crate::config::{stage_seed, ExperimentConfig, STAGE_EXTRACT};
use crate::error::{CliError, CliResult};
use crate::report::{MetricsReport, PredictionsFile};

/// Scene generation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFile {
    pub format_version: u64,
    #[serde(default)]
    pub scene: SceneSpec,
}

pub fn synth(spec_path: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<()> {
    let out = out.ok_or_else(|| CliError::Config("no output directory; pass --out".into()))?;
    let mut spec = read_json::<SpecFile>(spec_path).map_err(CliError::config)?.scene;
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    let scene = synth_scene(&spec).map_err(CliError::config)?;
    let manifest = save_scene(out, &spec, &scene)?;
    print!("{}", to_json_string(&manifest));
    Ok(())
}

pub fn fit_planes(depth_path: &Path, intrinsics_path: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    let out = cfg.out_dir()?;
    let k = read_intrinsics(intrinsics_path).map_err(CliError::config)?;
    let depth = read_depth(depth_path)?;
    let mut rc = cfg.extraction.clone();
    let (depth, k) = downsample_depth(&depth, &k, rc.downsample);
    rc.downsample = 1;
    rc.rng_seed = stage_seed(cfg.seed, 0, STAGE_EXTRACT);
    let cloud = unproject_depth(&depth, &k).map_err(CliError::config)?;
    let prims = sequential_ransac_depth(&cloud, &rc).map_err(|e| match e {
        ExtractionError::NoPlaneFound => CliError::Degenerate(e.to_string()),
        other => CliError::config(other),
    })?;
    write_primitives(&out.join("primitives.json"), &prims)?;
    let masks: Vec<_> = prims.iter().map(|p| &p.mask).collect();
    write_bytes(
        &out.join("masks.pgm"),
        &encode_pgm(k.width, k.height, &label_raster(k.width, k.height, &masks)),
    )?;
    println!("{} primitives", prims.len());
    Ok(())
}

pub fn evaluate(
    estimates_path: &Path,
    scene_dir: &Path,
    predictions_path: Option<&Path>,
    cfg: &ExperimentConfig,
) -> CliResult<()> {
    let out = cfg.out_dir()?;
    let estimates: EstimatesFile = read_json(estimates_path)?;
    let (manifest, scene) = load_scene(scene_dir)?;
    let est: Vec<_> = estimates.estimates.iter().map(|e| e.pose).collect();
    let gt: Vec<_> = scene.queries.iter().map(|q| q.pose).collect();
    let pose = pose_metrics(&est, &gt, &cfg.thresholds).map_err(|e| CliError::Io(e.to_string()))?;
    let predictions = match predictions_path {
        Some(p) => read_json::<PredictionsFile>(p)?,
        None => PredictionsFile {
            format_version: FORMAT_VERSION,
            queries: vec![Vec::new(); scene.queries.len()],
        },
    };
    if predictions.queries.len() != scene.queries.len() {
        return Err(CliError::Io(format!(
            "{} prediction lists for {} queries",
            predictions.queries.len(),
            scene.queries.len()
        )));
    }
    let classified: Vec<(f64, bool)> = predictions
        .queries
        .iter()
        .zip(&scene.queries)
        .flat_map(|(p, q): (&Vec<ScoredPair>, _)| classify(p, &q.labels, cfg.matching.iou_min))
        .collect();
    let n_gt = scene.queries.iter().map(|q| q.labels.pairs.len()).sum();
    let report = MetricsReport::new(pose, &classified, n_gt);
    let names: Vec<String> = manifest.queries.iter().map(|e| e.name.clone()).collect();
    report.write(out, &names)?;
    print!("{}", to_json_string(&report));
    Ok(())
}
