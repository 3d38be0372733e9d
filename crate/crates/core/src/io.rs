//! File formats: versioned JSON documents, the `DPTH` binary depth grid and
//! PGM debug rasters.
//!
//! Every JSON document carries `format_version`. Unknown fields are logged
//! and skipped. Parse failures name the offending field path and the line.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{MapPrimitive, QueryPrimitive};
use crate::geometry::{Intrinsics, Plane, Pose, Vec3};
use crate::matching::{Linear, LayerWeights, Mat, Match, MatchLabels, MatcherWeights};
use crate::raster::{DepthMap, Mask, MaskRuns};
use crate::sim::{QueryRecord, Scene, SceneSpec};

pub const FORMAT_VERSION: u64 = 1;
pub const DEPTH_MAGIC: [u8; 4] = *b"DPTH";
const DEPTH_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("{context}: format_version {found}, expected {expected}")]
    VersionMismatch {
        context: String,
        found: String,
        expected: u64,
    },
}

impl IoError {
    fn parse(context: &str, message: impl Into<String>) -> Self {
        IoError::Parse {
            context: context.to_string(),
            message: message.into(),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

/// Parses a versioned JSON document. `context` prefixes every diagnostic.
pub fn from_json_str<T: DeserializeOwned>(text: &str, context: &str) -> Result<T, IoError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| IoError::parse(context, e.to_string()))?;
    match value.get("format_version") {
        None => return Err(IoError::parse(context, "missing field `format_version`")),
        Some(v) if v.as_u64() != Some(FORMAT_VERSION) => {
            return Err(IoError::VersionMismatch {
                context: context.to_string(),
                found: v.to_string(),
                expected: FORMAT_VERSION,
            })
        }
        Some(_) => {}
    }
    let mut de = serde_json::Deserializer::from_str(text);
    let mut on_unknown = |path: serde_ignored::Path| warn!("{context}: ignoring unknown field `{path}`");
    let ignored = serde_ignored::Deserializer::new(&mut de, &mut on_unknown);
    serde_path_to_error::deserialize(ignored).map_err(|e| {
        let path = e.path().to_string();
        IoError::parse(context, format!("field `{path}`: {}", e.into_inner()))
    })
}

pub fn to_json_string<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("documents serialize to JSON");
    s.push('\n');
    s
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    let context = path.display().to_string();
    let text = String::from_utf8(bytes).map_err(|e| IoError::parse(&context, e.to_string()))?;
    from_json_str(&text, &context)
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<(), IoError> {
    write_bytes(path, to_json_string(doc).as_bytes())
}

fn version() -> u64 {
    FORMAT_VERSION
}

// ---------------------------------------------------------------- depth

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(DEPTH_HEADER_LEN + 4 * depth.data.len());
    out.extend_from_slice(&DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    out.extend_from_slice(&depth.invalid.to_le_bytes());
    for v in &depth.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], context: &str) -> Result<DepthMap, IoError> {
    if bytes.len() < DEPTH_HEADER_LEN {
        return Err(IoError::parse(
            context,
            format!("header truncated: {} of {DEPTH_HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[..4] != DEPTH_MAGIC {
        return Err(IoError::VersionMismatch {
            context: context.to_string(),
            found: format!("{:?}", String::from_utf8_lossy(&bytes[..4])),
            expected: FORMAT_VERSION,
        });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let width = u32::from_le_bytes(word(4)) as usize;
    let height = u32::from_le_bytes(word(8)) as usize;
    let invalid = f32::from_le_bytes(word(12));
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(DEPTH_HEADER_LEN))
        .ok_or_else(|| IoError::parse(context, format!("grid {width}×{height} is too large")))?;
    if bytes.len() != expected {
        return Err(IoError::parse(
            context,
            format!("{width}×{height} grid needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let data = (0..width * height)
        .map(|i| f32::from_le_bytes(word(DEPTH_HEADER_LEN + 4 * i)))
        .collect();
    Ok(DepthMap {
        width,
        height,
        invalid,
        data,
    })
}

pub fn read_depth(path: &Path) -> Result<DepthMap, IoError> {
    decode_depth(&read_bytes(path)?, &path.display().to_string())
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    write_bytes(path, &encode_depth(depth))
}

// ---------------------------------------------------------------- map

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPrimitiveRecord {
    pub normal: [f64; 3],
    pub offset: f64,
    pub boundary: Vec<[f64; 3]>,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    #[serde(default = "version")]
    pub format_version: u64,
    pub primitives: Vec<MapPrimitiveRecord>,
}

impl MapFile {
    pub fn from_map(map: &[MapPrimitive]) -> Self {
        let primitives = map
            .iter()
            .map(|p| MapPrimitiveRecord {
                normal: p.plane.normal.into(),
                offset: p.plane.offset,
                boundary: p.boundary.iter().map(|v| (*v).into()).collect(),
                area: p.area,
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            primitives,
        }
    }

    /// Values are taken verbatim; the stored area is not recomputed.
    pub fn into_map(self) -> Vec<MapPrimitive> {
        self.primitives
            .into_iter()
            .enumerate()
            .map(|(index, r)| MapPrimitive {
                index,
                plane: Plane {
                    normal: Vec3::from(r.normal),
                    offset: r.offset,
                },
                boundary: r.boundary.into_iter().map(Vec3::from).collect(),
                sample_points: Vec::new(),
                area: r.area,
            })
            .collect()
    }
}

pub fn read_map(path: &Path) -> Result<Vec<MapPrimitive>, IoError> {
    Ok(read_json::<MapFile>(path)?.into_map())
}

pub fn write_map(path: &Path, map: &[MapPrimitive]) -> Result<(), IoError> {
    write_json(path, &MapFile::from_map(map))
}

// ---------------------------------------------------------------- pose

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    #[serde(default = "version")]
    pub format_version: u64,
    /// Row-major 3×4 camera-to-map matrix.
    pub pose: Pose,
}

pub fn read_pose(path: &Path) -> Result<Pose, IoError> {
    Ok(read_json::<PoseFile>(path)?.pose)
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<(), IoError> {
    write_json(
        path,
        &PoseFile {
            format_version: FORMAT_VERSION,
            pose: *pose,
        },
    )
}

// ---------------------------------------------------------------- intrinsics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsFile {
    #[serde(default = "version")]
    pub format_version: u64,
    pub intrinsics: Intrinsics,
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, IoError> {
    let k = read_json::<IntrinsicsFile>(path)?.intrinsics;
    k.validate().map_err(|e| IoError::parse(&path.display().to_string(), e.to_string()))?;
    Ok(k)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), IoError> {
    write_json(
        path,
        &IntrinsicsFile {
            format_version: FORMAT_VERSION,
            intrinsics: *k,
        },
    )
}

// ---------------------------------------------------------------- weights

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    #[serde(default = "version")]
    pub format_version: u64,
    pub c: usize,
    /// Number of layers.
    #[serde(rename = "N")]
    pub n: usize,
    pub heads: usize,
    pub layers: Vec<LayerWeights<f64>>,
    pub rope_bases: Vec<[f64; 3]>,
    pub similarity_proj: Linear<f64>,
    pub matchability_proj: Linear<f64>,
}

impl From<&MatcherWeights> for WeightsFile {
    fn from(w: &MatcherWeights) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            c: w.c,
            n: w.layers.len(),
            heads: w.heads,
            layers: w.layers.clone(),
            rope_bases: w.rope_bases.clone(),
            similarity_proj: w.similarity_proj.clone(),
            matchability_proj: w.matchability_proj.clone(),
        }
    }
}

pub fn read_weights(path: &Path) -> Result<MatcherWeights, IoError> {
    let f: WeightsFile = read_json(path)?;
    let context = path.display().to_string();
    if f.n != f.layers.len() {
        return Err(IoError::parse(
            &context,
            format!("field `N` is {} but {} layers are present", f.n, f.layers.len()),
        ));
    }
    let w = MatcherWeights {
        c: f.c,
        heads: f.heads,
        layers: f.layers,
        rope_bases: f.rope_bases,
        similarity_proj: f.similarity_proj,
        matchability_proj: f.matchability_proj,
    };
    w.validate().map_err(|e| IoError::parse(&context, e.to_string()))?;
    Ok(w)
}

pub fn write_weights(path: &Path, w: &MatcherWeights) -> Result<(), IoError> {
    write_json(path, &WeightsFile::from(w))
}

// ---------------------------------------------------------------- labels

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelsFile {
    #[serde(default = "version")]
    pub format_version: u64,
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_query: Vec<usize>,
    pub unmatched_map: Vec<usize>,
}

pub fn read_labels(path: &Path) -> Result<MatchLabels, IoError> {
    let f: LabelsFile = read_json(path)?;
    Ok(MatchLabels {
        pairs: f.pairs,
        unmatched_query: f.unmatched_query,
        unmatched_map: f.unmatched_map,
    })
}

pub fn write_labels(path: &Path, labels: &MatchLabels) -> Result<(), IoError> {
    write_json(
        path,
        &LabelsFile {
            format_version: FORMAT_VERSION,
            pairs: labels.pairs.clone(),
            unmatched_query: labels.unmatched_query.clone(),
            unmatched_map: labels.unmatched_map.clone(),
        },
    )
}

// ---------------------------------------------------------------- query primitives

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrimitiveRecord {
    /// `[nx, ny, nz, d]`, camera frame.
    pub plane: Plane,
    pub mask: MaskRuns,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitivesFile {
    #[serde(default = "version")]
    pub format_version: u64,
    pub primitives: Vec<QueryPrimitiveRecord>,
}

impl PrimitivesFile {
    pub fn from_primitives(prims: &[QueryPrimitive]) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            primitives: prims
                .iter()
                .map(|p| QueryPrimitiveRecord {
                    plane: p.plane,
                    mask: MaskRuns::from(&p.mask),
                    area: p.area,
                })
                .collect(),
        }
    }

    pub fn into_primitives(self, context: &str) -> Result<Vec<QueryPrimitive>, IoError> {
        self.primitives
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let mask = Mask::from_runs(r.mask.width, r.mask.height, &r.mask.runs)
                    .ok_or_else(|| IoError::parse(context, format!("field `primitives[{i}].mask`: run out of bounds")))?;
                let p = QueryPrimitive::new(i, r.plane, mask);
                if p.area != r.area {
                    return Err(IoError::parse(
                        context,
                        format!("field `primitives[{i}].area`: {} but the mask has {} pixels", r.area, p.area),
                    ));
                }
                Ok(p)
            })
            .collect()
    }
}

pub fn read_primitives(path: &Path) -> Result<Vec<QueryPrimitive>, IoError> {
    read_json::<PrimitivesFile>(path)?.into_primitives(&path.display().to_string())
}

pub fn write_primitives(path: &Path, prims: &[QueryPrimitive]) -> Result<(), IoError> {
    write_json(path, &PrimitivesFile::from_primitives(prims))
}

// ---------------------------------------------------------------- embeddings

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsFile {
    #[serde(default = "version")]
    pub format_version: u64,
    /// One row per query primitive.
    pub query: Vec<Vec<f64>>,
    /// One row per map primitive.
    pub map: Vec<Vec<f64>>,
}

impl EmbeddingsFile {
    pub fn new(query: &Mat<f64>, map: &Mat<f64>) -> Self {
        let rows = |m: &Mat<f64>| (0..m.rows).map(|r| m.row(r).to_vec()).collect();
        Self {
            format_version: FORMAT_VERSION,
            query: rows(query),
            map: rows(map),
        }
    }

    /// `(query, map)` matrices; an empty side gets zero columns.
    pub fn matrices(&self, context: &str) -> Result<(Mat<f64>, Mat<f64>), IoError> {
        let build = |rows: &[Vec<f64>], name: &str| {
            if rows.is_empty() {
                return Ok(Mat::zeros(0, 0));
            }
            Mat::from_rows(rows).ok_or_else(|| IoError::parse(context, format!("field `{name}`: rows differ in length")))
        };
        Ok((build(&self.query, "query")?, build(&self.map, "map")?))
    }
}

// ---------------------------------------------------------------- estimates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub pose: Pose,
    pub scale: f64,
    pub inlier_indices: Vec<usize>,
    pub degenerate: bool,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatesFile {
    #[serde(default = "version")]
    pub format_version: u64,
    pub estimates: Vec<EstimateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondencesFile {
    #[serde(default = "version")]
    pub format_version: u64,
    pub matches: Vec<Match>,
}

// ---------------------------------------------------------------- scenes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub scale: f64,
    /// Paths relative to the scene directory.
    pub depth: String,
    pub pose: String,
    pub labels: String,
    pub primitives: String,
    /// Map index of each ground-truth query primitive.
    pub source_map_index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    #[serde(default = "version")]
    pub format_version: u64,
    pub spec: SceneSpec,
    pub map: String,
    pub queries: Vec<QueryEntry>,
}

pub const MANIFEST_NAME: &str = "scene.json";

pub const INTRINSICS_NAME: &str = "intrinsics.json";

/// Writes `scene.json`, `map.json`, the shared `intrinsics.json` and four
/// files per query under `dir`.
pub fn save_scene(dir: &Path, spec: &SceneSpec, scene: &Scene) -> Result<SceneManifest, IoError> {
    write_map(&dir.join("map.json"), &scene.map)?;
    write_intrinsics(&dir.join(INTRINSICS_NAME), &spec.intrinsics())?;
    let mut queries = Vec::with_capacity(scene.queries.len());
    for (i, q) in scene.queries.iter().enumerate() {
        let name = format!("query_{i:03}");
        let entry = QueryEntry {
            depth: format!("queries/{name}.dpth"),
            pose: format!("queries/{name}_pose.json"),
            labels: format!("queries/{name}_labels.json"),
            primitives: format!("queries/{name}_primitives.json"),
            name,
            intrinsics: q.intrinsics,
            scale: q.scale,
            source_map_index: q.source_map_index.clone(),
        };
        write_depth(&dir.join(&entry.depth), &q.depth)?;
        write_pose(&dir.join(&entry.pose), &q.pose)?;
        write_labels(&dir.join(&entry.labels), &q.labels)?;
        write_primitives(&dir.join(&entry.primitives), &q.primitives)?;
        queries.push(entry);
    }
    let manifest = SceneManifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        map: "map.json".into(),
        queries,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

pub fn load_scene(dir: &Path) -> Result<(SceneManifest, Scene), IoError> {
    let manifest: SceneManifest = read_json(&dir.join(MANIFEST_NAME))?;
    let map = read_map(&dir.join(&manifest.map))?;
    let queries = manifest
        .queries
        .iter()
        .map(|e| {
            Ok(QueryRecord {
                intrinsics: e.intrinsics,
                pose: read_pose(&dir.join(&e.pose))?,
                scale: e.scale,
                depth: read_depth(&dir.join(&e.depth))?,
                primitives: read_primitives(&dir.join(&e.primitives))?,
                source_map_index: e.source_map_index.clone(),
                labels: read_labels(&dir.join(&e.labels))?,
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Ok((manifest, Scene { map, queries }))
}

// ---------------------------------------------------------------- rasters

/// Binary 8-bit PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "one byte per pixel");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Primitive `i` gets grey level `255·(i+1)/n`; uncovered pixels are 0.
pub fn label_raster(width: usize, height: usize, masks: &[&Mask]) -> Vec<u8> {
    let mut px = vec![0u8; width * height];
    let n = masks.len().max(1);
    for (i, m) in masks.iter().enumerate() {
        let level = (255 * (i + 1) / n) as u8;
        for idx in m.indices() {
            px[idx] = level;
        }
    }
    px
}

/// Depth mapped linearly from `[0, max]` to `[255, 1]`; invalid pixels are 0.
pub fn depth_raster(depth: &DepthMap) -> Vec<u8> {
    let max = (0..depth.data.len())
        .filter_map(|i| depth.at_index(i))
        .fold(0.0f64, f64::max);
    (0..depth.data.len())
        .map(|i| match depth.at_index(i) {
            Some(z) if max > 0.0 => (255.0 - 254.0 * (z / max).clamp(0.0, 1.0)).round() as u8,
            Some(_) => 255,
            None => 0,
        })
        .collect()
}
