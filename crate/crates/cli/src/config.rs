use std::path::{Path, PathBuf};

use planar_reloc::eval::{default_thresholds, RecallThreshold, DEFAULT_IOU_MIN};
use planar_reloc::extraction::RansacConfig;
use planar_reloc::io::{read_json, FORMAT_VERSION};
use planar_reloc::refine::RefineConfig;
use planar_reloc::solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingConfig {
    /// Confidence threshold for mutual nearest neighbours.
    pub tau: f64,
    /// IoU needed for a ground-truth label.
    pub label_iou: f64,
    /// IoU needed for a predicted match to count as correct.
    pub iou_min: f64,
    /// Width of synthetic embeddings when no weights fix it.
    pub embedding_dim: usize,
    pub separation: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            label_iou: 0.5,
            iou_min: DEFAULT_IOU_MIN,
            embedding_dim: 32,
            separation: 10.0,
        }
    }
}

/// Everything a run depends on. Relative paths resolve against the config
/// file's directory. Module `rng_seed` fields are ignored: every random
/// stage is seeded from `seed`, the query index and the stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub format_version: u64,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub out: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    /// Directory holding `<query name>_embeddings.json` files.
    pub embeddings: Option<PathBuf>,
    pub synthetic_embeddings: bool,
    pub oracle_matches: bool,
    pub refine: bool,
    pub extraction: RansacConfig,
    pub matching: MatchingConfig,
    pub solver: SolverConfig,
    pub refinement: RefineConfig,
    pub thresholds: Vec<RecallThreshold>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            threads: 0,
            out: None,
            weights: None,
            embeddings: None,
            synthetic_embeddings: false,
            oracle_matches: false,
            refine: false,
            extraction: RansacConfig::default(),
            matching: MatchingConfig::default(),
            solver: SolverConfig::default(),
            refinement: RefineConfig::default(),
            thresholds: default_thresholds(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub refine: bool,
    pub synthetic_embeddings: bool,
    pub oracle_matches: bool,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, over: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let mut cfg: ExperimentConfig = read_json(p).map_err(CliError::config)?;
                let base = p.parent().unwrap_or(Path::new(""));
                for slot in [&mut cfg.out, &mut cfg.weights, &mut cfg.embeddings] {
                    if let Some(rel) = slot.as_mut().filter(|r| r.is_relative()) {
                        *rel = base.join(&*rel);
                    }
                }
                cfg
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = over.seed {
            cfg.seed = s;
        }
        if let Some(t) = over.threads {
            cfg.threads = t;
        }
        if over.out.is_some() {
            cfg.out.clone_from(&over.out);
        }
        cfg.refine |= over.refine;
        cfg.synthetic_embeddings |= over.synthetic_embeddings;
        cfg.oracle_matches |= over.oracle_matches;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.extraction.validate().map_err(CliError::config)?;
        self.solver.validate().map_err(CliError::config)?;
        if !self.refinement.is_valid() {
            return Err(CliError::Config(format!("invalid refinement settings {:?}", self.refinement)));
        }
        let m = &self.matching;
        if !(0.0..1.0).contains(&m.tau) {
            return Err(CliError::Config(format!("matching.tau {} outside [0, 1)", m.tau)));
        }
        if !(m.label_iou > 0.0 && m.label_iou <= 1.0) || !(0.0..=1.0).contains(&m.iou_min) {
            return Err(CliError::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if m.embedding_dim == 0 || !(m.separation > 0.0) {
            return Err(CliError::Config("embedding_dim and separation must be positive".into()));
        }
        for p in [&self.weights, &self.embeddings].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory; pass --out".into()))
    }
}

pub const STAGE_EXTRACT: u64 = 1;
pub const STAGE_EMBED: u64 = 2;
pub const STAGE_SOLVE: u64 = 3;
pub const STAGE_REFINE: u64 = 4;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for one stage of one query, independent of scheduling.
pub fn stage_seed(seed: u64, query: usize, stage: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ query as u64) ^ stage)
}
