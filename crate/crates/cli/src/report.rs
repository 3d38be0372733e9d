use std::fmt::Write as _;
use std::path::Path;

use planar_reloc::eval::{metrics_from_classified, pr_curve, MatchMetrics, PoseMetrics, PrPoint, ScoredPair};
use planar_reloc::io::{write_bytes, write_json, FORMAT_VERSION};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

/// Scored predictions per query, in query order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub format_version: u64,
    pub queries: Vec<Vec<ScoredPair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u64,
    pub pose: PoseMetrics,
    pub matching: MatchMetrics,
    pub pr_curve: Vec<PrPoint>,
}

impl MetricsReport {
    /// `classified` holds `(score, correct)` for every prediction of every
    /// query; `n_gt` counts labelled pairs over all queries.
    pub fn new(pose: PoseMetrics, classified: &[(f64, bool)], n_gt: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            pose,
            matching: metrics_from_classified(classified, n_gt),
            pr_curve: pr_curve(classified, n_gt),
        }
    }

    /// `metrics.json`, per-query `metrics.csv` and `pr_curve.csv`.
    pub fn write(&self, dir: &Path, names: &[String]) -> CliResult<()> {
        write_json(&dir.join("metrics.json"), self)?;
        let mut csv = String::from("query,rotation_deg,translation_m\n");
        for (name, e) in names.iter().zip(&self.pose.per_query) {
            writeln!(csv, "{name},{},{}", e.rotation_deg, e.translation_m).unwrap();
        }
        write_bytes(&dir.join("metrics.csv"), csv.as_bytes())?;
        let mut pr = String::from("threshold,precision,recall\n");
        for p in &self.pr_curve {
            writeln!(pr, "{},{},{}", p.threshold, p.precision, p.recall).unwrap();
        }
        write_bytes(&dir.join("pr_curve.csv"), pr.as_bytes())?;
        Ok(())
    }
}
