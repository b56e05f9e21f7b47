//! Evaluation reports, summary tables and atomic file output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{PrPoint, WiCounts};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Settings a report was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub tau: f64,
    pub conf_threshold: f64,
    pub top_k: usize,
    pub use_objectness: bool,
    pub iou_threshold: f64,
    pub a_ose_threshold: f64,
    pub wi_recall_level: f64,
    pub alpha: f64,
    pub disable_objectness_loss: bool,
    pub random_exemplars: bool,
    pub replay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportCounts {
    pub known_gts: usize,
    pub unknown_gts: usize,
    pub detections: usize,
    pub exemplar_scenes: usize,
    /// Confusion counts at the WI cutoff, when the recall level was reached.
    pub wi: Option<WiCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub task: usize,
    pub seed: u64,
    pub map_prev: Option<f64>,
    pub map_current: Option<f64>,
    pub map_both: Option<f64>,
    pub u_recall: Option<f64>,
    pub a_ose: u64,
    pub wi: Option<f64>,
    pub per_class_ap: BTreeMap<usize, Option<f64>>,
    /// Interpolated precision-recall envelope per class.
    pub pr_curves: BTreeMap<usize, Vec<PrPoint>>,
    pub counts: ReportCounts,
    pub config: ReportConfig,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Version {
                what: "report",
                found: self.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        let aps = [self.map_prev, self.map_current, self.map_both, self.u_recall]
            .into_iter()
            .chain(self.per_class_ap.values().copied())
            .flatten();
        for v in aps {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("metric {v} outside [0, 1]")));
            }
        }
        if self.wi.is_some_and(|w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::domain("wilderness impact must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SUMMARY_HEADER: &str = "task,map_prev,map_current,map_both,u_recall,a_ose,wi,tau,seed";

/// One row per report, null metrics as empty cells.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.task,
            cell(r.map_prev),
            cell(r.map_current),
            cell(r.map_both),
            cell(r.u_recall),
            r.a_ose,
            cell(r.wi),
            r.config.tau,
            r.seed
        );
    }
    out
}

/// Mean and sample standard deviation of the non-null values.
pub fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

const METRICS: [&str; 6] = ["map_prev", "map_current", "map_both", "u_recall", "a_ose", "wi"];

fn metric(r: &EvalReport, name: &str) -> Option<f64> {
    match name {
        "map_prev" => r.map_prev,
        "map_current" => r.map_current,
        "map_both" => r.map_both,
        "u_recall" => r.u_recall,
        "a_ose" => Some(r.a_ose as f64),
        "wi" => r.wi,
        _ => None,
    }
}

/// Multi-seed summary. `runs[s]` holds the per-task reports of one seed.
/// Each metric gets `_mean` and `_std` columns; `seed` lists the seeds
/// separated by `;`.
pub fn multi_seed_csv(runs: &[Vec<EvalReport>]) -> String {
    let mut out = String::from("task");
    for m in METRICS {
        let _ = write!(out, ",{m}_mean,{m}_std");
    }
    out.push_str(",tau,seed\n");
    let tasks = runs.iter().map(Vec::len).max().unwrap_or(0);
    let seeds: Vec<String> = runs
        .iter()
        .filter_map(|r| r.first().map(|x| x.seed.to_string()))
        .collect();
    for t in 0..tasks {
        let rows: Vec<&EvalReport> = runs.iter().filter_map(|r| r.get(t)).collect();
        let _ = write!(out, "{t}");
        for m in METRICS {
            let values: Vec<Option<f64>> = rows.iter().map(|r| metric(r, m)).collect();
            let (mean, std) = mean_std(&values);
            let _ = write!(out, ",{},{}", cell(mean), cell(std));
        }
        let tau = rows.first().map(|r| r.config.tau.to_string()).unwrap_or_default();
        let _ = writeln!(out, ",{tau},{}", seeds.join(";"));
    }
    out
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
