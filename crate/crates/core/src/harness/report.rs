use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::commands::{GtcFile, CONFIG_FILE, CURVE_FILE, GTC_FILE};
use super::config::ExperimentConfig;
use super::HarnessError;
use crate::metrics::mean_and_se;
use crate::rl::{read_curves_csv, TrainingCurve};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
const NA: &str = "N/A";

/// Mean reward over seeds at one budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetCell {
    pub timesteps: u64,
    /// `None` when no seed reached this budget.
    pub mean_reward: Option<f64>,
    pub std_error: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub method: String,
    /// `(ground-truth dimension, GTC)`; `None` when the run has no GTC.
    pub gtc: Vec<(String, Option<f64>)>,
    pub gtc_mean: Option<f64>,
    pub final_reward: Option<f64>,
    pub final_std_error: Option<f64>,
    pub budgets: Vec<BudgetCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub gt_dims: Vec<String>,
    pub budgets: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

/// Run directories below `dir`: `dir` itself if it holds a config,
/// otherwise every `runs/*` entry that does, in name order.
pub fn discover_runs(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if dir.join(CONFIG_FILE).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let runs = dir.join("runs");
    if !runs.is_dir() {
        return Err(HarnessError::Missing(dir.join(CONFIG_FILE)));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(&runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONFIG_FILE).exists())
        .collect();
    out.sort();
    Ok(out)
}

/// Mean and SE over seeds of the values at one budget. A single seed
/// reports its own per-episode standard error.
fn across_seeds(points: &[(f64, f64)]) -> (Option<f64>, Option<f64>) {
    match points {
        [] => (None, None),
        [(m, se)] => (Some(*m), Some(*se)),
        _ => {
            let means: Vec<f64> = points.iter().map(|p| p.0).collect();
            let (m, se) = mean_and_se(&means);
            (Some(m), Some(se))
        }
    }
}

fn row_for(
    dir: &Path,
    label: String,
    budgets: &[u64],
    gt_dims: &[String],
) -> Result<ReportRow, HarnessError> {
    let cfg = ExperimentConfig::load(dir.join(CONFIG_FILE))?;
    let curves: Vec<TrainingCurve> = match File::open(dir.join(CURVE_FILE)) {
        Ok(f) => read_curves_csv(f)?,
        Err(_) => Vec::new(),
    };
    let gtc: Option<GtcFile> = std::fs::read(dir.join(GTC_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let cells = budgets
        .iter()
        .map(|&t| {
            let pts: Vec<(f64, f64)> = curves
                .iter()
                .filter_map(|c| c.points.iter().find(|p| p.timesteps == t))
                .map(|p| (p.eval.mean_reward, p.eval.std_error))
                .collect();
            let (mean_reward, std_error) = across_seeds(&pts);
            BudgetCell {
                timesteps: t,
                mean_reward,
                std_error,
                seeds: pts.len(),
            }
        })
        .collect();
    let finals: Vec<(f64, f64)> = curves
        .iter()
        .filter_map(|c| c.points.last())
        .map(|p| (p.eval.mean_reward, p.eval.std_error))
        .collect();
    let (final_reward, final_std_error) = across_seeds(&finals);
    let gtc_cells = gt_dims
        .iter()
        .map(|name| {
            let v = gtc
                .as_ref()
                .and_then(|g| g.report.entries.iter().find(|e| &e.name == name))
                .map(|e| e.gtc);
            (name.clone(), v)
        })
        .collect();
    Ok(ReportRow {
        label,
        method: cfg.srl.method.label().to_string(),
        gtc: gtc_cells,
        gtc_mean: gtc.map(|g| g.report.gtc_mean),
        final_reward,
        final_std_error,
        budgets: cells,
    })
}

fn label_of(root: &Path, dir: &Path, single: bool) -> Result<String, HarnessError> {
    if single {
        let cfg = ExperimentConfig::load(dir.join(CONFIG_FILE))?;
        return Ok(cfg.srl.method.label().to_string());
    }
    Ok(dir
        .strip_prefix(root.join("runs"))
        .unwrap_or(dir)
        .to_string_lossy()
        .into_owned())
}

/// Builds the summary of a run or sweep directory. Missing artifacts become
/// empty (`N/A`) cells.
pub fn build_report(dir: &Path) -> Result<Report, HarnessError> {
    let runs = discover_runs(dir)?;
    let single = runs.len() == 1 && runs[0] == dir;
    let mut budgets = BTreeSet::new();
    let mut gt_dims: Vec<String> = Vec::new();
    for run in &runs {
        let cfg = ExperimentConfig::load(run.join(CONFIG_FILE))?;
        budgets.extend(cfg.rl.ppo.active_checkpoints());
        for name in cfg.env.variant.gt_names() {
            if !gt_dims.iter().any(|d| d == name) {
                gt_dims.push(name.to_string());
            }
        }
    }
    let budgets: Vec<u64> = budgets.into_iter().collect();
    let rows = runs
        .iter()
        .map(|r| row_for(r, label_of(dir, r, single)?, &budgets, &gt_dims))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Report {
        gt_dims,
        budgets,
        rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x}"))
}

/// Writes `summary.csv` (one row per run) and `summary.json` into `dir`.
pub fn cmd_report(dir: &Path) -> Result<Report, HarnessError> {
    let report = build_report(dir)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(SUMMARY_CSV))?));
    let mut header = vec!["label".to_string(), "method".to_string()];
    header.extend(report.gt_dims.iter().map(|d| format!("gtc_{d}")));
    header.extend(["gtc_mean", "mean_reward", "std_error"].map(String::from));
    for t in &report.budgets {
        header.push(format!("reward_{t}"));
        header.push(format!("se_{t}"));
    }
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![r.label.clone(), r.method.clone()];
        rec.extend(r.gtc.iter().map(|(_, v)| cell(*v)));
        rec.push(cell(r.gtc_mean));
        rec.push(cell(r.final_reward));
        rec.push(cell(r.final_std_error));
        for b in &r.budgets {
            rec.push(cell(b.mean_reward));
            rec.push(cell(b.std_error));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    std::fs::write(
        dir.join(SUMMARY_JSON),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}
