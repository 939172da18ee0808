//! Deterministic artifact output. Every writer produces byte-identical files
//! for identical inputs: rows follow strategy then iteration order, floats go
//! through the shortest round-tripping decimal form, and nothing emits
//! timestamps. Readers parse the same files back so tables survive a disk
//! round trip exactly.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::runner::{
    BiasReport, LearningCurve, Metadata, SteadyStateEstimate, SweepRow, TheoryOverlayRow,
    TrackingResult,
};
use super::HarnessError;
use crate::theory::TheoryReport;

/// Sentinel for non-positive mean-square values in dB.
pub const DB_FLOOR: f64 = -200.0;

/// `10 log10(msd)`, clamped at the sentinel floor. The clamp threshold is the
/// exact linear value of the floor, so the output never dips below it.
pub fn to_db(msd: f64) -> f64 {
    if msd > 1e-20 {
        10.0 * msd.log10()
    } else {
        DB_FLOOR
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// 0-based; entry 0 is the error after the first update.
    pub iteration: usize,
    pub strategy: String,
    pub msd_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCurveRow {
    pub iteration: usize,
    pub strategy: String,
    pub msd_db: f64,
    pub node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyRow {
    pub strategy: String,
    pub msd: f64,
    pub msd_db: f64,
    pub standard_error: f64,
    pub tail_fraction: f64,
    pub trials_used: usize,
    pub diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayRow {
    pub strategy: String,
    pub network_msd_db: Option<f64>,
    pub non_convex_caveat: bool,
    pub note: Option<String>,
}

/// Scalar summary of a [`TheoryReport`], one column per value, empty when the
/// report could not produce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCsvRow {
    pub n_nodes: usize,
    pub dim: usize,
    pub s_norm1: f64,
    pub alpha: f64,
    pub sigma_v2: f64,
    pub non_convex: bool,
    pub mean_dynamics_stable: bool,
    pub b_rho: Option<f64>,
    pub stable_step_bound_min: Option<f64>,
    pub worst_node_bound: Option<f64>,
    pub worst_node_small_step: Option<f64>,
    pub f_rho: Option<f64>,
    pub f_rho_measured: Option<bool>,
    pub network_msd: Option<f64>,
    pub network_msd_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub iteration: usize,
    pub target_x: f64,
    pub target_y: f64,
    pub strategy: String,
    pub node_x: f64,
    pub node_y: f64,
}

fn write_failed(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Write {
        path: path.display().to_string(),
        source,
    }
}

/// Serialize rows to CSV with a header derived from the field names.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| write_failed(path, std::io::Error::other(e)))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| write_failed(path, std::io::Error::other(e)))?;
    std::fs::write(path, bytes).map_err(|source| write_failed(path, source))
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::ReadConfig {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e| HarnessError::Invalid(format!(
            "cannot parse {}: {e}",
            path.display()
        )))?);
    }
    Ok(rows)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| write_failed(path, source))
}

pub fn curve_rows(curves: &[LearningCurve]) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    for curve in curves {
        for (i, &msd_db) in curve.msd_db.iter().enumerate() {
            rows.push(CurveRow {
                iteration: i,
                strategy: curve.strategy.clone(),
                msd_db,
            });
        }
    }
    rows
}

pub fn node_curve_rows(curves: &[LearningCurve]) -> Vec<NodeCurveRow> {
    let mut rows = Vec::new();
    for curve in curves {
        let Some(per_node) = &curve.per_node_db else {
            continue;
        };
        for (i, nodes) in per_node.iter().enumerate() {
            for (k, &msd_db) in nodes.iter().enumerate() {
                rows.push(NodeCurveRow {
                    iteration: i,
                    strategy: curve.strategy.clone(),
                    msd_db,
                    node: k,
                });
            }
        }
    }
    rows
}

pub fn steady_rows(estimates: &[SteadyStateEstimate]) -> Vec<SteadyRow> {
    estimates
        .iter()
        .map(|e| SteadyRow {
            strategy: e.strategy.clone(),
            msd: e.msd,
            msd_db: e.msd_db,
            standard_error: e.standard_error,
            tail_fraction: e.tail_fraction,
            trials_used: e.trials_used,
            diverged: e.diverged,
        })
        .collect()
}

/// Flatten overlay predictions for CSV, dropping the per-node detail.
pub fn overlay_rows(rows: &[TheoryOverlayRow]) -> Vec<OverlayRow> {
    rows.iter()
        .map(|r| OverlayRow {
            strategy: r.strategy.clone(),
            network_msd_db: r.network_msd_db,
            non_convex_caveat: r.non_convex_caveat,
            note: r.note.clone(),
        })
        .collect()
}

pub fn theory_csv_row(report: &TheoryReport) -> TheoryCsvRow {
    TheoryCsvRow {
        n_nodes: report.n_nodes,
        dim: report.dim,
        s_norm1: report.s_norm1,
        alpha: report.alpha,
        sigma_v2: report.sigma_v2,
        non_convex: report.non_convex,
        mean_dynamics_stable: report.mean_dynamics_stable,
        b_rho: report.b_rho,
        stable_step_bound_min: report
            .stable_step_bounds
            .as_ref()
            .map(|b| b.iter().copied().fold(f64::INFINITY, f64::min)),
        worst_node_bound: report.worst_node_bound.as_ref().map(|b| b.bound),
        worst_node_small_step: report.worst_node_bound.as_ref().map(|b| b.small_step),
        f_rho: report.steady_state.as_ref().map(|s| s.f_rho),
        f_rho_measured: report.steady_state.as_ref().map(|s| s.f_rho_measured),
        network_msd: report.steady_state.as_ref().map(|s| s.network),
        network_msd_db: report.steady_state.as_ref().map(|s| to_db(s.network)),
    }
}

pub fn track_rows(result: &TrackingResult) -> Vec<TrackRow> {
    let mut rows = Vec::new();
    for np in &result.node_paths {
        for (i, (target, node)) in result.target_path.iter().zip(&np.path).enumerate() {
            rows.push(TrackRow {
                iteration: i,
                target_x: target[0],
                target_y: target[1],
                strategy: np.strategy.clone(),
                node_x: node[0],
                node_y: node[1],
            });
        }
    }
    rows
}

pub fn write_curves(path: &Path, curves: &[LearningCurve]) -> Result<(), HarnessError> {
    write_rows(path, &curve_rows(curves))
}

pub fn write_node_curves(path: &Path, curves: &[LearningCurve]) -> Result<(), HarnessError> {
    write_rows(path, &node_curve_rows(curves))
}

pub fn write_steady(path: &Path, estimates: &[SteadyStateEstimate]) -> Result<(), HarnessError> {
    write_rows(path, &steady_rows(estimates))
}

pub fn write_overlay(path: &Path, rows: &[OverlayRow]) -> Result<(), HarnessError> {
    write_rows(path, rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    write_rows(path, rows)
}

pub fn write_metadata(path: &Path, metadata: &Metadata) -> Result<(), HarnessError> {
    write_json(path, metadata)
}

pub fn write_theory_json(path: &Path, report: &TheoryReport) -> Result<(), HarnessError> {
    write_json(path, report)
}

pub fn write_theory_csv(path: &Path, report: &TheoryReport) -> Result<(), HarnessError> {
    write_rows(path, &[theory_csv_row(report)])
}

pub fn write_track(path: &Path, result: &TrackingResult) -> Result<(), HarnessError> {
    write_rows(path, &track_rows(result))
}

pub fn write_bias(path: &Path, report: &BiasReport) -> Result<(), HarnessError> {
    write_rows(path, &report.rows)
}
