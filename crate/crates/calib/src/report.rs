//! Tabular outputs and the versioned JSON run report.
//!
//! Everything that depends on the wall clock (creation time, timings) sits
//! under the report's `metadata` key, so two runs with the same config and
//! seed produce identical bytes elsewhere.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lsv_core::calibrate::{CalibReport, SliceReport};
use lsv_core::lsv::SabrParams;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::hash::git_blob_sha1;
use crate::market_io::{create_file, save_json};

pub const REPORT_SCHEMA: &str = "lsv-calib/report";
pub const REPORT_VERSION: u32 = 1;

/// One row of a model-vs-market implied vol table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvRow {
    pub maturity: f64,
    pub strike: f64,
    pub iv_market: f64,
    pub iv_model: f64,
    pub abs_error: f64,
    pub std_err: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iv_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iv_hi: Option<f64>,
}

pub fn iv_rows(slice: &SliceReport) -> Vec<IvRow> {
    let err = slice.abs_errors();
    (0..slice.strikes.len())
        .map(|j| IvRow {
            maturity: slice.maturity,
            strike: slice.strikes[j],
            iv_market: slice.iv_market[j],
            iv_model: slice.iv_model[j],
            abs_error: err[j],
            std_err: slice.iv_std_err[j],
            iv_lo: slice.iv_envelope.as_ref().map(|(lo, _)| lo[j]),
            iv_hi: slice.iv_envelope.as_ref().map(|(_, hi)| hi[j]),
        })
        .collect()
}

pub fn iv_table(report: &CalibReport) -> Vec<IvRow> {
    report.slices.iter().flat_map(iv_rows).collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = create_file(path)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    r.deserialize().collect::<csv::Result<Vec<T>>>().map_err(|e| CliError::format(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    /// Git blob object id of the file contents.
    pub sha1: String,
}

impl Artifact {
    /// Hashes `path`; the recorded name is relative to `base` when possible.
    pub fn of(path: &Path, base: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let name = path.strip_prefix(base).unwrap_or(path);
        Ok(Artifact { path: name.to_string_lossy().replace('\\', "/"), bytes: bytes.len() as u64, sha1: git_blob_sha1(&bytes) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_secs: f64,
    pub slice_secs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub created_unix: u64,
    pub tool_version: String,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub version: u32,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub sabr: SabrParams,
    /// Calibration report with its timing fields moved to `metadata`.
    pub calibration: Value,
    pub skipped: Vec<SkipNote>,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipNote {
    pub slice: usize,
    pub reason: String,
}

/// Splits the wall-clock fields off a calibration report.
pub fn split_timings(report: &CalibReport) -> Result<(Value, Timings)> {
    let timings = Timings { total_secs: report.wall_secs, slice_secs: report.slices.iter().map(|s| s.wall_secs).collect() };
    let mut v = serde_json::to_value(report).map_err(|e| CliError::Usage(format!("report serialisation: {e}")))?;
    if let Some(o) = v.as_object_mut() {
        o.remove("wall_secs");
        if let Some(Value::Array(slices)) = o.get_mut("slices") {
            for s in slices {
                if let Some(so) = s.as_object_mut() {
                    so.remove("wall_secs");
                }
            }
        }
    }
    Ok((v, timings))
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[allow(clippy::too_many_arguments)]
pub fn build_report(
    command: &str,
    seed: u64,
    config: &RunConfig,
    inputs: Vec<Artifact>,
    artifacts: Vec<Artifact>,
    sabr: SabrParams,
    calib: &CalibReport,
) -> Result<RunReport> {
    let (calibration, timings) = split_timings(calib)?;
    let skipped = calib
        .slices
        .iter()
        .filter(|s| s.skipped)
        .map(|s| SkipNote { slice: s.index, reason: s.skip_reason.clone().unwrap_or_default() })
        .collect();
    Ok(RunReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        command: command.into(),
        seed,
        config: config.clone(),
        inputs,
        artifacts,
        sabr,
        calibration,
        skipped,
        metadata: Metadata { created_unix: now_unix(), tool_version: env!("CARGO_PKG_VERSION").into(), timings },
    })
}

pub fn save_report(path: &Path, report: &RunReport) -> Result<PathBuf> {
    save_json(path, report)?;
    Ok(path.to_path_buf())
}
