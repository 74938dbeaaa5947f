//! Network parameters on disk: a flat little-endian `f64` array plus a JSON
//! sidecar carrying the layer spec.
//!
//! A leverage model is one array holding every interval's network back to
//! back, described by `leverage.json`:
//!
//! ```text
//! model/leverage.bin   n_intervals * param_count f64 values
//! model/leverage.json  { format, version, spec, maturities, param_count, sabr, clamp_min }
//! ```

use std::path::{Path, PathBuf};

use lsv_core::lsv::{LeverageModel, SabrParams};
use lsv_core::{MlpParams, MlpSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::market_io::{load_json, save_json};

pub const PARAMS_FORMAT: &str = "f64-le";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsSidecar {
    pub format: String,
    pub spec: MlpSpec,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format: String,
    pub version: u32,
    /// `None` for the flat leverage `L = 1`.
    pub spec: Option<MlpSpec>,
    pub maturities: Vec<f64>,
    pub param_count: usize,
    pub sabr: SabrParams,
    pub clamp_min: Option<f64>,
}

pub fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_values(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let v = decode(&bytes).ok_or_else(|| CliError::format(path, "length is not a multiple of 8 bytes"))?;
    if v.len() != expected {
        return Err(CliError::format(path, format!("expected {expected} values, found {}", v.len())));
    }
    Ok(v)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_params(stem: &Path, params: &MlpParams) -> Result<()> {
    write_bytes(&stem.with_extension("bin"), &encode(params.as_slice()))?;
    let side = ParamsSidecar { format: PARAMS_FORMAT.into(), spec: params.spec().clone(), param_count: params.len() };
    save_json(&stem.with_extension("json"), &side)
}

pub fn load_params(stem: &Path) -> Result<MlpParams> {
    let json = stem.with_extension("json");
    let side: ParamsSidecar = load_json(&json)?;
    if side.format != PARAMS_FORMAT || side.spec.param_count() != side.param_count {
        return Err(CliError::format(&json, "unsupported format or inconsistent parameter count"));
    }
    let v = read_values(&stem.with_extension("bin"), side.param_count)?;
    MlpParams::from_flat(side.spec, v).map_err(|e| CliError::format(&json, e))
}

pub fn model_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("leverage.bin"), dir.join("leverage.json"))
}

/// Saves the model and SABR parameters into `dir`; returns the written
/// paths (array first).
pub fn save_model(dir: &Path, model: &LeverageModel, sabr: &SabrParams) -> Result<[PathBuf; 2]> {
    let (bin, json) = model_files(dir);
    let values: Vec<f64> = model.nets().iter().flat_map(|n| n.as_slice().iter().copied()).collect();
    write_bytes(&bin, &encode(&values))?;
    let side = ModelSidecar {
        format: PARAMS_FORMAT.into(),
        version: MODEL_VERSION,
        spec: (!model.is_flat()).then(|| model.spec().clone()),
        maturities: model.maturities().to_vec(),
        param_count: if model.is_flat() { 0 } else { model.spec().param_count() },
        sabr: *sabr,
        clamp_min: model.clamp_min(),
    };
    save_json(&json, &side)?;
    Ok([bin, json])
}

pub fn load_model(dir: &Path) -> Result<(LeverageModel, SabrParams)> {
    let (bin, json) = model_files(dir);
    let side: ModelSidecar = load_json(&json)?;
    if side.format != PARAMS_FORMAT || side.version != MODEL_VERSION {
        return Err(CliError::format(&json, format!("unsupported model format {} v{}", side.format, side.version)));
    }
    side.sabr.validate().map_err(|e| CliError::format(&json, e))?;
    let model = match &side.spec {
        None => {
            read_values(&bin, 0)?;
            LeverageModel::flat(&side.maturities)
        }
        Some(spec) => {
            if spec.param_count() != side.param_count {
                return Err(CliError::format(&json, "parameter count does not match the network layout"));
            }
            let v = read_values(&bin, side.param_count * side.maturities.len())?;
            let flats = v.chunks(side.param_count.max(1)).map(|c| c.to_vec()).collect();
            LeverageModel::from_parts(spec.clone(), &side.maturities, flats)
        }
    }
    .map_err(|e| CliError::format(&json, e))?;
    Ok((model.with_clamp(side.clamp_min), side.sabr))
}
