//! Run configuration: a preset plus optional JSON overrides.
//!
//! A config file is a (partial) [`RunConfig`] with a mandatory `version`
//! field. Every key present replaces the preset value, nested objects are
//! merged key by key.

use std::path::Path;

use lsv_core::calibrate::CalibConfig;
use lsv_core::ground_truth::{GridSpec, GroundHedge};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

/// Synthetic market generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSettings {
    pub n_paths: usize,
    pub dt: f64,
    pub hedge: GroundHedge,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSettings {
    /// Number of perturbed markets.
    pub m: usize,
    /// Half-width of the uniform noise on each ground-truth parameter.
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapolationSettings {
    pub factor: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub preset: Preset,
    pub market: MarketSettings,
    pub calib: CalibConfig,
    /// Number of samples in the statistical study.
    pub samples: usize,
    pub robust: RobustSettings,
    pub extrapolation: ExtrapolationSettings,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (calib, market_paths, samples) = match p {
            Preset::Desk => (CalibConfig::desk(), 1_000_000, 5),
            Preset::Paper => (CalibConfig::paper(), 10_000_000, 200),
        };
        RunConfig {
            version: CONFIG_VERSION,
            preset: p,
            market: MarketSettings {
                n_paths: market_paths,
                dt: calib.dt,
                hedge: GroundHedge::RunningVol,
                grid: GridSpec::default(),
            },
            calib,
            samples,
            robust: RobustSettings { m: 4, u: 0.01 },
            extrapolation: ExtrapolationSettings { factor: 1.5, n_paths: market_paths },
        }
    }

    /// Preset values overridden by the keys of `overrides`.
    pub fn with_overrides(p: Preset, overrides: &Value) -> std::result::Result<Self, String> {
        let version = overrides.get("version").and_then(Value::as_u64);
        if version != Some(CONFIG_VERSION as u64) {
            return Err(format!("config needs \"version\": {CONFIG_VERSION}"));
        }
        if let Some(v) = overrides.get("preset") {
            let named: Preset = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
            if named != p {
                return Err(format!("config is for preset {named:?} but {p:?} was requested"));
            }
        }
        let mut base = serde_json::to_value(Self::preset(p)).map_err(|e| e.to_string())?;
        merge(&mut base, overrides);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, p: Preset) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::preset(p));
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::format(path, e))?;
        Self::with_overrides(p, &v).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.calib.validate().map_err(|e| e.to_string())?;
        self.market.grid.validate().map_err(|e| e.to_string())?;
        if (self.market.grid.spot - 1.0).abs() > 0.0 {
            return Err("markets are normalised to spot 1".into());
        }
        if self.market.n_paths < 10_000 || !(self.market.dt > 0.0) {
            return Err("market generation needs >= 10^4 paths and dt > 0".into());
        }
        if self.samples == 0 || self.robust.m == 0 || !(self.robust.u >= 0.0) {
            return Err("samples and robust.m must be positive, robust.u non-negative".into());
        }
        if !(self.extrapolation.factor > 0.0) {
            return Err("extrapolation factor must be positive".into());
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_merge_into_preset() {
        let cfg = RunConfig::with_overrides(Preset::Desk, &json!({"version": 1, "calib": {"max_steps": 50}, "samples": 2}))
            .unwrap();
        assert_eq!(cfg.calib.max_steps, 50);
        assert_eq!(cfg.samples, 2);
        assert_eq!(cfg.calib.lr, CalibConfig::desk().lr);
        assert_eq!(cfg.market.grid, GridSpec::default());
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(RunConfig::with_overrides(Preset::Desk, &json!({"calib": {}})).is_err());
        assert!(RunConfig::with_overrides(Preset::Desk, &json!({"version": 1, "calib": {"tol": -1.0}})).is_err());
        assert!(RunConfig::with_overrides(Preset::Desk, &json!({"version": 1, "preset": "paper"})).is_err());
        assert!(RunConfig::with_overrides(Preset::Desk, &json!({"version": 1, "market": {"n_paths": 10}})).is_err());
        assert!(RunConfig::with_overrides(Preset::Desk, &json!({"version": 1, "bogus": 3})).is_err());
    }

    #[test]
    fn full_size_preset_keeps_its_constants() {
        let p = RunConfig::preset(Preset::Paper);
        assert_eq!(p.calib, CalibConfig::paper());
        assert_eq!(p.market.n_paths, 10_000_000);
        assert_eq!(p.calib.eval_paths, 10_000_000);
        assert_eq!(p.samples, 200);
    }
}
