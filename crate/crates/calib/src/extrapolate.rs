//! Out-of-sample comparison of a calibrated model with its ground truth on
//! a strike grid widened beyond the training range.

use lsv_core::calibrate::eval_model_ivs;
use lsv_core::ground_truth::{gen_synthetic_market, FixedShape, GridSpec, GroundTruth, XiParams};
use lsv_core::lsv::{LeverageModel, SabrParams};
use lsv_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const EXTRAPOLATION_SCHEMA: &str = "lsv-calib/extrapolation";
pub const EXTRAPOLATION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRow {
    pub maturity_idx: usize,
    pub maturity: f64,
    pub strike: f64,
    pub log_moneyness: f64,
    /// Within the calibrated strike range of this maturity.
    pub inside: bool,
    pub iv_ground: f64,
    pub iv_model: f64,
    pub diff: f64,
    pub iv_std_err: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationSlice {
    pub maturity_idx: usize,
    pub maturity: f64,
    pub max_abs_inside: f64,
    pub mean_abs_inside: f64,
    pub max_abs_outside: f64,
    pub mean_abs_outside: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    pub schema: String,
    pub version: u32,
    pub factor: f64,
    pub grid: GridSpec,
    pub rows: Vec<ExtrapolationRow>,
    pub slices: Vec<ExtrapolationSlice>,
}

fn max_mean(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (v.iter().copied().fold(0.0, f64::max), v.iter().sum::<f64>() / v.len() as f64)
}

/// Model and ground-truth implied vols on the configured grid with every
/// log-strike bound multiplied by `factor`, for the model's maturities.
pub fn extrapolation_report(
    model: &LeverageModel,
    sabr: &SabrParams,
    xi: &XiParams,
    factor: f64,
    cfg: &RunConfig,
    seed: u64,
) -> lsv_core::Result<ExtrapolationReport> {
    let base = cfg.market.grid.truncated(model.n_intervals());
    let grid = base.widened(factor);
    let gt = GroundTruth { xi: *xi, shape: FixedShape::default() };
    let mcfg = crate::stat::market_config(cfg, derive_seed(seed, &[0]));
    let mcfg = lsv_core::ground_truth::MarketConfig { n_paths: cfg.extrapolation.n_paths, ..mcfg };
    let truth = gen_synthetic_market(&gt, &grid, &mcfg)?;
    let smiles = eval_model_ivs(sabr, model, &grid, cfg.calib.eval_paths, cfg.calib.dt, derive_seed(seed, &[1]), cfg.calib.hedge)?;
    let mut rows = Vec::new();
    let mut slices = Vec::new();
    for (i, (t, s)) in truth.slices.iter().zip(&smiles).enumerate() {
        let bound = base.log_strike_bounds[i];
        let (mut inside, mut outside, mut failures) = (Vec::new(), Vec::new(), 0);
        for j in 0..t.len() {
            let k = t.strikes[j];
            let lm = k.ln();
            let failed = t.iv_failed[j] || s.iv_failed[j];
            let diff = s.implied_vols[j] - t.implied_vols[j];
            let is_inside = lm.abs() <= bound * (1.0 + 1e-12);
            if failed {
                failures += 1;
            } else if is_inside {
                inside.push(diff.abs());
            } else {
                outside.push(diff.abs());
            }
            rows.push(ExtrapolationRow {
                maturity_idx: i,
                maturity: t.maturity,
                strike: k,
                log_moneyness: lm,
                inside: is_inside,
                iv_ground: t.implied_vols[j],
                iv_model: s.implied_vols[j],
                diff: if failed { f64::NAN } else { diff },
                iv_std_err: s.iv_std_errs[j],
                failed,
            });
        }
        let (max_in, mean_in) = max_mean(&inside);
        let (max_out, mean_out) = max_mean(&outside);
        slices.push(ExtrapolationSlice {
            maturity_idx: i,
            maturity: t.maturity,
            max_abs_inside: max_in,
            mean_abs_inside: mean_in,
            max_abs_outside: max_out,
            mean_abs_outside: mean_out,
            failures,
        });
    }
    Ok(ExtrapolationReport { schema: EXTRAPOLATION_SCHEMA.into(), version: EXTRAPOLATION_VERSION, factor, grid, rows, slices })
}
