//! Repeated calibration to freshly sampled ground-truth markets.
//!
//! Seeds: run `m` of a study with master seed `s` uses
//! `run_seed = derive_seed(s, [STAT_TAG, m])`; inside a run the ground-truth
//! parameters, the market paths and the calibration use
//! `derive_seed(run_seed, [0])`, `[1]` and `[2]`. Any run can therefore be
//! replayed alone from `(s, m)` or directly from its `run_seed`.

use lsv_core::calibrate::{calibrate_robust, calibrate_surface, CalibReport, Monitor, SurfaceFit};
use lsv_core::ground_truth::{
    gen_synthetic_market, perturb_xi, sample_xi, FixedShape, GroundTruth, MarketConfig, SmileGrid, XiParams,
};
use lsv_core::rng::derive_seed;
use lsv_core::stats::quantile_sorted;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::progress::Clock;

pub const STAT_TAG: u64 = 0x5354_4154;
pub const QUANTILES: [f64; 4] = [0.15, 0.30, 0.70, 0.95];
pub const SUMMARY_SCHEMA: &str = "lsv-calib/stat-summary";
pub const SUMMARY_VERSION: u32 = 1;

pub fn run_seed(master: u64, run_id: usize) -> u64 {
    derive_seed(master, &[STAT_TAG, run_id as u64])
}

pub fn market_config(cfg: &RunConfig, seed: u64) -> MarketConfig {
    MarketConfig { n_paths: cfg.market.n_paths, dt: cfg.market.dt, seed, hedge: cfg.market.hedge }
}

/// Ground-truth market for `xi` on the configured grid.
pub fn make_market(cfg: &RunConfig, xi: &XiParams, seed: u64) -> lsv_core::Result<SmileGrid> {
    let gt = GroundTruth { xi: *xi, shape: FixedShape::default() };
    gen_synthetic_market(&gt, &cfg.market.grid, &market_config(cfg, seed))
}

/// `m` markets from perturbed copies of `xi`, priced on common paths.
pub fn robust_markets(cfg: &RunConfig, xi: &XiParams, seed: u64) -> lsv_core::Result<(Vec<XiParams>, Vec<SmileGrid>)> {
    let xis = perturb_xi(xi, cfg.robust.u, cfg.robust.m, derive_seed(seed, &[0]));
    let markets = xis.iter().map(|x| make_market(cfg, x, derive_seed(seed, &[1]))).collect::<lsv_core::Result<_>>()?;
    Ok((xis, markets))
}

/// Fits `market` and returns the fit, or the reason the run is dropped.
pub fn fit_or_skip(
    market: &SmileGrid,
    cfg: &RunConfig,
    seed: u64,
    monitor: &mut dyn Monitor,
) -> Result<SurfaceFit, String> {
    if market.has_failures() {
        return Err("market implied vol inversion failed".into());
    }
    let fit = calibrate_surface(market, &cfg.calib, seed, monitor).map_err(|e| e.to_string())?;
    check_fit(&fit.report)?;
    Ok(fit)
}

pub fn fit_robust_or_skip(
    markets: &[SmileGrid],
    cfg: &RunConfig,
    seed: u64,
    monitor: &mut dyn Monitor,
) -> Result<SurfaceFit, String> {
    if markets.iter().any(|m| m.has_failures()) {
        return Err("market implied vol inversion failed".into());
    }
    let fit = calibrate_robust(markets, &cfg.calib, seed, monitor).map_err(|e| e.to_string())?;
    check_fit(&fit.report)?;
    Ok(fit)
}

fn check_fit(r: &CalibReport) -> Result<(), String> {
    if let Some(s) = r.slices.iter().find(|s| s.skipped) {
        return Err(format!("slice {}: {}", s.index, s.skip_reason.as_deref().unwrap_or("skipped")));
    }
    if let Some(s) = r.slices.iter().find(|s| s.iv_model.iter().any(|v| !v.is_finite())) {
        return Err(format!("slice {}: model implied vol inversion failed", s.index));
    }
    Ok(())
}

/// Row of the raw error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub run_id: usize,
    pub maturity_idx: usize,
    pub strike_idx: usize,
    pub strike: f64,
    pub iv_market: f64,
    pub iv_model: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_id: usize,
    pub seed: u64,
    pub xi: XiParams,
    /// `Err(reason)` for a skipped run.
    pub result: Result<SurfaceFit, String>,
    pub secs: f64,
}

impl RunOutcome {
    pub fn error_rows(&self) -> Vec<ErrorRow> {
        let Ok(fit) = &self.result else {
            return Vec::new();
        };
        let mut rows = Vec::new();
        for s in &fit.report.slices {
            for (j, e) in s.abs_errors().into_iter().enumerate() {
                rows.push(ErrorRow {
                    run_id: self.run_id,
                    maturity_idx: s.index,
                    strike_idx: j,
                    strike: s.strikes[j],
                    iv_market: s.iv_market[j],
                    iv_model: s.iv_model[j],
                    abs_error: e,
                });
            }
        }
        rows
    }
}

/// One study run from its own seed.
pub fn run_one(cfg: &RunConfig, run_id: usize, seed: u64, verbose: bool) -> RunOutcome {
    let mut clock = Clock::new(format!("run {run_id}"), verbose);
    let xi = sample_xi(derive_seed(seed, &[0]));
    let result = make_market(cfg, &xi, derive_seed(seed, &[1]))
        .map_err(|e| format!("market generation: {e}"))
        .and_then(|market| fit_or_skip(&market, cfg, derive_seed(seed, &[2]), &mut clock));
    RunOutcome { run_id, seed, xi, result, secs: clock.elapsed_secs() }
}

/// Runs `cfg.samples` calibrations in parallel on the current thread pool;
/// outcomes are returned in run order.
pub fn run_stat_test(cfg: &RunConfig, master: u64, verbose: bool) -> Vec<RunOutcome> {
    (0..cfg.samples).into_par_iter().map(|m| run_one(cfg, m, run_seed(master, m), verbose)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrikeStat {
    pub maturity_idx: usize,
    pub strike_idx: usize,
    pub strike: f64,
    pub n: usize,
    pub mean_abs_error: f64,
    /// At the levels of [`QUANTILES`].
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: usize,
    pub seed: u64,
    pub xi: XiParams,
    pub skipped: bool,
    pub skip_reason: Option<String>,
    pub slice_max_error: Vec<f64>,
    pub slice_mean_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub schema: String,
    pub version: u32,
    pub master_seed: u64,
    pub samples: usize,
    pub completed: usize,
    pub skip_count: usize,
    pub quantile_levels: Vec<f64>,
    pub per_strike: Vec<StrikeStat>,
    pub runs: Vec<RunSummary>,
    /// Wall-clock seconds per run, in run order.
    pub metadata: StatMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatMetadata {
    pub run_secs: Vec<f64>,
}

impl StatSummary {
    pub fn from_runs(master: u64, runs: &[RunOutcome]) -> Self {
        let rows: Vec<ErrorRow> = runs.iter().flat_map(|r| r.error_rows()).collect();
        let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.maturity_idx, r.strike_idx)).collect();
        keys.sort_unstable();
        keys.dedup();
        let per_strike = keys
            .into_iter()
            .map(|(i, j)| {
                let sel: Vec<&ErrorRow> = rows.iter().filter(|r| r.maturity_idx == i && r.strike_idx == j).collect();
                let mut e: Vec<f64> = sel.iter().map(|r| r.abs_error).collect();
                e.sort_by(f64::total_cmp);
                StrikeStat {
                    maturity_idx: i,
                    strike_idx: j,
                    strike: sel[0].strike,
                    n: e.len(),
                    mean_abs_error: e.iter().sum::<f64>() / e.len() as f64,
                    quantiles: QUANTILES.iter().map(|&q| quantile_sorted(&e, q)).collect(),
                }
            })
            .collect();
        let summaries: Vec<RunSummary> = runs
            .iter()
            .map(|r| {
                let (max, mean) = match &r.result {
                    Ok(fit) => (
                        fit.report.slices.iter().map(|s| s.max_error).collect(),
                        fit.report.slices.iter().map(|s| s.mean_error).collect(),
                    ),
                    Err(_) => (Vec::new(), Vec::new()),
                };
                RunSummary {
                    run_id: r.run_id,
                    seed: r.seed,
                    xi: r.xi,
                    skipped: r.result.is_err(),
                    skip_reason: r.result.as_ref().err().cloned(),
                    slice_max_error: max,
                    slice_mean_error: mean,
                }
            })
            .collect();
        let skip_count = summaries.iter().filter(|r| r.skipped).count();
        StatSummary {
            schema: SUMMARY_SCHEMA.into(),
            version: SUMMARY_VERSION,
            master_seed: master,
            samples: runs.len(),
            completed: runs.len() - skip_count,
            skip_count,
            quantile_levels: QUANTILES.to_vec(),
            per_strike,
            runs: summaries,
            metadata: StatMetadata { run_secs: runs.iter().map(|r| r.secs).collect() },
        }
    }
}
