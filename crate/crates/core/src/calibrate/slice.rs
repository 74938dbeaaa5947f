//! The per-maturity training loop and the surface driver.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::CalibConfig;
use super::eval::{eval_strips, ModelSmile};
use super::objective::{calib_gradient, otm_targets, robust_gradient, vega_weights, WeightVector};
use super::sabr::{calibrate_sabr_init, SabrInitReport};
use crate::autodiff::AdamState;
use crate::error::{Error, Result};
use crate::ground_truth::{SmileGrid, SmileSlice};
use crate::lsv::{LeverageModel, SabrParams, SimConfig, Strip};
use crate::rng::derive_seed;

const TAG_NET: u64 = 1;
const TAG_SABR: u64 = 2;
const TAG_SLICE: u64 = 3;
const TAG_EVAL: u64 = 4;

/// Hooks for progress reporting and timing; the core crate has no clock.
pub trait Monitor {
    fn elapsed_secs(&self) -> f64 {
        0.0
    }
    fn on_check(&mut self, _slice: usize, _check: &CheckPoint) {}
    fn on_slice(&mut self, _report: &SliceReport) {}
}

/// A monitor that does nothing.
pub struct Silent;

impl Monitor for Silent {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckPoint {
    pub step: usize,
    pub n_paths: usize,
    pub loss: f64,
    pub max_error: f64,
    pub mean_error: f64,
    /// Best `max_error` up to and including this check.
    pub best_max_error: f64,
    pub iv_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub index: usize,
    pub maturity: f64,
    pub steps: usize,
    pub converged: bool,
    pub max_error: f64,
    pub mean_error: f64,
    pub wall_secs: f64,
    pub checks: Vec<CheckPoint>,
    /// Weights at the start and after every adversarial update.
    pub weight_history: Vec<Vec<f64>>,
    pub skipped: bool,
    pub skip_reason: Option<String>,
    pub strikes: Vec<f64>,
    #[serde(with = "crate::serde_nan")]
    pub iv_market: Vec<f64>,
    /// Per-strike envelope of the target smiles in robust mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iv_envelope: Option<(Vec<f64>, Vec<f64>)>,
    #[serde(with = "crate::serde_nan")]
    pub iv_model: Vec<f64>,
    #[serde(with = "crate::serde_nan")]
    pub iv_std_err: Vec<f64>,
    pub c_opt: Vec<f64>,
}

impl SliceReport {
    /// Absolute IV error per strike (`NaN` where the model IV failed).
    pub fn abs_errors(&self) -> Vec<f64> {
        self.iv_model.iter().zip(&self.iv_market).map(|(m, k)| (m - k).abs()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub sabr_init: SabrInitReport,
    pub slices: Vec<SliceReport>,
    pub wall_secs: f64,
    /// Control-variate coefficient used when evaluating model prices.
    pub eval_coefficient: String,
}

impl CalibReport {
    pub fn any_skipped(&self) -> bool {
        self.slices.iter().any(|s| s.skipped)
    }
}

/// What the slice is fitted to.
enum Target {
    Single { prices: Vec<f64>, ivs: Vec<f64> },
    Robust { prices: Vec<Vec<f64>>, lo: Vec<f64>, hi: Vec<f64>, mid: Vec<f64> },
}

impl Target {
    /// Per-strike error of a model smile; failed inversions are `None`.
    fn errors(&self, smile: &ModelSmile) -> Vec<Option<f64>> {
        (0..smile.strikes.len())
            .map(|j| {
                if smile.iv_failed[j] {
                    return None;
                }
                let v = smile.implied_vols[j];
                Some(match self {
                    Target::Single { ivs, .. } => (v - ivs[j]).abs(),
                    Target::Robust { lo, hi, .. } => (v - hi[j]).max(lo[j] - v).max(0.0),
                })
            })
            .collect()
    }

    fn reference_ivs(&self) -> &[f64] {
        match self {
            Target::Single { ivs, .. } => ivs,
            Target::Robust { mid, .. } => mid,
        }
    }
}

struct SliceJob<'a> {
    index: usize,
    strip: Strip,
    target: Target,
    weights: WeightVector,
    cfg: &'a CalibConfig,
    seed: u64,
}

fn summarize(errs: &[Option<f64>]) -> (f64, f64, bool) {
    let failed = errs.iter().any(Option::is_none);
    let ok: Vec<f64> = errs.iter().flatten().copied().collect();
    let max = if failed { f64::INFINITY } else { ok.iter().copied().fold(0.0, f64::max) };
    let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    (max, mean, failed)
}

fn run_slice(job: SliceJob<'_>, model: &mut LeverageModel, sabr: &SabrParams, monitor: &mut dyn Monitor) -> Result<SliceReport> {
    let SliceJob { index: i, strip, target, mut weights, cfg, seed } = job;
    let t0 = monitor.elapsed_secs();
    if cfg.warm_start && i > 0 {
        let prev = model.net(i - 1).map(|n| n.as_slice().to_vec());
        if let (Some(prev), Some(net)) = (prev, model.net_mut(i)) {
            net.as_mut_slice().copy_from_slice(&prev);
        }
    }
    let n_params = model.net(i).ok_or_else(|| Error::invalid("flat leverage cannot be calibrated"))?.len();
    let mut adam = AdamState::new(n_params);
    let mut checks = Vec::new();
    let mut weight_history = vec![weights.as_slice().to_vec()];
    let mut best: Option<(f64, Vec<f64>, ModelSmile)> = None;
    let mut k = 0;
    let mut converged = false;
    let last = loop {
        k += 1;
        let n_paths = cfg.n_paths_at(k);
        let batch_seed = derive_seed(seed, &[k as u64]);
        let sim = SimConfig { n_paths, dt: cfg.dt, seed: batch_seed, hedge: cfg.hedge };
        let g = match &target {
            Target::Single { prices, .. } => calib_gradient(sabr, model, &strip, prices, &weights, &sim)?,
            Target::Robust { prices, .. } => robust_gradient(sabr, model, &strip, prices, &weights, &sim)?,
        };
        if !g.loss.is_finite() || g.pass.grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: k, seed: batch_seed });
        }
        let net = model.net_mut(i).unwrap();
        adam.step(net.as_mut_slice(), &g.pass.grad, cfg.lr)?;

        if !cfg.is_check(k) {
            continue;
        }
        let eval_cfg = SimConfig { n_paths: cfg.eval_paths, dt: cfg.dt, seed: derive_seed(seed, &[k as u64, TAG_EVAL]), hedge: cfg.hedge };
        let smile = eval_strips(sabr, model, core::slice::from_ref(&strip), &eval_cfg)?.pop().unwrap();
        let errs = target.errors(&smile);
        let (max_error, mean_error, failed) = summarize(&errs);
        if best.as_ref().is_none_or(|b| max_error < b.0) {
            best = Some((max_error, model.net(i).unwrap().as_slice().to_vec(), smile.clone()));
        }
        let cp = CheckPoint {
            step: k,
            n_paths,
            loss: g.loss,
            max_error,
            mean_error,
            best_max_error: best.as_ref().map_or(max_error, |b| b.0),
            iv_failed: failed,
        };
        monitor.on_check(i, &cp);
        checks.push(cp);
        let tol = if matches!(target, Target::Robust { .. }) { cfg.robust_tol } else { cfg.tol };
        if max_error <= tol {
            converged = true;
            break smile;
        }
        if k >= cfg.max_steps {
            break smile;
        }
        if cfg.adversarial {
            let fill = errs.iter().flatten().copied().fold(0.0, f64::max);
            let e: Vec<f64> = errs.iter().map(|e| e.unwrap_or(fill)).collect();
            weights.adversarial_update(&e)?;
            weight_history.push(weights.as_slice().to_vec());
        }
    };
    let mut smile = last;
    if cfg.keep_best {
        if let Some((_, params, s)) = best {
            model.net_mut(i).unwrap().as_mut_slice().copy_from_slice(&params);
            smile = s;
        }
    }
    let errs = target.errors(&smile);
    let (max_error, mean_error, failed) = summarize(&errs);
    let iv_envelope = match &target {
        Target::Robust { lo, hi, .. } => Some((lo.clone(), hi.clone())),
        Target::Single { .. } => None,
    };
    let report = SliceReport {
        index: i,
        maturity: smile.maturity,
        steps: k,
        converged,
        max_error,
        mean_error,
        wall_secs: monitor.elapsed_secs() - t0,
        checks,
        weight_history,
        skipped: failed,
        skip_reason: failed.then(|| "model implied vol inversion failed".to_string()),
        strikes: strip.strikes.clone(),
        iv_market: target.reference_ivs().to_vec(),
        iv_envelope,
        iv_model: smile.implied_vols.clone(),
        iv_std_err: smile.iv_std_errs.clone(),
        c_opt: smile.c_opt.clone(),
    };
    monitor.on_slice(&report);
    Ok(report)
}

fn check_market(market: &SmileGrid) -> Result<()> {
    market.validate()?;
    if market.slices.is_empty() {
        return Err(Error::invalid("market has no slices"));
    }
    if (market.spot - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("markets are normalised to spot 1"));
    }
    if market.has_failures() {
        return Err(Error::invalid("market contains failed implied vols"));
    }
    Ok(())
}

/// Trains `theta_i` against slice `i` of `market`; earlier intervals are
/// left untouched.
pub fn calibrate_slice(
    i: usize,
    market: &SmileGrid,
    model: &mut LeverageModel,
    sabr: &SabrParams,
    cfg: &CalibConfig,
    seed: u64,
    monitor: &mut dyn Monitor,
) -> Result<SliceReport> {
    cfg.validate()?;
    check_market(market)?;
    let slice = market.slices.get(i).ok_or_else(|| Error::invalid("slice index out of range"))?;
    let (strip, prices) = otm_targets(slice, i, market.spot);
    let job = SliceJob {
        index: i,
        strip,
        target: Target::Single { prices, ivs: slice.implied_vols.clone() },
        weights: vega_weights(slice, market.spot)?,
        cfg,
        seed,
    };
    run_slice(job, model, sabr, monitor)
}

/// A calibrated surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceFit {
    pub model: LeverageModel,
    pub sabr: SabrParams,
    pub report: CalibReport,
}

fn skipped_report(i: usize, slice: &SmileSlice, reason: String) -> SliceReport {
    let n = slice.len();
    SliceReport {
        index: i,
        maturity: slice.maturity,
        steps: 0,
        converged: false,
        max_error: f64::INFINITY,
        mean_error: f64::NAN,
        wall_secs: 0.0,
        checks: Vec::new(),
        weight_history: Vec::new(),
        skipped: true,
        skip_reason: Some(reason),
        strikes: slice.strikes.clone(),
        iv_market: slice.implied_vols.clone(),
        iv_envelope: None,
        iv_model: vec![f64::NAN; n],
        iv_std_err: vec![f64::NAN; n],
        c_opt: vec![f64::NAN; n],
    }
}

fn fit_surface(
    markets: &[SmileGrid],
    cfg: &CalibConfig,
    seed: u64,
    monitor: &mut dyn Monitor,
) -> Result<SurfaceFit> {
    cfg.validate()?;
    let first = &markets[0];
    for m in markets {
        check_market(m)?;
        if m.maturities() != first.maturities() || m.slices.iter().zip(&first.slices).any(|(a, b)| a.strikes != b.strikes) {
            return Err(Error::invalid("robust markets must share one grid"));
        }
    }
    let t0 = monitor.elapsed_secs();
    let maturities = first.maturities();
    let mut model =
        LeverageModel::new(cfg.leverage.clone(), &maturities, derive_seed(seed, &[TAG_NET]))?.with_clamp(cfg.clamp_leverage_min);
    let blended = blend(markets);
    let sabr_init = calibrate_sabr_init(&blended.slices[0], blended.spot, cfg.dt, cfg.hedge, &cfg.sabr, derive_seed(seed, &[TAG_SABR]))?;
    let sabr = sabr_init.params;
    let mut slices = Vec::with_capacity(maturities.len());
    for i in 0..maturities.len() {
        let slice_seed = derive_seed(seed, &[TAG_SLICE, i as u64]);
        let (strip, _) = otm_targets(&first.slices[i], i, first.spot);
        let target = if markets.len() == 1 {
            let (_, prices) = otm_targets(&first.slices[i], i, first.spot);
            Target::Single { prices, ivs: first.slices[i].implied_vols.clone() }
        } else {
            let prices = markets.iter().map(|m| otm_targets(&m.slices[i], i, m.spot).1).collect();
            let n = first.slices[i].len();
            let lo = (0..n).map(|j| markets.iter().map(|m| m.slices[i].implied_vols[j]).fold(f64::INFINITY, f64::min)).collect();
            let hi = (0..n).map(|j| markets.iter().map(|m| m.slices[i].implied_vols[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
            Target::Robust { prices, lo, hi, mid: blended.slices[i].implied_vols.clone() }
        };
        let weights = vega_weights(&blended.slices[i], blended.spot)?;
        let job = SliceJob { index: i, strip, target, weights, cfg, seed: slice_seed };
        match run_slice(job, &mut model, &sabr, monitor) {
            Ok(r) => slices.push(r),
            Err(e @ (Error::Diverged { .. } | Error::NonFinite { .. })) => {
                let r = skipped_report(i, &first.slices[i], alloc::format!("{e}"));
                monitor.on_slice(&r);
                slices.push(r);
            }
            Err(e) => return Err(e),
        }
    }
    let report = CalibReport { sabr_init, slices, wall_secs: monitor.elapsed_secs() - t0, eval_coefficient: "c_opt".to_string() };
    Ok(SurfaceFit { model, sabr, report })
}

/// Average prices and implied vols of several markets on one grid.
fn blend(markets: &[SmileGrid]) -> SmileGrid {
    let mut out = markets[0].clone();
    if markets.len() == 1 {
        return out;
    }
    let m = markets.len() as f64;
    for (i, s) in out.slices.iter_mut().enumerate() {
        for j in 0..s.len() {
            s.prices[j] = markets.iter().map(|g| g.slices[i].prices[j]).sum::<f64>() / m;
            s.implied_vols[j] = markets.iter().map(|g| g.slices[i].implied_vols[j]).sum::<f64>() / m;
        }
    }
    out
}

/// SABR pre-calibration to the first slice, then every slice in maturity
/// order. Slices that diverge are reported as skipped and the run goes on.
pub fn calibrate_surface(market: &SmileGrid, cfg: &CalibConfig, seed: u64, monitor: &mut dyn Monitor) -> Result<SurfaceFit> {
    fit_surface(core::slice::from_ref(market), cfg, seed, monitor)
}

/// Bid-ask style calibration: per strike the worst of several markets is
/// fitted, with the error measured as the distance to their IV envelope.
pub fn calibrate_robust(markets: &[SmileGrid], cfg: &CalibConfig, seed: u64, monitor: &mut dyn Monitor) -> Result<SurfaceFit> {
    if markets.is_empty() {
        return Err(Error::invalid("robust calibration needs at least one market"));
    }
    fit_surface(markets, cfg, seed, monitor)
}
