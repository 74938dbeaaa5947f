//! Parametric local-volatility family used as ground truth, and the
//! synthetic option markets it generates.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bs::{call_delta, implied_vol, OptionSpec};
use crate::error::{Error, Result};
use crate::exec::{map_blocks, DEFAULT_BLOCK};
use crate::grid::TimeGrid;
use crate::math::{exp, ln, powf, sqrt};
use crate::rng::PathRng;
use crate::stats::CoMoments;

/// Mixture weights and volatilities; `p0 = 1 - p1 - p2` may be negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiParams {
    pub p1: f64,
    pub p2: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

/// Sampling intervals for `(p1, p2, sigma0, sigma1, sigma2)`.
pub const XI_INTERVALS: [(f64, f64); 5] = [(0.4, 0.5), (0.4, 0.7), (0.5, 1.7), (0.2, 0.4), (0.5, 1.7)];

impl XiParams {
    pub fn p0(&self) -> f64 {
        1.0 - self.p1 - self.p2
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.p1, self.p2, self.sigma0, self.sigma1, self.sigma2]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        XiParams { p1: a[0], p2: a[1], sigma0: a[2], sigma1: a[3], sigma2: a[4] }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::invalid("xi components must be finite and positive"));
        }
        Ok(())
    }
}

/// Shape constants of the modified family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedShape {
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub kappa: f64,
}

impl Default for FixedShape {
    fn default() -> Self {
        FixedShape { gamma1: 1.1, gamma2: 20.0, lambda1: 10.0, lambda2: 10.0, beta1: 0.005, beta2: 0.001, kappa: 0.5 }
    }
}

/// Short-maturity skew term; zero for `t > 0.1`.
pub fn lambda_term(shape: &FixedShape, t: f64, x: f64) -> f64 {
    if t > 0.1 {
        return 0.0;
    }
    lambda_body(shape, t, x)
}

#[inline]
fn lambda_body(shape: &FixedShape, t: f64, x: f64) -> f64 {
    let hinge = shape.gamma1 * (x - shape.beta1).max(0.0) + shape.gamma2 * (-x - shape.beta2).max(0.0);
    let damp = powf(1.0 / (1.0 + 0.1 * t), shape.lambda2);
    damp * powf(hinge, shape.kappa).min(shape.lambda1)
}

#[inline]
fn kernel(t: f64, x: f64, sigma: f64) -> f64 {
    exp(-x * x / (2.0 * t * sigma * sigma) - t * sigma * sigma / 8.0)
}

/// Squared local volatility `a^2(t, x)` in log-moneyness `x`, always within
/// `[0, 0.5]`. Requires `t > 0`.
pub fn local_vol_sq(xi: &XiParams, shape: &FixedShape, t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::invalid("local volatility is undefined at t <= 0"));
    }
    Ok(local_vol_sq_unchecked(xi, shape, t, x))
}

#[inline]
pub(crate) fn local_vol_sq_unchecked(xi: &XiParams, shape: &FixedShape, t: f64, x: f64) -> f64 {
    local_vol_sq_regime(xi, shape, t, x, t > 0.1)
}

/// `a^2` with the short-maturity regime (`t <= 0.1`) chosen by `late`
/// rather than by `t`.
#[inline]
fn local_vol_sq_regime(xi: &XiParams, shape: &FixedShape, t: f64, x: f64, late: bool) -> f64 {
    let ps = [xi.p0(), xi.p1, xi.p2];
    let ss = [xi.sigma0, xi.sigma1, xi.sigma2];
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, s) in ps.iter().zip(ss) {
        let k = kernel(t, x, s);
        num += p * s * k;
        den += p / s * k;
    }
    let (damp, lambda) = if late { (0.4, 0.0) } else { (1.0, lambda_body(shape, t, x)) };
    let ratio = ((num + lambda) * damp / (den + 0.01)).abs();
    0.25 * ratio.min(2.0)
}

/// A deterministic local-variance surface `(t, x) -> a^2`.
pub trait LocalVol: Sync {
    fn variance(&self, t: f64, x: f64) -> f64;

    /// Variance used by an Euler step over `[t0, t0 + dt)`. The default
    /// evaluates at the left point, with `t0 = 0` replaced by `dt`.
    fn step_variance(&self, t0: f64, dt: f64, x: f64) -> f64 {
        self.variance(if t0 > 0.0 { t0 } else { dt }, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub xi: XiParams,
    pub shape: FixedShape,
}

impl LocalVol for GroundTruth {
    fn variance(&self, t: f64, x: f64) -> f64 {
        local_vol_sq_unchecked(&self.xi, &self.shape, t, x)
    }

    /// Left-point in the smooth dependence on `t`, but the regime switch at
    /// `t = 0.1` is read off the open step interval, so a step starting on
    /// the switch already sees the damped regime.
    fn step_variance(&self, t0: f64, dt: f64, x: f64) -> f64 {
        let t = if t0 > 0.0 { t0 } else { dt };
        local_vol_sq_regime(&self.xi, &self.shape, t, x, t0 + 0.5 * dt > 0.1)
    }
}

/// Flat volatility; reduces the ground-truth SDE to Black–Scholes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantVol(pub f64);

impl LocalVol for ConstantVol {
    fn variance(&self, _t: f64, _x: f64) -> f64 {
        self.0 * self.0
    }
}

/// Draws each component uniformly from [`XI_INTERVALS`].
pub fn sample_xi(seed: u64) -> XiParams {
    let mut rng = PathRng::new(seed, 0);
    let a = XI_INTERVALS.map(|(lo, hi)| lo + (hi - lo) * rng.uniform());
    XiParams::from_array(a)
}

/// `m` copies of `xi` with independent `U[-u, u]` noise on every component.
pub fn perturb_xi(xi: &XiParams, u: f64, m: usize, seed: u64) -> Vec<XiParams> {
    let mut rng = PathRng::new(seed, 1);
    (0..m)
        .map(|_| {
            let base = xi.to_array();
            XiParams::from_array(base.map(|v| v + u * (2.0 * rng.uniform() - 1.0)))
        })
        .collect()
}

/// Maturities and strike ranges of a smile grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub spot: f64,
    pub maturities: Vec<f64>,
    /// Strikes of maturity `i` run evenly from `exp(-k_i)` to `exp(k_i)`.
    pub log_strike_bounds: Vec<f64>,
    pub n_strikes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            spot: 1.0,
            maturities: vec![0.15, 0.25, 0.5, 1.0],
            log_strike_bounds: vec![0.1, 0.2, 0.3, 0.5],
            n_strikes: 20,
        }
    }
}

impl GridSpec {
    /// Same grid with every `k_i` multiplied by `factor`.
    pub fn widened(&self, factor: f64) -> Self {
        GridSpec { log_strike_bounds: self.log_strike_bounds.iter().map(|k| k * factor).collect(), ..self.clone() }
    }

    /// First `n` maturities only.
    pub fn truncated(&self, n: usize) -> Self {
        GridSpec {
            maturities: self.maturities[..n.min(self.maturities.len())].to_vec(),
            log_strike_bounds: self.log_strike_bounds[..n.min(self.log_strike_bounds.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn strikes(&self, i: usize) -> Vec<f64> {
        let k = self.log_strike_bounds[i];
        let (lo, hi) = (self.spot * exp(-k), self.spot * exp(k));
        let n = self.n_strikes;
        if n == 1 {
            return vec![self.spot];
        }
        let step = (hi - lo) / (n - 1) as f64;
        (0..n).map(|j| if j + 1 == n { hi } else { lo + j as f64 * step }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.maturities.is_empty() || self.maturities.len() != self.log_strike_bounds.len() {
            return Err(Error::invalid("grid needs one strike bound per maturity"));
        }
        if self.maturities.windows(2).any(|w| w[0] >= w[1]) || self.maturities[0] <= 0.0 {
            return Err(Error::invalid("maturities must be positive and strictly increasing"));
        }
        if self.n_strikes == 0 || !(self.spot > 0.0) || self.log_strike_bounds.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::invalid("invalid strike layout"));
        }
        Ok(())
    }
}

/// One maturity of a market: call prices, implied vols and Monte Carlo
/// standard errors per strike. Failed inversions carry `NaN` and a flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmileSlice {
    pub maturity: f64,
    pub strikes: Vec<f64>,
    pub prices: Vec<f64>,
    #[serde(with = "crate::serde_nan")]
    pub implied_vols: Vec<f64>,
    pub std_errs: Vec<f64>,
    #[serde(default)]
    pub iv_failed: Vec<bool>,
}

impl SmileSlice {
    pub fn len(&self) -> usize {
        self.strikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strikes.is_empty()
    }

    pub fn has_failures(&self) -> bool {
        self.iv_failed.iter().any(|&f| f) || self.implied_vols.iter().any(|v| !v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.strikes.len();
        if self.prices.len() != n || self.implied_vols.len() != n || self.std_errs.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.prices.len() });
        }
        if self.strikes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("strikes must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmileGrid {
    pub spot: f64,
    pub slices: Vec<SmileSlice>,
}

impl SmileGrid {
    pub fn maturities(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.maturity).collect()
    }

    /// True if any implied-vol inversion failed; such a market is skipped.
    pub fn has_failures(&self) -> bool {
        self.slices.iter().any(SmileSlice::has_failures)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices.windows(2).any(|w| w[0].maturity >= w[1].maturity) {
            return Err(Error::invalid("slices must be in increasing maturity order"));
        }
        self.slices.iter().try_for_each(SmileSlice::validate)
    }
}

/// Integrand choice for the ground-truth control variate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GroundHedge {
    /// Black–Scholes delta at the running local vol `a(t, X_t)`.
    #[default]
    RunningVol,
    /// Black–Scholes delta at the path's initial local vol.
    FrozenVol,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub hedge: GroundHedge,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig { n_paths: 1_000_000, dt: 0.01, seed: 0, hedge: GroundHedge::RunningVol }
    }
}

/// Side statistics of a market run: per maturity, the sample mean and
/// standard error of `S_T` (a martingale check).
#[derive(Debug, Clone, PartialEq)]
pub struct MarketDiagnostics {
    pub forward_mean: Vec<f64>,
    pub forward_se: Vec<f64>,
    /// Plain-estimator standard error per option, `[maturity][strike]`.
    pub plain_se: Vec<Vec<f64>>,
}

pub fn gen_synthetic_market(lv: &impl LocalVol, grid: &GridSpec, cfg: &MarketConfig) -> Result<SmileGrid> {
    gen_synthetic_market_with_diagnostics(lv, grid, cfg).map(|(g, _)| g)
}

/// Euler simulation of `dX = -a^2/2 dt + a dW` in log-price, all options
/// priced from one path set with a delta-hedge control variate at the
/// variance-optimal coefficient.
pub fn gen_synthetic_market_with_diagnostics(
    lv: &impl LocalVol,
    grid: &GridSpec,
    cfg: &MarketConfig,
) -> Result<(SmileGrid, MarketDiagnostics)> {
    grid.validate()?;
    if cfg.n_paths < 10_000 {
        return Err(Error::invalid("market generation needs at least 10^4 paths"));
    }
    let tg = TimeGrid::new(cfg.dt, &grid.maturities)?;
    let strikes: Vec<Vec<f64>> = (0..grid.maturities.len()).map(|i| grid.strikes(i)).collect();
    let log_strikes: Vec<Vec<f64>> = strikes.iter().map(|ks| ks.iter().map(|&k| ln(k)).collect()).collect();
    let n_mat = grid.maturities.len();
    let n_k = grid.n_strikes;
    let x0 = ln(grid.spot);
    let sqdt = sqrt(cfg.dt);

    let blocks = map_blocks(cfg.n_paths, DEFAULT_BLOCK, |_, range| {
        let mut opts = vec![CoMoments::default(); n_mat * n_k];
        let mut fwd = vec![CoMoments::default(); n_mat];
        let mut acc = vec![0.0; n_mat * n_k];
        let mut non_finite = None;
        for path in range {
            let mut rng = PathRng::new(cfg.seed, path as u64);
            acc.fill(0.0);
            let mut x = x0;
            let mut s = grid.spot;
            let mut frozen = 0.0;
            for k in 0..tg.n_steps() {
                let t = k as f64 * cfg.dt;
                let a2 = lv.step_variance(t, cfg.dt, x);
                let a = sqrt(a2);
                if k == 0 {
                    frozen = a;
                }
                let z = rng.normal();
                let x_next = x - 0.5 * a2 * cfg.dt + a * sqdt * z;
                let s_next = exp(x_next);
                if cfg.hedge != GroundHedge::Off {
                    let vol = if cfg.hedge == GroundHedge::FrozenVol { frozen } else { a };
                    let ds = s_next - s;
                    for i in 0..n_mat {
                        if k >= tg.boundary(i) {
                            continue;
                        }
                        let sd = vol * sqrt(grid.maturities[i] - t);
                        for j in 0..n_k {
                            acc[i * n_k + j] += call_delta(x - log_strikes[i][j], sd) * ds;
                        }
                    }
                }
                x = x_next;
                s = s_next;
                if !x.is_finite() && non_finite.is_none() {
                    non_finite = Some(k);
                }
                for i in 0..n_mat {
                    if k + 1 == tg.boundary(i) {
                        fwd[i].push(s, 0.0);
                        for j in 0..n_k {
                            let payoff = (s - strikes[i][j]).max(0.0);
                            opts[i * n_k + j].push(payoff, acc[i * n_k + j]);
                        }
                    }
                }
            }
        }
        (opts, fwd, non_finite)
    });

    let mut opts = vec![CoMoments::default(); n_mat * n_k];
    let mut fwd = vec![CoMoments::default(); n_mat];
    for (o, f, bad) in &blocks {
        if let Some(step) = bad {
            return Err(Error::NonFinite { step: *step });
        }
        opts.iter_mut().zip(o).for_each(|(a, b)| a.merge(b));
        fwd.iter_mut().zip(f).for_each(|(a, b)| a.merge(b));
    }

    let n = cfg.n_paths as f64;
    let mut slices = Vec::with_capacity(n_mat);
    let mut plain_se = Vec::with_capacity(n_mat);
    for i in 0..n_mat {
        let mut slice = SmileSlice {
            maturity: grid.maturities[i],
            strikes: strikes[i].clone(),
            prices: Vec::with_capacity(n_k),
            implied_vols: Vec::with_capacity(n_k),
            std_errs: Vec::with_capacity(n_k),
            iv_failed: Vec::with_capacity(n_k),
        };
        let mut pse = Vec::with_capacity(n_k);
        for j in 0..n_k {
            let cv = crate::hedging::CvStats::from_moments(&opts[i * n_k + j]);
            let price = cv.hedged_mean;
            let se = sqrt(cv.hedged_var / n);
            let opt = OptionSpec::call(grid.spot, strikes[i][j], grid.maturities[i]);
            let iv = implied_vol(price, &opt);
            slice.prices.push(price);
            slice.iv_failed.push(iv.is_err());
            slice.implied_vols.push(iv.unwrap_or(f64::NAN));
            slice.std_errs.push(se);
            pse.push(sqrt(cv.plain_var / n));
        }
        slices.push(slice);
        plain_se.push(pse);
    }
    let diag = MarketDiagnostics {
        forward_mean: fwd.iter().map(|m| m.mean_x).collect(),
        forward_se: fwd.iter().map(|m| sqrt(m.var_x() / n)).collect(),
        plain_se,
    };
    Ok((SmileGrid { spot: grid.spot, slices }, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xi_a() -> XiParams {
        XiParams { p1: 0.45, p2: 0.55, sigma0: 1.0, sigma1: 0.3, sigma2: 1.0 }
    }

    #[test]
    fn matches_independent_transliteration() {
        // reference values evaluated in 30-digit arithmetic
        let shape = FixedShape::default();
        let xi_b = XiParams { p1: 0.42, p2: 0.61, sigma0: 1.3, sigma1: 0.25, sigma2: 0.8 };
        let cases = [
            (xi_a(), 0.5, 0.0, 0.032_251_486_638_354_25),
            (xi_a(), 0.05, -0.1, 0.470_317_204_554_004_3),
            (xi_b, 0.08, 0.07, 0.105_804_462_843_725_89),
            (xi_b, 0.3, -0.2, 0.034_780_601_513_983_76),
        ];
        for (xi, t, x, want) in cases {
            let got = local_vol_sq(&xi, &shape, t, x).unwrap();
            assert!((got - want).abs() < 1e-14 * want.max(1.0), "{t} {x}: {got} vs {want}");
        }
    }

    #[test]
    fn lambda_vanishes_at_origin_and_after_cutoff() {
        let shape = FixedShape::default();
        for t in [0.01, 0.05, 0.1, 0.5] {
            assert_eq!(lambda_term(&shape, t, 0.0), 0.0);
        }
        for x in [-0.5, -0.01, 0.2] {
            assert_eq!(lambda_term(&shape, 0.11, x), 0.0);
            assert_eq!(lambda_term(&shape, 1.0, x), 0.0);
        }
        assert!(lambda_term(&shape, 0.05, -0.1) > 0.0);
    }

    #[test]
    fn rejects_non_positive_time() {
        assert!(local_vol_sq(&xi_a(), &FixedShape::default(), 0.0, 0.1).is_err());
    }

    #[test]
    fn sampling_support_and_perturbation() {
        for seed in 0..200 {
            let xi = sample_xi(seed);
            for (v, (lo, hi)) in xi.to_array().iter().zip(XI_INTERVALS) {
                assert!(*v >= lo && *v <= hi);
            }
        }
        assert_eq!(sample_xi(5), sample_xi(5));
        let copies = perturb_xi(&xi_a(), 0.0, 4, 1);
        assert!(copies.iter().all(|c| *c == xi_a()));
        for c in perturb_xi(&xi_a(), 0.01, 4, 1) {
            for (a, b) in c.to_array().iter().zip(xi_a().to_array()) {
                assert!((a - b).abs() <= 0.01);
            }
        }
    }

    #[test]
    fn standard_grid_strikes() {
        let g = GridSpec::default();
        let ks = g.strikes(3);
        assert_eq!(ks.len(), 20);
        assert!((ks[0] - exp(-0.5)).abs() < 1e-15);
        assert!((ks[19] - exp(0.5)).abs() < 1e-15);
        let gaps: Vec<f64> = ks.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().all(|d| (d - gaps[0]).abs() < 1e-14));
        let w = g.widened(1.5).strikes(3);
        assert!((w[0] - 0.472_366_552_741_014_7).abs() < 1e-12);
        assert!((w[19] - 2.117_000_016_612_675).abs() < 1e-12);
    }
}
