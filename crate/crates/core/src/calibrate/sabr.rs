//! Pre-calibration of the SABR parameters with flat leverage.
//!
//! Only three parameters are fitted, so derivatives are carried forward
//! along each path as dual numbers instead of being recorded on a tape.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use super::config::SabrInitConfig;
use super::objective::{otm_targets, vega_weights, WeightVector};
use crate::autodiff::AdamState;
use crate::error::{Error, Result};
use crate::exec::{map_blocks, DEFAULT_BLOCK};
use crate::ground_truth::SmileSlice;
use crate::hedging::HedgeMode;
use crate::lsv::{SabrParams, Strip};
use crate::math::{exp, ln, norm_cdf, norm_pdf, sqrt, tanh};
use crate::rng::{derive_seed, PathRng};

#[derive(Debug, Clone, Copy, PartialEq)]
struct D3 {
    v: f64,
    d: [f64; 3],
}

impl D3 {
    const fn c(v: f64) -> Self {
        D3 { v, d: [0.0; 3] }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        D3 { v, d: self.d.map(|x| dv * x) }
    }

    fn exp(self) -> Self {
        let e = exp(self.v);
        self.chain(e, e)
    }

    fn norm_cdf(self) -> Self {
        self.chain(norm_cdf(self.v), norm_pdf(self.v))
    }

    fn relu(self) -> Self {
        if self.v > 0.0 { self } else { D3::c(0.0) }
    }

    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r)
    }
}

impl Add for D3 {
    type Output = D3;
    fn add(self, o: D3) -> D3 {
        D3 { v: self.v + o.v, d: core::array::from_fn(|i| self.d[i] + o.d[i]) }
    }
}

impl Sub for D3 {
    type Output = D3;
    fn sub(self, o: D3) -> D3 {
        D3 { v: self.v - o.v, d: core::array::from_fn(|i| self.d[i] - o.d[i]) }
    }
}

impl Mul for D3 {
    type Output = D3;
    fn mul(self, o: D3) -> D3 {
        D3 { v: self.v * o.v, d: core::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]) }
    }
}

impl Mul<D3> for f64 {
    type Output = D3;
    fn mul(self, o: D3) -> D3 {
        D3 { v: self * o.v, d: o.d.map(|x| self * x) }
    }
}

/// Unconstrained coordinates `(ln nu, atanh rho, ln alpha0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Raw([f64; 3]);

const RHO_RAW_MAX: f64 = 4.0;

impl Raw {
    fn from_params(p: &SabrParams) -> Self {
        let rho = p.rho.clamp(-0.999, 0.999);
        Raw([ln(p.nu.max(1e-4)), 0.5 * ln((1.0 + rho) / (1.0 - rho)), ln(p.alpha0)])
    }

    fn params(&self) -> SabrParams {
        let v = self.0[1].clamp(-RHO_RAW_MAX, RHO_RAW_MAX);
        SabrParams { nu: exp(self.0[0]), rho: tanh(v), alpha0: exp(self.0[2]), s0: 1.0 }
    }

    fn duals(&self) -> (D3, D3, D3) {
        let p = self.params();
        let nu = D3 { v: p.nu, d: [p.nu, 0.0, 0.0] };
        let drho = if self.0[1].abs() < RHO_RAW_MAX { 1.0 - p.rho * p.rho } else { 0.0 };
        let rho = D3 { v: p.rho, d: [0.0, drho, 0.0] };
        let a0 = D3 { v: p.alpha0, d: [0.0, 0.0, p.alpha0] };
        (nu, rho, a0)
    }
}

/// Means over a batch of flat-leverage paths of payoffs and hedges, with
/// their derivatives in the raw coordinates.
struct Moments {
    payoff: Vec<D3>,
    hedge: Vec<D3>,
}

fn simulate_moments(raw: &Raw, strip: &Strip, maturity: f64, dt: f64, n_paths: usize, seed: u64, hedge: HedgeMode, full: bool) -> Result<Moments> {
    let steps = libm::round(maturity / dt) as usize;
    if steps == 0 || (steps as f64 * dt - maturity).abs() > 1e-9 {
        return Err(Error::Grid("first maturity is not a multiple of dt".into()));
    }
    if matches!(hedge, HedgeMode::Neural) {
        return Err(Error::invalid("SABR pre-calibration supports Black-Scholes hedges only"));
    }
    let (nu, rho, a0) = raw.duals();
    let sqdt = sqrt(dt);
    let hdt = 0.5 * dt;
    let a_drift = -0.5 * dt * (nu * nu);
    let a_vol = sqdt * nu;
    let rb_v = sqrt((1.0 - rho.v * rho.v).max(1e-300));
    let rho_bar = rho.chain(rb_v, -rho.v / rb_v);
    let log_k: Vec<f64> = strip.strikes.iter().map(|&k| ln(k)).collect();
    let m = strip.len();
    let blocks = map_blocks(n_paths, DEFAULT_BLOCK, |_, range| {
        let mut pay = vec![D3::c(0.0); m];
        let mut hed = vec![D3::c(0.0); m];
        let mut acc = vec![D3::c(0.0); m];
        for path in range {
            let mut rng = PathRng::new(seed, path as u64);
            let mut x = D3::c(0.0);
            let mut s = D3::c(1.0);
            let mut alpha = a0;
            acc.iter_mut().for_each(|a| *a = D3::c(0.0));
            for k in 0..steps {
                let z1 = rng.normal();
                let z2 = rng.normal();
                let x_next = x + (sqdt * z1) * alpha - hdt * (alpha * alpha);
                let s_next = x_next.exp();
                if hedge != HedgeMode::None {
                    let sq_tau = sqrt(maturity - k as f64 * dt);
                    let sd = sq_tau * alpha;
                    let ds = s_next - s;
                    let inv_sd = sd.recip();
                    for j in 0..m {
                        let d1 = (x - D3::c(log_k[j])) * inv_sd + 0.5 * sd;
                        let mut delta = if full { d1.norm_cdf() } else { D3::c(norm_cdf(d1.v)) };
                        if !strip.is_call[j] {
                            delta.v -= 1.0;
                        }
                        let inc = delta * ds;
                        acc[j] = acc[j] + if full { inc } else { D3::c(inc.v) };
                    }
                }
                let zb = z1 * rho + z2 * rho_bar;
                alpha = alpha * (a_drift + a_vol * zb).exp();
                x = x_next;
                s = s_next;
            }
            if !x.v.is_finite() {
                return Err(Error::NonFinite { step: steps });
            }
            for j in 0..m {
                let k = D3::c(strip.strikes[j]);
                let p = if strip.is_call[j] { (s - k).relu() } else { (k - s).relu() };
                pay[j] = pay[j] + p;
                hed[j] = hed[j] + acc[j];
            }
        }
        Ok((pay, hed))
    });
    let mut payoff = vec![D3::c(0.0); m];
    let mut hedge_sum = vec![D3::c(0.0); m];
    for b in blocks {
        let (p, h) = b?;
        for j in 0..m {
            payoff[j] = payoff[j] + p[j];
            hedge_sum[j] = hedge_sum[j] + h[j];
        }
    }
    let inv = 1.0 / n_paths as f64;
    Ok(Moments { payoff: payoff.into_iter().map(|v| inv * v).collect(), hedge: hedge_sum.into_iter().map(|v| inv * v).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SabrInitReport {
    pub params: SabrParams,
    pub steps: usize,
    pub restarted: bool,
    pub final_loss: f64,
}

/// Market implied vol at the spot by linear interpolation in strike.
pub fn atm_vol(slice: &SmileSlice, spot: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> =
        slice.strikes.iter().zip(&slice.implied_vols).filter(|(_, v)| v.is_finite()).map(|(&k, &v)| (k, v)).collect();
    if pts.is_empty() {
        return Err(Error::invalid("slice has no implied vols"));
    }
    let i = pts.partition_point(|&(k, _)| k < spot);
    Ok(match i {
        0 => pts[0].1,
        i if i == pts.len() => pts[i - 1].1,
        i => {
            let ((k0, v0), (k1, v1)) = (pts[i - 1], pts[i]);
            v0 + (v1 - v0) * (spot - k0) / (k1 - k0)
        }
    })
}

fn run(
    start: SabrParams,
    strip: &Strip,
    targets: &[f64],
    weights: &WeightVector,
    maturity: f64,
    dt: f64,
    hedge: HedgeMode,
    cfg: &SabrInitConfig,
    seed: u64,
) -> Result<(SabrParams, f64)> {
    let mut raw = Raw::from_params(&start);
    let mut adam = AdamState::new(3);
    let mut loss = f64::NAN;
    for k in 1..=cfg.steps {
        let batch_seed = derive_seed(seed, &[k as u64]);
        let m = simulate_moments(&raw, strip, maturity, dt, cfg.n_paths, batch_seed, hedge, cfg.full_gradient)?;
        let mut grad = [0.0; 3];
        loss = 0.0;
        for j in 0..strip.len() {
            let x = if cfg.full_gradient { m.payoff[j] - m.hedge[j] } else { m.payoff[j] - D3::c(m.hedge[j].v) };
            let err = x.v - targets[j];
            let w = weights.as_slice()[j];
            loss += w * err * err;
            for (g, d) in grad.iter_mut().zip(x.d) {
                *g += 2.0 * w * err * d;
            }
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: k, seed: batch_seed });
        }
        adam.step(&mut raw.0, &grad, cfg.lr)?;
        if raw.0.iter().any(|v| !v.is_finite()) || raw.0[2] > 3.0 || raw.0[0] > 3.0 {
            return Err(Error::Diverged { iteration: k, seed: batch_seed });
        }
    }
    Ok((raw.params(), loss))
}

/// Fits `(nu, rho, alpha0)` with `L = 1` to the first slice by Monte Carlo
/// gradient descent on the hedged calibration loss. On divergence the run
/// restarts once from `alpha0` = ATM vol, `nu = 1`, `rho = -0.5`.
pub fn calibrate_sabr_init(
    slice: &SmileSlice,
    spot: f64,
    dt: f64,
    hedge: HedgeMode,
    cfg: &SabrInitConfig,
    seed: u64,
) -> Result<SabrInitReport> {
    if (spot - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("the SABR-LSV model is normalised to spot 1"));
    }
    let (strip, targets) = otm_targets(slice, 0, spot);
    let weights = vega_weights(slice, spot)?;
    let atm = atm_vol(slice, spot)?;
    let first = SabrParams { nu: 0.5, rho: -0.3, alpha0: atm, s0: spot };
    match run(first, &strip, &targets, &weights, slice.maturity, dt, hedge, cfg, derive_seed(seed, &[0])) {
        Ok((params, loss)) => Ok(SabrInitReport { params, steps: cfg.steps, restarted: false, final_loss: loss }),
        Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => {
            let fallback = SabrParams { nu: 1.0, rho: -0.5, alpha0: atm, s0: spot };
            let (params, loss) = run(fallback, &strip, &targets, &weights, slice.maturity, dt, hedge, cfg, derive_seed(seed, &[1]))?;
            Ok(SabrInitReport { params, steps: cfg.steps, restarted: true, final_loss: loss })
        }
        Err(e) => Err(e),
    }
}
