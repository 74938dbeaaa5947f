//! Zero-rate Black–Scholes pricing, greeks and implied volatility.
//!
//! Everything is in discounted terms. The raw kernels (`call_delta`,
//! `price_from_sd`) skip validation and are what the simulation loops call.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln, norm_cdf, norm_pdf, sqrt};

/// Lower edge of the implied-volatility search bracket.
pub const IV_LO: f64 = 1e-9;
/// Upper edge of the implied-volatility search bracket.
pub const IV_HI: f64 = 5.0;

const IV_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub spot: f64,
    pub strike: f64,
    pub ttm: f64,
    pub is_call: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsGreeks {
    pub price: f64,
    pub delta: f64,
    pub vega: f64,
}

impl OptionSpec {
    pub fn call(spot: f64, strike: f64, ttm: f64) -> Self {
        OptionSpec { spot, strike, ttm, is_call: true }
    }

    pub fn put(spot: f64, strike: f64, ttm: f64) -> Self {
        OptionSpec { spot, strike, ttm, is_call: false }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.spot) {
            return Err(Error::invalid("spot must be finite and positive"));
        }
        if !ok(self.strike) {
            return Err(Error::invalid("strike must be finite and positive"));
        }
        if !ok(self.ttm) {
            return Err(Error::invalid("time to maturity must be finite and positive"));
        }
        Ok(())
    }

    pub fn intrinsic(&self) -> f64 {
        if self.is_call {
            (self.spot - self.strike).max(0.0)
        } else {
            (self.strike - self.spot).max(0.0)
        }
    }

    /// Supremum of the arbitrage-free price range.
    pub fn upper_bound(&self) -> f64 {
        if self.is_call {
            self.spot
        } else {
            self.strike
        }
    }

    pub fn payoff(&self, terminal: f64) -> f64 {
        if self.is_call {
            (terminal - self.strike).max(0.0)
        } else {
            (self.strike - terminal).max(0.0)
        }
    }

    /// The out-of-the-money counterpart under zero-rate parity, together
    /// with the price shift `self_price - otm_price`.
    fn otm_twin(&self) -> (OptionSpec, f64) {
        match (self.is_call, self.strike < self.spot) {
            (true, true) => (OptionSpec { is_call: false, ..*self }, self.spot - self.strike),
            (false, false) if self.strike > self.spot => {
                (OptionSpec { is_call: true, ..*self }, self.strike - self.spot)
            }
            _ => (*self, 0.0),
        }
    }
}

/// Call price as a function of spot, strike and total standard deviation
/// `sd = vol * sqrt(ttm)`.
#[inline]
pub fn price_from_sd(spot: f64, strike: f64, sd: f64, is_call: bool) -> f64 {
    if sd <= 0.0 {
        return if is_call { (spot - strike).max(0.0) } else { (strike - spot).max(0.0) };
    }
    let d1 = ln(spot / strike) / sd + 0.5 * sd;
    let d2 = d1 - sd;
    if is_call {
        spot * norm_cdf(d1) - strike * norm_cdf(d2)
    } else {
        strike * norm_cdf(-d2) - spot * norm_cdf(-d1)
    }
}

/// Call delta given `log(spot / strike)` and the remaining total standard
/// deviation. A put delta is this minus one.
#[inline]
pub fn call_delta(log_moneyness: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        norm_cdf(log_moneyness / sd + 0.5 * sd)
    } else if log_moneyness > 0.0 {
        1.0
    } else if log_moneyness < 0.0 {
        0.0
    } else {
        0.5
    }
}

fn check_vol(vol: f64) -> Result<()> {
    if !vol.is_finite() || vol < 0.0 {
        return Err(Error::invalid("volatility must be finite and non-negative"));
    }
    Ok(())
}

pub fn bs_price(opt: &OptionSpec, vol: f64) -> Result<f64> {
    opt.validate()?;
    check_vol(vol)?;
    Ok(price_from_sd(opt.spot, opt.strike, vol * sqrt(opt.ttm), opt.is_call))
}

pub fn bs_greeks(opt: &OptionSpec, vol: f64) -> Result<BsGreeks> {
    opt.validate()?;
    check_vol(vol)?;
    if vol == 0.0 {
        return Err(Error::invalid("greeks need a strictly positive volatility"));
    }
    let sqrt_t = sqrt(opt.ttm);
    let sd = vol * sqrt_t;
    let d1 = ln(opt.spot / opt.strike) / sd + 0.5 * sd;
    let call_delta = norm_cdf(d1);
    Ok(BsGreeks {
        price: price_from_sd(opt.spot, opt.strike, sd, opt.is_call),
        delta: if opt.is_call { call_delta } else { call_delta - 1.0 },
        vega: opt.spot * norm_pdf(d1) * sqrt_t,
    })
}

/// Inverts the Black–Scholes price for volatility.
///
/// The price must lie strictly inside the no-arbitrage range; anything else
/// is reported as [`Error::OutOfBounds`] rather than clamped. The search runs
/// on the out-of-the-money twin of the option (same volatility by parity),
/// starting Newton from the vega maximum and falling back to bisection when a
/// step would leave the current bracket.
pub fn implied_vol(price: f64, opt: &OptionSpec) -> Result<f64> {
    opt.validate()?;
    let lower = opt.intrinsic();
    let upper = opt.upper_bound();
    if !price.is_finite() || price <= lower || price >= upper {
        return Err(Error::OutOfBounds { price, lower, upper });
    }
    let (otm, shift) = opt.otm_twin();
    let target = price - shift;
    if target <= 0.0 {
        return Err(Error::OutOfBounds { price, lower, upper });
    }

    let sqrt_t = sqrt(opt.ttm);
    let f = |vol: f64| price_from_sd(otm.spot, otm.strike, vol * sqrt_t, otm.is_call) - target;

    let (mut lo, mut hi) = (IV_LO, IV_HI);
    if f(hi) < 0.0 || f(lo) > 0.0 {
        return Err(Error::NotBracketed { lo, hi });
    }

    let log_m = ln(otm.spot / otm.strike);
    let mut vol = sqrt(2.0 * log_m.abs() / opt.ttm).clamp(0.05, 1.0);
    for _ in 0..IV_MAX_ITER {
        let sd = vol * sqrt_t;
        let diff = f(vol);
        if diff == 0.0 {
            break;
        }
        if diff < 0.0 {
            lo = vol;
        } else {
            hi = vol;
        }
        let d1 = log_m / sd + 0.5 * sd;
        let vega = otm.spot * norm_pdf(d1) * sqrt_t;
        let mut next = vol - diff / vega;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - vol).abs();
        vol = next;
        if step <= 4.0 * f64::EPSILON * vol || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(vol)
}
