use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bs::{bs_greeks, implied_vol, OptionSpec};
use crate::error::{Error, Result};
use crate::ground_truth::GridSpec;
use crate::hedging::HedgeMode;
use crate::lsv::{price_strips, LeverageModel, SabrParams, SimConfig, Strip};
use crate::math::sqrt;

/// Model smile of one maturity. Prices are quoted as calls; IVs of failed
/// inversions are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSmile {
    pub maturity: f64,
    pub strikes: Vec<f64>,
    pub prices: Vec<f64>,
    pub price_std_errs: Vec<f64>,
    #[serde(with = "crate::serde_nan")]
    pub implied_vols: Vec<f64>,
    /// Delta-method standard errors `se(price) / vega`.
    #[serde(with = "crate::serde_nan")]
    pub iv_std_errs: Vec<f64>,
    pub iv_failed: Vec<bool>,
    pub c_opt: Vec<f64>,
    /// Plain over hedged estimator variance.
    pub variance_ratio: Vec<f64>,
}

impl ModelSmile {
    pub fn has_failures(&self) -> bool {
        self.iv_failed.iter().any(|&f| f)
    }
}

/// Prices out-of-the-money options of every strip with the hedge control
/// variate at its optimal coefficient and inverts them to implied vols.
pub fn eval_strips(
    sabr: &SabrParams,
    model: &LeverageModel,
    strips: &[Strip],
    cfg: &SimConfig,
) -> Result<Vec<ModelSmile>> {
    let stats = price_strips(sabr, model, strips, cfg)?;
    let n = cfg.n_paths as f64;
    let mut out = Vec::with_capacity(strips.len());
    for (strip, st) in strips.iter().zip(&stats) {
        let t = model.maturities()[strip.maturity];
        let mut smile = ModelSmile {
            maturity: t,
            strikes: strip.strikes.clone(),
            prices: Vec::new(),
            price_std_errs: Vec::new(),
            implied_vols: Vec::new(),
            iv_std_errs: Vec::new(),
            iv_failed: Vec::new(),
            c_opt: Vec::new(),
            variance_ratio: Vec::new(),
        };
        for (j, s) in st.iter().enumerate() {
            let k = strip.strikes[j];
            let opt = if strip.is_call[j] { OptionSpec::call(sabr.s0, k, t) } else { OptionSpec::put(sabr.s0, k, t) };
            let price = s.hedged_mean;
            let se = sqrt(s.hedged_var / n);
            let iv = implied_vol(price, &opt).ok();
            let iv_se = iv.and_then(|v| bs_greeks(&opt, v).ok()).map_or(f64::NAN, |g| se / g.vega);
            smile.prices.push(if strip.is_call[j] { price } else { price + sabr.s0 - k });
            smile.price_std_errs.push(se);
            smile.implied_vols.push(iv.unwrap_or(f64::NAN));
            smile.iv_std_errs.push(iv_se);
            smile.iv_failed.push(iv.is_none());
            smile.c_opt.push(s.c_opt);
            smile.variance_ratio.push(if s.hedged_var > 0.0 { s.plain_var / s.hedged_var } else { f64::INFINITY });
        }
        out.push(smile);
    }
    Ok(out)
}

/// Model implied vols on every maturity of `grid`, which must lie on the
/// model's maturity grid. Needs at least 10^5 paths.
pub fn eval_model_ivs(
    sabr: &SabrParams,
    model: &LeverageModel,
    grid: &GridSpec,
    n_paths: usize,
    dt: f64,
    seed: u64,
    hedge: HedgeMode,
) -> Result<Vec<ModelSmile>> {
    if n_paths < 100_000 {
        return Err(Error::invalid("model IV evaluation needs at least 10^5 paths"));
    }
    grid.validate()?;
    let strips = grid_strips(model, grid, sabr.s0)?;
    eval_strips(sabr, model, &strips, &SimConfig { n_paths, dt, seed, hedge })
}

/// Out-of-the-money strips for each grid maturity.
pub fn grid_strips(model: &LeverageModel, grid: &GridSpec, spot: f64) -> Result<Vec<Strip>> {
    (0..grid.maturities.len())
        .map(|i| {
            let t = grid.maturities[i];
            let idx = model
                .maturities()
                .iter()
                .position(|&m| (m - t).abs() <= 1e-12 * m.max(1.0))
                .ok_or_else(|| Error::Grid(alloc::format!("maturity {t} is not on the model grid")))?;
            Ok(Strip::otm(idx, &grid.strikes(i), spot))
        })
        .collect()
}
