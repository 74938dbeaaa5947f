//! Hedging control variates for Monte Carlo option prices.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use alloc::vec;

use crate::autodiff::{Activation, AdamState, InitScale, LaneBuffers, MlpParams, MlpSpec};
use crate::bs::OptionSpec;
use crate::error::{Error, Result};
use crate::lsv::{simulate_states, LeverageModel, SabrParams, StatePaths, LANES};
use crate::math::exp;
use crate::rng::derive_seed;
use crate::stats::CoMoments;

/// Integrand used for the hedge `I = sum_k h(t_k, S_k) (S_{k+1} - S_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HedgeMode {
    None,
    /// Black–Scholes delta at the instantaneous volatility `alpha_t L(t, S_t)`.
    #[default]
    BsDeltaRunning,
    /// Black–Scholes delta at the stochastic volatility `alpha_t` alone.
    BsDeltaAlpha,
    /// Learnt hedge network.
    Neural,
}

/// Sample statistics of a payoff `P` and hedge `I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvStats {
    pub n: u64,
    pub plain_mean: f64,
    pub plain_var: f64,
    pub hedge_mean: f64,
    pub hedge_var: f64,
    pub cov: f64,
    /// Sample correlation of payoff and hedge (0 when either is constant).
    pub corr: f64,
    /// Variance-minimising coefficient `cov(P, I) / var(I)`; zero when `I`
    /// is degenerate.
    pub c_opt: f64,
    /// Mean of `P - c_opt I`.
    pub hedged_mean: f64,
    /// Variance of `P - c_opt I`.
    pub hedged_var: f64,
    pub degenerate: bool,
}

impl CvStats {
    pub fn from_moments(m: &CoMoments) -> Self {
        let (vp, vi, cov) = (m.var_x(), m.var_y(), m.cov());
        let degenerate = !(vi > 1e-300);
        let c = if degenerate { 0.0 } else { cov / vi };
        CvStats {
            n: m.n,
            plain_mean: m.mean_x,
            plain_var: vp,
            hedge_mean: m.mean_y,
            hedge_var: vi,
            cov,
            corr: correlation(cov, vp, vi),
            c_opt: c,
            hedged_mean: m.mean_x - c * m.mean_y,
            hedged_var: (vp - 2.0 * c * cov + c * c * vi).max(0.0),
            degenerate,
        }
    }

    /// Variance of `P - c I` for an arbitrary coefficient.
    pub fn var_at(&self, c: f64) -> f64 {
        (self.plain_var - 2.0 * c * self.cov + c * c * self.hedge_var).max(0.0)
    }
}

fn correlation(cov: f64, vp: f64, vi: f64) -> f64 {
    let d = crate::math::sqrt(vp * vi);
    if d > 0.0 { cov / d } else { 0.0 }
}

/// Two-pass control-variate statistics; `hedged_var` is the sample variance
/// of the residuals `P - c_opt I` computed directly.
pub fn control_variate_stats(payoffs: &[f64], hedges: &[f64]) -> Result<CvStats> {
    if payoffs.len() != hedges.len() {
        return Err(Error::DimensionMismatch { expected: payoffs.len(), got: hedges.len() });
    }
    if payoffs.len() < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let n = payoffs.len() as f64;
    let mp = payoffs.iter().sum::<f64>() / n;
    let mi = hedges.iter().sum::<f64>() / n;
    let (mut vp, mut vi, mut cov) = (0.0, 0.0, 0.0);
    for (p, h) in payoffs.iter().zip(hedges) {
        vp += (p - mp) * (p - mp);
        vi += (h - mi) * (h - mi);
        cov += (p - mp) * (h - mi);
    }
    let d = n - 1.0;
    let (vp, vi, cov) = (vp / d, vi / d, cov / d);
    let degenerate = !(vi > 1e-300);
    let c = if degenerate { 0.0 } else { cov / vi };
    let resid: Vec<f64> = payoffs.iter().zip(hedges).map(|(p, h)| p - c * h).collect();
    let mr = resid.iter().sum::<f64>() / n;
    let vr = resid.iter().map(|r| (r - mr) * (r - mr)).sum::<f64>() / d;
    Ok(CvStats {
        n: payoffs.len() as u64,
        plain_mean: mp,
        plain_var: vp,
        hedge_mean: mi,
        hedge_var: vi,
        cov,
        corr: correlation(cov, vp, vi),
        c_opt: c,
        hedged_mean: mr,
        hedged_var: vr,
        degenerate,
    })
}

/// Left-point Itô sum `sum_k h_k (s_{k+1} - s_k)`; `deltas` has one entry
/// fewer than `spots`.
pub fn hedge_integral(deltas: &[f64], spots: &[f64]) -> Result<f64> {
    if spots.len() != deltas.len() + 1 {
        return Err(Error::DimensionMismatch { expected: deltas.len() + 1, got: spots.len() });
    }
    Ok(deltas.iter().zip(spots.windows(2)).map(|(h, w)| h * (w[1] - w[0])).sum())
}

/// Convex loss applied to the terminal hedged P&L.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HedgeLoss {
    /// `u(x) = x^2`
    #[default]
    Quadratic,
}

impl HedgeLoss {
    pub fn value(self, x: f64) -> f64 {
        match self {
            HedgeLoss::Quadratic => x * x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            HedgeLoss::Quadratic => 2.0 * x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepHedgeConfig {
    pub spec: MlpSpec,
    pub loss: HedgeLoss,
    pub iterations: usize,
    pub n_paths: usize,
    pub lr: f64,
    pub dt: f64,
}

impl Default for DeepHedgeConfig {
    fn default() -> Self {
        DeepHedgeConfig {
            spec: MlpSpec::new(3, vec![32, 32], vec![Activation::Tanh, Activation::Tanh], 1).expect("valid spec"),
            loss: HedgeLoss::Quadratic,
            iterations: 400,
            n_paths: 2000,
            lr: 5e-3,
            dt: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepHedge {
    pub params: MlpParams,
    pub losses: Vec<f64>,
    /// Running minimum of `losses`.
    pub best_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Network input `(t, log S, alpha)` for step `k` of a lane chunk, laid out
/// `[input][lane]`.
fn hedge_inputs(paths: &StatePaths, k: usize, range: core::ops::Range<usize>, out: &mut Vec<f64>) {
    let n = range.len();
    out.clear();
    out.resize(3 * n, k as f64 * paths.dt);
    out[n..2 * n].copy_from_slice(&paths.x[k][range.clone()]);
    out[2 * n..].copy_from_slice(&paths.alpha[k][range]);
}

/// Loss `mean u(-C + price + (h . S)_T)` of a hedge network on `paths` and
/// the per-path P&L.
pub fn hedge_pnl(params: &MlpParams, paths: &StatePaths, opt: &OptionSpec, price: f64) -> Result<Vec<f64>> {
    let steps = paths.x.len() - 1;
    let mut buf = LaneBuffers::new();
    let mut input = Vec::new();
    let mut pnl = Vec::with_capacity(paths.n_paths);
    let mut start = 0;
    while start < paths.n_paths {
        let range = start..(start + LANES).min(paths.n_paths);
        let mut acc = vec![0.0; range.len()];
        for k in 0..steps {
            hedge_inputs(paths, k, range.clone(), &mut input);
            params.forward_lanes(&mut buf, &input, range.len());
            for (l, p) in range.clone().enumerate() {
                acc[l] += buf.output()[l] * (exp(paths.x[k + 1][p]) - exp(paths.x[k][p]));
            }
        }
        for (l, p) in range.clone().enumerate() {
            pnl.push(-opt.payoff(exp(paths.x[steps][p])) + price + acc[l]);
        }
        start = range.end;
    }
    Ok(pnl)
}

/// Trains a hedge network `h(t, log S, alpha)` for one option by stochastic
/// gradient descent (ADAM) on fresh path batches, backpropagating through
/// the discretised stochastic integral. The output layer starts at zero, so
/// the first loss is that of the empty hedge.
pub fn train_deep_hedge(
    sabr: &SabrParams,
    model: &LeverageModel,
    maturity: usize,
    opt: &OptionSpec,
    market_price: f64,
    cfg: &DeepHedgeConfig,
    seed: u64,
) -> Result<DeepHedge> {
    if cfg.spec.input_dim != 3 || cfg.spec.output_dim != 1 {
        return Err(Error::invalid("hedge networks map (t, log S, alpha) to a position"));
    }
    if (model.maturities()[maturity] - opt.ttm).abs() > 1e-12 {
        return Err(Error::Grid("option maturity is not on the model grid".into()));
    }
    let init = InitScale { output_scale: 0.0, ..InitScale::default() };
    let mut params = MlpParams::init_scaled(cfg.spec.clone(), derive_seed(seed, &[0]), init)?;
    let mut adam = AdamState::new(params.len());
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut best_losses = Vec::with_capacity(cfg.iterations);
    let mut buf = LaneBuffers::new();
    let mut input = Vec::new();
    for it in 0..cfg.iterations {
        let batch_seed = derive_seed(seed, &[1, it as u64]);
        let paths = simulate_states(sabr, model, maturity, cfg.n_paths, cfg.dt, batch_seed)?;
        let pnl = hedge_pnl(&params, &paths, opt, market_price)?;
        let n = pnl.len() as f64;
        let loss = pnl.iter().map(|&x| cfg.loss.value(x)).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, seed: batch_seed });
        }
        losses.push(loss);
        best_losses.push(best_losses.last().map_or(loss, |b: &f64| b.min(loss)));
        let steps = paths.x.len() - 1;
        let mut grad = vec![0.0; params.len()];
        let mut cot = Vec::with_capacity(LANES);
        let mut start = 0;
        while start < paths.n_paths {
            let range = start..(start + LANES).min(paths.n_paths);
            for k in 0..steps {
                hedge_inputs(&paths, k, range.clone(), &mut input);
                params.forward_lanes(&mut buf, &input, range.len());
                cot.clear();
                cot.extend(range.clone().map(|p| {
                    cfg.loss.derivative(pnl[p]) / n * (exp(paths.x[k + 1][p]) - exp(paths.x[k][p]))
                }));
                params.backward_lanes(&mut buf, &input, &cot, &mut grad, None);
            }
            start = range.end;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it, seed: batch_seed });
        }
        adam.step(params.as_mut_slice(), &grad, cfg.lr)?;
    }
    let final_loss = *losses.last().unwrap_or(&f64::NAN);
    Ok(DeepHedge { params, losses, best_losses, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimal_variance_identity() {
        let p = [1.0, 2.5, 0.3, 4.0, 2.2, 0.0];
        let i = [0.8, 2.0, 0.5, 3.1, 1.7, -0.2];
        let s = control_variate_stats(&p, &i).unwrap();
        let expect = s.plain_var - s.cov * s.cov / s.hedge_var;
        assert!((s.hedged_var - expect).abs() < 1e-12);
        assert!(s.hedged_var <= s.var_at(1.0) + 1e-15);
        let mut m = CoMoments::default();
        p.iter().zip(&i).for_each(|(a, b)| m.push(*a, *b));
        let t = CvStats::from_moments(&m);
        assert!((t.hedged_var - s.hedged_var).abs() < 1e-12);
        assert!((t.hedged_mean - s.hedged_mean).abs() < 1e-12);
    }

    #[test]
    fn constant_hedge_is_degenerate() {
        let s = control_variate_stats(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.c_opt, 0.0);
        assert!((s.hedged_mean - 2.0).abs() < 1e-15);
    }

    #[test]
    fn integral_uses_left_point() {
        // a right-point sum would give 2*1 + 3*(-1) = -1
        let v = hedge_integral(&[1.0, 2.0], &[1.0, 2.0, 1.0]).unwrap();
        assert_eq!(v, 1.0 * 1.0 + 2.0 * -1.0);
        assert!(hedge_integral(&[1.0], &[1.0]).is_err());
    }
}
