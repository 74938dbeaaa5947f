//! Calibration functional, its modified gradient, and the robust and
//! product-form variants.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bs::{bs_greeks, OptionSpec};
use crate::error::{Error, Result};
use crate::ground_truth::SmileSlice;
use crate::lsv::{
    pathwise_gradient, pathwise_gradient_tape, simulate_path_on_tape, AdjointPass, LeverageModel, SabrParams,
    SimConfig, StripPaths, Strip,
};

/// Non-negative per-strike loss weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("weights sum to zero"));
        }
        Ok(WeightVector(raw.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::normalized(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `w_j <- w_j + |err_j|`, then renormalise.
    pub fn adversarial_update(&mut self, abs_errors: &[f64]) -> Result<()> {
        if abs_errors.len() != self.0.len() {
            return Err(Error::DimensionMismatch { expected: self.0.len(), got: abs_errors.len() });
        }
        let raw = self.0.iter().zip(abs_errors).map(|(w, e)| w + e.abs()).collect();
        *self = Self::normalized(raw)?;
        Ok(())
    }
}

/// Inverse-vega weights at the market implied vols.
pub fn vega_weights(slice: &SmileSlice, spot: f64) -> Result<WeightVector> {
    let mut raw = Vec::with_capacity(slice.len());
    for (j, (&k, &iv)) in slice.strikes.iter().zip(&slice.implied_vols).enumerate() {
        if !iv.is_finite() || iv <= 0.0 {
            return Err(Error::DegenerateVega { index: j });
        }
        let v = bs_greeks(&OptionSpec::call(spot, k, slice.maturity), iv)?.vega;
        if !(v > 1e-12) {
            return Err(Error::DegenerateVega { index: j });
        }
        raw.push(1.0 / v);
    }
    WeightVector::normalized(raw)
}

/// Put price from a call price by zero-rate parity.
#[inline]
pub fn put_from_call(call: f64, spot: f64, strike: f64) -> f64 {
    call - spot + strike
}

/// Out-of-the-money strip of slice `maturity` and its target prices: calls
/// for strikes up to the spot, parity puts above.
pub fn otm_targets(slice: &SmileSlice, maturity: usize, spot: f64) -> (Strip, Vec<f64>) {
    let strip = Strip::otm(maturity, &slice.strikes, spot);
    let targets = slice
        .strikes
        .iter()
        .zip(&slice.prices)
        .zip(&strip.is_call)
        .map(|((&k, &c), &is_call)| if is_call { c } else { put_from_call(c, spot, k) })
        .collect();
    (strip, targets)
}

/// `sum_j w_j (mean payoff_j - c mean hedge_j - target_j)^2` and the
/// per-strike estimates `X_j`.
pub fn calib_objective(
    payoff_mean: &[f64],
    hedge_mean: &[f64],
    targets: &[f64],
    weights: &WeightVector,
    c: f64,
) -> Result<(f64, Vec<f64>)> {
    let m = targets.len();
    for len in [payoff_mean.len(), hedge_mean.len(), weights.len()] {
        if len != m {
            return Err(Error::DimensionMismatch { expected: m, got: len });
        }
    }
    let x: Vec<f64> = (0..m).map(|j| payoff_mean[j] - c * hedge_mean[j] - targets[j]).collect();
    let loss = x.iter().zip(weights.as_slice()).map(|(x, w)| w * x * x).sum();
    Ok((loss, x))
}

/// Loss, estimates and gradient for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEval {
    pub loss: f64,
    pub x: Vec<f64>,
    pub pass: AdjointPass,
}

fn outer<'a>(
    targets: &'a [f64],
    weights: &'a WeightVector,
    c: f64,
) -> impl FnOnce(&[f64], &[f64]) -> Result<(Vec<f64>, (f64, Vec<f64>))> + 'a {
    move |p, h| {
        let (loss, x) = calib_objective(p, h, targets, weights, c)?;
        let d = x.iter().zip(weights.as_slice()).map(|(x, w)| 2.0 * w * x).collect();
        Ok((d, (loss, x)))
    }
}

/// Modified gradient: the outer derivative is taken at the hedged estimate
/// `X`, the inner derivative of the plain payoff means only.
pub fn calib_gradient(
    sabr: &SabrParams,
    model: &LeverageModel,
    strip: &Strip,
    targets: &[f64],
    weights: &WeightVector,
    cfg: &SimConfig,
) -> Result<GradEval> {
    let (pass, (loss, x)) = pathwise_gradient(sabr, model, strip, cfg, outer(targets, weights, 1.0))?;
    Ok(GradEval { loss, x, pass })
}

/// [`calib_gradient`] through per-path tapes.
pub fn calib_gradient_tape(
    sabr: &SabrParams,
    model: &LeverageModel,
    strip: &Strip,
    targets: &[f64],
    weights: &WeightVector,
    cfg: &SimConfig,
) -> Result<GradEval> {
    let (pass, (loss, x)) = pathwise_gradient_tape(sabr, model, strip, cfg, outer(targets, weights, 1.0))?;
    Ok(GradEval { loss, x, pass })
}

/// Per strike, the worst of `M` target sets: `sum_j w_j max_m X_{j,m}^2`.
/// Returns the loss, the attaining index per strike and `X` at it.
pub fn robust_objective(
    payoff_mean: &[f64],
    hedge_mean: &[f64],
    targets: &[Vec<f64>],
    weights: &WeightVector,
) -> Result<(f64, Vec<usize>, Vec<f64>)> {
    if targets.is_empty() {
        return Err(Error::invalid("robust objective needs at least one target set"));
    }
    let mut best: Option<(Vec<usize>, Vec<f64>)> = None;
    for (mi, t) in targets.iter().enumerate() {
        let (_, x) = calib_objective(payoff_mean, hedge_mean, t, weights, 1.0)?;
        match best.as_mut() {
            None => best = Some((vec![mi; x.len()], x)),
            Some((idx, bx)) => {
                for j in 0..x.len() {
                    if x[j] * x[j] > bx[j] * bx[j] {
                        bx[j] = x[j];
                        idx[j] = mi;
                    }
                }
            }
        }
    }
    let (idx, x) = best.unwrap();
    let loss = x.iter().zip(weights.as_slice()).map(|(x, w)| w * x * x).sum();
    Ok((loss, idx, x))
}

/// Robust loss with a subgradient through each strike's attaining set.
pub fn robust_gradient(
    sabr: &SabrParams,
    model: &LeverageModel,
    strip: &Strip,
    targets: &[Vec<f64>],
    weights: &WeightVector,
    cfg: &SimConfig,
) -> Result<GradEval> {
    let (pass, (loss, x)) = pathwise_gradient(sabr, model, strip, cfg, |p, h| {
        let (loss, _, x) = robust_objective(p, h, targets, weights)?;
        let d = x.iter().zip(weights.as_slice()).map(|(x, w)| 2.0 * w * x).collect();
        Ok((d, (loss, x)))
    })?;
    Ok(GradEval { loss, x, pass })
}

fn pair_terms(paths: &StripPaths, targets: &[f64], with_hedge: bool) -> Result<(usize, Vec<Vec<f64>>)> {
    let n = paths.log_spot.len();
    if n % 2 != 0 {
        return Err(Error::invalid("product-form estimator needs an even number of paths"));
    }
    if paths.payoffs.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: targets.len(), got: paths.payoffs.len() });
    }
    let q = targets
        .iter()
        .enumerate()
        .map(|(j, t)| {
            (0..n)
                .map(|p| paths.payoffs[j][p] - if with_hedge { paths.hedges[j][p] } else { 0.0 } - t)
                .collect()
        })
        .collect();
    Ok((n / 2, q))
}

/// `(1/N) sum_n sum_j w_j Q_j(w_n) Q_j(w_{n+N})` over `2N` paths: an
/// unbiased estimate of `sum_j w_j E[Q_j]^2`. With `with_hedge`, `Q_j` is
/// replaced by the hedged `X_j`.
pub fn product_form_objective(paths: &StripPaths, targets: &[f64], weights: &WeightVector, with_hedge: bool) -> Result<f64> {
    let (half, q) = pair_terms(paths, targets, with_hedge)?;
    let mut total = 0.0;
    for (j, qj) in q.iter().enumerate() {
        let s: f64 = (0..half).map(|p| qj[p] * qj[p + half]).sum();
        total += weights.as_slice()[j] * s;
    }
    Ok(total / half as f64)
}

/// Tape gradient of [`product_form_objective`] with respect to the network
/// of the strip's interval. Hedge terms are constants.
pub fn product_form_gradient(
    sabr: &SabrParams,
    model: &LeverageModel,
    strip: &Strip,
    targets: &[f64],
    weights: &WeightVector,
    cfg: &SimConfig,
    with_hedge: bool,
) -> Result<(f64, Vec<f64>)> {
    let n_params = model.net(strip.maturity).ok_or_else(|| Error::invalid("flat leverage has no parameters"))?.len();
    if cfg.n_paths % 2 != 0 {
        return Err(Error::invalid("product-form estimator needs an even number of paths"));
    }
    let batch = crate::lsv::simulate_lsv(sabr, model, core::slice::from_ref(strip), cfg)?;
    let paths = &batch.strips[0];
    let loss = product_form_objective(paths, targets, weights, with_hedge)?;
    let (half, q) = pair_terms(paths, targets, with_hedge)?;
    let mut tape = Tape::new();
    let mut grad = vec![0.0; n_params];
    for p in 0..cfg.n_paths {
        let partner = if p < half { p + half } else { p - half };
        let tp = simulate_path_on_tape(sabr, model, strip, cfg.dt, cfg.seed, p, cfg.hedge, &mut tape)?;
        let seeds: Vec<(Var, f64)> = (0..strip.len())
            .map(|j| (tp.payoffs[j], weights.as_slice()[j] * q[j][partner] / half as f64))
            .collect();
        let g = tape.gradient_seeded(&seeds)?;
        grad.iter_mut().zip(g.collect(&tp.theta[strip.maturity])).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_stay_probability_vectors() {
        let mut w = WeightVector::normalized(vec![1.0, 3.0, 4.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.125, 0.375, 0.5]);
        w.adversarial_update(&[0.01, -0.2, 0.0]).unwrap();
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.as_slice().iter().all(|x| *x >= 0.0));
        let mut u = WeightVector::uniform(4).unwrap();
        u.adversarial_update(&[0.02; 4]).unwrap();
        assert_eq!(u.as_slice(), &[0.25; 4]);
        assert!(WeightVector::normalized(vec![0.0, 0.0]).is_err());
        assert!(w.adversarial_update(&[0.1]).is_err());
    }

    #[test]
    fn objective_basics() {
        let w = WeightVector::uniform(1).unwrap();
        let (loss, x) = calib_objective(&[0.11], &[0.0], &[0.1], &w, 1.0).unwrap();
        assert!((x[0] - 0.01).abs() < 1e-15);
        assert!((loss - 1e-4).abs() < 1e-15);
        let w3 = WeightVector::uniform(3).unwrap();
        let (loss, _) = calib_objective(&[0.1, 0.2, 0.3], &[0.0; 3], &[0.1, 0.2, 0.3], &w3, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(calib_objective(&[0.1], &[0.0], &[0.1, 0.2], &w, 1.0).is_err());
    }

    #[test]
    fn robust_reduces_to_plain_for_one_set() {
        let w = WeightVector::normalized(vec![0.2, 0.8]).unwrap();
        let p = [0.3, 0.1];
        let h = [0.01, -0.02];
        let t = vec![0.28, 0.13];
        let (a, _) = calib_objective(&p, &h, &t, &w, 1.0).unwrap();
        let (b, idx, _) = robust_objective(&p, &h, &[t.clone()], &w).unwrap();
        assert_eq!(a, b);
        assert_eq!(idx, vec![0, 0]);
        let (_, idx, _) = robust_objective(&p, &h, &[t, vec![0.5, 0.12]], &w).unwrap();
        assert_eq!(idx, vec![1, 0]);
    }

    #[test]
    fn parity_targets() {
        let slice = SmileSlice {
            maturity: 0.5,
            strikes: vec![0.9, 1.0, 1.2],
            prices: vec![0.15, 0.08, 0.02],
            implied_vols: vec![0.3; 3],
            std_errs: vec![0.0; 3],
            iv_failed: vec![false; 3],
        };
        let (strip, t) = otm_targets(&slice, 0, 1.0);
        assert_eq!(strip.is_call, vec![true, true, false]);
        assert_eq!(t[..2], [0.15, 0.08]);
        assert_eq!(t[2], 0.02 - 1.0 + 1.2);
    }

    #[test]
    fn vega_weighting() {
        let slice = SmileSlice {
            maturity: 0.5,
            strikes: vec![0.8, 1.0, 1.25],
            prices: vec![0.0; 3],
            implied_vols: vec![0.25; 3],
            std_errs: vec![0.0; 3],
            iv_failed: vec![false; 3],
        };
        let w = vega_weights(&slice, 1.0).unwrap();
        let v: Vec<f64> = slice
            .strikes
            .iter()
            .map(|&k| bs_greeks(&OptionSpec::call(1.0, k, 0.5), 0.25).unwrap().vega)
            .collect();
        // wing weight relative to the ATM weight is the inverse vega ratio
        assert!((w.as_slice()[0] / w.as_slice()[1] - v[1] / v[0]).abs() < 1e-12);
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
