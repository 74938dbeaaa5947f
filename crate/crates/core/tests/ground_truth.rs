use lsv_core::bs::{bs_greeks, OptionSpec};
use lsv_core::ground_truth::*;
use proptest::prelude::*;

fn example_xi() -> XiParams {
    XiParams::from_array([0.45, 0.55, 1.0, 0.3, 1.0])
}

fn cfg(n_paths: usize, dt: f64, seed: u64) -> MarketConfig {
    MarketConfig { n_paths, dt, seed, hedge: GroundHedge::RunningVol }
}

#[test]
fn constant_vol_recovers_flat_smile() {
    let grid = GridSpec::default();
    let m = gen_synthetic_market(&ConstantVol(0.2), &grid, &cfg(100_000, 0.01, 5)).unwrap();
    for s in &m.slices {
        for j in 0..s.len() {
            let vega = bs_greeks(&OptionSpec::call(1.0, s.strikes[j], s.maturity), 0.2).unwrap().vega;
            let iv_se = s.std_errs[j] / vega;
            assert!(
                (s.implied_vols[j] - 0.2).abs() <= 3.0 * iv_se,
                "T {} K {}: {} (se {iv_se:.2e})",
                s.maturity,
                s.strikes[j],
                s.implied_vols[j]
            );
        }
    }
}

#[test]
fn forward_is_a_martingale() {
    let gt = GroundTruth { xi: example_xi(), shape: FixedShape::default() };
    let (_, d) = gen_synthetic_market_with_diagnostics(&gt, &GridSpec::default(), &cfg(100_000, 0.01, 6)).unwrap();
    for (m, se) in d.forward_mean.iter().zip(&d.forward_se) {
        assert!((m - 1.0).abs() <= 3.0 * se, "{m} (se {se})");
    }
}

#[test]
fn p1_draws_have_uniform_mean() {
    let n = 100_000;
    let v: Vec<f64> = (0..n).map(|s| sample_xi(s).p1).collect();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - 0.45).abs() <= 3.0 * se, "{mean} (se {se})");
}

#[test]
fn prices_are_ordered_and_smile_is_convex() {
    let gt = GroundTruth { xi: example_xi(), shape: FixedShape::default() };
    let grid = GridSpec::default();
    let m = gen_synthetic_market(&gt, &grid, &cfg(100_000, 0.01, 7)).unwrap();
    assert!(!m.has_failures());
    for s in &m.slices {
        for j in 1..s.len() {
            let slack = 3.0 * (s.std_errs[j].powi(2) + s.std_errs[j - 1].powi(2)).sqrt();
            assert!(s.prices[j] <= s.prices[j - 1] + slack);
        }
    }
    // ATM (strike 1 lies between the middle grid points) call value grows with maturity
    let atm: Vec<f64> = m
        .slices
        .iter()
        .map(|s| {
            let j = s.strikes.iter().position(|&k| k > 1.0).unwrap();
            let (k0, k1) = (s.strikes[j - 1], s.strikes[j]);
            s.prices[j - 1] + (s.prices[j] - s.prices[j - 1]) * (1.0 - k0) / (k1 - k0)
        })
        .collect();
    assert!(atm.windows(2).all(|w| w[1] > w[0]), "{atm:?}");

    let half = m.slices.iter().find(|s| s.maturity == 0.5).unwrap();
    let iv = &half.implied_vols;
    let convex = iv.windows(3).filter(|w| w[0] + w[2] - 2.0 * w[1] > 0.0).count();
    assert!(convex * 10 >= 8 * (iv.len() - 2), "smile {iv:?}");
    let (jmin, _) = iv.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let kmin = half.strikes[jmin].ln();
    assert!(kmin.abs() <= 0.15, "minimum at log-moneyness {kmin}");
}

#[test]
fn halving_dt_is_within_noise() {
    let gt = GroundTruth { xi: example_xi(), shape: FixedShape::default() };
    let grid = GridSpec::default().truncated(2);
    // at dt = 0.01 the wings still carry an O(dt^2) bias well above the
    // hedged standard error; below 0.0025 it is lost in the noise
    let a = gen_synthetic_market(&gt, &grid, &cfg(200_000, 0.0025, 8)).unwrap();
    let b = gen_synthetic_market(&gt, &grid, &cfg(200_000, 0.00125, 9)).unwrap();
    for (sa, sb) in a.slices.iter().zip(&b.slices) {
        for j in 0..sa.len() {
            let se = (sa.std_errs[j].powi(2) + sb.std_errs[j].powi(2)).sqrt();
            assert!((sa.prices[j] - sb.prices[j]).abs() <= 3.0 * se, "T {} K {}", sa.maturity, sa.strikes[j]);
        }
    }
}

#[test]
fn step_on_the_regime_switch_is_damped() {
    let gt = GroundTruth { xi: example_xi(), shape: FixedShape::default() };
    let early = gt.variance(0.1, 0.05);
    let late = gt.variance(0.1 + 1e-12, 0.05);
    assert!(late < 0.5 * early);
    assert!((gt.step_variance(0.1, 0.01, 0.05) - late).abs() < 1e-9);
    assert_eq!(gt.step_variance(0.09, 0.01, 0.05), gt.variance(0.09, 0.05));
    assert_eq!(gt.step_variance(0.0, 0.01, 0.05), gt.variance(0.01, 0.05));
}

#[test]
fn generation_is_deterministic() {
    let gt = GroundTruth { xi: sample_xi(3), shape: FixedShape::default() };
    let grid = GridSpec::default().truncated(1);
    let a = gen_synthetic_market(&gt, &grid, &cfg(20_000, 0.01, 1)).unwrap();
    let b = gen_synthetic_market(&gt, &grid, &cfg(20_000, 0.01, 1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn too_few_paths_is_rejected() {
    let gt = GroundTruth { xi: example_xi(), shape: FixedShape::default() };
    assert!(gen_synthetic_market(&gt, &GridSpec::default(), &cfg(9_999, 0.01, 1)).is_err());
}

proptest! {
    #[test]
    fn local_variance_is_bounded(seed in any::<u64>(), t in 1e-6f64..=1.0, x in -1.0f64..=1.0) {
        let xi = sample_xi(seed);
        let v = local_vol_sq(&xi, &FixedShape::default(), t, x).unwrap();
        prop_assert!((0.0..=0.5).contains(&v));
    }

    #[test]
    fn perturbed_copies_stay_close(seed in any::<u64>(), u in 0.0f64..0.1) {
        let xi = sample_xi(seed);
        for c in perturb_xi(&xi, u, 4, seed) {
            for (a, b) in c.to_array().iter().zip(xi.to_array()) {
                prop_assert!((a - b).abs() <= u);
            }
        }
    }
}
