//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p lsv-calib --test acceptance -- 1 2 6`.

use std::io::Write;
use std::time::Instant;

use lsv_calib::config::{Preset, RunConfig};
use lsv_calib::stat::{fit_robust_or_skip, robust_markets, run_one, run_seed, run_stat_test};
use lsv_core::autodiff::{InitScale, MlpParams};
use lsv_core::calibrate::{calib_gradient, calib_objective, Silent, WeightVector};
use lsv_core::ground_truth::{
    gen_synthetic_market_with_diagnostics, local_vol_sq, sample_xi, FixedShape, GridSpec, GroundTruth, MarketConfig,
    XiParams,
};
use lsv_core::hedging::{control_variate_stats, HedgeMode};
use lsv_core::lsv::{simulate_lsv, simulate_path_on_tape, LeverageModel, SabrParams, SimConfig, Strip};
use lsv_core::rng::{derive_seed, PathRng};
use lsv_core::{bs_greeks, bs_price, implied_vol, MlpSpec, OptionSpec, Tape};

const MASTER_SEED: u64 = 20_240_601;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn bumpy_model(maturities: &[f64], spec: MlpSpec, seed: u64) -> LeverageModel {
    let init = InitScale { scale: 1.0, output_scale: 0.3 };
    let flats = (0..maturities.len())
        .map(|i| MlpParams::init_scaled(spec.clone(), seed + i as u64, init).unwrap().into_flat())
        .collect();
    LeverageModel::from_parts(spec, maturities, flats).unwrap()
}

fn variance_reduction() -> Verdict {
    let start = Instant::now();
    let sabr = SabrParams::new(0.5, -0.5, 0.3).unwrap();
    let model = LeverageModel::flat(&[0.5]).unwrap();
    let cfg = SimConfig { n_paths: 100_000, dt: 0.01, seed: derive_seed(MASTER_SEED, &[1]), hedge: HedgeMode::BsDeltaRunning };
    let b = simulate_lsv(&sabr, &model, &[Strip::calls(0, &[1.0])], &cfg).unwrap();
    let s = control_variate_stats(&b.strips[0].payoffs[0], &b.strips[0].hedges[0]).unwrap();
    let ratio = s.plain_var / s.hedged_var;
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(ratio >= 5.0 && secs <= 60.0, format!("Var(plain)/Var(hedged) = {ratio:.2} (need >= 5), {secs:.1}s (need <= 60s)"))
}

fn variance_identity() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..200u64 {
        let mut rng = PathRng::new(derive_seed(MASTER_SEED, &[2]), seed);
        let n = 2 + (rng.uniform() * 5000.0) as usize;
        let rho = rng.uniform() * 2.0 - 1.0;
        let (scale, shift) = (10f64.powf(rng.uniform() * 6.0 - 3.0), rng.uniform() * 200.0 - 100.0);
        let kind = seed % 4;
        let (mut p, mut h) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let (a, b) = (rng.normal(), rng.normal());
            let z = rho * a + (1.0 - rho * rho).sqrt() * b;
            let (x, y) = match kind {
                0 => (a, z),
                1 => (a * a * a, z.exp()),
                2 => ((a - 0.5).max(0.0), rng.uniform()),
                _ => (a.signum() * a.abs().sqrt(), z * z),
            };
            p.push(shift + scale * x);
            h.push(y / scale);
        }
        let s = control_variate_stats(&p, &h).unwrap();
        if s.plain_var == 0.0 {
            continue;
        }
        let rel = (s.hedged_var - (1.0 - s.corr * s.corr) * s.plain_var).abs() / s.plain_var;
        worst = worst.max(rel);
        count += 1;
    }
    Verdict::new(worst <= 1e-12, format!("max relative error {worst:.2e} over {count} sample sets (need <= 1e-12)"))
}

/// Relative L2 distance.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    num / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mats = [0.15, 0.25];
    let model = bumpy_model(&mats, MlpSpec::leverage(4, 2), derive_seed(MASTER_SEED, &[3]));
    let sabr = SabrParams::new(0.5, -0.5, 0.3).unwrap();
    let strikes = [0.85, 0.95, 1.0, 1.05, 1.15];
    let strip = Strip::otm(1, &strikes, 1.0);
    let targets: Vec<f64> = strikes
        .iter()
        .map(|&k| {
            let opt = if k >= 1.0 { OptionSpec::call(1.0, k, 0.25) } else { OptionSpec::put(1.0, k, 0.25) };
            bs_price(&opt, 0.33).unwrap()
        })
        .collect();
    let w = WeightVector::uniform(strikes.len()).unwrap();
    let h = 1e-5;
    let n_params = model.net(1).unwrap().len();
    let seed = derive_seed(MASTER_SEED, &[4]);
    let bumped = |i: usize, d: f64| {
        let mut m = model.clone();
        m.net_mut(1).unwrap().as_mut_slice()[i] += d;
        m
    };
    let payoff_means = |m: &LeverageModel, cfg: &SimConfig| -> Vec<f64> {
        let b = simulate_lsv(&sabr, m, std::slice::from_ref(&strip), cfg).unwrap();
        b.strips[0].payoffs.iter().map(|p| mean(p)).collect()
    };
    let unhedged = |q: &[f64]| calib_objective(q, &vec![0.0; q.len()], &targets, &w, 1.0).unwrap().0;

    // plain estimator: G is the gradient of the unhedged objective itself
    let plain = SimConfig { n_paths: 10_000, dt: 0.01, seed, hedge: HedgeMode::None };
    let g = calib_gradient(&sabr, &model, &strip, &targets, &w, &plain).unwrap().pass.grad;
    let fd: Vec<f64> = (0..n_params)
        .map(|i| (unhedged(&payoff_means(&bumped(i, h), &plain)) - unhedged(&payoff_means(&bumped(i, -h), &plain))) / (2.0 * h))
        .collect();
    let rel_plain = rel_err(&g, &fd);

    // hedged estimator: the hedge is under stop-gradient, so G pairs the
    // outer derivative at the hedged estimate with FDs of the payoff means
    let hedged = SimConfig { hedge: HedgeMode::BsDeltaRunning, ..plain };
    let ge = calib_gradient(&sabr, &model, &strip, &targets, &w, &hedged).unwrap();
    let dq: Vec<Vec<f64>> = (0..n_params)
        .map(|i| {
            let (up, dn) = (payoff_means(&bumped(i, h), &hedged), payoff_means(&bumped(i, -h), &hedged));
            up.iter().zip(&dn).map(|(u, d)| (u - d) / (2.0 * h)).collect()
        })
        .collect();
    let contract: Vec<f64> = dq
        .iter()
        .map(|d| d.iter().zip(&ge.x).zip(w.as_slice()).map(|((d, x), w)| 2.0 * w * x * d).sum())
        .collect();
    let rel_hedged = rel_err(&ge.pass.grad, &contract);
    let literal: Vec<f64> = (0..n_params)
        .map(|i| (unhedged(&payoff_means(&bumped(i, h), &hedged)) - unhedged(&payoff_means(&bumped(i, -h), &hedged))) / (2.0 * h))
        .collect();
    let rel_literal = rel_err(&ge.pass.grad, &literal);
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        rel_plain <= 1e-3 && rel_hedged <= 1e-3 && secs <= 120.0,
        format!(
            "{n_params} parameters, 10^4 paths: plain estimator rel err {rel_plain:.2e}, hedged estimator rel err {rel_hedged:.2e} \
             (need <= 1e-3); hedged G vs FD of the unhedged loss {rel_literal:.2e} (informational); {secs:.1}s"
        ),
    )
}

fn desk_config(maturities: usize) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.market.grid = cfg.market.grid.truncated(maturities);
    cfg
}

fn desk_calibration() -> Verdict {
    let start = Instant::now();
    let cfg = desk_config(2);
    let seed = run_seed(MASTER_SEED, 0);
    let run = run_one(&cfg, 0, seed, false);
    let secs = start.elapsed().as_secs_f64();
    match &run.result {
        Err(reason) => Verdict::new(false, format!("run skipped: {reason}")),
        Ok(fit) => {
            let max: Vec<f64> = fit.report.slices.iter().map(|s| s.max_error).collect();
            let avg: Vec<f64> = fit.report.slices.iter().map(|s| s.mean_error).collect();
            let pass = max.iter().all(|e| *e <= 0.015) && secs <= 1200.0;
            Verdict::new(
                pass,
                format!(
                    "1 sample, 2 maturities, desk preset: max IV error per slice {max:.4?} (need <= 0.015), \
                     mean {avg:.4?}, {:.1} min (need <= 20)",
                    secs / 60.0
                ),
            )
        }
    }
}

fn robust_envelope() -> Verdict {
    let start = Instant::now();
    // same seeds as `lsv-calib robust --maturities 2 --seed <MASTER_SEED>`
    let cfg = desk_config(2);
    let xi = sample_xi(derive_seed(MASTER_SEED, &[0]));
    let (_, markets) = match robust_markets(&cfg, &xi, derive_seed(MASTER_SEED, &[1])) {
        Ok(m) => m,
        Err(e) => return Verdict::new(false, format!("market generation failed: {e}")),
    };
    let fit = match fit_robust_or_skip(&markets, &cfg, derive_seed(MASTER_SEED, &[2]), &mut Silent) {
        Ok(f) => f,
        Err(reason) => return Verdict::new(false, format!("calibration skipped: {reason}")),
    };
    let (mut inside, mut total) = (0, 0);
    let mut per_slice = Vec::new();
    for s in &fit.report.slices {
        let (lo, hi) = s.iv_envelope.as_ref().expect("robust slices carry an envelope");
        let k = (0..s.strikes.len()).filter(|&j| s.iv_model[j] >= lo[j] && s.iv_model[j] <= hi[j]).count();
        per_slice.push(format!("{k}/{}", s.strikes.len()));
        inside += k;
        total += s.strikes.len();
    }
    let frac = inside as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        frac >= 0.9 && secs <= 1200.0,
        format!(
            "4 smiles, u = 0.01, 2 maturities: model IV inside the envelope at {inside}/{total} strikes ({:.1}%, need >= 90%), \
             per slice {per_slice:?}, {:.1} min",
            100.0 * frac,
            secs / 60.0
        ),
    )
}

fn check(name: &str, ok: bool, detail: String, failures: &mut Vec<String>) {
    println!("    {name}: {} ({detail})", if ok { "ok" } else { "FAIL" });
    if !ok {
        failures.push(name.to_string());
    }
}

fn example_xi() -> XiParams {
    XiParams { p1: 0.45, p2: 0.55, sigma0: 1.0, sigma1: 0.3, sigma2: 1.0 }
}

fn property_suites() -> Verdict {
    let mut failures = Vec::new();

    let mut rng = PathRng::new(derive_seed(MASTER_SEED, &[6]), 0);
    let (mut worst, mut n) = (0f64, 0);
    for _ in 0..20_000 {
        let (k, t, vol) = (rng.uniform() * 2.0 - 1.0, 0.02 + rng.uniform() * 2.98, 0.05 + rng.uniform() * 1.45);
        let opt = if k >= 0.0 { OptionSpec::call(1.0, k.exp(), t) } else { OptionSpec::put(1.0, k.exp(), t) };
        if bs_greeks(&opt, vol).unwrap().vega <= 1e-6 {
            continue;
        }
        let back = implied_vol(bs_price(&opt, vol).unwrap(), &opt).unwrap();
        worst = worst.max((back - vol).abs());
        n += 1;
    }
    check("IV round trip", worst <= 1e-8, format!("max |error| {worst:.1e} over {n} draws"), &mut failures);

    let gt = GroundTruth { xi: example_xi(), shape: FixedShape::default() };
    let mcfg = MarketConfig { n_paths: 100_000, dt: 0.01, seed: derive_seed(MASTER_SEED, &[7]), hedge: Default::default() };
    let (_, diag) = gen_synthetic_market_with_diagnostics(&gt, &GridSpec::default(), &mcfg).unwrap();
    let z_gt = diag.forward_mean.iter().zip(&diag.forward_se).map(|(m, se)| (m - 1.0).abs() / se).fold(0.0, f64::max);
    let mats = [0.25, 0.5];
    let model = bumpy_model(&mats, MlpSpec::leverage(8, 2), derive_seed(MASTER_SEED, &[8]));
    let sabr = SabrParams::new(0.8, -0.3, 0.3).unwrap();
    let cfg = SimConfig { n_paths: 100_000, dt: 0.01, seed: derive_seed(MASTER_SEED, &[9]), hedge: HedgeMode::BsDeltaRunning };
    let b = simulate_lsv(&sabr, &model, &[Strip::calls(0, &[1.0]), Strip::calls(1, &[0.9, 1.0, 1.1])], &cfg).unwrap();
    let z_lsv = b
        .strips
        .iter()
        .map(|sp| {
            let s: Vec<f64> = sp.log_spot.iter().map(|x| x.exp()).collect();
            let (m, se) = mean_se(&s);
            (m - 1.0).abs() / se
        })
        .fold(0.0, f64::max);
    check("martingale", z_gt <= 3.0 && z_lsv <= 3.0, format!("max |z| ground truth {z_gt:.2}, SABR-LSV {z_lsv:.2}"), &mut failures);

    let z_hedge = b.strips[1]
        .hedges
        .iter()
        .map(|hs| {
            let (m, se) = mean_se(hs);
            m.abs() / se
        })
        .fold(0.0, f64::max);
    check("hedge integral centred", z_hedge <= 3.0, format!("max |z| {z_hedge:.2}"), &mut failures);

    let mut wrng = PathRng::new(derive_seed(MASTER_SEED, &[10]), 0);
    let mut w = WeightVector::uniform(20).unwrap();
    let mut drift = 0f64;
    let mut negative = false;
    for _ in 0..1000 {
        let e: Vec<f64> = (0..20).map(|_| wrng.uniform() * 0.05).collect();
        w.adversarial_update(&e).unwrap();
        drift = drift.max((w.as_slice().iter().sum::<f64>() - 1.0).abs());
        negative |= w.as_slice().iter().any(|x| *x < 0.0);
    }
    check("weights are probability vectors", drift <= 1e-12 && !negative, format!("max |sum - 1| {drift:.1e}"), &mut failures);

    let mut arng = PathRng::new(derive_seed(MASTER_SEED, &[11]), 0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..200_000u64 {
        let xi = sample_xi(derive_seed(MASTER_SEED, &[12, i / 100]));
        let (t, x) = (1e-6 + arng.uniform() * 2.0, arng.uniform() * 4.0 - 2.0);
        let a2 = local_vol_sq(&xi, &FixedShape::default(), t, x).unwrap();
        lo = lo.min(a2);
        hi = hi.max(a2);
    }
    check("local variance bounds", lo >= 0.0 && hi <= 0.5, format!("a^2 in [{lo:.3e}, {hi:.4}]"), &mut failures);

    let (nu, a0, t) = (0.9, 0.3, 0.5);
    let flat = LeverageModel::flat(&[t]).unwrap();
    let acfg = SimConfig { n_paths: 100_000, dt: 0.01, seed: derive_seed(MASTER_SEED, &[13]), hedge: HedgeMode::None };
    let ab = simulate_lsv(&SabrParams::new(nu, -0.4, a0).unwrap(), &flat, &[Strip::calls(0, &[1.0])], &acfg).unwrap();
    let alpha = &ab.strips[0].alpha;
    let (m1, se1) = mean_se(alpha);
    let logs: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();
    let (m2, se2) = mean_se(&logs);
    let (z1, z2) = ((m1 - a0).abs() / se1, (m2 - (a0.ln() - 0.5 * nu * nu * t)).abs() / se2);
    check("exact alpha moments", z1 <= 3.0 && z2 <= 3.0, format!("|z| mean {z1:.2}, log mean {z2:.2}"), &mut failures);

    let tmodel = bumpy_model(&[0.15, 0.25], MlpSpec::leverage(6, 2), derive_seed(MASTER_SEED, &[14]));
    let tsabr = SabrParams::new(0.7, -0.5, 0.3).unwrap();
    let strip = Strip::otm(1, &[0.8, 0.95, 1.0, 1.1, 1.3], 1.0);
    let tcfg = SimConfig { n_paths: 200, dt: 0.01, seed: derive_seed(MASTER_SEED, &[15]), hedge: HedgeMode::BsDeltaRunning };
    let tb = simulate_lsv(&tsabr, &tmodel, std::slice::from_ref(&strip), &tcfg).unwrap();
    let mut mismatches = 0;
    for p in 0..tcfg.n_paths {
        let mut tape = Tape::new();
        let tp = simulate_path_on_tape(&tsabr, &tmodel, &strip, tcfg.dt, tcfg.seed, p, tcfg.hedge, &mut tape).unwrap();
        let sp = &tb.strips[0];
        let same = tape.value(tp.log_spot).to_bits() == sp.log_spot[p].to_bits()
            && tp.alpha.to_bits() == sp.alpha[p].to_bits()
            && (0..strip.len()).all(|j| {
                tape.value(tp.payoffs[j]).to_bits() == sp.payoffs[j][p].to_bits()
                    && tp.hedges[j].to_bits() == sp.hedges[j][p].to_bits()
            });
        mismatches += usize::from(!same);
    }
    check("tape on/off bitwise", mismatches == 0, format!("{mismatches} of {} paths differ", tcfg.n_paths), &mut failures);

    let mut rcfg = RunConfig::preset(Preset::Desk);
    rcfg.market.n_paths = 20_000;
    rcfg.market.grid = GridSpec { maturities: vec![0.15, 0.25], log_strike_bounds: vec![0.1, 0.2], n_strikes: 8, spot: 1.0 };
    rcfg.calib.initial_paths = 500;
    rcfg.calib.path_schedule = vec![lsv_core::calibrate::PathStep { at: 30, n_paths: 2000 }];
    rcfg.calib.check_start = 40;
    rcfg.calib.check_every = 20;
    rcfg.calib.max_steps = 60;
    rcfg.calib.eval_paths = 20_000;
    rcfg.calib.leverage = MlpSpec::leverage(4, 2);
    rcfg.calib.sabr.steps = 40;
    rcfg.calib.sabr.n_paths = 1000;
    rcfg.calib.sabr.eval_paths = 20_000;
    rcfg.samples = 3;
    let study = run_stat_test(&rcfg, MASTER_SEED, false);
    let replayed = run_one(&rcfg, 2, run_seed(MASTER_SEED, 2), false);
    let original = &study[2];
    let same = original.seed == replayed.seed && original.xi == replayed.xi && original.error_rows() == replayed.error_rows();
    let rows = original.error_rows().len();
    check("stat-test replay", same && rows > 0, format!("run 2 of 3 replayed from seed {:#x}, {rows} error rows", replayed.seed), &mut failures);

    if failures.is_empty() {
        Verdict::new(true, "8 property suites")
    } else {
        Verdict::new(false, format!("failed: {}", failures.join(", ")))
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, fn() -> Verdict); 6] = [
        (1, variance_reduction),
        (2, variance_identity),
        (3, gradient_check),
        (4, desk_calibration),
        (5, robust_envelope),
        (6, property_suites),
    ];
    let mut failed = 0;
    for (n, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = f();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {tag} {} [{:.1}s]", v.detail, start.elapsed().as_secs_f64());
        std::io::stdout().flush().ok();
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
