use lsv_core::autodiff::{Activation, MlpSpec};
use lsv_core::bs::call_delta;
use lsv_core::hedging::{control_variate_stats, hedge_integral, hedge_pnl, train_deep_hedge, DeepHedgeConfig};
use lsv_core::lsv::{simulate_states, LeverageModel, SabrParams, StatePaths};
use lsv_core::rng::PathRng;
use lsv_core::{bs_price, MlpParams, OptionSpec};

fn var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

#[test]
fn variance_identity_on_random_samples() {
    for seed in 0..20 {
        let mut rng = PathRng::new(seed, 0);
        let n = 50 + seed as usize * 7;
        let rho = rng.uniform() * 2.0 - 1.0;
        let (mut p, mut h) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let (a, b) = (rng.normal(), rng.normal());
            p.push(1.0 + 0.3 * a);
            h.push(2.0 * (rho * a + (1.0 - rho * rho).sqrt() * b));
        }
        let s = control_variate_stats(&p, &h).unwrap();
        let expect = (1.0 - s.corr * s.corr) * s.plain_var;
        assert!((s.hedged_var - expect).abs() <= 1e-12 * s.plain_var, "seed {seed}");
        assert!((s.c_opt - s.cov / s.hedge_var).abs() < 1e-14);
    }
}

#[test]
fn perfect_hedge_removes_all_variance() {
    let p = [0.1, 0.5, 0.0, 1.3, 0.7];
    let s = control_variate_stats(&p, &p).unwrap();
    assert!((s.c_opt - 1.0).abs() < 1e-14);
    assert!(s.hedged_var.abs() < 1e-15);
}

#[test]
fn independent_hedge_barely_helps() {
    let mut rng = PathRng::new(9, 0);
    let p: Vec<f64> = (0..100_000).map(|_| rng.normal()).collect();
    let h: Vec<f64> = (0..100_000).map(|_| rng.normal()).collect();
    let s = control_variate_stats(&p, &h).unwrap();
    assert!((s.hedged_var / s.plain_var - 1.0).abs() < 1e-3);
}

#[test]
fn flat_spot_gives_zero_integral() {
    assert_eq!(hedge_integral(&[0.3, 0.7, 0.2], &[1.0; 4]).unwrap(), 0.0);
}

fn bs_world() -> (SabrParams, LeverageModel, OptionSpec, f64) {
    let sabr = SabrParams::new(0.0, 0.0, 0.2).unwrap();
    let model = LeverageModel::flat(&[0.25]).unwrap();
    let opt = OptionSpec::call(1.0, 1.0, 0.25);
    let price = bs_price(&opt, 0.2).unwrap();
    (sabr, model, opt, price)
}

fn delta_pnl(paths: &StatePaths, opt: &OptionSpec, price: f64, vol: f64) -> Vec<f64> {
    let steps = paths.x.len() - 1;
    (0..paths.n_paths)
        .map(|p| {
            let spots: Vec<f64> = (0..=steps).map(|k| paths.x[k][p].exp()).collect();
            let deltas: Vec<f64> = (0..steps)
                .map(|k| {
                    let sd = vol * (opt.ttm - k as f64 * paths.dt).sqrt();
                    call_delta((spots[k] / opt.strike).ln(), sd)
                })
                .collect();
            -opt.payoff(spots[steps]) + price + hedge_integral(&deltas, &spots).unwrap()
        })
        .collect()
}

fn small_cfg(iterations: usize) -> DeepHedgeConfig {
    DeepHedgeConfig {
        spec: MlpSpec::new(3, vec![16, 16], vec![Activation::Tanh, Activation::Tanh], 1).unwrap(),
        iterations,
        n_paths: 1024,
        lr: 1e-2,
        ..DeepHedgeConfig::default()
    }
}

#[test]
fn untrained_hedge_loss_is_the_naked_position() {
    let (sabr, model, opt, price) = bs_world();
    let fit = train_deep_hedge(&sabr, &model, 0, &opt, price, &small_cfg(1), 4).unwrap();
    // replay the first batch
    let cfg = small_cfg(1);
    let paths = simulate_states(&sabr, &model, 0, cfg.n_paths, cfg.dt, lsv_core::rng::derive_seed(4, &[1, 0])).unwrap();
    let steps = paths.x.len() - 1;
    let naked = (0..paths.n_paths).map(|p| (price - opt.payoff(paths.x[steps][p].exp())).powi(2)).sum::<f64>()
        / paths.n_paths as f64;
    assert!((fit.losses[0] - naked).abs() <= 1e-12 * naked);

    let zero = MlpParams::from_flat(cfg.spec.clone(), vec![0.0; fit.params.len()]).unwrap();
    let pnl = hedge_pnl(&zero, &paths, &opt, price).unwrap();
    let again = pnl.iter().map(|x| x * x).sum::<f64>() / pnl.len() as f64;
    assert!((again - naked).abs() <= 1e-12 * naked);
}

#[test]
fn trained_hedge_competes_with_delta_hedging() {
    let (sabr, model, opt, price) = bs_world();
    let cfg = small_cfg(300);
    let fit = train_deep_hedge(&sabr, &model, 0, &opt, price, &cfg, 11).unwrap();
    assert!(fit.best_losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(fit.best_losses.last().unwrap() < &(0.2 * fit.losses[0]));

    let held_out = simulate_states(&sabr, &model, 0, 20_000, cfg.dt, 987).unwrap();
    let steps = held_out.x.len() - 1;
    let payoffs: Vec<f64> = (0..held_out.n_paths).map(|p| opt.payoff(held_out.x[steps][p].exp())).collect();
    let plain = var(&payoffs);
    let neural = var(&hedge_pnl(&fit.params, &held_out, &opt, price).unwrap());
    let delta = var(&delta_pnl(&held_out, &opt, price, 0.2));
    let (vr_neural, vr_delta) = (plain / neural, plain / delta);
    assert!(vr_neural >= 0.5 * vr_delta, "neural VR {vr_neural:.1} vs delta VR {vr_delta:.1}");
}
