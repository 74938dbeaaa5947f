use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lsv_core::calibrate::{eval_model_ivs, SurfaceFit};
use lsv_core::ground_truth::{sample_xi, SmileGrid, SmileSlice, XiParams};
use lsv_core::rng::derive_seed;

use crate::config::{Preset, RunConfig};
use crate::error::{CliError, Result};
use crate::extrapolate::extrapolation_report;
use crate::market_io::{load_market, load_xi, save_json, save_market, xi_sidecar};
use crate::model_io::{load_model, save_model};
use crate::progress::Clock;
use crate::report::{build_report, iv_table, read_csv, write_csv, Artifact};
use crate::stat::{fit_robust_or_skip, make_market, robust_markets, run_one, run_seed, run_stat_test, ErrorRow, StatSummary};

#[derive(Debug, Parser)]
#[command(name = "lsv-calib", version, about = "Neural leverage calibration of SABR-LSV models to synthetic smiles")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON file overriding preset values (needs "version": 1).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// No progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Price a synthetic market from the local-vol ground truth.
    GenMarket {
        /// Ground-truth parameters (JSON); sampled from the seed if absent.
        #[arg(long)]
        xi: Option<PathBuf>,
        /// Keep only the first N maturities.
        #[arg(long)]
        maturities: Option<usize>,
    },
    /// Calibrate the SABR-LSV model to a market file.
    Calibrate {
        #[arg(long)]
        market: PathBuf,
    },
    /// Calibrate to the worst of several perturbed ground-truth markets.
    Robust {
        #[arg(long)]
        xi: Option<PathBuf>,
        #[arg(long)]
        maturities: Option<usize>,
    },
    /// Repeated calibration to sampled markets with error statistics.
    StatTest {
        /// Number of samples (overrides the preset).
        #[arg(long)]
        samples: Option<usize>,
        /// Re-run a single sample of the study.
        #[arg(long)]
        replay: Option<usize>,
    },
    /// Model prices and implied vols of a saved model.
    Price {
        #[arg(long)]
        model: PathBuf,
        /// Strike grid taken from this market file instead of the config.
        #[arg(long)]
        market: Option<PathBuf>,
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Compare a model with its ground truth on a widened strike grid.
    Extrapolate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        xi: PathBuf,
        #[arg(long)]
        factor: Option<f64>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = RunConfig::load(g.config.as_deref(), g.preset)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = g.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::GenMarket { xi, maturities } => gen_market(g, &cfg, xi.as_deref(), *maturities),
        Command::Calibrate { market } => calibrate(g, &cfg, market),
        Command::Robust { xi, maturities } => robust(g, &cfg, xi.as_deref(), *maturities),
        Command::StatTest { samples, replay } => stat_test(g, &cfg, *samples, *replay),
        Command::Price { model, market, paths } => price(g, &cfg, model, market.as_deref(), *paths),
        Command::Extrapolate { model, xi, factor } => extrapolate(g, &cfg, model, xi, *factor),
    })
}

fn truncated(cfg: &RunConfig, n: Option<usize>) -> Result<RunConfig> {
    let mut c = cfg.clone();
    if let Some(n) = n {
        if n == 0 || n > c.market.grid.maturities.len() {
            return Err(CliError::Usage(format!("--maturities must be in 1..={}", c.market.grid.maturities.len())));
        }
        c.market.grid = c.market.grid.truncated(n);
    }
    Ok(c)
}

fn xi_or_sampled(path: Option<&Path>, seed: u64) -> Result<XiParams> {
    match path {
        Some(p) => load_xi(p),
        None => Ok(sample_xi(derive_seed(seed, &[0]))),
    }
}

fn gen_market(g: &Global, cfg: &RunConfig, xi: Option<&Path>, maturities: Option<usize>) -> Result<()> {
    let cfg = truncated(cfg, maturities)?;
    let xi = xi_or_sampled(xi, g.seed)?;
    let market = make_market(&cfg, &xi, derive_seed(g.seed, &[1]))?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("market.csv"));
    save_market(&out, &market)?;
    save_json(&xi_sidecar(&out), &xi)?;
    if market.has_failures() && !g.quiet {
        eprintln!("warning: some implied vols could not be inverted (NaN in {})", out.display());
    }
    Ok(())
}

/// Writes model files, IV table and report into `dir`.
fn write_fit(g: &Global, cfg: &RunConfig, command: &str, dir: &Path, fit: &SurfaceFit, inputs: Vec<Artifact>) -> Result<()> {
    let [bin, json] = save_model(dir, &fit.model, &fit.sabr)?;
    let table = dir.join("iv_table.csv");
    write_csv(&table, &iv_table(&fit.report))?;
    let artifacts = [bin, json, table].iter().map(|p| Artifact::of(p, dir)).collect::<Result<Vec<_>>>()?;
    let report = build_report(command, g.seed, cfg, inputs, artifacts, fit.sabr, &fit.report)?;
    save_json(&dir.join("report.json"), &report)
}

fn market_artifacts(paths: &[PathBuf], base: &Path) -> Result<Vec<Artifact>> {
    paths.iter().map(|p| Artifact::of(p, base)).collect()
}

fn calibrate(g: &Global, cfg: &RunConfig, market_path: &Path) -> Result<()> {
    let market = load_market(market_path)?;
    let mut cfg = cfg.clone();
    cfg.market.grid = grid_of(&market);
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("model"));
    let mut clock = Clock::new("calibrate", !g.quiet);
    let fit = lsv_core::calibrate::calibrate_surface(&market, &cfg.calib, g.seed, &mut clock)?;
    let base = market_path.parent().unwrap_or(Path::new(""));
    write_fit(g, &cfg, "calibrate", &dir, &fit, market_artifacts(&[market_path.to_path_buf()], base)?)?;
    if fit.report.any_skipped() {
        eprintln!("warning: some slices were skipped, see {}", dir.join("report.json").display());
    }
    Ok(())
}

/// Grid description of a market file (strikes need not be evenly spaced,
/// the bounds are informational).
fn grid_of(market: &SmileGrid) -> lsv_core::ground_truth::GridSpec {
    lsv_core::ground_truth::GridSpec {
        spot: market.spot,
        maturities: market.maturities(),
        log_strike_bounds: market.slices.iter().map(|s| s.strikes.last().map_or(0.0, |k| k.ln().abs())).collect(),
        n_strikes: market.slices.first().map_or(0, SmileSlice::len),
    }
}

fn robust(g: &Global, cfg: &RunConfig, xi: Option<&Path>, maturities: Option<usize>) -> Result<()> {
    let cfg = truncated(cfg, maturities)?;
    let xi = xi_or_sampled(xi, g.seed)?;
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("robust"));
    let (xis, markets) = robust_markets(&cfg, &xi, derive_seed(g.seed, &[1]))?;
    let mut inputs = Vec::new();
    save_json(&dir.join("xi.json"), &xi)?;
    for (m, (x, market)) in xis.iter().zip(&markets).enumerate() {
        let p = dir.join(format!("markets/market_{m}.csv"));
        save_market(&p, market)?;
        save_json(&xi_sidecar(&p), x)?;
        inputs.push(Artifact::of(&p, &dir)?);
    }
    let mut clock = Clock::new("robust", !g.quiet);
    let fit = fit_robust_or_skip(&markets, &cfg, derive_seed(g.seed, &[2]), &mut clock).map_err(|e| {
        CliError::Compute(lsv_core::Error::InvalidInput(format!("robust calibration skipped: {e}")))
    })?;
    write_fit(g, &cfg, "robust", &dir, &fit, inputs)
}

fn stat_test(g: &Global, cfg: &RunConfig, samples: Option<usize>, replay: Option<usize>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = samples {
        if s == 0 {
            return Err(CliError::Usage("--samples must be positive".into()));
        }
        cfg.samples = s;
    }
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("stat-test"));
    let runs = match replay {
        Some(m) => vec![run_one(&cfg, m, run_seed(g.seed, m), !g.quiet)],
        None => run_stat_test(&cfg, g.seed, !g.quiet),
    };
    let rows: Vec<ErrorRow> = runs.iter().flat_map(|r| r.error_rows()).collect();
    let (errors, summary_path) = match replay {
        Some(m) => (dir.join(format!("replay_{m}_errors.csv")), dir.join(format!("replay_{m}_summary.json"))),
        None => (dir.join("errors.csv"), dir.join("summary.json")),
    };
    write_csv(&errors, &rows)?;
    for r in &runs {
        if let Ok(fit) = &r.result {
            let run_dir = dir.join(format!("runs/run_{:03}", r.run_id));
            save_model(&run_dir, &fit.model, &fit.sabr)?;
            save_json(&run_dir.join("xi.json"), &r.xi)?;
        }
    }
    let summary = StatSummary::from_runs(g.seed, &runs);
    save_json(&summary_path, &summary)?;
    save_json(&dir.join("config.json"), &cfg)?;
    if !g.quiet {
        eprintln!("{} of {} runs completed, {} skipped", summary.completed, summary.samples, summary.skip_count);
    }
    Ok(())
}

fn price(g: &Global, cfg: &RunConfig, model_dir: &Path, market: Option<&Path>, paths: Option<usize>) -> Result<()> {
    let (model, sabr) = load_model(model_dir)?;
    let grid = match market {
        Some(p) => {
            let m = load_market(p)?;
            return price_on(g, cfg, &model, &sabr, &m, paths);
        }
        None => cfg.market.grid.truncated(model.n_intervals()),
    };
    let n = paths.unwrap_or(cfg.calib.eval_paths);
    let smiles = eval_model_ivs(&sabr, &model, &grid, n, cfg.calib.dt, derive_seed(g.seed, &[4]), cfg.calib.hedge)?;
    write_prices(g, &smiles)
}

fn price_on(
    g: &Global,
    cfg: &RunConfig,
    model: &lsv_core::lsv::LeverageModel,
    sabr: &lsv_core::lsv::SabrParams,
    market: &SmileGrid,
    paths: Option<usize>,
) -> Result<()> {
    let strips = market
        .slices
        .iter()
        .map(|s| {
            let idx = model
                .maturities()
                .iter()
                .position(|&m| (m - s.maturity).abs() <= 1e-12)
                .ok_or_else(|| CliError::Usage(format!("maturity {} is not on the model grid", s.maturity)))?;
            Ok(lsv_core::lsv::Strip::otm(idx, &s.strikes, sabr.s0))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = paths.unwrap_or(cfg.calib.eval_paths);
    let sim = lsv_core::lsv::SimConfig { n_paths: n, dt: cfg.calib.dt, seed: derive_seed(g.seed, &[4]), hedge: cfg.calib.hedge };
    let smiles = lsv_core::calibrate::eval_strips(sabr, model, &strips, &sim)?;
    write_prices(g, &smiles)
}

fn write_prices(g: &Global, smiles: &[lsv_core::calibrate::ModelSmile]) -> Result<()> {
    let grid = SmileGrid {
        spot: 1.0,
        slices: smiles
            .iter()
            .map(|s| SmileSlice {
                maturity: s.maturity,
                strikes: s.strikes.clone(),
                prices: s.prices.clone(),
                implied_vols: s.implied_vols.clone(),
                std_errs: s.price_std_errs.clone(),
                iv_failed: s.iv_failed.clone(),
            })
            .collect(),
    };
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("prices.csv"));
    save_market(&out, &grid)
}

fn extrapolate(g: &Global, cfg: &RunConfig, model_dir: &Path, xi: &Path, factor: Option<f64>) -> Result<()> {
    let (model, sabr) = load_model(model_dir)?;
    let xi = load_xi(xi)?;
    let factor = factor.unwrap_or(cfg.extrapolation.factor);
    if !(factor > 0.0) {
        return Err(CliError::Usage("--factor must be positive".into()));
    }
    let rep = extrapolation_report(&model, &sabr, &xi, factor, cfg, g.seed)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("extrapolation.csv"));
    write_csv(&out, &rep.rows)?;
    save_json(&out.with_extension("summary.json"), &rep)?;
    Ok(())
}

/// Reads an errors table written by `stat-test`.
pub fn read_errors(path: &Path) -> Result<Vec<ErrorRow>> {
    read_csv(path)
}
