//! SABR local stochastic volatility model with a neural leverage function.
//!
//! In log-price coordinates
//!
//! ```text
//! dX = alpha L(t, X) dW - 0.5 alpha^2 L^2 dt,   d alpha = nu alpha dB,   d<W, B> = rho dt
//! ```
//!
//! `X` is stepped by Euler, `alpha` by its exact lognormal solution. Paths
//! are simulated in lanes of [`LANES`] so the leverage network runs batched.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{InitScale, LaneBuffers, MlpParams, MlpSpec, Tape, Var};
use crate::bs::call_delta;
use crate::error::{Error, Result};
use crate::exec::{map_blocks, DEFAULT_BLOCK};
use crate::grid::TimeGrid;
use crate::hedging::{CvStats, HedgeMode};
use crate::math::{exp, ln, sqrt};
use crate::rng::PathRng;
use crate::stats::CoMoments;

/// Paths advanced together through one network evaluation.
pub const LANES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SabrParams {
    pub nu: f64,
    pub rho: f64,
    pub alpha0: f64,
    pub s0: f64,
}

impl SabrParams {
    pub fn new(nu: f64, rho: f64, alpha0: f64) -> Result<Self> {
        let p = SabrParams { nu, rho, alpha0, s0: 1.0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.nu.is_finite() || !(self.rho.abs() <= 1.0) || !(self.alpha0 > 0.0) || !self.alpha0.is_finite() {
            return Err(Error::invalid("SABR parameters need finite nu, |rho| <= 1, alpha0 > 0"));
        }
        if !(self.s0 > 0.0) {
            return Err(Error::invalid("spot must be positive"));
        }
        Ok(())
    }
}

/// `L(t, x) = 1 + F_i(x)` for `t` in `[T_{i-1}, T_i)`, one network per
/// maturity interval. A model without networks is the flat leverage `L = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeverageModel {
    maturities: Vec<f64>,
    spec: MlpSpec,
    nets: Vec<MlpParams>,
    clamp_min: Option<f64>,
}

impl LeverageModel {
    /// Random hidden layers and zero output layers, so `L = 1` initially.
    pub fn new(spec: MlpSpec, maturities: &[f64], seed: u64) -> Result<Self> {
        check_maturities(maturities)?;
        if spec.input_dim != 1 || spec.output_dim != 1 {
            return Err(Error::invalid("leverage networks map log-price to a scalar"));
        }
        let init = InitScale { output_scale: 0.0, ..InitScale::default() };
        let nets = (0..maturities.len())
            .map(|i| MlpParams::init_scaled(spec.clone(), crate::rng::derive_seed(seed, &[i as u64]), init))
            .collect::<Result<Vec<_>>>()?;
        Ok(LeverageModel { maturities: maturities.to_vec(), spec, nets, clamp_min: None })
    }

    pub fn flat(maturities: &[f64]) -> Result<Self> {
        check_maturities(maturities)?;
        Ok(LeverageModel { maturities: maturities.to_vec(), spec: MlpSpec::leverage(1, 1), nets: Vec::new(), clamp_min: None })
    }

    pub fn from_parts(spec: MlpSpec, maturities: &[f64], flats: Vec<Vec<f64>>) -> Result<Self> {
        check_maturities(maturities)?;
        if flats.len() != maturities.len() {
            return Err(Error::DimensionMismatch { expected: maturities.len(), got: flats.len() });
        }
        let nets = flats.into_iter().map(|f| MlpParams::from_flat(spec.clone(), f)).collect::<Result<Vec<_>>>()?;
        Ok(LeverageModel { maturities: maturities.to_vec(), spec, nets, clamp_min: None })
    }

    /// Floors `L` at `min` during simulation; off by default.
    pub fn with_clamp(mut self, min: Option<f64>) -> Self {
        self.clamp_min = min;
        self
    }

    pub fn clamp_min(&self) -> Option<f64> {
        self.clamp_min
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn is_flat(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn n_intervals(&self) -> usize {
        self.maturities.len()
    }

    pub fn net(&self, i: usize) -> Option<&MlpParams> {
        self.nets.get(i)
    }

    pub fn net_mut(&mut self, i: usize) -> Option<&mut MlpParams> {
        self.nets.get_mut(i)
    }

    pub fn nets(&self) -> &[MlpParams] {
        &self.nets
    }

    /// Interval index of `t` under the convention `[T_{i-1}, T_i)`.
    pub fn interval_at(&self, t: f64) -> Result<usize> {
        let horizon = *self.maturities.last().unwrap();
        if !(t >= 0.0) || t >= horizon {
            return Err(Error::BeyondHorizon { t, horizon });
        }
        Ok(self.maturities.partition_point(|&m| m <= t))
    }

    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        let i = self.interval_at(t)?;
        let l = match self.nets.get(i) {
            Some(net) => 1.0 + net.eval(&[x])?[0],
            None => 1.0,
        };
        Ok(self.apply_clamp(l))
    }

    #[inline]
    fn apply_clamp(&self, l: f64) -> f64 {
        match self.clamp_min {
            Some(m) if l < m => m,
            _ => l,
        }
    }

    #[inline]
    fn clamped(&self, l: f64) -> bool {
        self.clamp_min.is_some_and(|m| l < m)
    }
}

fn check_maturities(m: &[f64]) -> Result<()> {
    if m.is_empty() || m[0] <= 0.0 || m.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("maturities must be positive and strictly increasing"));
    }
    Ok(())
}

/// Vanilla options sharing one maturity of the model grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strip {
    /// Index into the model maturities.
    pub maturity: usize,
    pub strikes: Vec<f64>,
    pub is_call: Vec<bool>,
}

impl Strip {
    pub fn calls(maturity: usize, strikes: &[f64]) -> Self {
        Strip { maturity, strikes: strikes.to_vec(), is_call: vec![true; strikes.len()] }
    }

    /// Calls up to the spot and puts above it.
    pub fn otm(maturity: usize, strikes: &[f64], spot: f64) -> Self {
        Strip { maturity, strikes: strikes.to_vec(), is_call: strikes.iter().map(|&k| k <= spot).collect() }
    }

    pub fn len(&self) -> usize {
        self.strikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strikes.is_empty()
    }

    #[inline]
    pub fn payoff(&self, j: usize, s: f64) -> f64 {
        if self.is_call[j] {
            (s - self.strikes[j]).max(0.0)
        } else {
            (self.strikes[j] - s).max(0.0)
        }
    }

    /// Derivative of the payoff with respect to the terminal log-price.
    #[inline]
    pub fn payoff_dx(&self, j: usize, s: f64) -> f64 {
        if self.is_call[j] {
            if s > self.strikes[j] { s } else { 0.0 }
        } else if s < self.strikes[j] {
            -s
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub hedge: HedgeMode,
}

/// Hedge integrand used by the simulator. `Neural` holds one network per
/// option (flattened across strips) with inputs `(t, x, alpha)`.
#[derive(Debug, Clone, Copy)]
pub enum Hedger<'a> {
    None,
    BsRunning,
    BsAlpha,
    Neural(&'a [MlpParams]),
}

impl Hedger<'_> {
    fn from_mode(mode: HedgeMode) -> Result<Self> {
        match mode {
            HedgeMode::None => Ok(Hedger::None),
            HedgeMode::BsDeltaRunning => Ok(Hedger::BsRunning),
            HedgeMode::BsDeltaAlpha => Ok(Hedger::BsAlpha),
            HedgeMode::Neural => Err(Error::invalid("neural hedging needs trained networks")),
        }
    }
}

/// Terminal values of one strip's paths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StripPaths {
    pub log_spot: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `[option][path]`
    pub payoffs: Vec<Vec<f64>>,
    /// `[option][path]`
    pub hedges: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub n_paths: usize,
    pub strips: Vec<StripPaths>,
}

/// Per-step state kept for the reverse sweep.
#[derive(Debug, Clone, Default)]
struct Record {
    start: usize,
    end: usize,
    x: Vec<f64>,
    alpha: Vec<f64>,
    z: Vec<f64>,
}

struct Lanes {
    n: usize,
    x: Vec<f64>,
    x_next: Vec<f64>,
    s: Vec<f64>,
    s_next: Vec<f64>,
    alpha: Vec<f64>,
    alpha_prev: Vec<f64>,
    lev: Vec<f64>,
    vol: Vec<f64>,
    acc: Vec<f64>,
    rngs: Vec<PathRng>,
    buf: LaneBuffers,
    hbuf: LaneBuffers,
    hin: Vec<f64>,
}

struct Kernel<'a> {
    sabr: SabrParams,
    model: &'a LeverageModel,
    tg: TimeGrid,
    strips: &'a [Strip],
    log_strikes: Vec<Vec<f64>>,
    offsets: Vec<usize>,
    n_opts: usize,
    hedger: Hedger<'a>,
    seed: u64,
    n_steps: usize,
}

impl<'a> Kernel<'a> {
    fn new(sabr: SabrParams, model: &'a LeverageModel, strips: &'a [Strip], dt: f64, seed: u64, hedger: Hedger<'a>) -> Result<Self> {
        sabr.validate()?;
        let tg = TimeGrid::new(dt, model.maturities())?;
        if strips.is_empty() {
            return Err(Error::invalid("nothing to simulate"));
        }
        let mut offsets = Vec::with_capacity(strips.len());
        let mut n_opts = 0;
        for s in strips {
            if s.maturity >= model.n_intervals() {
                return Err(Error::Grid("strip maturity is not on the model grid".into()));
            }
            if s.strikes.len() != s.is_call.len() || s.strikes.iter().any(|k| !(*k > 0.0)) {
                return Err(Error::invalid("invalid strip"));
            }
            offsets.push(n_opts);
            n_opts += s.len();
        }
        if let Hedger::Neural(nets) = hedger {
            if nets.len() != n_opts || nets.iter().any(|n| n.spec().input_dim != 3 || n.spec().output_dim != 1) {
                return Err(Error::invalid("need one (t, x, alpha) -> position network per option"));
            }
        }
        let n_steps = strips.iter().map(|s| tg.boundary(s.maturity)).max().unwrap();
        let log_strikes = strips.iter().map(|s| s.strikes.iter().map(|&k| ln(k)).collect()).collect();
        Ok(Kernel { sabr, model, tg, strips, log_strikes, offsets, n_opts, hedger, seed, n_steps })
    }

    fn lanes(&self) -> Lanes {
        let z = || vec![0.0; LANES];
        Lanes {
            n: 0,
            x: z(),
            x_next: z(),
            s: z(),
            s_next: z(),
            alpha: z(),
            alpha_prev: z(),
            lev: z(),
            vol: z(),
            acc: vec![0.0; self.n_opts * LANES],
            rngs: Vec::with_capacity(LANES),
            buf: LaneBuffers::new(),
            hbuf: LaneBuffers::new(),
            hin: vec![0.0; 3 * LANES],
        }
    }

    fn acc(&self, ws: &Lanes, strip: usize, j: usize, l: usize) -> f64 {
        ws.acc[(self.offsets[strip] + j) * LANES + l]
    }

    /// Advances paths `first..first + n` to the last strip maturity, calling
    /// `on_maturity(strip, lanes)` when a strip's maturity is reached.
    fn run(
        &self,
        first: usize,
        n: usize,
        ws: &mut Lanes,
        mut record: Option<&mut Record>,
        mut on_maturity: impl FnMut(usize, &Lanes),
    ) -> Result<()> {
        debug_assert!(n <= LANES);
        let dt = self.tg.dt();
        let sqdt = sqrt(dt);
        let hdt = 0.5 * dt;
        let nu = self.sabr.nu;
        let a_drift = -0.5 * nu * nu * dt;
        let a_vol = nu * sqdt;
        let rho = self.sabr.rho;
        let rho_bar = sqrt((1.0 - rho * rho).max(0.0));
        let x0 = ln(self.sabr.s0);

        ws.n = n;
        ws.x[..n].fill(x0);
        ws.s[..n].fill(self.sabr.s0);
        ws.alpha[..n].fill(self.sabr.alpha0);
        ws.acc.fill(0.0);
        ws.rngs.clear();
        ws.rngs.extend((first..first + n).map(|p| PathRng::new(self.seed, p as u64)));
        if let Some(r) = record.as_deref_mut() {
            let len = (r.end - r.start) * n;
            r.x.resize(len, 0.0);
            r.alpha.resize(len, 0.0);
            r.z.resize(len, 0.0);
        }

        for k in 0..self.n_steps {
            match self.model.net(self.tg.interval_of_step(k)) {
                Some(net) => {
                    net.forward_lanes(&mut ws.buf, &ws.x[..n], n);
                    let out = ws.buf.output();
                    for l in 0..n {
                        ws.lev[l] = self.model.apply_clamp(1.0 + out[l]);
                    }
                }
                None => ws.lev[..n].fill(1.0),
            }
            let slot = record.as_deref().and_then(|r| (k >= r.start && k < r.end).then(|| (k - r.start) * n));
            let mut bad = false;
            for l in 0..n {
                let z1 = ws.rngs[l].normal();
                let z2 = ws.rngs[l].normal();
                let vol = ws.alpha[l] * ws.lev[l];
                if let (Some(base), Some(r)) = (slot, record.as_deref_mut()) {
                    r.x[base + l] = ws.x[l];
                    r.alpha[base + l] = ws.alpha[l];
                    r.z[base + l] = z1;
                }
                let sz = sqdt * z1;
                let x_next = (ws.x[l] + sz * vol) - hdt * (vol * vol);
                let zb = rho * z1 + rho_bar * z2;
                ws.alpha_prev[l] = ws.alpha[l];
                ws.alpha[l] *= exp(a_drift + a_vol * zb);
                ws.vol[l] = vol;
                ws.x_next[l] = x_next;
                ws.s_next[l] = exp(x_next);
                bad |= !x_next.is_finite();
            }
            if bad {
                return Err(Error::NonFinite { step: k });
            }
            self.hedge_step(k, ws);
            core::mem::swap(&mut ws.x, &mut ws.x_next);
            core::mem::swap(&mut ws.s, &mut ws.s_next);
            for (si, strip) in self.strips.iter().enumerate() {
                if k + 1 == self.tg.boundary(strip.maturity) {
                    on_maturity(si, ws);
                }
            }
        }
        Ok(())
    }

    /// Adds `h_k (S_{k+1} - S_k)` to every live option's accumulator, with
    /// `h_k` evaluated at the start of the step.
    fn hedge_step(&self, k: usize, ws: &mut Lanes) {
        let n = ws.n;
        let t = self.tg.time(k);
        match self.hedger {
            Hedger::None => {}
            Hedger::BsRunning | Hedger::BsAlpha => {
                let by_alpha = matches!(self.hedger, Hedger::BsAlpha);
                for (si, strip) in self.strips.iter().enumerate() {
                    if k >= self.tg.boundary(strip.maturity) {
                        continue;
                    }
                    let sq_tau = sqrt(self.tg.maturities()[strip.maturity] - t);
                    for l in 0..n {
                        let vol = if by_alpha { ws.alpha_prev[l] } else { ws.vol[l] };
                        let sd = vol * sq_tau;
                        let x = ws.x[l];
                        let ds = ws.s_next[l] - ws.s[l];
                        for (j, lk) in self.log_strikes[si].iter().enumerate() {
                            let mut d = call_delta(x - lk, sd);
                            if !strip.is_call[j] {
                                d -= 1.0;
                            }
                            ws.acc[(self.offsets[si] + j) * LANES + l] += d * ds;
                        }
                    }
                }
            }
            Hedger::Neural(nets) => {
                for l in 0..n {
                    ws.hin[l] = t;
                    ws.hin[n + l] = ws.x[l];
                    ws.hin[2 * n + l] = ws.alpha_prev[l];
                }
                for (si, strip) in self.strips.iter().enumerate() {
                    if k >= self.tg.boundary(strip.maturity) {
                        continue;
                    }
                    for j in 0..strip.len() {
                        let o = self.offsets[si] + j;
                        nets[o].forward_lanes(&mut ws.hbuf, &ws.hin[..3 * n], n);
                        let h = ws.hbuf.output();
                        for l in 0..n {
                            ws.acc[o * LANES + l] += h[l] * (ws.s_next[l] - ws.s[l]);
                        }
                    }
                }
            }
        }
    }
}

/// Simulates `cfg.n_paths` paths and keeps every terminal value, payoff and
/// hedge integral. Memory grows with paths times options; use
/// [`price_strips`] for large runs.
pub fn simulate_lsv(sabr: &SabrParams, model: &LeverageModel, strips: &[Strip], cfg: &SimConfig) -> Result<PathBatch> {
    simulate_lsv_with(sabr, model, strips, cfg, Hedger::from_mode(cfg.hedge)?)
}

pub fn simulate_lsv_with(
    sabr: &SabrParams,
    model: &LeverageModel,
    strips: &[Strip],
    cfg: &SimConfig,
    hedger: Hedger<'_>,
) -> Result<PathBatch> {
    if cfg.n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    let kern = Kernel::new(*sabr, model, strips, cfg.dt, cfg.seed, hedger)?;
    let blocks = map_blocks(cfg.n_paths, LANES, |_, range| {
        let mut ws = kern.lanes();
        let mut out: Vec<StripPaths> = strips
            .iter()
            .map(|s| StripPaths { payoffs: vec![Vec::new(); s.len()], hedges: vec![Vec::new(); s.len()], ..Default::default() })
            .collect();
        kern.run(range.start, range.len(), &mut ws, None, |si, ws| {
            let sp = &mut out[si];
            let strip = &strips[si];
            for l in 0..ws.n {
                sp.log_spot.push(ws.x[l]);
                sp.alpha.push(ws.alpha[l]);
                for j in 0..strip.len() {
                    sp.payoffs[j].push(strip.payoff(j, ws.s[l]));
                    sp.hedges[j].push(kern.acc(ws, si, j, l));
                }
            }
        })?;
        Ok::<_, Error>(out)
    });
    let mut strips_out: Vec<StripPaths> = strips
        .iter()
        .map(|s| StripPaths { payoffs: vec![Vec::new(); s.len()], hedges: vec![Vec::new(); s.len()], ..Default::default() })
        .collect();
    for b in blocks {
        for (dst, src) in strips_out.iter_mut().zip(b?) {
            dst.log_spot.extend(src.log_spot);
            dst.alpha.extend(src.alpha);
            for (d, s) in dst.payoffs.iter_mut().zip(src.payoffs) {
                d.extend(s);
            }
            for (d, s) in dst.hedges.iter_mut().zip(src.hedges) {
                d.extend(s);
            }
        }
    }
    Ok(PathBatch { n_paths: cfg.n_paths, strips: strips_out })
}

/// Streaming payoff/hedge statistics per option, `[strip][option]`, with
/// memory independent of the path count.
pub fn price_strips(sabr: &SabrParams, model: &LeverageModel, strips: &[Strip], cfg: &SimConfig) -> Result<Vec<Vec<CvStats>>> {
    price_strips_with(sabr, model, strips, cfg, Hedger::from_mode(cfg.hedge)?)
}

pub fn price_strips_with(
    sabr: &SabrParams,
    model: &LeverageModel,
    strips: &[Strip],
    cfg: &SimConfig,
    hedger: Hedger<'_>,
) -> Result<Vec<Vec<CvStats>>> {
    if cfg.n_paths < 2 {
        return Err(Error::invalid("pricing needs at least two paths"));
    }
    let kern = Kernel::new(*sabr, model, strips, cfg.dt, cfg.seed, hedger)?;
    let fresh = || strips.iter().map(|s| vec![CoMoments::default(); s.len()]).collect::<Vec<_>>();
    let blocks = map_blocks(cfg.n_paths, DEFAULT_BLOCK, |_, range| {
        let mut ws = kern.lanes();
        let mut m = fresh();
        let mut start = range.start;
        while start < range.end {
            let n = LANES.min(range.end - start);
            kern.run(start, n, &mut ws, None, |si, ws| {
                let strip = &strips[si];
                for l in 0..ws.n {
                    for j in 0..strip.len() {
                        m[si][j].push(strip.payoff(j, ws.s[l]), kern.acc(ws, si, j, l));
                    }
                }
            })?;
            start += n;
        }
        Ok::<_, Error>(m)
    });
    let mut total = fresh();
    for b in blocks {
        for (dst, src) in total.iter_mut().zip(b?) {
            dst.iter_mut().zip(&src).for_each(|(a, b)| a.merge(b));
        }
    }
    Ok(total.iter().map(|s| s.iter().map(CvStats::from_moments).collect()).collect())
}

/// Result of a forward pass with a reverse sweep through the trained
/// interval.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPass {
    pub n_paths: usize,
    pub payoff_mean: Vec<f64>,
    pub hedge_mean: Vec<f64>,
    /// Gradient of the outer loss with respect to the interval's network.
    pub grad: Vec<f64>,
}

struct ForwardBlock {
    rec: Record,
    s_t: Vec<f64>,
    payoff_sum: Vec<f64>,
    hedge_sum: Vec<f64>,
}

/// Pathwise gradient of `loss(mean payoff_j, mean hedge_j)` with respect to
/// the network of the strip's own interval; hedge integrals are treated as
/// constants and earlier intervals are frozen.
///
/// `outer` receives the sample means of payoffs and hedges and returns the
/// loss derivative with respect to each mean payoff. It runs once, between
/// the forward and the reverse sweep.
pub fn pathwise_gradient<R>(
    sabr: &SabrParams,
    model: &LeverageModel,
    strip: &Strip,
    cfg: &SimConfig,
    outer: impl FnOnce(&[f64], &[f64]) -> Result<(Vec<f64>, R)>,
) -> Result<(AdjointPass, R)> {
    let hedger = Hedger::from_mode(cfg.hedge)?;
    let strips = core::slice::from_ref(strip);
    let kern = Kernel::new(*sabr, model, strips, cfg.dt, cfg.seed, hedger)?;
    let net = model.net(strip.maturity).ok_or_else(|| Error::invalid("flat leverage has no parameters"))?;
    if cfg.n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    let (start, end) = (kern.tg.interval_start(strip.maturity), kern.tg.boundary(strip.maturity));
    let m = strip.len();

    let forward = map_blocks(cfg.n_paths, LANES, |_, range| {
        let mut ws = kern.lanes();
        let mut rec = Record { start, end, ..Default::default() };
        let mut blk = ForwardBlock { rec: Record::default(), s_t: Vec::new(), payoff_sum: vec![0.0; m], hedge_sum: vec![0.0; m] };
        kern.run(range.start, range.len(), &mut ws, Some(&mut rec), |_, ws| {
            for l in 0..ws.n {
                blk.s_t.push(ws.s[l]);
                for j in 0..m {
                    blk.payoff_sum[j] += strip.payoff(j, ws.s[l]);
                    blk.hedge_sum[j] += kern.acc(ws, 0, j, l);
                }
            }
        })?;
        blk.rec = rec;
        Ok::<_, Error>(blk)
    });
    let forward: Vec<ForwardBlock> = forward.into_iter().collect::<Result<_>>()?;
    let n = cfg.n_paths as f64;
    let mut payoff_mean = vec![0.0; m];
    let mut hedge_mean = vec![0.0; m];
    for b in &forward {
        for j in 0..m {
            payoff_mean[j] += b.payoff_sum[j];
            hedge_mean[j] += b.hedge_sum[j];
        }
    }
    payoff_mean.iter_mut().chain(hedge_mean.iter_mut()).for_each(|v| *v /= n);
    let (dmean, extra) = outer(&payoff_mean, &hedge_mean)?;
    if dmean.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: dmean.len() });
    }
    let seeds: Vec<f64> = dmean.iter().map(|d| d / n).collect();

    let dt = kern.tg.dt();
    let sqdt = sqrt(dt);
    let partial = map_blocks(forward.len(), 8, |_, range| {
        let mut grad = vec![0.0; net.len()];
        let mut buf = LaneBuffers::new();
        let mut lambda = vec![0.0; LANES];
        let mut cot = vec![0.0; LANES];
        let mut ig = vec![0.0; LANES];
        for b in &forward[range] {
            let lanes = b.s_t.len();
            for l in 0..lanes {
                lambda[l] = (0..m).map(|j| seeds[j] * strip.payoff_dx(j, b.s_t[l])).sum();
            }
            for k in (start..end).rev() {
                let base = (k - start) * lanes;
                let xs = &b.rec.x[base..base + lanes];
                net.forward_lanes(&mut buf, xs, lanes);
                let out = buf.output();
                for l in 0..lanes {
                    let lev = 1.0 + out[l];
                    let a = b.rec.alpha[base + l];
                    cot[l] = if model.clamped(lev) { 0.0 } else { lambda[l] * a * (sqdt * b.rec.z[base + l] - a * lev * dt) };
                }
                net.backward_lanes(&mut buf, xs, &cot[..lanes], &mut grad, Some(&mut ig[..lanes]));
                for l in 0..lanes {
                    lambda[l] += ig[l];
                }
            }
        }
        grad
    });
    let mut grad = vec![0.0; net.len()];
    for g in partial {
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((AdjointPass { n_paths: cfg.n_paths, payoff_mean, hedge_mean, grad }, extra))
}

/// One path recorded on a tape. Every network parameter is a leaf
/// (`theta[i]` for interval `i`); hedge integrals are plain values.
#[derive(Debug, Clone)]
pub struct TapedPath {
    pub theta: Vec<Vec<Var>>,
    pub log_spot: Var,
    pub payoffs: Vec<Var>,
    pub hedges: Vec<f64>,
    pub alpha: f64,
}

/// The same scheme as [`simulate_lsv`] for a single path, unrolled on
/// `tape` (which is cleared first). Forward values agree bitwise.
pub fn simulate_path_on_tape(
    sabr: &SabrParams,
    model: &LeverageModel,
    strip: &Strip,
    dt: f64,
    seed: u64,
    path: usize,
    hedge: HedgeMode,
    tape: &mut Tape,
) -> Result<TapedPath> {
    let hedger = Hedger::from_mode(hedge)?;
    let kern = Kernel::new(*sabr, model, core::slice::from_ref(strip), dt, seed, hedger)?;
    tape.clear();
    let theta: Vec<Vec<Var>> = model.nets().iter().map(|n| n.register(tape, true)).collect();
    let sqdt = sqrt(dt);
    let hdt = 0.5 * dt;
    let nu = sabr.nu;
    let a_drift = -0.5 * nu * nu * dt;
    let a_vol = nu * sqdt;
    let rho_bar = sqrt((1.0 - sabr.rho * sabr.rho).max(0.0));
    let mut rng = PathRng::new(seed, path as u64);
    let mut x = tape.constant(ln(sabr.s0));
    let mut s = sabr.s0;
    let mut alpha = sabr.alpha0;
    let mut hedges = vec![0.0; strip.len()];
    let end = kern.tg.boundary(strip.maturity);
    let tau_end = kern.tg.maturities()[strip.maturity];
    let log_strikes = &kern.log_strikes[0];

    for k in 0..end {
        let lev = match model.net(kern.tg.interval_of_step(k)) {
            Some(net) => {
                let f = net.eval_on_tape(tape, &theta[kern.tg.interval_of_step(k)], &[x])?[0];
                let l = tape.add_const(f, 1.0);
                match model.clamp_min {
                    Some(m) if tape.value(l) < m => tape.constant(m),
                    _ => l,
                }
            }
            None => tape.constant(1.0),
        };
        let z1 = rng.normal();
        let z2 = rng.normal();
        let a = tape.constant(alpha);
        let vol = tape.mul(a, lev);
        let sz = sqdt * z1;
        let diff = tape.scale(sz, vol);
        let vv = tape.square(vol);
        let drift = tape.scale(hdt, vv);
        let moved = tape.add(x, diff);
        let x_next = tape.sub(moved, drift);
        let zb = sabr.rho * z1 + rho_bar * z2;
        let alpha_prev = alpha;
        alpha *= exp(a_drift + a_vol * zb);
        let xv = tape.value(x_next);
        if !xv.is_finite() {
            return Err(Error::NonFinite { step: k });
        }
        let s_next = exp(xv);
        if hedge != HedgeMode::None {
            let hv = if hedge == HedgeMode::BsDeltaAlpha { alpha_prev } else { tape.value(vol) };
            let sd = hv * sqrt(tau_end - kern.tg.time(k));
            let x0 = tape.value(x);
            for (j, lk) in log_strikes.iter().enumerate() {
                let mut d = call_delta(x0 - lk, sd);
                if !strip.is_call[j] {
                    d -= 1.0;
                }
                hedges[j] += d * (s_next - s);
            }
        }
        x = x_next;
        s = s_next;
    }
    let st = tape.exp(x);
    let payoffs = (0..strip.len())
        .map(|j| {
            let k = strip.strikes[j];
            let inner = if strip.is_call[j] {
                tape.add_const(st, -k)
            } else {
                let neg = tape.neg(st);
                tape.add_const(neg, k)
            };
            tape.relu(inner)
        })
        .collect();
    Ok(TapedPath { theta, log_spot: x, payoffs, hedges, alpha })
}

/// Reference implementation of [`pathwise_gradient`] that records each path
/// on a tape. Slow; used to cross-check the reverse sweep.
pub fn pathwise_gradient_tape<R>(
    sabr: &SabrParams,
    model: &LeverageModel,
    strip: &Strip,
    cfg: &SimConfig,
    outer: impl FnOnce(&[f64], &[f64]) -> Result<(Vec<f64>, R)>,
) -> Result<(AdjointPass, R)> {
    if model.net(strip.maturity).is_none() {
        return Err(Error::invalid("flat leverage has no parameters"));
    }
    let mut tape = Tape::new();
    let m = strip.len();
    let n = cfg.n_paths as f64;
    let mut paths = Vec::with_capacity(cfg.n_paths);
    let mut payoff_mean = vec![0.0; m];
    let mut hedge_mean = vec![0.0; m];
    for p in 0..cfg.n_paths {
        let tp = simulate_path_on_tape(sabr, model, strip, cfg.dt, cfg.seed, p, cfg.hedge, &mut tape)?;
        for j in 0..m {
            payoff_mean[j] += tape.value(tp.payoffs[j]);
            hedge_mean[j] += tp.hedges[j];
        }
        paths.push(tape.value(tp.log_spot));
    }
    payoff_mean.iter_mut().chain(hedge_mean.iter_mut()).for_each(|v| *v /= n);
    let (dmean, extra) = outer(&payoff_mean, &hedge_mean)?;
    let mut grad = vec![0.0; model.net(strip.maturity).unwrap().len()];
    for p in 0..cfg.n_paths {
        let tp = simulate_path_on_tape(sabr, model, strip, cfg.dt, cfg.seed, p, cfg.hedge, &mut tape)?;
        let seeds: Vec<(Var, f64)> = tp.payoffs.iter().zip(&dmean).map(|(&v, d)| (v, d / n)).collect();
        let g = tape.gradient_seeded(&seeds)?;
        grad.iter_mut().zip(g.collect(&tp.theta[strip.maturity])).for_each(|(a, b)| *a += b);
    }
    Ok((AdjointPass { n_paths: cfg.n_paths, payoff_mean, hedge_mean, grad }, extra))
}

/// Full state paths `(x_k, alpha_k)` for `k = 0..=steps`, laid out
/// `[k][path]`, for hedge training.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePaths {
    pub n_paths: usize,
    pub dt: f64,
    pub x: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

pub fn simulate_states(sabr: &SabrParams, model: &LeverageModel, maturity: usize, n_paths: usize, dt: f64, seed: u64) -> Result<StatePaths> {
    let strip = Strip::calls(maturity, &[sabr.s0]);
    let kern = Kernel::new(*sabr, model, core::slice::from_ref(&strip), dt, seed, Hedger::None)?;
    let steps = kern.tg.boundary(maturity);
    let blocks = map_blocks(n_paths, LANES, |_, range| {
        let mut ws = kern.lanes();
        let mut rec = Record { start: 0, end: steps, ..Default::default() };
        let mut last = (Vec::new(), Vec::new());
        kern.run(range.start, range.len(), &mut ws, Some(&mut rec), |_, ws| {
            last = (ws.x[..ws.n].to_vec(), ws.alpha[..ws.n].to_vec());
        })?;
        Ok::<_, Error>((rec, last, range.len()))
    });
    let mut x = vec![Vec::with_capacity(n_paths); steps + 1];
    let mut alpha = vec![Vec::with_capacity(n_paths); steps + 1];
    for b in blocks {
        let (rec, (xt, at), lanes) = b?;
        for k in 0..steps {
            x[k].extend_from_slice(&rec.x[k * lanes..(k + 1) * lanes]);
            alpha[k].extend_from_slice(&rec.alpha[k * lanes..(k + 1) * lanes]);
        }
        x[steps].extend(xt);
        alpha[steps].extend(at);
    }
    Ok(StatePaths { n_paths, dt, x, alpha })
}
