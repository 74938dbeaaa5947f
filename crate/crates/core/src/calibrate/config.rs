use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::MlpSpec;
use crate::error::{Error, Result};
use crate::hedging::HedgeMode;

/// Path count switch: from step `at` on, use `n_paths` per gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathStep {
    pub at: usize,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SabrInitConfig {
    pub steps: usize,
    pub n_paths: usize,
    pub lr: f64,
    /// Differentiate through the hedge integral as well.
    pub full_gradient: bool,
    pub eval_paths: usize,
}

impl Default for SabrInitConfig {
    fn default() -> Self {
        SabrInitConfig { steps: 600, n_paths: 2000, lr: 0.01, full_gradient: true, eval_paths: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub dt: f64,
    /// Abort tolerance on the max implied-vol error of a slice.
    pub tol: f64,
    /// Robust mode: abort tolerance on the max distance of the model IV to
    /// the target envelope; 0 asks for every strike inside it.
    pub robust_tol: f64,
    pub lr: f64,
    pub initial_paths: usize,
    pub path_schedule: Vec<PathStep>,
    pub check_start: usize,
    pub check_every: usize,
    pub max_steps: usize,
    pub eval_paths: usize,
    pub hedge: HedgeMode,
    pub adversarial: bool,
    pub leverage: MlpSpec,
    /// Start each interval's network from the previous interval's.
    pub warm_start: bool,
    /// Restore the parameters of the best check point when a slice ends.
    pub keep_best: bool,
    pub clamp_leverage_min: Option<f64>,
    pub sabr: SabrInitConfig,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl CalibConfig {
    /// Full-size settings: 4x64 network, 400/2000/10000/50000 path schedule,
    /// checks every 1000 steps from 5000, 12000 steps, 10^7 eval paths.
    pub fn paper() -> Self {
        CalibConfig {
            dt: 0.01,
            tol: 0.0045,
            robust_tol: 0.0,
            lr: 1e-3,
            initial_paths: 400,
            path_schedule: vec![
                PathStep { at: 500, n_paths: 2000 },
                PathStep { at: 1500, n_paths: 10_000 },
                PathStep { at: 4000, n_paths: 50_000 },
            ],
            check_start: 5000,
            check_every: 1000,
            max_steps: 12_000,
            eval_paths: 10_000_000,
            hedge: HedgeMode::BsDeltaRunning,
            adversarial: true,
            leverage: MlpSpec::leverage_full(),
            warm_start: false,
            keep_best: false,
            clamp_leverage_min: None,
            sabr: SabrInitConfig::default(),
        }
    }

    /// Single-core settings: a small network, a compressed schedule capped
    /// at 5*10^4 training paths and 10^6 eval paths.
    pub fn desk() -> Self {
        CalibConfig {
            lr: 5e-3,
            initial_paths: 1000,
            path_schedule: vec![
                PathStep { at: 150, n_paths: 4000 },
                PathStep { at: 400, n_paths: 16_000 },
                PathStep { at: 700, n_paths: 50_000 },
            ],
            check_start: 400,
            check_every: 200,
            max_steps: 1200,
            eval_paths: 1_000_000,
            leverage: MlpSpec::leverage(16, 3),
            warm_start: true,
            keep_best: true,
            sabr: SabrInitConfig { steps: 300, ..SabrInitConfig::default() },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.leverage.validate()?;
        if !(self.dt > 0.0) || !(self.tol > 0.0) || !(self.lr > 0.0) {
            return Err(Error::invalid("dt, tol and lr must be positive"));
        }
        if !(self.robust_tol >= 0.0) {
            return Err(Error::invalid("robust_tol must be non-negative"));
        }
        if self.initial_paths == 0 || self.check_every == 0 || self.max_steps == 0 {
            return Err(Error::invalid("path counts and step counts must be positive"));
        }
        let mut last = (0, self.initial_paths);
        for s in &self.path_schedule {
            if s.at <= last.0 || s.n_paths < last.1 {
                return Err(Error::invalid("path schedule must increase"));
            }
            last = (s.at, s.n_paths);
        }
        if self.eval_paths < 2 || self.sabr.n_paths < 2 {
            return Err(Error::invalid("too few evaluation paths"));
        }
        Ok(())
    }

    /// Paths per gradient step at (1-based) step `k`.
    pub fn n_paths_at(&self, k: usize) -> usize {
        self.path_schedule.iter().filter(|s| k >= s.at).map(|s| s.n_paths).last().unwrap_or(self.initial_paths)
    }

    pub fn is_check(&self, k: usize) -> bool {
        k == self.max_steps || (k >= self.check_start && k % self.check_every == 0)
    }
}
