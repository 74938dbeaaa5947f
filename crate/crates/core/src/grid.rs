//! Uniform simulation time grid aligned to a set of maturities.

use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    maturities: Vec<f64>,
    boundaries: Vec<usize>,
}

impl TimeGrid {
    /// Every maturity must be a whole number of steps.
    pub fn new(dt: f64, maturities: &[f64]) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Grid("time step must be positive".into()));
        }
        if maturities.is_empty() {
            return Err(Error::Grid("no maturities".into()));
        }
        let mut boundaries = Vec::with_capacity(maturities.len());
        for &t in maturities {
            let steps = t / dt;
            let b = libm::round(steps);
            if !(b >= 1.0) || (steps - b).abs() > 1e-9 * b.max(1.0) {
                return Err(Error::Grid(alloc::format!("maturity {t} is not a multiple of dt = {dt}")));
            }
            if boundaries.last().is_some_and(|&p| p >= b as usize) {
                return Err(Error::Grid("maturities must be strictly increasing".into()));
            }
            boundaries.push(b as usize);
        }
        Ok(TimeGrid { dt, maturities: maturities.to_vec(), boundaries })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    /// Step index at which maturity `i` is reached.
    pub fn boundary(&self, i: usize) -> usize {
        self.boundaries[i]
    }

    pub fn n_steps(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    /// First step of interval `i`, i.e. `(T_{i-1}, T_i]`.
    pub fn interval_start(&self, i: usize) -> usize {
        if i == 0 { 0 } else { self.boundaries[i - 1] }
    }

    /// Interval containing the step that starts at `k * dt`.
    pub fn interval_of_step(&self, k: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= k).min(self.boundaries.len() - 1)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_maturities_align() {
        let g = TimeGrid::new(0.01, &[0.15, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(g.n_steps(), 100);
        assert_eq!(g.boundary(0), 15);
        assert_eq!(g.interval_of_step(0), 0);
        assert_eq!(g.interval_of_step(14), 0);
        assert_eq!(g.interval_of_step(15), 1);
        assert_eq!(g.interval_of_step(99), 3);
        assert_eq!(g.interval_start(2), 25);
    }

    #[test]
    fn rejects_misaligned() {
        assert!(TimeGrid::new(0.02, &[0.15]).is_err());
        assert!(TimeGrid::new(0.01, &[0.5, 0.25]).is_err());
        assert!(TimeGrid::new(0.0, &[0.5]).is_err());
    }
}
