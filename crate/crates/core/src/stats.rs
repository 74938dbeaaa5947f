//! Streaming moments and order statistics.

use alloc::vec::Vec;

/// Running first and second co-moments of a paired sample `(x, y)`,
/// mergeable across blocks (Chan et al. pairwise update).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoMoments {
    pub n: u64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub m2_x: f64,
    pub m2_y: f64,
    pub c_xy: f64,
}

impl CoMoments {
    #[inline]
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        self.mean_x += dx / n;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.c_xy += dx * (y - self.mean_y);
    }

    pub fn merge(&mut self, o: &CoMoments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let dx = o.mean_x - self.mean_x;
        let dy = o.mean_y - self.mean_y;
        self.mean_x += dx * nb / n;
        self.mean_y += dy * nb / n;
        self.m2_x += o.m2_x + dx * dx * na * nb / n;
        self.m2_y += o.m2_y + dy * dy * na * nb / n;
        self.c_xy += o.c_xy + dx * dy * na * nb / n;
        self.n += o.n;
    }

    fn denom(&self) -> f64 {
        (self.n.max(2) - 1) as f64
    }

    pub fn var_x(&self) -> f64 {
        self.m2_x / self.denom()
    }

    pub fn var_y(&self) -> f64 {
        self.m2_y / self.denom()
    }

    pub fn cov(&self) -> f64 {
        self.c_xy / self.denom()
    }
}

/// Linear-interpolation quantile (type 7) of an unsorted sample.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_equals_single_pass() {
        let xs: Vec<(f64, f64)> = (0..37).map(|i| ((i as f64 * 0.7).sin(), (i as f64 * 0.3).cos() + i as f64 * 0.01)).collect();
        let mut all = CoMoments::default();
        xs.iter().for_each(|&(x, y)| all.push(x, y));
        let mut a = CoMoments::default();
        let mut b = CoMoments::default();
        xs[..10].iter().for_each(|&(x, y)| a.push(x, y));
        xs[10..].iter().for_each(|&(x, y)| b.push(x, y));
        a.merge(&b);
        assert!((a.mean_x - all.mean_x).abs() < 1e-14);
        assert!((a.var_y() - all.var_y()).abs() < 1e-14);
        assert!((a.cov() - all.cov()).abs() < 1e-14);
    }

    #[test]
    fn quantiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&[7.0], 0.3), 7.0);
    }
}
