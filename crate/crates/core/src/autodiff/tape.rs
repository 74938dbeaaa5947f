//! Reverse-mode automatic differentiation over scalar operations.
//!
//! A [`Tape`] is an append-only list of nodes. Each node stores its forward
//! value and the local partial derivatives with respect to the nodes it was
//! computed from. [`Tape::gradient`] sweeps the list backwards once.
//!
//! Stop-gradient nodes copy a forward value but record no edges, so nothing
//! upstream of them receives an adjoint through that route.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    values: Vec<f64>,
    // edges of node i live in [edge_start[i], edge_start[i + 1])
    edge_start: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

/// Adjoints of every node on a tape with respect to one seeded output.
#[derive(Debug, Clone)]
pub struct Gradient {
    adjoints: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints.get(v.index()).copied().unwrap_or(0.0)
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { edge_start: vec![0], ..Default::default() }
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut edge_start = Vec::with_capacity(nodes + 1);
        edge_start.push(0);
        Tape {
            values: Vec::with_capacity(nodes),
            edge_start,
            parents: Vec::with_capacity(edges),
            partials: Vec::with_capacity(edges),
        }
    }

    /// Drops all nodes but keeps the allocations.
    pub fn clear(&mut self) {
        self.values.clear();
        self.edge_start.truncate(1);
        self.parents.clear();
        self.partials.clear();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    fn push(&mut self, value: f64, edges: &[(Var, f64)]) -> Var {
        let id = self.values.len();
        self.values.push(value);
        for &(p, d) in edges {
            self.parents.push(p.0);
            self.partials.push(d);
        }
        self.edge_start.push(self.parents.len() as u32);
        Var(id as u32)
    }

    /// Independent variable.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(value, &[])
    }

    pub fn leaves(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    /// A value that takes part in the forward pass only. Identical to a leaf
    /// on the tape; the distinct name documents intent at call sites.
    pub fn constant(&mut self, value: f64) -> Var {
        self.push(value, &[])
    }

    /// Same forward value as `x`, no backward contribution.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x);
        self.push(v, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, &[(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let v = x / y;
        self.push(v, &[(a, 1.0 / y), (b, -v / y)])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, &[(a, -1.0)])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, &[(a, 1.0)])
    }

    /// `c * a` with the constant on the left, matching `c * x` in plain code.
    pub fn scale(&mut self, c: f64, a: Var) -> Var {
        let v = c * self.value(a);
        self.push(v, &[(a, c)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x * x, &[(a, 2.0 * x)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = math::exp(self.value(a));
        self.push(v, &[(a, v)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(math::ln(x), &[(a, 1.0 / x)])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = math::sqrt(self.value(a));
        self.push(v, &[(a, 0.5 / v)])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = math::tanh(self.value(a));
        self.push(v, &[(a, 1.0 - v * v)])
    }

    /// Leaky ReLU; the derivative at exactly zero is taken from the positive
    /// branch.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let x = self.value(a);
        if x >= 0.0 {
            self.push(x, &[(a, 1.0)])
        } else {
            self.push(slope * x, &[(a, slope)])
        }
    }

    /// `max(a, 0)`, derivative 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x > 0.0 {
            self.push(x, &[(a, 1.0)])
        } else {
            self.push(0.0, &[(a, 0.0)])
        }
    }

    pub fn norm_cdf(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(math::norm_cdf(x), &[(a, math::norm_pdf(x))])
    }

    /// Sum evaluated left to right.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = 0.0;
        let mut edges = Vec::with_capacity(xs.len());
        for &x in xs {
            acc += self.value(x);
            edges.push((x, 1.0));
        }
        self.push(acc, &edges)
    }

    /// Fused affine layer `y_o = b_o + sum_i w[o, i] * x_i` with `w` row-major.
    ///
    /// The forward value accumulates in the same order as
    /// [`crate::MlpParams::eval`], so tape and plain evaluation agree bitwise.
    pub fn affine(&mut self, w: &[Var], b: &[Var], x: &[Var]) -> Vec<Var> {
        let n_in = x.len();
        debug_assert_eq!(w.len(), b.len() * n_in);
        let mut out = Vec::with_capacity(b.len());
        let mut edges = Vec::with_capacity(2 * n_in + 1);
        for (o, &bo) in b.iter().enumerate() {
            edges.clear();
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = self.value(bo);
            edges.push((bo, 1.0));
            for (&wi, &xi) in row.iter().zip(x) {
                let (wv, xv) = (self.value(wi), self.value(xi));
                acc += wv * xv;
                edges.push((wi, xv));
                edges.push((xi, wv));
            }
            out.push(self.push(acc, &edges));
        }
        out
    }

    /// Reverse sweep seeded with `d output / d output = 1`.
    pub fn gradient(&self, output: Var) -> Result<Gradient> {
        self.gradient_seeded(&[(output, 1.0)])
    }

    /// Reverse sweep for the scalar `sum_k c_k * v_k` without materialising
    /// the sum on the tape.
    pub fn gradient_seeded(&self, seeds: &[(Var, f64)]) -> Result<Gradient> {
        let mut top = 0usize;
        for &(v, _) in seeds {
            if v.index() >= self.len() {
                return Err(Error::NotOnTape(v.index()));
            }
            top = top.max(v.index() + 1);
        }
        let mut adj = vec![0.0; self.len()];
        for &(v, c) in seeds {
            adj[v.index()] += c;
        }
        for i in (0..top).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (self.edge_start[i] as usize, self.edge_start[i + 1] as usize);
            for k in s..e {
                adj[self.parents[k] as usize] += a * self.partials[k];
            }
        }
        Ok(Gradient { adjoints: adj })
    }
}
