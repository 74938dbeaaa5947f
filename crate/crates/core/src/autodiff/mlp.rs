//! Feed-forward networks: hidden layers `x -> act(A x + b)`, affine output.
//!
//! Parameters live in one flat vector, layer by layer, each layer as its
//! row-major weight matrix followed by its bias. Three evaluation routes
//! share the same per-element operation order and therefore agree bitwise:
//! plain [`MlpParams::eval`], [`MlpParams::eval_on_tape`], and the batched
//! [`MlpParams::forward_lanes`] used by the simulators.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => math::tanh(x),
        }
    }

    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if pre >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::LeakyRelu { slope } => tape.leaky_relu(x, slope),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub hidden_activations: Vec<Activation>,
    pub output_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    n_in: usize,
    n_out: usize,
    offset: usize,
    activation: Option<Activation>,
}

impl Layer {
    fn weights<'a>(&self, flat: &'a [f64]) -> &'a [f64] {
        &flat[self.offset..self.offset + self.n_in * self.n_out]
    }

    fn bias<'a>(&self, flat: &'a [f64]) -> &'a [f64] {
        let b = self.offset + self.n_in * self.n_out;
        &flat[b..b + self.n_out]
    }

    fn len(&self) -> usize {
        (self.n_in + 1) * self.n_out
    }
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        hidden_activations: Vec<Activation>,
        output_dim: usize,
    ) -> Result<Self> {
        let spec = MlpSpec { input_dim, hidden_dims, hidden_activations, output_dim };
        spec.validate()?;
        Ok(spec)
    }

    /// Scalar-to-scalar network: `depth` hidden layers of `width` units,
    /// leaky-ReLU(0.2) everywhere except a final tanh hidden layer.
    pub fn leverage(width: usize, depth: usize) -> Self {
        let mut acts = vec![Activation::LeakyRelu { slope: 0.2 }; depth.saturating_sub(1)];
        acts.push(Activation::Tanh);
        MlpSpec {
            input_dim: 1,
            hidden_dims: vec![width; depth],
            hidden_activations: acts,
            output_dim: 1,
        }
    }

    /// Four hidden layers of 64 units, leaky-ReLU(0.2) on the first three and
    /// tanh on the last.
    pub fn leverage_full() -> Self {
        Self::leverage(64, 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.hidden_dims.len() != self.hidden_activations.len() {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dims.len(),
                got: self.hidden_activations.len(),
            });
        }
        for a in &self.hidden_activations {
            if let Activation::LeakyRelu { slope } = a {
                if !slope.is_finite() {
                    return Err(Error::invalid("leaky-ReLU slope must be finite"));
                }
            }
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let mut out = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut n_in = self.input_dim;
        let mut offset = 0;
        let widths = self.hidden_dims.iter().copied().chain(core::iter::once(self.output_dim));
        let acts = self.hidden_activations.iter().copied().map(Some).chain(core::iter::once(None));
        for (n_out, activation) in widths.zip(acts) {
            let l = Layer { n_in, n_out, offset, activation };
            offset += l.len();
            n_in = n_out;
            out.push(l);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(Layer::len).sum()
    }

    fn max_width(&self) -> usize {
        self.hidden_dims.iter().copied().chain([self.input_dim, self.output_dim]).max().unwrap_or(1)
    }
}

/// Initialisation scaling. Weights are `N(0, (scale / sqrt(fan_in))^2)`,
/// output-layer weights additionally multiplied by `output_scale`; biases 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScale {
    pub scale: f64,
    pub output_scale: f64,
}

impl Default for InitScale {
    fn default() -> Self {
        InitScale { scale: 1.0, output_scale: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
    flat: Vec<f64>,
}

/// Per-layer activations for a batch of lanes, laid out `[unit][lane]`.
#[derive(Debug, Clone, Default)]
pub struct LaneBuffers {
    lanes: usize,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
}

impl LaneBuffers {
    pub fn new() -> Self {
        Self::default()
    }

    /// Output of the last forward pass, `[output unit][lane]`.
    pub fn output(&self) -> &[f64] {
        let last = self.post.last().map(|v| v.as_slice()).unwrap_or(&[]);
        &last[..last.len().min(self.out_len())]
    }

    fn out_len(&self) -> usize {
        self.post.last().map_or(0, |v| v.len())
    }
}

/// Sum of elementwise products with eight independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

impl MlpParams {
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        Self::init_scaled(spec, seed, InitScale::default())
    }

    pub fn init_scaled(spec: MlpSpec, seed: u64, init: InitScale) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        let mut flat = vec![0.0; spec.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = layers.len();
        for (m, l) in layers.iter().enumerate() {
            let mut sd = init.scale / math::sqrt(l.n_in as f64);
            if m + 1 == n_layers {
                sd *= init.output_scale;
            }
            for w in &mut flat[l.offset..l.offset + l.n_in * l.n_out] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = sd * z;
            }
        }
        Ok(MlpParams { spec, layers, flat })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        Self::from_flat(spec.clone(), vec![0.0; spec.param_count()])
    }

    pub fn from_flat(spec: MlpSpec, flat: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_count();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: flat.len() });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite network parameter"));
        }
        let layers = spec.layers();
        Ok(MlpParams { spec, layers, flat })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Forward pass.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch { expected: self.spec.input_dim, got: x.len() });
        }
        let mut cur: Vec<f64> = x.to_vec();
        let mut next = Vec::with_capacity(self.spec.max_width());
        for l in &self.layers {
            next.clear();
            let w = l.weights(&self.flat);
            for (o, &b) in l.bias(&self.flat).iter().enumerate() {
                let row = &w[o * l.n_in..(o + 1) * l.n_in];
                let mut acc = b;
                for (wi, xi) in row.iter().zip(&cur) {
                    acc += wi * xi;
                }
                next.push(match l.activation {
                    Some(a) => a.apply(acc),
                    None => acc,
                });
            }
            core::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Puts the parameters on `tape`, as leaves if `trainable`, else as
    /// constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.flat
            .iter()
            .map(|&v| if trainable { tape.leaf(v) } else { tape.constant(v) })
            .collect()
    }

    /// Forward pass recorded on `tape`, with parameters `vars` from
    /// [`MlpParams::register`].
    pub fn eval_on_tape(&self, tape: &mut Tape, vars: &[Var], x: &[Var]) -> Result<Vec<Var>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch { expected: self.spec.input_dim, got: x.len() });
        }
        if vars.len() != self.flat.len() {
            return Err(Error::DimensionMismatch { expected: self.flat.len(), got: vars.len() });
        }
        let mut cur: Vec<Var> = x.to_vec();
        for l in &self.layers {
            let w = &vars[l.offset..l.offset + l.n_in * l.n_out];
            let b = &vars[l.offset + l.n_in * l.n_out..l.offset + l.len()];
            let mut out = tape.affine(w, b, &cur);
            if let Some(a) = l.activation {
                for v in &mut out {
                    *v = a.on_tape(tape, *v);
                }
            }
            cur = out;
        }
        Ok(cur)
    }

    /// Same as [`MlpParams::eval_on_tape`] but built from scalar `mul`/`add`
    /// primitives instead of the fused affine node.
    pub fn eval_on_tape_unfused(&self, tape: &mut Tape, vars: &[Var], x: &[Var]) -> Result<Vec<Var>> {
        if x.len() != self.spec.input_dim || vars.len() != self.flat.len() {
            return Err(Error::DimensionMismatch { expected: self.spec.input_dim, got: x.len() });
        }
        let mut cur: Vec<Var> = x.to_vec();
        for l in &self.layers {
            let mut out = Vec::with_capacity(l.n_out);
            for o in 0..l.n_out {
                let mut acc = vars[l.offset + l.n_in * l.n_out + o];
                for (i, &xi) in cur.iter().enumerate() {
                    let p = tape.mul(vars[l.offset + o * l.n_in + i], xi);
                    acc = tape.add(acc, p);
                }
                out.push(match l.activation {
                    Some(a) => a.on_tape(tape, acc),
                    None => acc,
                });
            }
            cur = out;
        }
        Ok(cur)
    }

    /// Batched forward pass over `lanes` inputs laid out `[input dim][lane]`.
    /// Results are read from [`LaneBuffers::output`].
    pub fn forward_lanes(&self, buf: &mut LaneBuffers, input: &[f64], lanes: usize) {
        debug_assert_eq!(input.len(), self.spec.input_dim * lanes);
        buf.lanes = lanes;
        buf.pre.resize_with(self.layers.len(), Vec::new);
        buf.post.resize_with(self.layers.len(), Vec::new);
        for (m, l) in self.layers.iter().enumerate() {
            let (done, rest) = buf.post.split_at_mut(m);
            let prev: &[f64] = if m == 0 { input } else { &done[m - 1] };
            let pre = &mut buf.pre[m];
            pre.resize(l.n_out * lanes, 0.0);
            let w = l.weights(&self.flat);
            for (o, &b) in l.bias(&self.flat).iter().enumerate() {
                let dst = &mut pre[o * lanes..(o + 1) * lanes];
                dst.fill(b);
                for i in 0..l.n_in {
                    let wi = w[o * l.n_in + i];
                    let src = &prev[i * lanes..(i + 1) * lanes];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wi * s;
                    }
                }
            }
            let post = &mut rest[0];
            post.resize(l.n_out * lanes, 0.0);
            match l.activation {
                Some(a) => {
                    for (q, &p) in post.iter_mut().zip(pre.iter()) {
                        *q = a.apply(p);
                    }
                }
                None => post.copy_from_slice(pre),
            }
        }
    }

    /// Vector–Jacobian product for the last [`MlpParams::forward_lanes`]
    /// call. `cotangent` is `[output unit][lane]`; parameter gradients are
    /// added into `grad`, input gradients written to `input_grad` when given.
    pub fn backward_lanes(
        &self,
        buf: &mut LaneBuffers,
        input: &[f64],
        cotangent: &[f64],
        grad: &mut [f64],
        mut input_grad: Option<&mut [f64]>,
    ) {
        let lanes = buf.lanes;
        debug_assert_eq!(grad.len(), self.flat.len());
        let mut g = core::mem::take(&mut buf.grad_a);
        let mut g_prev = core::mem::take(&mut buf.grad_b);
        g.clear();
        g.extend_from_slice(cotangent);
        for (m, l) in self.layers.iter().enumerate().rev() {
            if let Some(a) = l.activation {
                let (pre, post) = (&buf.pre[m], &buf.post[m]);
                for ((gv, &p), &q) in g.iter_mut().zip(pre).zip(post) {
                    *gv *= a.derivative(p, q);
                }
            }
            let prev: &[f64] = if m == 0 { input } else { &buf.post[m - 1] };
            let w = l.weights(&self.flat);
            let (gw, gb) = grad[l.offset..l.offset + l.len()].split_at_mut(l.n_in * l.n_out);
            for o in 0..l.n_out {
                let delta = &g[o * lanes..(o + 1) * lanes];
                gb[o] += delta.iter().sum::<f64>();
                for i in 0..l.n_in {
                    gw[o * l.n_in + i] += dot(delta, &prev[i * lanes..(i + 1) * lanes]);
                }
            }
            if m == 0 && input_grad.is_none() {
                break;
            }
            g_prev.clear();
            g_prev.resize(l.n_in * lanes, 0.0);
            for o in 0..l.n_out {
                let delta = &g[o * lanes..(o + 1) * lanes];
                for i in 0..l.n_in {
                    let wi = w[o * l.n_in + i];
                    for (d, s) in g_prev[i * lanes..(i + 1) * lanes].iter_mut().zip(delta) {
                        *d += wi * s;
                    }
                }
            }
            core::mem::swap(&mut g, &mut g_prev);
            if m == 0 {
                if let Some(ig) = input_grad.as_deref_mut() {
                    ig.copy_from_slice(&g[..ig.len()]);
                }
            }
        }
        buf.grad_a = g;
        buf.grad_b = g_prev;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(
            2,
            vec![5, 3],
            vec![Activation::LeakyRelu { slope: 0.2 }, Activation::Tanh],
            2,
        )
        .unwrap()
    }

    #[test]
    fn full_leverage_net_parameter_count() {
        // 2*64 + 3*(64*64 + 64) + (64 + 1)
        assert_eq!(MlpSpec::leverage_full().param_count(), 12_673);
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpParams::init(small_spec(), 7).unwrap();
        let b = MlpParams::init(small_spec(), 7).unwrap();
        let c = MlpParams::init(small_spec(), 8).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn zero_scale_init_outputs_bias() {
        let p = MlpParams::init_scaled(small_spec(), 1, InitScale { scale: 0.0, output_scale: 1.0 }).unwrap();
        assert_eq!(p.eval(&[0.3, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_leaky_unit() {
        let spec = MlpSpec::new(1, vec![1], vec![Activation::LeakyRelu { slope: 0.2 }], 1).unwrap();
        // hidden w=1, b=0; output w=1, b=0
        let p = MlpParams::from_flat(spec, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.eval(&[-1.0]).unwrap()[0], -0.2);
    }

    #[test]
    fn dimension_errors() {
        let p = MlpParams::init(small_spec(), 1).unwrap();
        assert!(matches!(p.eval(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(MlpParams::from_flat(small_spec(), vec![0.0; 3]).is_err());
        assert!(MlpSpec::new(1, vec![4], vec![], 1).is_err());
    }

    #[test]
    fn lanes_tape_and_plain_agree_bitwise() {
        let p = MlpParams::init(small_spec(), 3).unwrap();
        let xs = [[0.3, -0.7], [1.2, 0.1], [-0.4, -0.9]];
        let lanes = xs.len();
        let mut input = vec![0.0; 2 * lanes];
        for (l, x) in xs.iter().enumerate() {
            input[l] = x[0];
            input[lanes + l] = x[1];
        }
        let mut buf = LaneBuffers::new();
        p.forward_lanes(&mut buf, &input, lanes);
        for (l, x) in xs.iter().enumerate() {
            let plain = p.eval(x).unwrap();
            let mut t = Tape::new();
            let vars = p.register(&mut t, true);
            let xv = t.leaves(x);
            let out = p.eval_on_tape(&mut t, &vars, &xv).unwrap();
            for k in 0..2 {
                assert_eq!(plain[k].to_bits(), t.value(out[k]).to_bits());
                assert_eq!(plain[k].to_bits(), buf.output()[k * lanes + l].to_bits());
            }
        }
    }

    #[test]
    fn lane_backward_matches_tape() {
        let p = MlpParams::init(small_spec(), 11).unwrap();
        let xs = [[0.5, -0.2], [-1.1, 0.8]];
        let cots = [[0.7, -1.3], [0.2, 0.4]];
        let lanes = 2;
        let input = vec![xs[0][0], xs[1][0], xs[0][1], xs[1][1]];
        let cot = vec![cots[0][0], cots[1][0], cots[0][1], cots[1][1]];
        let mut buf = LaneBuffers::new();
        p.forward_lanes(&mut buf, &input, lanes);
        let mut grad = vec![0.0; p.len()];
        let mut ig = vec![0.0; 2 * lanes];
        p.backward_lanes(&mut buf, &input, &cot, &mut grad, Some(&mut ig));

        let mut expect = vec![0.0; p.len()];
        for l in 0..lanes {
            let mut t = Tape::new();
            let vars = p.register(&mut t, true);
            let xv = t.leaves(&xs[l]);
            let out = p.eval_on_tape(&mut t, &vars, &xv).unwrap();
            let g = t.gradient_seeded(&[(out[0], cots[l][0]), (out[1], cots[l][1])]).unwrap();
            for (e, v) in expect.iter_mut().zip(g.collect(&vars)) {
                *e += v;
            }
            for d in 0..2 {
                let want = g.wrt(xv[d]);
                assert!((ig[d * lanes + l] - want).abs() < 1e-13);
            }
        }
        for (a, b) in grad.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-13 * (1.0 + b.abs()));
        }
    }
}
