//! Fully connected network `R^n -> R` with tanh hidden layers and a linear
//! output, trained by plain backpropagation.
//!
//! Inputs are normalised as `(x - center) / scale` before the first layer.
//! Parameters live in one flat vector: for each layer the weight matrix
//! (row-major, `out x in`) followed by the bias vector.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::value::ValueFunction;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
    params: Vec<f64>,
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize], center: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        let count = Self::validate_sizes(sizes)?;
        Self::from_parts(sizes.to_vec(), center, scale, vec![0.0; count])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(
        sizes: &[usize],
        center: Vec<f64>,
        scale: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, center, scale)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.gen_range(-limit..limit);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_parts(
        sizes: Vec<usize>,
        center: Vec<f64>,
        scale: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let count = Self::validate_sizes(&sizes)?;
        check_len("network parameters", count, params.len())?;
        check_len("input center", sizes[0], center.len())?;
        check_len("input scale", sizes[0], scale.len())?;
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("input scale entries must be positive".into()));
        }
        if params.iter().chain(&center).any(|p| !p.is_finite()) {
            return Err(Error::Config("network parameters must be finite".into()));
        }
        Ok(Self {
            sizes,
            center,
            scale,
            params,
        })
    }

    fn validate_sizes(sizes: &[usize]) -> Result<usize> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(
                "layer sizes need an input and an output layer, all non-zero".into(),
            ));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(Error::Config("value networks have a single output".into()));
        }
        Ok(sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn input_center(&self) -> &[f64] {
        &self.center
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn max_width(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let width = self.max_width();
        let mut a = vec![0.0; width];
        let mut b = vec![0.0; width];
        for (i, v) in x.iter().take(self.sizes[0]).enumerate() {
            a[i] = (v - self.center[i]) / self.scale[i];
        }
        let layers = self.sizes.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            for o in 0..n_out {
                let z = bias[o] + dot(&w[o * n_in..(o + 1) * n_in], &a[..n_in]);
                b[o] = if l + 1 < layers { libm::tanh(z) } else { z };
            }
            core::mem::swap(&mut a, &mut b);
            off += n_in * n_out + n_out;
        }
        a[0]
    }

    /// Mean squared error `mean_i (V(x_i) - y_i)^2` over the batch.
    /// `inputs` holds the batch row-major.
    pub fn loss(&self, inputs: &[f64], targets: &[f64]) -> f64 {
        let n = self.sizes[0];
        let total: f64 = inputs
            .chunks_exact(n)
            .zip(targets)
            .map(|(x, y)| {
                let e = self.forward(x) - y;
                e * e
            })
            .sum();
        total / targets.len() as f64
    }

    /// Batch loss and its gradient with respect to the flat parameters
    /// (written into `grad`, which is overwritten).
    pub fn loss_and_grad(
        &self,
        inputs: &[f64],
        targets: &[f64],
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> f64 {
        let n = self.sizes[0];
        debug_assert_eq!(inputs.len(), n * targets.len());
        debug_assert_eq!(grad.len(), self.params.len());
        grad.iter_mut().for_each(|g| *g = 0.0);
        ws.prepare(self);
        let layers = self.sizes.len() - 1;
        let inv_b = 1.0 / targets.len() as f64;
        let mut total = 0.0;
        for (x, &y) in inputs.chunks_exact(n).zip(targets) {
            // forward, keeping activations
            for i in 0..n {
                ws.acts[0][i] = (x[i] - self.center[i]) / self.scale[i];
            }
            let mut off = 0;
            for l in 0..layers {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let w = &self.params[off..off + n_in * n_out];
                let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
                let (prev, rest) = ws.acts.split_at_mut(l + 1);
                let a_in = &prev[l];
                let a_out = &mut rest[0];
                for o in 0..n_out {
                    let z = bias[o] + dot(&w[o * n_in..(o + 1) * n_in], a_in);
                    a_out[o] = if l + 1 < layers { libm::tanh(z) } else { z };
                }
                ws.offsets[l] = off;
                off += n_in * n_out + n_out;
            }
            let err = ws.acts[layers][0] - y;
            total += err * err;

            // backward
            ws.delta[0] = 2.0 * err * inv_b;
            for l in (0..layers).rev() {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let off = ws.offsets[l];
                let a_in = &ws.acts[l];
                for o in 0..n_out {
                    let d = ws.delta[o];
                    let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (gi, ai) in g.iter_mut().zip(a_in.iter()) {
                        *gi += d * ai;
                    }
                    grad[off + n_in * n_out + o] += d;
                }
                if l > 0 {
                    let w = &self.params[off..off + n_in * n_out];
                    let back = &mut ws.delta_prev[..n_in];
                    back.iter_mut().for_each(|s| *s = 0.0);
                    for o in 0..n_out {
                        let d = ws.delta[o];
                        for (s, wi) in back.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *s += wi * d;
                        }
                    }
                    for (s, a) in back.iter_mut().zip(a_in.iter()) {
                        *s *= 1.0 - a * a;
                    }
                    core::mem::swap(&mut ws.delta, &mut ws.delta_prev);
                }
            }
        }
        total * inv_b
    }

    /// `self <- tau * online + (1 - tau) * self`.
    pub fn blend_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Dot product with four independent accumulators, which lets the
/// compiler keep several multiply-adds in flight.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl ValueFunction for Mlp {
    fn value(&self, x: &[f64]) -> f64 {
        self.forward(x)
    }
}

/// Scratch buffers for [`Mlp::loss_and_grad`].
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    offsets: Vec<usize>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, net: &Mlp) {
        if self.acts.len() != net.sizes.len()
            || self.acts.iter().zip(&net.sizes).any(|(a, &s)| a.len() != s)
        {
            self.acts = net.sizes.iter().map(|&s| vec![0.0; s]).collect();
            self.offsets = vec![0; net.sizes.len() - 1];
            let w = net.max_width();
            self.delta = vec![0.0; w];
            self.delta_prev = vec![0.0; w];
        }
    }
}
