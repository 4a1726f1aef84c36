//! Dense layers over a flat parameter vector with hand-written backprop, and
//! an AdamW optimizer. Everything is f64 so gradient checks are meaningful.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => fast_tanh(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    inp: usize,
    out: usize,
    /// Offset of the row-major `out x inp` weight block; biases follow it.
    offset: usize,
    act: Activation,
}

/// A stack of dense layers whose parameters live at `offset..offset+len` of
/// some larger parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    pub offset: usize,
    pub len: usize,
}

/// Per-layer outputs from a forward pass; `acts[0]` is the input.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], |v| v.as_slice())
    }
}

impl Mlp {
    pub fn new(sizes: &[usize], acts: &[Activation], offset: usize) -> Self {
        assert_eq!(sizes.len(), acts.len() + 1, "one activation per layer");
        let mut layers = Vec::with_capacity(acts.len());
        let mut at = offset;
        for (w, &act) in sizes.windows(2).zip(acts) {
            layers.push(Layer {
                inp: w[0],
                out: w[1],
                offset: at,
                act,
            });
            at += w[0] * w[1] + w[1];
        }
        Self {
            layers,
            offset,
            len: at - offset,
        }
    }

    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inp
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.out));
        s
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.act).collect()
    }

    /// Uniform Glorot init; the last layer is scaled by `last_gain`.
    pub fn init(&self, params: &mut [f64], rng: &mut Rng, last_gain: f64) {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let mut bound = (6.0 / (l.inp + l.out) as f64).sqrt();
            if i + 1 == n {
                bound *= last_gain;
            }
            for p in &mut params[l.offset..l.offset + l.inp * l.out] {
                *p = rng.random_range(-bound..=bound);
            }
            params[l.offset + l.inp * l.out..l.offset + l.inp * l.out + l.out].fill(0.0);
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], trace: &mut Trace) {
        debug_assert_eq!(x.len(), self.input_dim());
        trace.acts.resize_with(self.layers.len() + 1, Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(x);
        for (k, l) in self.layers.iter().enumerate() {
            let (before, after) = trace.acts.split_at_mut(k + 1);
            let input = &before[k];
            let out = &mut after[0];
            out.clear();
            let w = &params[l.offset..l.offset + l.inp * l.out];
            let b = &params[l.offset + l.inp * l.out..l.offset + l.inp * l.out + l.out];
            for o in 0..l.out {
                let row = &w[o * l.inp..(o + 1) * l.inp];
                let s = dot(row, input) + b[o];
                out.push(l.act.apply(s));
            }
        }
    }

    /// Accumulate parameter gradients into `grads` (same indexing as params)
    /// and return the gradient with respect to the input.
    pub fn backward(&self, params: &[f64], trace: &Trace, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let mut g: Vec<f64> = grad_out.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let y = &trace.acts[k + 1];
            let x = &trace.acts[k];
            for o in 0..l.out {
                g[o] *= l.act.grad_from_output(y[o]);
            }
            let w = &params[l.offset..l.offset + l.inp * l.out];
            let mut gin = vec![0.0; l.inp];
            for o in 0..l.out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let gw = &mut grads[l.offset + o * l.inp..l.offset + (o + 1) * l.inp];
                for (gwi, xi) in gw.iter_mut().zip(x) {
                    *gwi += go * xi;
                }
                grads[l.offset + l.inp * l.out + o] += go;
                let row = &w[o * l.inp..(o + 1) * l.inp];
                for (gi, wi) in gin.iter_mut().zip(row) {
                    *gi += go * wi;
                }
            }
            g = gin;
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
    }
}

/// tanh through a single exp; saturates cleanly for large |x|.
#[inline]
pub fn fast_tanh(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        // Short series avoids cancellation near zero.
        return x - x * x * x / 3.0;
    }
    let e = (2.0 * x.abs()).exp();
    (1.0 - 2.0 / (e + 1.0)).copysign(x)
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Clip the global L2 norm of `g` to `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}
