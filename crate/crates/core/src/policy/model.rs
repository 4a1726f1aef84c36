use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Mlp, Trace};
use crate::rng;

use super::observation::Observation;

const FLAT_HIDDEN: usize = 32;
const EMBED: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub channels: usize,
    /// Image side in cells; must be even.
    pub side: usize,
    pub flat: usize,
    pub actions: usize,
}

/// Actor-critic network: a 2x2 stride-2 depthwise conv per image channel, an
/// MLP over the flat inputs, a shared embedding, and separate action and
/// value heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub dims: PolicyDims,
    pub params: Vec<f64>,
    flat_net: Mlp,
    embed: Mlp,
    actor: Mlp,
    critic: Mlp,
}

pub struct PolicyForward {
    pub logits: Vec<f64>,
    pub value: f64,
    conv_out: Vec<f64>,
    flat_trace: Trace,
    embed_trace: Trace,
    actor_trace: Trace,
    critic_trace: Trace,
}

impl PolicyModel {
    pub fn new(dims: PolicyDims, seed: u64) -> Self {
        assert!(dims.side % 2 == 0 && dims.side > 0, "image side must be even");
        let conv_len = 5 * dims.channels;
        let pooled = dims.channels * (dims.side / 2) * (dims.side / 2);
        let flat_net = Mlp::new(&[dims.flat, FLAT_HIDDEN], &[Activation::Tanh], conv_len);
        let embed = Mlp::new(&[pooled + FLAT_HIDDEN, EMBED], &[Activation::Tanh], flat_net.end());
        let t = Activation::Tanh;
        let actor = Mlp::new(&[EMBED, 64, 32, dims.actions], &[t, t, Activation::Identity], embed.end());
        let critic = Mlp::new(&[EMBED, 64, 32, 1], &[t, t, Activation::Identity], actor.end());
        let mut params = vec![0.0; critic.end()];
        let mut r = rng::rng_for(seed, &[rng::tag::INIT, 2]);
        use rand::Rng as _;
        for c in 0..dims.channels {
            for k in 0..4 {
                params[5 * c + k] = r.random_range(-0.5..=0.5);
            }
        }
        flat_net.init(&mut params, &mut r, 1.0);
        embed.init(&mut params, &mut r, 1.0);
        actor.init(&mut params, &mut r, 0.01);
        critic.init(&mut params, &mut r, 1.0);
        Self {
            dims,
            params,
            flat_net,
            embed,
            actor,
            critic,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, obs: &Observation) -> PolicyForward {
        let d = self.dims;
        debug_assert_eq!(obs.image.len(), d.channels * d.side * d.side);
        debug_assert_eq!(obs.flat.len(), d.flat);
        let half = d.side / 2;
        let mut conv_out = Vec::with_capacity(d.channels * half * half);
        for c in 0..d.channels {
            let w = &self.params[5 * c..5 * c + 5];
            let img = &obs.image[c * d.side * d.side..(c + 1) * d.side * d.side];
            for i in 0..half {
                for j in 0..half {
                    let (r, k) = (2 * i, 2 * j);
                    let s = w[0] * img[r * d.side + k]
                        + w[1] * img[r * d.side + k + 1]
                        + w[2] * img[(r + 1) * d.side + k]
                        + w[3] * img[(r + 1) * d.side + k + 1]
                        + w[4];
                    conv_out.push(s.tanh());
                }
            }
        }
        let mut flat_trace = Trace::default();
        self.flat_net.forward(&self.params, &obs.flat, &mut flat_trace);
        let mut joint = conv_out.clone();
        joint.extend_from_slice(flat_trace.output());
        let mut embed_trace = Trace::default();
        self.embed.forward(&self.params, &joint, &mut embed_trace);
        let mut actor_trace = Trace::default();
        self.actor.forward(&self.params, embed_trace.output(), &mut actor_trace);
        let mut critic_trace = Trace::default();
        self.critic.forward(&self.params, embed_trace.output(), &mut critic_trace);
        PolicyForward {
            logits: actor_trace.output().to_vec(),
            value: critic_trace.output()[0],
            conv_out,
            flat_trace,
            embed_trace,
            actor_trace,
            critic_trace,
        }
    }

    /// Accumulate parameter gradients for upstream gradients on the logits
    /// and the value.
    pub fn backward(&self, obs: &Observation, fwd: &PolicyForward, dlogits: &[f64], dvalue: f64, grads: &mut [f64]) {
        let d = self.dims;
        let mut demb = self.actor.backward(&self.params, &fwd.actor_trace, dlogits, grads);
        let dv = self.critic.backward(&self.params, &fwd.critic_trace, &[dvalue], grads);
        for (a, b) in demb.iter_mut().zip(&dv) {
            *a += b;
        }
        let djoint = self.embed.backward(&self.params, &fwd.embed_trace, &demb, grads);
        let pooled = fwd.conv_out.len();
        self.flat_net.backward(&self.params, &fwd.flat_trace, &djoint[pooled..], grads);
        let half = d.side / 2;
        for c in 0..d.channels {
            let img = &obs.image[c * d.side * d.side..(c + 1) * d.side * d.side];
            for i in 0..half {
                for j in 0..half {
                    let o = c * half * half + i * half + j;
                    let y = fwd.conv_out[o];
                    let g = djoint[o] * (1.0 - y * y);
                    if g == 0.0 {
                        continue;
                    }
                    let (r, k) = (2 * i, 2 * j);
                    grads[5 * c] += g * img[r * d.side + k];
                    grads[5 * c + 1] += g * img[r * d.side + k + 1];
                    grads[5 * c + 2] += g * img[(r + 1) * d.side + k];
                    grads[5 * c + 3] += g * img[(r + 1) * d.side + k + 1];
                    grads[5 * c + 4] += g;
                }
            }
        }
    }
}

/// Log-probabilities of the softmax restricted to enabled actions; disabled
/// actions get `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(l, _)| (l - max).exp())
            .sum::<f64>()
            .ln();
    logits
        .iter()
        .zip(mask)
        .map(|(l, m)| if *m { l - lse } else { f64::NEG_INFINITY })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn dims() -> PolicyDims {
        PolicyDims {
            channels: 3,
            side: 4,
            flat: 5,
            actions: 6,
        }
    }

    fn obs(seed: u64) -> Observation {
        let mut r = rng::rng_for(seed, &[1]);
        Observation {
            image: (0..3 * 16).map(|_| r.random_range(-1.0..1.0)).collect(),
            flat: (0..5).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }

    fn objective(m: &PolicyModel, o: &Observation) -> f64 {
        let f = m.forward(o);
        f.logits.iter().enumerate().map(|(i, l)| (i as f64 - 2.0) * l).sum::<f64>() + 3.0 * f.value
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = PolicyModel::new(dims(), 4);
        // Larger actor output weights so every layer carries a visible gradient.
        for p in m.params.iter_mut() {
            *p *= 1.5;
        }
        let o = obs(2);
        let f = m.forward(&o);
        let dl: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect();
        let mut g = vec![0.0; m.n_params()];
        m.backward(&o, &f, &dl, 3.0, &mut g);
        for i in (0..m.n_params()).step_by(13).chain(0..15) {
            let mut q = m.clone();
            q.params[i] += 1e-6;
            let up = objective(&q, &o);
            q.params[i] -= 2e-6;
            let num = (up - objective(&q, &o)) / 2e-6;
            assert!((num - g[i]).abs() <= 1e-5 * (1.0 + num.abs()), "param {i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn masked_softmax_excludes_disabled() {
        let lp = masked_log_softmax(&[1.0, 5.0, 2.0], &[true, false, true]);
        assert_eq!(lp[1], f64::NEG_INFINITY);
        let s: f64 = lp.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!((lp[0] - (1.0f64.exp() / (1.0f64.exp() + 2.0f64.exp())).ln()).abs() < 1e-12);
    }

    #[test]
    fn initial_policy_is_near_uniform() {
        let m = PolicyModel::new(dims(), 1);
        let f = m.forward(&obs(3));
        assert!(f.logits.iter().all(|l| l.abs() < 0.1));
    }
}
