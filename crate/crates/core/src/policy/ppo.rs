use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, AdamConfig};
use crate::rng::Rng;

use super::model::{masked_log_softmax, PolicyModel};
use super::observation::Observation;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 4,
            minibatch: 64,
            lr: 3e-4,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn optimizer(&self, n_params: usize) -> Adam {
        Adam::new(
            AdamConfig {
                lr: self.lr,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            n_params,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub mask: Vec<bool>,
    pub logp: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    /// Value estimate after the last transition; ignored when it is terminal.
    pub last_value: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    fn check_finite(&self, which: usize) -> Result<()> {
        if !self.last_value.is_finite() {
            return Err(Error::NonFinite(format!("rollout {which}: bootstrap value {}", self.last_value)));
        }
        for (k, t) in self.transitions.iter().enumerate() {
            if !(t.reward.is_finite() && t.value.is_finite() && t.logp.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "rollout {which} step {k}: reward {} value {} logp {}",
                    t.reward, t.value, t.logp
                )));
            }
            if !t.obs.is_finite() {
                return Err(Error::NonFinite(format!("rollout {which} step {k}: observation")));
            }
            if !t.mask.get(t.action).copied().unwrap_or(false) {
                return Err(Error::contract(format!("rollout {which} step {k}: action {} is masked", t.action)));
            }
        }
        Ok(())
    }
}

/// Generalized advantage estimates and value targets.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        acc = delta + gamma * lambda * live * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Negated clipped surrogate for one sample and its derivative with respect
/// to the new log-probability.
pub fn clipped_surrogate(logp_new: f64, logp_old: f64, adv: f64, eps: f64) -> (f64, f64) {
    let r = (logp_new - logp_old).exp();
    let unclipped = r * adv;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (-unclipped, -unclipped)
    } else {
        (-clipped, 0.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub samples: usize,
}

/// Clipped-objective PPO over complete rollouts.
pub fn ppo_update(model: &mut PolicyModel, opt: &mut Adam, rollouts: &[Rollout], cfg: &PpoConfig, rng: &mut Rng) -> Result<PpoStats> {
    if rollouts.iter().all(Rollout::is_empty) {
        return Err(Error::contract("ppo_update needs at least one non-empty rollout"));
    }
    for (i, r) in rollouts.iter().enumerate() {
        r.check_finite(i)?;
    }
    let mut samples: Vec<(&Transition, f64, f64)> = Vec::new();
    for r in rollouts {
        let rewards: Vec<f64> = r.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = r.transitions.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = r.transitions.iter().map(|t| t.done).collect();
        let (adv, ret) = gae(&rewards, &values, &dones, r.last_value, cfg.gamma, cfg.lambda);
        samples.extend(r.transitions.iter().zip(adv).zip(ret).map(|((t, a), v)| (t, a, v)));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let std = (samples.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
    for s in samples.iter_mut() {
        s.1 = (s.1 - mean) / (std + 1e-8);
    }

    let mut stats = PpoStats::default();
    let mut batches = 0usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grads = vec![0.0; model.n_params()];
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let m = chunk.len() as f64;
            let mut b = PpoStats::default();
            for &k in chunk {
                let (t, adv, ret) = samples[k];
                let fwd = model.forward(&t.obs);
                let logp = masked_log_softmax(&fwd.logits, &t.mask);
                let (pl, dlp) = clipped_surrogate(logp[t.action], t.logp, adv, cfg.clip);
                let ratio = (logp[t.action] - t.logp).exp();
                if (ratio - 1.0).abs() > cfg.clip {
                    b.clip_fraction += 1.0;
                }
                let entropy: f64 = logp.iter().filter(|l| l.is_finite()).map(|l| -l.exp() * l).sum();
                let mut dlogits = vec![0.0; fwd.logits.len()];
                for (j, l) in logp.iter().enumerate() {
                    if !l.is_finite() {
                        continue;
                    }
                    let p = l.exp();
                    let onehot = if j == t.action { 1.0 } else { 0.0 };
                    dlogits[j] = (dlp * (onehot - p) + cfg.entropy_coef * p * (l + entropy)) / m;
                }
                let verr = fwd.value - ret;
                let dvalue = cfg.value_coef * 2.0 * verr / m;
                model.backward(&t.obs, &fwd, &dlogits, dvalue, &mut grads);
                b.policy_loss += pl;
                b.value_loss += verr * verr;
                b.entropy += entropy;
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("policy gradient".into()));
            }
            stats.grad_norm += clip_grad_norm(&mut grads, cfg.max_grad_norm);
            opt.step(&mut model.params, &grads);
            stats.policy_loss += b.policy_loss / m;
            stats.value_loss += b.value_loss / m;
            stats.entropy += b.entropy / m;
            stats.clip_fraction += b.clip_fraction / m;
            batches += 1;
        }
    }
    let nb = batches as f64;
    stats.policy_loss /= nb;
    stats.value_loss /= nb;
    stats.entropy /= nb;
    stats.clip_fraction /= nb;
    stats.grad_norm /= nb;
    stats.samples = samples.len();
    Ok(stats)
}
