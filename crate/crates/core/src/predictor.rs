//! Per-pixel affordance predictor: hand-built features, a small MLP with
//! sigmoid outputs, BCE + Dice training, best-model replacement and dataset
//! retirement.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{EpisodeDataset, LabeledSample, Split, NEGATIVE, POSITIVE, UNLABELED};
use crate::nn::{sigmoid, Activation, Adam, AdamConfig, Mlp, Trace};
use crate::rng;
use crate::world::{Affordance, Frame, Scene, VisibleInstance, NO_HIT_ID, NUM_AFFORDANCES};

pub const FEATURE_DIM: usize = 12;
pub const P_CLIP: f64 = 1e-6;
const DICE_EPS: f64 = 1.0;

pub type Features = [f64; FEATURE_DIM];

/// Features for every pixel: depth, point height, image (u, v), instance
/// extents, volume, distance to the instance centre and RGB, roughly scaled
/// to unit range. Pixels without a hit get max depth and zero geometry.
pub fn frame_features(frame: &Frame) -> Vec<Features> {
    let geom: BTreeMap<i32, &VisibleInstance> = frame.visible.iter().map(|v| (v.id, v)).collect();
    let points = frame.points(0.0);
    let (w, h) = (frame.width as f64, frame.height as f64);
    (0..frame.len())
        .map(|idx| {
            let (row, col) = ((idx / frame.width) as f64, (idx % frame.width) as f64);
            let u = (col + 0.5) / w * 2.0 - 1.0;
            let v = (row + 0.5) / h * 2.0 - 1.0;
            let rgb = [0, 1, 2].map(|c| f64::from(frame.appearance[3 * idx + c]));
            let id = frame.instance_ids[idx];
            match (points[idx], geom.get(&id)) {
                (Some(p), Some(g)) if id != NO_HIT_ID => {
                    let c = crate::geometry::Vec3::from(g.center);
                    [
                        f64::from(frame.depth[idx]) / frame.max_range,
                        p.z / 2.0,
                        u,
                        v,
                        g.extent[0] / 2.0,
                        g.extent[1] / 2.0,
                        g.extent[2] / 2.0,
                        g.volume,
                        (p - c).norm() / 2.0,
                        rgb[0],
                        rgb[1],
                        rgb[2],
                    ]
                }
                _ => [1.0, 0.0, u, v, 0.0, 0.0, 0.0, 0.0, 0.0, rgb[0], rgb[1], rgb[2]],
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    /// Test fixture that reads ground truth from the scene.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordanceModel {
    pub kind: ModelKind,
    pub net: Mlp,
    pub params: Vec<f64>,
    pub version: u64,
    pub val_score: f64,
}

impl AffordanceModel {
    pub fn new(hidden: &[usize], seed: u64) -> Self {
        let mut m = Self::zeros(hidden);
        let mut r = rng::rng_for(seed, &[rng::tag::INIT, 1]);
        m.net.init(&mut m.params, &mut r, 1.0);
        m
    }

    /// All-zero weights: every output is exactly 0.5.
    pub fn zeros(hidden: &[usize]) -> Self {
        let mut sizes = vec![FEATURE_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(NUM_AFFORDANCES);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        let net = Mlp::new(&sizes, &acts, 0);
        Self {
            kind: ModelKind::Mlp,
            params: vec![0.0; net.len],
            net,
            version: 0,
            val_score: 0.0,
        }
    }

    pub fn oracle() -> Self {
        Self {
            kind: ModelKind::Oracle,
            ..Self::zeros(&[])
        }
    }

    pub fn logits(&self, x: &Features, trace: &mut Trace) -> [f64; NUM_AFFORDANCES] {
        self.net.forward(&self.params, x, trace);
        let o = trace.output();
        std::array::from_fn(|a| o[a])
    }

    pub fn predict_features(&self, feats: &[Features]) -> Vec<[f64; NUM_AFFORDANCES]> {
        let mut t = Trace::default();
        feats.iter().map(|x| self.logits(x, &mut t).map(sigmoid)).collect()
    }

    /// Probabilities for every pixel, `H*W*A` pixel-major, strictly in (0, 1).
    pub fn predict(&self, frame: &Frame, scene: &Scene) -> Vec<f32> {
        let mut out = Vec::with_capacity(frame.len() * NUM_AFFORDANCES);
        match self.kind {
            ModelKind::Oracle => {
                for &id in &frame.instance_ids {
                    for a in Affordance::ALL {
                        let yes = id > 0 && scene.affords(id, a);
                        out.push(if yes { (1.0 - P_CLIP) as f32 } else { P_CLIP as f32 });
                    }
                }
            }
            ModelKind::Mlp => {
                let feats = frame_features(frame);
                let mut t = Trace::default();
                let mut cache: Option<(Features, [f32; NUM_AFFORDANCES])> = None;
                for x in &feats {
                    let p = match cache {
                        Some((k, p)) if k == *x => p,
                        _ => {
                            let p = self.logits(x, &mut t).map(|z| sigmoid(z).clamp(P_CLIP, 1.0 - P_CLIP) as f32);
                            cache = Some((*x, p));
                            p
                        }
                    };
                    out.extend_from_slice(&p);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 1.0, dice: 1.0 }
    }
}

/// BCE + (1 - Dice) over labeled pixels, averaged across affordances that
/// have labels. Returns the loss and its gradient with respect to the logits.
pub fn loss_and_grad(
    logits: &[[f64; NUM_AFFORDANCES]],
    targets: &[[i8; NUM_AFFORDANCES]],
    w: LossWeights,
) -> Result<(f64, Vec<[f64; NUM_AFFORDANCES]>)> {
    if logits.len() != targets.len() {
        return Err(Error::contract("logits and targets differ in length"));
    }
    let mut grad = vec![[0.0; NUM_AFFORDANCES]; logits.len()];
    let mut total = 0.0;
    let mut active = 0usize;
    for a in 0..NUM_AFFORDANCES {
        // (pixel, clipped p, target, d p / d logit)
        let mut px: Vec<(usize, f64, f64, f64)> = Vec::new();
        for (i, (z, t)) in logits.iter().zip(targets).enumerate() {
            if t[a] == UNLABELED {
                continue;
            }
            let raw = sigmoid(z[a]);
            let dp_dz = if (P_CLIP..=1.0 - P_CLIP).contains(&raw) { raw * (1.0 - raw) } else { 0.0 };
            let y = if t[a] == POSITIVE { 1.0 } else { 0.0 };
            px.push((i, raw.clamp(P_CLIP, 1.0 - P_CLIP), y, dp_dz));
        }
        if px.is_empty() {
            continue;
        }
        active += 1;
        let n = px.len() as f64;
        let bce = -px.iter().map(|&(_, p, y, _)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>() / n;
        let num = 2.0 * px.iter().map(|&(_, p, y, _)| p * y).sum::<f64>() + DICE_EPS;
        let den = px.iter().map(|&(_, p, y, _)| p + y).sum::<f64>() + DICE_EPS;
        total += w.bce * bce + w.dice * (1.0 - num / den);
        for (i, p, y, dp_dz) in px {
            let dbce = -(y / p - (1.0 - y) / (1.0 - p)) / n;
            let ddice = (2.0 * y * den - num) / (den * den);
            grad[i][a] = (w.bce * dbce - w.dice * ddice) * dp_dz;
        }
    }
    if active == 0 {
        return Err(Error::contract("loss needs at least one labeled pixel"));
    }
    let k = active as f64;
    grad.iter_mut().flatten().for_each(|g| *g /= k);
    Ok((total / k, grad))
}

/// Fixed subsample of a labeled frame's pixels with precomputed features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelSet {
    pub features: Vec<Features>,
    pub targets: Vec<[i8; NUM_AFFORDANCES]>,
}

impl PixelSet {
    /// Up to `max_pixels` labeled pixels, half drawn from pixels positive for
    /// some affordance and half from the rest.
    pub fn from_sample(sample: &LabeledSample, max_pixels: usize, seed: u64) -> Self {
        let f = &sample.frame;
        let mut pos = Vec::new();
        let mut other = Vec::new();
        for idx in 0..f.len() {
            let labels: Vec<i8> = sample.masks.iter().map(|m| m.data[idx]).collect();
            if labels.iter().all(|&l| l == UNLABELED) {
                continue;
            }
            if labels.contains(&POSITIVE) {
                pos.push(idx);
            } else {
                other.push(idx);
            }
        }
        let mut r = rng::rng_for(seed, &[rng::tag::SUBSAMPLE, f.step_index as u64]);
        pos.shuffle(&mut r);
        other.shuffle(&mut r);
        let half = max_pixels / 2;
        let take_pos = pos.len().min(half.max(max_pixels.saturating_sub(other.len())));
        let take_other = other.len().min(max_pixels - take_pos);
        let mut chosen: Vec<usize> = pos[..take_pos].iter().chain(&other[..take_other]).copied().collect();
        chosen.sort_unstable();
        let all = frame_features(f);
        Self {
            features: chosen.iter().map(|&i| all[i]).collect(),
            targets: chosen.iter().map(|&i| std::array::from_fn(|a| sample.masks[a].data[i])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDataset {
    pub episode_id: u64,
    pub usage_count: u32,
    pub train: Vec<PixelSet>,
    pub val: Vec<PixelSet>,
    pub test: Vec<PixelSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    pub epochs_per_episode: usize,
    pub batch_frames: usize,
    pub pixels_per_frame: usize,
    pub max_frames_per_episode: usize,
    pub max_usage: u32,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            epochs_per_episode: 5,
            batch_frames: 8,
            pixels_per_frame: 96,
            max_frames_per_episode: 32,
            max_usage: 35,
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: PredictorConfig,
    pub seed: u64,
    pub datasets: Vec<TrainDataset>,
    pub optimizer: Adam,
    pub epochs: u64,
    pub steps: u64,
}

impl TrainState {
    pub fn new(config: PredictorConfig, model: &AffordanceModel, seed: u64) -> Self {
        let optimizer = Adam::new(config.optimizer, model.params.len());
        Self {
            config,
            seed,
            datasets: Vec::new(),
            optimizer,
            epochs: 0,
            steps: 0,
        }
    }

    pub fn add_dataset(&mut self, ds: &EpisodeDataset) {
        if ds.is_empty() {
            return;
        }
        let seed = rng::derive(self.seed, &[rng::tag::SUBSAMPLE, ds.episode_id]);
        let n = self.config.pixels_per_frame;
        let make = |s: Split| ds.split(s).map(|x| PixelSet::from_sample(x, n, seed)).filter(|p| !p.is_empty()).collect();
        self.datasets.push(TrainDataset {
            episode_id: ds.episode_id,
            usage_count: ds.usage_count,
            train: make(Split::Train),
            val: make(Split::Val),
            test: make(Split::Test),
        });
    }

    pub fn validation_set(&self) -> Vec<&PixelSet> {
        self.datasets.iter().flat_map(|d| d.val.iter()).collect()
    }

    /// One pass over every live dataset in minibatches of frames. Bumps usage
    /// counts and retires datasets that reach the limit. Returns the mean
    /// minibatch loss, or `None` when there was nothing to train on.
    pub fn train_epoch(&mut self, model: &mut AffordanceModel) -> Result<Option<f64>> {
        if self.datasets.is_empty() {
            return Ok(None);
        }
        let mut order: Vec<(usize, usize)> = self
            .datasets
            .iter()
            .enumerate()
            .flat_map(|(d, ds)| (0..ds.train.len()).map(move |s| (d, s)))
            .collect();
        let mut r = rng::rng_for(self.seed, &[rng::tag::TRAIN, self.epochs]);
        order.shuffle(&mut r);
        let mut losses = Vec::new();
        let mut trace = Trace::default();
        for batch in order.chunks(self.config.batch_frames.max(1)) {
            let mut grads = vec![0.0; model.params.len()];
            let mut batch_loss = 0.0;
            for &(d, s) in batch {
                let set = &self.datasets[d].train[s];
                let (l, _) = accumulate_frame_grad(model, set, self.config.loss, &mut grads, &mut trace)?;
                batch_loss += l;
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("predictor loss at epoch {}", self.epochs)));
            }
            self.optimizer.step(&mut model.params, &grads);
            self.steps += 1;
            losses.push(batch_loss * scale);
        }
        self.epochs += 1;
        let limit = self.config.max_usage;
        for d in &mut self.datasets {
            d.usage_count += 1;
        }
        self.datasets.retain(|d| d.usage_count < limit);
        Ok((!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64))
    }
}

/// Loss of one pixel set; adds parameter gradients into `grads`.
pub fn accumulate_frame_grad(
    model: &AffordanceModel,
    set: &PixelSet,
    w: LossWeights,
    grads: &mut [f64],
    trace: &mut Trace,
) -> Result<(f64, usize)> {
    let logits: Vec<[f64; NUM_AFFORDANCES]> = set.features.iter().map(|x| model.logits(x, trace)).collect();
    let (loss, dz) = loss_and_grad(&logits, &set.targets, w)?;
    for (x, g) in set.features.iter().zip(&dz) {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        model.net.forward(&model.params, x, trace);
        model.net.backward(&model.params, trace, g, grads);
    }
    Ok((loss, set.len()))
}

/// Pooled pixel F1 per affordance at threshold 0.5, averaged over
/// affordances with any positive label or prediction. Empty input scores 0.
pub fn mean_pixel_f1(model: &AffordanceModel, sets: &[&PixelSet]) -> f64 {
    let mut tp = [0usize; NUM_AFFORDANCES];
    let mut fp = [0usize; NUM_AFFORDANCES];
    let mut fn_ = [0usize; NUM_AFFORDANCES];
    for s in sets {
        for (p, t) in model.predict_features(&s.features).iter().zip(&s.targets) {
            for a in 0..NUM_AFFORDANCES {
                let pred = p[a] >= 0.5;
                match t[a] {
                    POSITIVE if pred => tp[a] += 1,
                    POSITIVE => fn_[a] += 1,
                    NEGATIVE if pred => fp[a] += 1,
                    _ => {}
                }
            }
        }
    }
    let scores: Vec<f64> = (0..NUM_AFFORDANCES)
        .filter(|&a| tp[a] + fp[a] + fn_[a] > 0)
        .map(|a| 2.0 * tp[a] as f64 / (2 * tp[a] + fp[a] + fn_[a]) as f64)
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Adopt `candidate` iff it strictly beats `best` on the shared validation set.
/// Returns whether a replacement happened.
pub fn maybe_replace(best: &mut AffordanceModel, candidate: &AffordanceModel, val: &[&PixelSet]) -> bool {
    if val.is_empty() {
        return false;
    }
    let incumbent = mean_pixel_f1(best, val);
    let challenger = mean_pixel_f1(candidate, val);
    if challenger > incumbent {
        let version = best.version + 1;
        *best = AffordanceModel {
            version,
            val_score: challenger,
            ..candidate.clone()
        };
        true
    } else {
        best.val_score = incumbent;
        false
    }
}

const MAGIC: &[u8; 8] = b"AFFCKPT1";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    kind: ModelKind,
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    affordances: Vec<String>,
    version: u64,
    val_score: f64,
    n_params: usize,
}

impl AffordanceModel {
    /// Magic, u32 LE header length, JSON header, then the weights as f64 LE.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind: self.kind,
            sizes: self.net.sizes(),
            activations: self.net.activations(),
            affordances: Affordance::ALL.iter().map(|a| a.name().to_string()).collect(),
            version: self.version,
            val_score: self.val_score,
            n_params: self.params.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |why: &str| Error::malformed(path, why.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if h.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        if h.sizes.first() != Some(&FEATURE_DIM) || h.sizes.last() != Some(&NUM_AFFORDANCES) || h.activations.len() + 1 != h.sizes.len() {
            return Err(bad("layer sizes do not match the feature and affordance counts"));
        }
        let net = Mlp::new(&h.sizes, &h.activations, 0);
        let weights = &bytes[12 + hlen..];
        if net.len != h.n_params || weights.len() != 8 * h.n_params {
            return Err(bad("weight payload size mismatch"));
        }
        let params = weights.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self {
            kind: h.kind,
            net,
            params,
            version: h.version,
            val_score: h.val_score,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes, path)
    }
}
