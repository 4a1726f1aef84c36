//! Turning interaction outcomes and confident predictions into per-pixel
//! labels, and packaging labeled frames into episode datasets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{InteractionState, Label, ObjectLevelMap, Provenance};
use crate::rng;
use crate::world::{Affordance, CameraPose, Frame, VisibleInstance, NO_HIT_ID, NUM_AFFORDANCES};

pub const POSITIVE: i8 = 1;
pub const NEGATIVE: i8 = 0;
pub const UNLABELED: i8 = -1;

/// Ternary per-pixel labels for one affordance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<i8>,
}

impl LabelMask {
    pub fn unlabeled(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![UNLABELED; width * height],
        }
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|v| **v == POSITIVE).count()
    }

    pub fn negatives(&self) -> usize {
        self.data.iter().filter(|v| **v == NEGATIVE).count()
    }

    pub fn labeled(&self) -> usize {
        self.data.iter().filter(|v| **v != UNLABELED).count()
    }

    pub fn is_balanced(&self) -> bool {
        self.data.contains(&POSITIVE) && self.data.contains(&NEGATIVE)
    }
}

pub type FrameMasks = [LabelMask; NUM_AFFORDANCES];

pub fn empty_masks(width: usize, height: usize) -> FrameMasks {
    std::array::from_fn(|_| LabelMask::unlabeled(width, height))
}

pub fn any_labeled(masks: &FrameMasks) -> bool {
    masks.iter().any(|m| m.labeled() > 0)
}

/// One attempted interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub step: usize,
    pub instance: i32,
    pub affordance: Affordance,
    pub success: bool,
    /// 3D point of the target at the moment of the attempt.
    pub point: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub xi_t: f64,
    pub xi_f: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { xi_t: 0.9, xi_f: 0.1 }
    }
}

/// Record an interaction outcome. Success dominates: a failure never replaces
/// a label or state earned by an earlier success.
pub fn annotate_by_interaction(map: &mut ObjectLevelMap, id: i32, affordance: Affordance, success: bool) -> Result<()> {
    let rec = map
        .instance_mut(id)
        .ok_or_else(|| Error::contract(format!("interaction with instance {id} unknown to the map")))?;
    let a = affordance.index();
    if !success && rec.interacted[a] == InteractionState::Succeeded {
        return Ok(());
    }
    rec.interacted[a] = if success { InteractionState::Succeeded } else { InteractionState::Failed };
    rec.labels[a] = if success {
        Label::Positive(Provenance::Interaction)
    } else {
        Label::Negative(Provenance::Interaction)
    };
    Ok(())
}

/// Nearest-rank percentile: the element at 1-indexed rank ceil(q*n/100) of the
/// ascending-sorted values. `q` is an integer percent.
pub fn nearest_rank(sorted: &[f32], q: usize) -> f32 {
    assert!(!sorted.is_empty() && q <= 100);
    let rank = (q * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Per-frame P95 and P5 of one instance's pixel predictions, per affordance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePercentiles {
    pub p95: [f32; NUM_AFFORDANCES],
    pub p5: [f32; NUM_AFFORDANCES],
}

/// Percentiles for every instance visible in a frame. `probs` is H*W*A,
/// pixel-major.
pub fn instance_percentiles(frame: &Frame, probs: &[f32]) -> BTreeMap<i32, FramePercentiles> {
    let mut by_id: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (idx, &id) in frame.instance_ids.iter().enumerate() {
        if id != NO_HIT_ID {
            by_id.entry(id).or_default().push(idx);
        }
    }
    let mut out = BTreeMap::new();
    for (id, pixels) in by_id {
        let mut stats = FramePercentiles {
            p95: [0.0; NUM_AFFORDANCES],
            p5: [0.0; NUM_AFFORDANCES],
        };
        for a in 0..NUM_AFFORDANCES {
            let mut v: Vec<f32> = pixels.iter().map(|&i| probs[i * NUM_AFFORDANCES + a]).collect();
            v.sort_by(f32::total_cmp);
            stats.p95[a] = nearest_rank(&v, 95);
            stats.p5[a] = nearest_rank(&v, 5);
        }
        out.insert(id, stats);
    }
    out
}

/// Per-instance percentile history gathered over an episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEvidence {
    pub per_instance: BTreeMap<i32, Vec<FramePercentiles>>,
}

impl ConfidenceEvidence {
    pub fn add_frame(&mut self, frame: &Frame, probs: &[f32]) {
        for (id, s) in instance_percentiles(frame, probs) {
            self.per_instance.entry(id).or_default().push(s);
        }
    }
}

/// The percentile rule for one affordance over an instance's frames.
/// Conflicting evidence abstains.
pub fn confidence_rule(p95: &[f32], p5: &[f32], th: Thresholds) -> Option<bool> {
    let hi = p95.iter().any(|&v| f64::from(v) > th.xi_t);
    let lo = p5.iter().any(|&v| f64::from(v) < th.xi_f);
    match (hi, lo) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

/// Label un-interacted instances from confident predictions. Returns the
/// number of (instance, affordance) labels written.
pub fn annotate_by_confidence(map: &mut ObjectLevelMap, evidence: &ConfidenceEvidence, th: Thresholds) -> usize {
    let mut written = 0;
    for (&id, frames) in &evidence.per_instance {
        let Some(rec) = map.instance_mut(id) else { continue };
        for a in 0..NUM_AFFORDANCES {
            if rec.interacted[a] != InteractionState::None || rec.labels[a].provenance() == Some(Provenance::Interaction) {
                continue;
            }
            let p95: Vec<f32> = frames.iter().map(|f| f.p95[a]).collect();
            let p5: Vec<f32> = frames.iter().map(|f| f.p5[a]).collect();
            rec.labels[a] = match confidence_rule(&p95, &p5, th) {
                Some(true) => Label::Positive(Provenance::Confidence),
                Some(false) => Label::Negative(Provenance::Confidence),
                None => Label::Unknown,
            };
            if rec.labels[a] != Label::Unknown {
                written += 1;
            }
        }
    }
    written
}

/// Paint every labeled instance onto every frame via its segmentation.
pub fn propagate_to_frames(map: &ObjectLevelMap, frames: &[Arc<Frame>]) -> Vec<FrameMasks> {
    frames
        .iter()
        .map(|f| {
            let mut masks = empty_masks(f.width, f.height);
            let mut cache: BTreeMap<i32, [Label; NUM_AFFORDANCES]> = BTreeMap::new();
            for (idx, &id) in f.instance_ids.iter().enumerate() {
                let labels = *cache
                    .entry(id)
                    .or_insert_with(|| map.instance(id).map_or([Label::Unknown; NUM_AFFORDANCES], |r| r.labels));
                for a in 0..NUM_AFFORDANCES {
                    if let Some(v) = labels[a].value() {
                        masks[a].data[idx] = if v { POSITIVE } else { NEGATIVE };
                    }
                }
            }
            masks
        })
        .collect()
}

fn paint(mask: &mut LabelMask, idx: usize, success: bool) {
    if success {
        mask.data[idx] = POSITIVE;
    } else if mask.data[idx] != POSITIVE {
        mask.data[idx] = NEGATIVE;
    }
}

/// Segmentation-free baseline: label every pixel whose 3D point lies within
/// `radius` of the interaction point, in frames within `window` steps of it.
pub fn sphere_annotation(events: &[InteractionEvent], frames: &[Arc<Frame>], radius: f64, window: usize) -> Vec<FrameMasks> {
    let mut out: Vec<FrameMasks> = frames.iter().map(|f| empty_masks(f.width, f.height)).collect();
    for (f, masks) in frames.iter().zip(out.iter_mut()) {
        let near: Vec<&InteractionEvent> = events.iter().filter(|e| e.step.abs_diff(f.step_index) <= window).collect();
        if near.is_empty() {
            continue;
        }
        let points = f.points(0.0);
        for e in near {
            let c = crate::geometry::Vec3::from(e.point);
            for (idx, p) in points.iter().enumerate() {
                if let Some(p) = p {
                    if (p - c).norm() <= radius {
                        paint(&mut masks[e.affordance.index()], idx, e.success);
                    }
                }
            }
        }
    }
    out
}

/// Map-free baseline with segmentation: label the interacted instance's
/// pixels in frames within `window` steps of the attempt.
pub fn segment_window_annotation(events: &[InteractionEvent], frames: &[Arc<Frame>], window: usize) -> Vec<FrameMasks> {
    let mut out: Vec<FrameMasks> = frames.iter().map(|f| empty_masks(f.width, f.height)).collect();
    for (f, masks) in frames.iter().zip(out.iter_mut()) {
        for e in events.iter().filter(|e| e.step.abs_diff(f.step_index) <= window) {
            for (idx, &id) in f.instance_ids.iter().enumerate() {
                if id == e.instance {
                    paint(&mut masks[e.affordance.index()], idx, e.success);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if [self.train, self.val, self.test].iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must be in [0,1] and sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// (train, val, test) sizes for `n` items; val and test are rounded and
    /// train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = ((self.val * n as f64).round() as usize).min(n);
        let test = ((self.test * n as f64).round() as usize).min(n - val);
        (n - val - test, val, test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub frame: Arc<Frame>,
    pub masks: FrameMasks,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeDataset {
    pub episode_id: u64,
    pub samples: Vec<LabeledSample>,
    pub usage_count: u32,
}

impl EpisodeDataset {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |x| x.split == s)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Keep frames with both positive and negative pixels for some affordance,
/// cap their number, and assign a seeded train/val/test split.
pub fn extract_dataset(
    episode_id: u64,
    frames: &[Arc<Frame>],
    masks: &[FrameMasks],
    ratios: SplitRatios,
    max_frames: usize,
    seed: u64,
) -> Result<EpisodeDataset> {
    ratios.validate()?;
    if frames.len() != masks.len() {
        return Err(Error::contract("frames and masks differ in length"));
    }
    let mut keep: Vec<usize> = (0..frames.len()).filter(|&i| masks[i].iter().any(LabelMask::is_balanced)).collect();
    let mut rng = rng::rng_for(seed, &[rng::tag::SPLIT, episode_id]);
    if keep.len() > max_frames {
        keep.shuffle(&mut rng);
        keep.truncate(max_frames);
        keep.sort_unstable();
    }
    let mut order: Vec<usize> = (0..keep.len()).collect();
    order.shuffle(&mut rng);
    let (n_train, n_val, _) = ratios.sizes(keep.len());
    let mut splits = vec![Split::Train; keep.len()];
    for (rank, &pos) in order.iter().enumerate() {
        splits[pos] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let samples = keep
        .iter()
        .zip(splits)
        .map(|(&i, split)| LabeledSample {
            frame: Arc::clone(&frames[i]),
            masks: masks[i].clone(),
            split,
        })
        .collect();
    Ok(EpisodeDataset {
        episode_id,
        samples,
        usage_count: 0,
    })
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetIndex {
    schema_version: u32,
    episode_id: u64,
    usage_count: u32,
    width: usize,
    height: usize,
    vfov_deg: f64,
    max_range: f64,
    affordances: Vec<String>,
    /// Per-pixel layout of `frames.bin`: depth f32, instance id i32, rgb 3*f32.
    frame_dtype: String,
    mask_dtype: String,
    samples: Vec<SampleIndex>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SampleIndex {
    step_index: usize,
    split: Split,
    camera: CameraPose,
    visible: Vec<VisibleInstance>,
}

impl EpisodeDataset {
    /// Write `index.json`, `frames.bin` and `masks.bin` (int8) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (width, height, vfov_deg, max_range) = self
            .samples
            .first()
            .map_or((0, 0, 0.0, 0.0), |s| (s.frame.width, s.frame.height, s.frame.vfov_deg, s.frame.max_range));
        let index = DatasetIndex {
            schema_version: DATASET_SCHEMA_VERSION,
            episode_id: self.episode_id,
            usage_count: self.usage_count,
            width,
            height,
            vfov_deg,
            max_range,
            affordances: Affordance::ALL.iter().map(|a| a.name().to_string()).collect(),
            frame_dtype: "depth:f32le,instance:i32le,rgb:3xf32le".into(),
            mask_dtype: "i8".into(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleIndex {
                    step_index: s.frame.step_index,
                    split: s.split,
                    camera: s.frame.camera,
                    visible: s.frame.visible.clone(),
                })
                .collect(),
        };
        fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        let mut frames = fs::File::create(dir.join("frames.bin"))?;
        let mut masks = fs::File::create(dir.join("masks.bin"))?;
        for s in &self.samples {
            let f = &s.frame;
            let mut buf = Vec::with_capacity(f.len() * 20);
            for i in 0..f.len() {
                buf.extend_from_slice(&f.depth[i].to_le_bytes());
                buf.extend_from_slice(&f.instance_ids[i].to_le_bytes());
                for c in 0..3 {
                    buf.extend_from_slice(&f.appearance[3 * i + c].to_le_bytes());
                }
            }
            frames.write_all(&buf)?;
            for m in &s.masks {
                masks.write_all(&m.data.iter().map(|v| *v as u8).collect::<Vec<u8>>())?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(index_path.clone()),
            _ => Error::Io(e),
        })?;
        let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::malformed(&index_path, e.to_string()))?;
        if index.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::malformed(&index_path, format!("unsupported schema version {}", index.schema_version)));
        }
        let n = index.width * index.height;
        let mut frames_raw = Vec::new();
        fs::File::open(dir.join("frames.bin"))?.read_to_end(&mut frames_raw)?;
        let mut masks_raw = Vec::new();
        fs::File::open(dir.join("masks.bin"))?.read_to_end(&mut masks_raw)?;
        let ns = index.samples.len();
        if frames_raw.len() != ns * n * 20 || masks_raw.len() != ns * n * NUM_AFFORDANCES {
            return Err(Error::malformed(dir, "binary payload size does not match index"));
        }
        let f32_at = |b: &[u8], o: usize| f32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let mut samples = Vec::with_capacity(ns);
        for (k, si) in index.samples.into_iter().enumerate() {
            let base = k * n * 20;
            let mut depth = Vec::with_capacity(n);
            let mut ids = Vec::with_capacity(n);
            let mut appearance = Vec::with_capacity(3 * n);
            for i in 0..n {
                let o = base + i * 20;
                depth.push(f32_at(&frames_raw, o));
                ids.push(i32::from_le_bytes(frames_raw[o + 4..o + 8].try_into().expect("4 bytes")));
                for c in 0..3 {
                    appearance.push(f32_at(&frames_raw, o + 8 + 4 * c));
                }
            }
            let frame = Frame {
                width: index.width,
                height: index.height,
                vfov_deg: index.vfov_deg,
                max_range: index.max_range,
                depth,
                instance_ids: ids,
                appearance,
                camera: si.camera,
                step_index: si.step_index,
                visible: si.visible,
            };
            let masks: FrameMasks = std::array::from_fn(|a| {
                let o = (k * NUM_AFFORDANCES + a) * n;
                LabelMask {
                    width: index.width,
                    height: index.height,
                    data: masks_raw[o..o + n].iter().map(|v| *v as i8).collect(),
                }
            });
            samples.push(LabeledSample {
                frame: Arc::new(frame),
                masks,
                split: si.split,
            });
        }
        Ok(Self {
            episode_id: index.episode_id,
            samples,
            usage_count: index.usage_count,
        })
    }
}
