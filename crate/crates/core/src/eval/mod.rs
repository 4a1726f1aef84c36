//! Metrics, evaluation protocols and ablation reports.

mod protocol;
mod report;

pub use protocol::{
    evaluate_frames, objectwise_interaction_test, scripted_tour, viewing_pose, EvalConfig, FrameEvaluation,
    ObjectTrial, ObjectwiseResult,
};
pub use report::{
    aggregate_curves, final_values, plot_metrics, read_records, summary_markdown, write_records, CurvePoint, Metric,
    MetricRecord, ObjectwiseRow, REPORT_HEADER,
};

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::labeling::{FrameMasks, InteractionEvent, NEGATIVE, POSITIVE};
use crate::world::{Affordance, Frame, Scene, NUM_AFFORDANCES};

/// Per-pixel predictions at or above `threshold` for one affordance.
pub fn binarize(probs: &[f32], affordance: Affordance, threshold: f64) -> Vec<bool> {
    probs
        .chunks_exact(NUM_AFFORDANCES)
        .map(|p| f64::from(p[affordance.index()]) >= threshold)
        .collect()
}

/// Ground-truth mask: pixels of instances whose category affords the action.
pub fn ground_truth_mask(frame: &Frame, scene: &Scene, affordance: Affordance) -> Vec<bool> {
    frame.instance_ids.iter().map(|&id| id > 0 && scene.affords(id, affordance)).collect()
}

/// Intersection over union; 1 when both sets are empty.
pub fn affordance_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        inter += usize::from(*p && *g);
        union += usize::from(*p || *g);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binary confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_pairs(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (p, g) in pred.iter().zip(gt) {
            c.add(*p, *g);
        }
        c
    }

    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// tp / (tp + fp). With no predicted positives: 1 if there was nothing
    /// to find, else 0.
    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 => f64::from(u8::from(self.fn_ == 0)),
            d => self.tp as f64 / d as f64,
        }
    }

    /// tp / (tp + fn). With no actual positives: 1 if nothing was
    /// predicted positive, else 0.
    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 => f64::from(u8::from(self.fp == 0)),
            d => self.tp as f64 / d as f64,
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => (self.tp + self.tn) as f64 / n as f64,
        }
    }

    /// Jaccard index of the predicted and true positive sets; 1 when both are empty.
    pub fn iou(&self) -> f64 {
        match self.tp + self.fp + self.fn_ {
            0 => 1.0,
            d => self.tp as f64 / d as f64,
        }
    }
}

/// Fraction of visible objects (at least `min_pixels`) whose majority-vote
/// prediction matches ground truth. Ties vote positive. `None` without
/// visible objects.
pub fn object_accuracy(
    probs: &[f32],
    frame: &Frame,
    scene: &Scene,
    affordance: Affordance,
    threshold: f64,
    min_pixels: u32,
) -> Option<f64> {
    let pred = binarize(probs, affordance, threshold);
    let mut votes: std::collections::BTreeMap<i32, (u32, u32)> = Default::default();
    for (&id, &p) in frame.instance_ids.iter().zip(&pred) {
        if id > 0 {
            let e = votes.entry(id).or_default();
            e.0 += u32::from(p);
            e.1 += 1;
        }
    }
    let (mut correct, mut seen) = (0usize, 0usize);
    for (id, (pos, n)) in votes {
        if n < min_pixels {
            continue;
        }
        seen += 1;
        let predicted = 2 * pos >= n;
        correct += usize::from(predicted == scene.affords(id, affordance));
    }
    (seen > 0).then(|| correct as f64 / seen as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRates {
    pub interaction_success_rate: f64,
    /// `None` when the scene has no interactable object.
    pub interacted_object_rate: Option<f64>,
    pub interactable_annotation_rate: [f64; NUM_AFFORDANCES],
    pub non_interactable_annotation_rate: [f64; NUM_AFFORDANCES],
}

/// Episode-level rates. Annotation rates count correctly annotated positive
/// (resp. negative) pixels over all pixels of all episode frames.
pub fn episode_rates(events: &[InteractionEvent], scene: &Scene, masks: &[FrameMasks], frames: &[Arc<Frame>]) -> EpisodeRates {
    let successes = events.iter().filter(|e| e.success).count();
    let interaction_success_rate = if events.is_empty() {
        0.0
    } else {
        successes as f64 / events.len() as f64
    };
    let interactable: BTreeSet<i32> = scene.ids().filter(|id| scene.interactable(*id)).collect();
    let touched: BTreeSet<i32> = events.iter().map(|e| e.instance).filter(|id| interactable.contains(id)).collect();
    let interacted_object_rate = (!interactable.is_empty()).then(|| touched.len() as f64 / interactable.len() as f64);

    let mut pos = [0u64; NUM_AFFORDANCES];
    let mut neg = [0u64; NUM_AFFORDANCES];
    let mut total = 0u64;
    for (f, m) in frames.iter().zip(masks) {
        total += f.len() as u64;
        for a in Affordance::ALL {
            let ai = a.index();
            for (&id, &l) in f.instance_ids.iter().zip(&m[ai].data) {
                let truth = id > 0 && scene.affords(id, a);
                pos[ai] += u64::from(l == POSITIVE && truth);
                neg[ai] += u64::from(l == NEGATIVE && !truth);
            }
        }
    }
    let rate = |n: u64| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    EpisodeRates {
        interaction_success_rate,
        interacted_object_rate,
        interactable_annotation_rate: pos.map(rate),
        non_interactable_annotation_rate: neg.map(rate),
    }
}

/// Upper bound on IoU implied by F1 on the same sets (they are equal there).
pub fn iou_bound(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}
