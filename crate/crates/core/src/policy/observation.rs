use std::collections::VecDeque;

use nalgebra::Isometry3;
use serde::{Deserialize, Serialize};

use crate::mapping::{egocentric_crop, project_all, InteractionState, ObjectLevelMap, VisitGrid};
use crate::world::{distance_image, AgentState, Frame, Room, NUM_AFFORDANCES};

use super::{ActionMode, Arm};

/// Appearance (3) + distance (1) + predictions.
const BASE_CHANNELS: usize = 4 + NUM_AFFORDANCES;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    /// Side of every image-like channel in cells.
    pub side: usize,
    /// Extent of the local egocentric crops (m).
    pub local_extent: f64,
    /// Extent of the global egocentric crops (m).
    pub global_extent: f64,
    pub history: usize,
    /// Decay of the running average used in place of map channels.
    pub ema_decay: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            side: 16,
            local_extent: 2.0,
            global_extent: 10.0,
            history: 5,
            ema_decay: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Channel-major `channels * side * side`.
    pub image: Vec<f64>,
    pub flat: Vec<f64>,
}

impl Observation {
    pub fn is_finite(&self) -> bool {
        self.image.iter().chain(&self.flat).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HistoryEntry {
    action: usize,
    success: bool,
    reward: f64,
}

/// Encodes agent state into network inputs. Holds the action history and,
/// for the no-map arms, the running average of past base channels.
#[derive(Clone, Debug)]
pub struct ObservationBuilder {
    pub config: ObservationConfig,
    pub arm: Arm,
    pub mode: ActionMode,
    history: VecDeque<HistoryEntry>,
    ema: Vec<f64>,
}

impl ObservationBuilder {
    pub fn new(config: ObservationConfig, arm: Arm, mode: ActionMode) -> Self {
        let cells = config.side * config.side;
        Self {
            config,
            arm,
            mode,
            history: VecDeque::new(),
            ema: vec![0.0; BASE_CHANNELS * cells],
        }
    }

    pub fn channels(&self) -> usize {
        if self.arm.uses_map() {
            BASE_CHANNELS + 2 + 1 + 6
        } else {
            2 * BASE_CHANNELS
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.config.history * (self.mode.num_actions() + 2) + 1
    }

    /// Build the observation. `map` is consulted only by the full arm.
    pub fn build(
        &self,
        frame: &Frame,
        probs: &[f32],
        agent: &AgentState,
        arm_base: [f64; 3],
        map: Option<&ObjectLevelMap>,
        visits: &VisitGrid,
        room: &Room,
    ) -> Observation {
        let s = self.config.side;
        let cells = s * s;
        let mut image = Vec::with_capacity(self.channels() * cells);
        for ch in 0..3 {
            image.extend(downsample(frame, s, |i| f64::from(frame.appearance[3 * i + ch])));
        }
        let dist = distance_image(frame, &Isometry3::translation(arm_base[0], arm_base[1], arm_base[2]));
        let range = frame.max_range;
        image.extend(downsample(frame, s, |i| f64::from(dist[i]).min(range) / range));
        for a in 0..NUM_AFFORDANCES {
            image.extend(downsample(frame, s, |i| f64::from(probs[i * NUM_AFFORDANCES + a])));
        }
        match (self.arm.uses_map(), map) {
            (true, Some(map)) => {
                let visited = visits.to_grid();
                let c = &self.config;
                image.extend(egocentric_crop(&visited, agent, c.local_extent, s).iter().map(|v| f64::from(*v)));
                image.extend(egocentric_crop(&visited, agent, c.global_extent, s).iter().map(|v| f64::from(*v)));
                let states = map.interacted_objects_mask(frame);
                image.extend(downsample(frame, s, |i| match states[i] {
                    InteractionState::None => 0.0,
                    InteractionState::Failed => 0.5,
                    InteractionState::Succeeded => 1.0,
                }));
                for g in project_all(map, room) {
                    image.extend(egocentric_crop(&g, agent, c.local_extent, s).iter().map(|v| f64::from(*v)));
                    image.extend(egocentric_crop(&g, agent, c.global_extent, s).iter().map(|v| f64::from(*v)));
                }
            }
            (true, None) => image.resize(self.channels() * cells, 0.0),
            (false, _) => image.extend_from_slice(&self.ema),
        }
        debug_assert_eq!(image.len(), self.channels() * cells);

        let n = self.mode.num_actions();
        let mut flat = vec![0.0; self.flat_dim()];
        // Oldest first; missing entries at the front stay zero.
        let pad = self.config.history - self.history.len();
        for (k, h) in self.history.iter().enumerate() {
            let base = (pad + k) * (n + 2);
            flat[base + h.action] = 1.0;
            flat[base + n] = f64::from(u8::from(h.success));
            flat[base + n + 1] = h.reward;
        }
        *flat.last_mut().expect("flat part is non-empty") = f64::from(u8::from(agent.holding()));
        Observation { image, flat }
    }

    /// Push the executed step into the history and fold the observation's
    /// base channels into the running average.
    pub fn record(&mut self, obs: &Observation, action: usize, success: bool, reward: f64) {
        if self.config.history > 0 {
            if self.history.len() == self.config.history {
                self.history.pop_front();
            }
            self.history.push_back(HistoryEntry { action, success, reward });
        }
        let d = self.config.ema_decay;
        for (e, v) in self.ema.iter_mut().zip(&obs.image) {
            *e = d * *e + (1.0 - d) * v;
        }
    }
}

/// Area-average a per-pixel quantity onto a `side x side` grid. Cells that
/// receive no pixel (frames smaller than the grid) take the nearest pixel.
fn downsample(frame: &Frame, side: usize, value: impl Fn(usize) -> f64) -> Vec<f64> {
    let (h, w) = (frame.height, frame.width);
    let mut sum = vec![0.0; side * side];
    let mut count = vec![0u32; side * side];
    for r in 0..h {
        let i = r * side / h;
        for c in 0..w {
            let j = c * side / w;
            sum[i * side + j] += value(r * w + c);
            count[i * side + j] += 1;
        }
    }
    for i in 0..side {
        for j in 0..side {
            let k = i * side + j;
            sum[k] = if count[k] > 0 {
                sum[k] / f64::from(count[k])
            } else {
                value((i * h / side) * w + j * w / side)
            };
        }
    }
    sum
}
