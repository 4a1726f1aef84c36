//! Exploration agent: action space, interaction targeting, masking, reward,
//! observation encoding, the actor-critic network and PPO.

mod episode;
mod model;
mod observation;
mod ppo;

pub use episode::{episode_start, replay_actions, run_episode, ActionLogRow, EpisodeConfig, EpisodeOutput, EpisodeStats, PolicyDriver};
pub use model::{masked_log_softmax, PolicyDims, PolicyForward, PolicyModel};
pub use observation::{ObservationBuilder, ObservationConfig, Observation};
pub use ppo::{clipped_surrogate, gae, ppo_update, PpoConfig, PpoStats, Rollout, Transition};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{VisitGrid, VisitNovelty};
use crate::world::{Affordance, AgentState, Axis, Frame, NavAction, WorldAction, NUM_AFFORDANCES};

pub const NUM_CELLS: usize = 9;

/// Ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoMapSeg,
    NoMapNoSeg,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Full, Arm::NoMapSeg, Arm::NoMapNoSeg];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoMapSeg => "no_map_seg",
            Arm::NoMapNoSeg => "no_map_no_seg",
        }
    }

    pub fn from_name(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn uses_map(self) -> bool {
        self == Arm::Full
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// 30 actions: separate pickup and push cells.
    Explicit,
    /// 21 actions: one interaction per cell, type from the predicted affordance.
    TypeInferred,
}

impl ActionMode {
    pub fn num_actions(self) -> usize {
        match self {
            ActionMode::Explicit => 12 + 2 * NUM_CELLS,
            ActionMode::TypeInferred => 12 + NUM_CELLS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    Nav(NavAction),
    Drop,
    MoveHeld { axis: Axis, positive: bool },
    Pickup(usize),
    Push(usize),
    Interact(usize),
}

const NAV: [NavAction; 5] = [
    NavAction::MoveForward,
    NavAction::RotateRight,
    NavAction::RotateLeft,
    NavAction::LookUp,
    NavAction::LookDown,
];
const AXES: [Axis; 3] = [Axis::Forward, Axis::Left, Axis::Up];

pub fn decode_action(index: usize, mode: ActionMode) -> Result<PolicyAction> {
    let a = match index {
        0..=4 => PolicyAction::Nav(NAV[index]),
        5 => PolicyAction::Drop,
        6..=11 => PolicyAction::MoveHeld {
            axis: AXES[(index - 6) / 2],
            positive: (index - 6) % 2 == 0,
        },
        12..=20 if mode == ActionMode::Explicit => PolicyAction::Pickup(index - 12),
        21..=29 if mode == ActionMode::Explicit => PolicyAction::Push(index - 21),
        12..=20 => PolicyAction::Interact(index - 12),
        _ => return Err(Error::contract(format!("action index {index} out of range for {mode:?}"))),
    };
    Ok(a)
}

pub fn encode_action(action: PolicyAction, mode: ActionMode) -> Result<usize> {
    let i = match (action, mode) {
        (PolicyAction::Nav(n), _) => NAV.iter().position(|x| *x == n).expect("all nav actions listed"),
        (PolicyAction::Drop, _) => 5,
        (PolicyAction::MoveHeld { axis, positive }, _) => {
            6 + 2 * AXES.iter().position(|x| *x == axis).expect("all axes listed") + usize::from(!positive)
        }
        (PolicyAction::Pickup(c), ActionMode::Explicit) if c < NUM_CELLS => 12 + c,
        (PolicyAction::Push(c), ActionMode::Explicit) if c < NUM_CELLS => 21 + c,
        (PolicyAction::Interact(c), ActionMode::TypeInferred) if c < NUM_CELLS => 12 + c,
        _ => return Err(Error::contract(format!("{action:?} not encodable in {mode:?}"))),
    };
    Ok(i)
}

/// Short stable name used in action logs.
pub fn action_name(action: PolicyAction) -> String {
    match action {
        PolicyAction::Nav(n) => match n {
            NavAction::MoveForward => "move_forward".into(),
            NavAction::RotateRight => "rotate_right".into(),
            NavAction::RotateLeft => "rotate_left".into(),
            NavAction::LookUp => "look_up".into(),
            NavAction::LookDown => "look_down".into(),
        },
        PolicyAction::Drop => "drop".into(),
        PolicyAction::MoveHeld { axis, positive } => {
            let ax = match axis {
                Axis::Forward => "forward",
                Axis::Left => "left",
                Axis::Up => "up",
            };
            format!("move_held_{}{ax}", if positive { "+" } else { "-" })
        }
        PolicyAction::Pickup(c) => format!("pickup_{c}"),
        PolicyAction::Push(c) => format!("push_{c}"),
        PolicyAction::Interact(c) => format!("interact_{c}"),
    }
}

/// Pixel statistics of one object in a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectStats {
    pub id: i32,
    pub pixels: u32,
    /// Pixel-centre centroid (row, col).
    pub centroid: (f64, f64),
    pub mean_prob: [f64; NUM_AFFORDANCES],
    pub in_center: bool,
}

/// Per-object pixel statistics for object ids (> 0), sorted by id.
pub fn object_stats(frame: &Frame, probs: &[f32]) -> Vec<ObjectStats> {
    let (h, w) = (frame.height, frame.width);
    let (r0, r1, c0, c1) = (h / 4, h - h / 4, w / 4, w - w / 4);
    let mut acc: std::collections::BTreeMap<i32, (u32, f64, f64, [f64; NUM_AFFORDANCES], bool)> = Default::default();
    for (idx, &id) in frame.instance_ids.iter().enumerate() {
        if id <= 0 {
            continue;
        }
        let (r, c) = (idx / w, idx % w);
        let e = acc.entry(id).or_insert((0, 0.0, 0.0, [0.0; NUM_AFFORDANCES], false));
        e.0 += 1;
        e.1 += r as f64 + 0.5;
        e.2 += c as f64 + 0.5;
        for a in 0..NUM_AFFORDANCES {
            e.3[a] += f64::from(probs[idx * NUM_AFFORDANCES + a]);
        }
        if (r0..r1).contains(&r) && (c0..c1).contains(&c) {
            e.4 = true;
        }
    }
    acc.into_iter()
        .map(|(id, (n, sr, sc, sp, inc))| {
            let nf = f64::from(n);
            ObjectStats {
                id,
                pixels: n,
                centroid: (sr / nf, sc / nf),
                mean_prob: sp.map(|v| v / nf),
                in_center: inc,
            }
        })
        .collect()
}

/// Centre (row, col) of each of the nine cells tiling the middle half of the image.
pub fn cell_centers(height: usize, width: usize) -> [(f64, f64); NUM_CELLS] {
    let (h, w) = (height as f64, width as f64);
    std::array::from_fn(|c| {
        let (r, k) = ((c / 3) as f64, (c % 3) as f64);
        (0.25 * h + (r + 0.5) * h / 6.0, 0.25 * w + (k + 0.5) * w / 6.0)
    })
}

/// Cell whose centre is nearest the point; ties go to the lower index.
pub fn nearest_cell(height: usize, width: usize, p: (f64, f64)) -> usize {
    let centers = cell_centers(height, width);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, (r, k)) in centers.iter().enumerate() {
        let d = (p.0 - r).powi(2) + (p.1 - k).powi(2);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Interaction targets per cell for every affordance, plus the
/// type-inferred choice.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CellTargets {
    pub explicit: [[Option<i32>; NUM_AFFORDANCES]; NUM_CELLS],
    pub inferred: [Option<(i32, Affordance)>; NUM_CELLS],
}

fn pick_largest<'a>(cands: impl Iterator<Item = &'a ObjectStats>) -> Option<&'a ObjectStats> {
    cands.fold(None, |best: Option<&ObjectStats>, s| match best {
        Some(b) if b.pixels >= s.pixels => Some(b),
        _ => Some(s),
    })
}

/// Objects touching the centre region are assigned to the nearest cell;
/// candidates whose mean prediction is below the floor are dropped and the
/// largest remaining object wins.
pub fn targets_per_cell(stats: &[ObjectStats], height: usize, width: usize, floor: f64) -> CellTargets {
    let mut by_cell: [Vec<&ObjectStats>; NUM_CELLS] = Default::default();
    for s in stats.iter().filter(|s| s.in_center) {
        by_cell[nearest_cell(height, width, s.centroid)].push(s);
    }
    let mut out = CellTargets::default();
    for (c, cands) in by_cell.iter().enumerate() {
        for a in 0..NUM_AFFORDANCES {
            out.explicit[c][a] = pick_largest(cands.iter().copied().filter(|s| s.mean_prob[a] >= floor)).map(|s| s.id);
        }
        out.inferred[c] = pick_largest(cands.iter().copied().filter(|s| s.mean_prob.iter().any(|p| *p >= floor))).map(|s| {
            let a = if s.mean_prob[Affordance::Push.index()] > s.mean_prob[Affordance::Pickup.index()] {
                Affordance::Push
            } else {
                Affordance::Pickup
            };
            (s.id, a)
        });
    }
    out
}

pub fn select_target(stats: &[ObjectStats], height: usize, width: usize, cell: usize, affordance: Affordance, floor: f64) -> Option<i32> {
    targets_per_cell(stats, height, width, floor).explicit[cell][affordance.index()]
}

pub fn action_mask(agent: &AgentState, targets: &CellTargets, mode: ActionMode) -> Vec<bool> {
    let holding = agent.holding();
    let mut m = vec![false; mode.num_actions()];
    m[..5].fill(true);
    m[5..12].fill(holding);
    for c in 0..NUM_CELLS {
        match mode {
            ActionMode::Explicit => {
                m[12 + c] = !holding && targets.explicit[c][Affordance::Pickup.index()].is_some();
                m[21 + c] = targets.explicit[c][Affordance::Push.index()].is_some();
            }
            ActionMode::TypeInferred => {
                m[12 + c] = match targets.inferred[c] {
                    Some((_, Affordance::Pickup)) => !holding,
                    Some((_, Affordance::Push)) => true,
                    None => false,
                };
            }
        }
    }
    m
}

/// Resolve a policy action into a world action using this step's targets.
pub fn to_world_action(action: PolicyAction, targets: &CellTargets) -> WorldAction {
    match action {
        PolicyAction::Nav(n) => WorldAction::Navigate(n),
        PolicyAction::Drop => WorldAction::Drop,
        PolicyAction::MoveHeld { axis, positive } => WorldAction::MoveHeld { axis, positive },
        PolicyAction::Pickup(c) => WorldAction::Pickup {
            target: targets.explicit[c][Affordance::Pickup.index()],
        },
        PolicyAction::Push(c) => WorldAction::Push {
            target: targets.explicit[c][Affordance::Push.index()],
        },
        PolicyAction::Interact(c) => match targets.inferred[c] {
            Some((id, Affordance::Pickup)) => WorldAction::Pickup { target: Some(id) },
            Some((id, Affordance::Push)) => WorldAction::Push { target: Some(id) },
            None => WorldAction::Pickup { target: None },
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weights of the navigation, interaction and failure terms.
    pub alpha: [f64; 3],
    pub new_position: f64,
    pub new_orientation: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: [1.0, 1.0, 1.0],
            new_position: 1.0,
            new_orientation: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub nav: f64,
    pub int: f64,
    pub fail: f64,
}

impl RewardComponents {
    pub fn total(&self, alpha: [f64; 3]) -> f64 {
        alpha[0] * self.nav + alpha[1] * self.int + alpha[2] * self.fail
    }
}

/// Per-episode reward bookkeeping: visited poses and first successes per
/// (instance, affordance), keyed by simulator ids in every arm.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTracker {
    pub config: RewardConfig,
    pub visits: VisitGrid,
    pub succeeded: BTreeSet<(i32, usize)>,
}

impl RewardTracker {
    pub fn new(config: RewardConfig, visits: VisitGrid) -> Self {
        Self {
            config,
            visits,
            succeeded: BTreeSet::new(),
        }
    }

    /// Reward for a completed step. `interaction` carries the target and
    /// affordance of an attempted interaction.
    pub fn reward(&mut self, agent: &AgentState, success: bool, interaction: Option<(i32, Affordance)>) -> (f64, RewardComponents) {
        let nav = match self.visits.visit(agent) {
            VisitNovelty::NewPosition => self.config.new_position,
            VisitNovelty::NewOrientation => self.config.new_orientation,
            VisitNovelty::Repeat => 0.0,
        };
        let int = match interaction {
            Some((id, a)) if success && self.succeeded.insert((id, a.index())) => 1.0,
            _ => 0.0,
        };
        let fail = if success { 0.0 } else { -1.0 };
        let c = RewardComponents { nav, int, fail };
        (c.total(self.config.alpha), c)
    }
}
