//! Synthetic cuboid world: scene generation, agent kinematics, interaction
//! physics and the raycast sensor.

mod physics;
mod render;
mod scene;

pub use physics::{step, Motion, StepOutcome, WorldParams};
pub use render::{distance_image, render, CameraConfig, CameraPose, Frame, VisibleInstance};
pub use scene::{
    default_categories, free_cells, generate_scene, randomize_layout, spawn_agent, ObjectCategory,
    ObjectInstance, Placement, Room, RoomLayout, Scene, SceneConfig, SCENE_SCHEMA_VERSION,
};

use serde::{Deserialize, Serialize};

/// Frame id of floor pixels.
pub const FLOOR_ID: i32 = 0;
/// Frame id of wall pixels.
pub const WALL_ID: i32 = -1;
/// Frame id of rays that hit nothing within range.
pub const NO_HIT_ID: i32 = -2;

/// Agent positions live on this lattice (m).
pub const LATTICE: f64 = 0.25;
pub const YAW_STEP_DEG: i32 = 30;
pub const PITCH_STEP_DEG: i32 = 15;
pub const PITCH_LIMIT_DEG: i32 = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Affordance {
    Pickup,
    Push,
}

pub const NUM_AFFORDANCES: usize = 2;

impl Affordance {
    pub const ALL: [Affordance; NUM_AFFORDANCES] = [Affordance::Pickup, Affordance::Push];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Affordance::Pickup => "pickup",
            Affordance::Push => "push",
        }
    }

    pub fn from_name(name: &str) -> Option<Affordance> {
        Affordance::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl std::fmt::Display for Affordance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Object pose: box centre plus heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    /// Lattice coordinates; world position is `cell * LATTICE`.
    pub cell: [i32; 2],
    /// Heading in degrees, clockwise from +y, multiple of 30 in [0, 360).
    pub yaw_deg: i32,
    /// Camera tilt in degrees, positive looks up, multiple of 15 in [-60, 60].
    pub pitch_deg: i32,
    pub inventory: Option<i32>,
    /// Held-object offset in the agent frame (forward, left, up).
    pub hold_offset: [f64; 3],
}

impl AgentState {
    pub fn new(cell: [i32; 2], yaw_deg: i32, pitch_deg: i32) -> Self {
        Self {
            cell,
            yaw_deg: yaw_deg.rem_euclid(360),
            pitch_deg,
            inventory: None,
            hold_offset: [0.0; 3],
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (f64::from(self.cell[0]) * LATTICE, f64::from(self.cell[1]) * LATTICE)
    }

    /// Unit heading in the horizontal plane.
    pub fn forward(&self) -> (f64, f64) {
        let t = f64::from(self.yaw_deg).to_radians();
        (t.sin(), t.cos())
    }

    pub fn yaw_bin(&self) -> usize {
        (self.yaw_deg.rem_euclid(360) / YAW_STEP_DEG) as usize
    }

    pub fn holding(&self) -> bool {
        self.inventory.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavAction {
    MoveForward,
    RotateRight,
    RotateLeft,
    LookUp,
    LookDown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Forward,
    Left,
    Up,
}

/// A fully resolved action: interactions carry the already-selected target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldAction {
    Navigate(NavAction),
    Pickup { target: Option<i32> },
    Push { target: Option<i32> },
    Drop,
    MoveHeld { axis: Axis, positive: bool },
}

impl WorldAction {
    pub fn affordance(&self) -> Option<Affordance> {
        match self {
            WorldAction::Pickup { .. } => Some(Affordance::Pickup),
            WorldAction::Push { .. } => Some(Affordance::Push),
            _ => None,
        }
    }

    pub fn target(&self) -> Option<i32> {
        match self {
            WorldAction::Pickup { target } | WorldAction::Push { target } => *target,
            _ => None,
        }
    }
}
