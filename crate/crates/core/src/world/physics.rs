//! Discrete action semantics with ground-truth success.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Aabb;

use super::{
    AgentState, Axis, NavAction, Pose, Scene, WorldAction, LATTICE, PITCH_LIMIT_DEG, PITCH_STEP_DEG,
    YAW_STEP_DEG,
};

/// Physical constants of the robot and its interactions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub reach: f64,
    pub push_distance: f64,
    pub drop_distance: f64,
    pub move_held_step: f64,
    /// Held-object offsets are confined to this cube (m, agent frame).
    pub hold_limit: f64,
    pub agent_radius: f64,
    pub camera_height: f64,
    /// Arm base sits this far below the camera.
    pub arm_drop: f64,
    pub hold_distance: f64,
    pub hold_height: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            reach: 1.5,
            push_distance: 0.25,
            drop_distance: 0.5,
            move_held_step: 0.1,
            hold_limit: 0.3,
            agent_radius: 0.2,
            camera_height: 1.5,
            arm_drop: 0.5,
            hold_distance: 0.5,
            hold_height: 1.0,
        }
    }
}

impl WorldParams {
    pub fn arm_base(&self, agent: &AgentState) -> [f64; 3] {
        let (x, y) = agent.position();
        [x, y, self.camera_height - self.arm_drop]
    }

    fn hold_point(&self, agent: &AgentState) -> [f64; 3] {
        let (x, y) = agent.position();
        let (fx, fy) = agent.forward();
        let (lx, ly) = (-fy, fx);
        let o = agent.hold_offset;
        let f = self.hold_distance + o[0];
        [x + fx * f + lx * o[1], y + fy * f + ly * o[1], self.hold_height + o[2]]
    }
}

/// A reported pose change.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub id: i32,
    pub old: Pose,
    pub new: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub action: WorldAction,
    pub success: bool,
    pub moved: Vec<Motion>,
}

/// Lattice step for a heading: the nearest of the eight compass directions.
fn lattice_step(yaw_deg: i32) -> [i32; 2] {
    const DIRS: [[i32; 2]; 8] = [[0, 1], [1, 1], [1, 0], [1, -1], [0, -1], [-1, -1], [-1, 0], [-1, 1]];
    let k = ((f64::from(yaw_deg.rem_euclid(360)) / 45.0).round() as usize) % 8;
    DIRS[k]
}

/// Execute one action. Only an unknown positive target id is an error; every
/// other infeasible action is a plain failure.
pub fn step(scene: &mut Scene, agent: &mut AgentState, action: &WorldAction, params: &WorldParams) -> Result<StepOutcome> {
    if let Some(t) = action.target() {
        if t > 0 && scene.instance(t).is_none() {
            return Err(Error::contract(format!("action targets unknown instance {t}")));
        }
    }
    let mut moved = Vec::new();
    let success = match *action {
        WorldAction::Navigate(nav) => navigate(scene, agent, nav, params, &mut moved),
        WorldAction::Pickup { target } => pickup(scene, agent, target, params, &mut moved),
        WorldAction::Push { target } => push(scene, agent, target, params, &mut moved),
        WorldAction::Drop => drop_held(scene, agent, params, &mut moved),
        WorldAction::MoveHeld { axis, positive } => move_held(scene, agent, axis, positive, params, &mut moved),
    };
    Ok(StepOutcome {
        action: *action,
        success,
        moved,
    })
}

fn carry_held(scene: &mut Scene, agent: &AgentState, params: &WorldParams, moved: &mut Vec<Motion>) {
    let Some(id) = agent.inventory else { return };
    let new_pos = params.hold_point(agent);
    if let Some(inst) = scene.instance_mut(id) {
        let old = inst.pose();
        inst.position = new_pos;
        if old.position != new_pos {
            moved.push(Motion {
                id,
                old,
                new: inst.pose(),
            });
        }
    }
}

fn navigate(scene: &mut Scene, agent: &mut AgentState, nav: NavAction, params: &WorldParams, moved: &mut Vec<Motion>) -> bool {
    match nav {
        NavAction::MoveForward => {
            let d = lattice_step(agent.yaw_deg);
            let cell = [agent.cell[0] + d[0], agent.cell[1] + d[1]];
            let (x, y) = (f64::from(cell[0]) * LATTICE, f64::from(cell[1]) * LATTICE);
            if !scene.disc_free(x, y, params.agent_radius) {
                return false;
            }
            agent.cell = cell;
        }
        NavAction::RotateRight => agent.yaw_deg = (agent.yaw_deg + YAW_STEP_DEG).rem_euclid(360),
        NavAction::RotateLeft => agent.yaw_deg = (agent.yaw_deg - YAW_STEP_DEG).rem_euclid(360),
        NavAction::LookUp | NavAction::LookDown => {
            let dir = if nav == NavAction::LookUp { 1 } else { -1 };
            let pitch = agent.pitch_deg + dir * PITCH_STEP_DEG;
            if pitch.abs() > PITCH_LIMIT_DEG {
                return false;
            }
            agent.pitch_deg = pitch;
            return true;
        }
    }
    carry_held(scene, agent, params, moved);
    true
}

fn within_reach(scene: &Scene, agent: &AgentState, id: i32, params: &WorldParams) -> bool {
    scene
        .instance(id)
        .is_some_and(|i| i.aabb().distance_to(params.arm_base(agent)) <= params.reach)
}

fn pickup(scene: &mut Scene, agent: &mut AgentState, target: Option<i32>, params: &WorldParams, moved: &mut Vec<Motion>) -> bool {
    let Some(id) = target else { return false };
    let feasible = agent.inventory.is_none()
        && scene.instance(id).is_some_and(|i| !i.held)
        && scene.category_of(id).is_some_and(|c| c.pickupable)
        && within_reach(scene, agent, id, params);
    if !feasible {
        return false;
    }
    // Items resting on the picked object would be left floating; they stay
    // where they are but lose their support, so refuse in that case.
    if !scene.supported_by(id).is_empty() {
        return false;
    }
    agent.inventory = Some(id);
    agent.hold_offset = [0.0; 3];
    let inst = scene.instance_mut(id).expect("checked above");
    inst.held = true;
    let old = inst.pose();
    inst.position = params.hold_point(agent);
    moved.push(Motion {
        id,
        old,
        new: inst.pose(),
    });
    true
}

fn push(scene: &mut Scene, agent: &mut AgentState, target: Option<i32>, params: &WorldParams, moved: &mut Vec<Motion>) -> bool {
    let Some(id) = target else { return false };
    let feasible = scene.instance(id).is_some_and(|i| !i.held)
        && scene.category_of(id).is_some_and(|c| c.pushable)
        && within_reach(scene, agent, id, params);
    if !feasible {
        return false;
    }
    let (fx, fy) = agent.forward();
    let d = [fx * params.push_distance, fy * params.push_distance, 0.0];
    let mut group = vec![id];
    group.extend(scene.supported_by(id));
    let (ax, ay) = agent.position();
    for &g in &group {
        let bb = scene.instance(g).expect("known id").aabb().translated(d);
        if scene.collides(&bb, &group) || bb.overlaps_disc(ax, ay, params.agent_radius) {
            return false;
        }
    }
    let base = scene.instance(id).expect("known id").aabb();
    if base.min[2] > 1e-6 && scene.supporter_of(&base.translated(d), &group).is_none() {
        return false;
    }
    for &g in &group {
        let inst = scene.instance_mut(g).expect("known id");
        let old = inst.pose();
        for (p, dv) in inst.position.iter_mut().zip(d) {
            *p += dv;
        }
        moved.push(Motion {
            id: g,
            old,
            new: inst.pose(),
        });
    }
    true
}

fn drop_held(scene: &mut Scene, agent: &mut AgentState, params: &WorldParams, moved: &mut Vec<Motion>) -> bool {
    let Some(id) = agent.inventory else { return false };
    let inst = scene.instance(id).expect("held id exists").clone();
    let half = inst.half_extents_world();
    let (ax, ay) = agent.position();
    let (fx, fy) = agent.forward();
    let (lx, ly) = (-fy, fx);
    let lateral = agent.hold_offset[1];
    let steps = (params.drop_distance / 0.05).round() as i32;
    for k in (0..=steps).rev() {
        let dist = f64::from(k) * 0.05;
        let (x, y) = (ax + fx * dist + lx * lateral, ay + fy * dist + ly * lateral);
        let mut candidates = vec![half[2]];
        for s in scene.instances.iter().filter(|s| !s.held && scene.categories[s.category].surface) {
            let top = s.aabb();
            if x - half[0] >= top.min[0] && x + half[0] <= top.max[0] && y - half[1] >= top.min[1] && y + half[1] <= top.max[1] {
                candidates.push(top.max[2] + half[2]);
            }
        }
        for z in candidates {
            let bb = Aabb::from_center([x, y, z], half);
            if bb.overlaps_disc(ax, ay, params.agent_radius) || scene.collides(&bb, &[id]) {
                continue;
            }
            if z > half[2] + 1e-9 && scene.supporter_of(&bb, &[id]).is_none() {
                continue;
            }
            let inst = scene.instance_mut(id).expect("held id exists");
            let old = inst.pose();
            inst.position = [x, y, z];
            inst.held = false;
            agent.inventory = None;
            agent.hold_offset = [0.0; 3];
            moved.push(Motion {
                id,
                old,
                new: inst.pose(),
            });
            return true;
        }
    }
    false
}

fn move_held(
    scene: &mut Scene,
    agent: &mut AgentState,
    axis: Axis,
    positive: bool,
    params: &WorldParams,
    moved: &mut Vec<Motion>,
) -> bool {
    let Some(id) = agent.inventory else { return false };
    let a = match axis {
        Axis::Forward => 0,
        Axis::Left => 1,
        Axis::Up => 2,
    };
    let mut offset = agent.hold_offset;
    offset[a] += if positive { params.move_held_step } else { -params.move_held_step };
    offset[a] = (offset[a] * 1e6).round() / 1e6;
    if offset[a].abs() > params.hold_limit + 1e-9 {
        return false;
    }
    let mut probe = agent.clone();
    probe.hold_offset = offset;
    let half = scene.instance(id).expect("held id exists").half_extents_world();
    let bb = Aabb::from_center(params.hold_point(&probe), half);
    if scene.collides(&bb, &[id]) {
        return false;
    }
    agent.hold_offset = offset;
    carry_held(scene, agent, params, moved);
    true
}
