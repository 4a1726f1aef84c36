//! Procedural cuboid scenes: the object category library, seeded placement
//! and the versioned JSON scene format.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::rng::{self, Rng};

use super::{Affordance, AgentState, Pose, FLOOR_ID, WALL_ID};

pub const SCENE_SCHEMA_VERSION: u32 = 1;
const WALL_THICKNESS: f64 = 0.1;
const FLOOR_GAP: f64 = 0.1;
const SURFACE_MARGIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Floor,
    OnSurface,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectCategory {
    pub name: String,
    pub extent_min: [f64; 3],
    pub extent_max: [f64; 3],
    pub pickupable: bool,
    pub pushable: bool,
    pub placement: Placement,
    /// Other objects may rest on its top face.
    #[serde(default)]
    pub surface: bool,
    pub base_color: [f64; 3],
}

impl ObjectCategory {
    pub fn affords(&self, affordance: Affordance) -> bool {
        match affordance {
            Affordance::Pickup => self.pickupable,
            Affordance::Push => self.pushable,
        }
    }

    pub fn interactable(&self) -> bool {
        self.pickupable || self.pushable
    }
}

#[allow(clippy::too_many_arguments)]
fn cat(
    name: &str,
    min: [f64; 3],
    max: [f64; 3],
    pickupable: bool,
    pushable: bool,
    placement: Placement,
    surface: bool,
    color: [f64; 3],
) -> ObjectCategory {
    ObjectCategory {
        name: name.to_string(),
        extent_min: min,
        extent_max: max,
        pickupable,
        pushable,
        placement,
        surface,
        base_color: color,
    }
}

/// Twelve living-room categories covering every (pickupable, pushable) combination.
pub fn default_categories() -> Vec<ObjectCategory> {
    use Placement::*;
    vec![
        cat("table", [0.8, 0.5, 0.40], [1.2, 0.8, 0.50], false, false, Floor, true, [0.65, 0.50, 0.30]),
        cat("cup", [0.07, 0.07, 0.09], [0.09, 0.09, 0.12], true, false, OnSurface, false, [0.90, 0.90, 0.95]),
        cat("sofa", [1.6, 0.8, 0.70], [2.2, 1.0, 0.90], false, false, Floor, false, [0.70, 0.20, 0.20]),
        cat("shelf", [0.8, 0.3, 1.20], [1.2, 0.4, 1.60], false, false, Floor, true, [0.40, 0.30, 0.20]),
        cat("television", [0.6, 0.10, 0.40], [0.8, 0.15, 0.50], false, false, OnSurface, false, [0.10, 0.10, 0.12]),
        cat("side_table", [0.4, 0.4, 0.50], [0.6, 0.6, 0.60], false, true, Floor, true, [0.30, 0.55, 0.30]),
        cat("armchair", [0.7, 0.7, 0.80], [0.9, 0.9, 1.00], false, true, Floor, false, [0.20, 0.30, 0.70]),
        cat("box", [0.3, 0.3, 0.30], [0.5, 0.5, 0.50], true, true, Floor, false, [0.80, 0.60, 0.20]),
        cat("basket", [0.3, 0.3, 0.25], [0.4, 0.4, 0.35], true, true, Floor, false, [0.75, 0.70, 0.40]),
        cat("vase", [0.12, 0.12, 0.25], [0.18, 0.18, 0.35], true, true, OnSurface, false, [0.20, 0.65, 0.70]),
        cat("book", [0.15, 0.10, 0.03], [0.22, 0.15, 0.05], true, false, OnSurface, false, [0.60, 0.20, 0.60]),
        cat("remote", [0.15, 0.04, 0.02], [0.20, 0.06, 0.03], true, false, OnSurface, false, [0.25, 0.25, 0.30]),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomLayout {
    OneRoom,
    /// Split by an interior wall with a 1 m doorway in the middle.
    TwoRoom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub room_width: f64,
    pub room_depth: f64,
    pub wall_height: f64,
    pub layout: RoomLayout,
    pub min_objects: usize,
    pub max_objects: usize,
    pub color_jitter: f64,
    pub max_placement_attempts: usize,
    /// Category library; the built-in living-room set when absent.
    pub categories: Option<Vec<ObjectCategory>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room_width: 10.0,
            room_depth: 10.0,
            wall_height: 3.0,
            layout: RoomLayout::OneRoom,
            min_objects: 14,
            max_objects: 22,
            color_jitter: 0.05,
            max_placement_attempts: 400,
            categories: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.room_width > 1.0 && self.room_depth > 1.0 && self.wall_height > 0.5) {
            return Err(Error::Config("room must be larger than 1 m x 1 m".into()));
        }
        if self.room_width > 10.0 + 1e-9 || self.room_depth > 10.0 + 1e-9 {
            return Err(Error::Config("room must fit the 10 m global map".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        for c in self.categories.iter().flatten() {
            if (0..3).any(|a| c.extent_min[a] > c.extent_max[a] || c.extent_min[a] <= 0.0) {
                return Err(Error::Config(format!("category `{}` has an invalid extent range", c.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

impl Room {
    pub fn bounds(&self) -> Aabb {
        Aabb::new([0.0, 0.0, 0.0], [self.width, self.depth, self.height])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: i32,
    pub category: usize,
    /// Box centre in world coordinates (m).
    pub position: [f64; 3],
    /// Rotation about the vertical axis (rad).
    pub yaw: f64,
    /// (w, d, h) before rotation.
    pub extent: [f64; 3],
    pub held: bool,
    pub color: [f64; 3],
}

impl ObjectInstance {
    pub fn half_extents_world(&self) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (hw, hd) = (0.5 * self.extent[0], 0.5 * self.extent[1]);
        [
            c.abs() * hw + s.abs() * hd,
            s.abs() * hw + c.abs() * hd,
            0.5 * self.extent[2],
        ]
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_center(self.position, self.half_extents_world())
    }

    pub fn pose(&self) -> Pose {
        Pose {
            position: self.position,
            yaw: self.yaw,
        }
    }

    pub fn volume(&self) -> f64 {
        self.extent[0] * self.extent[1] * self.extent[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub seed: u64,
    pub room: Room,
    pub layout: RoomLayout,
    pub walls: Vec<Aabb>,
    pub categories: Vec<ObjectCategory>,
    pub instances: Vec<ObjectInstance>,
}

impl Scene {
    pub fn instance(&self, id: i32) -> Option<&ObjectInstance> {
        // Ids are assigned 1..=n in order and never reused.
        let idx = usize::try_from(id).ok()?.checked_sub(1)?;
        self.instances.get(idx).filter(|i| i.id == id)
    }

    pub fn instance_mut(&mut self, id: i32) -> Option<&mut ObjectInstance> {
        let idx = usize::try_from(id).ok()?.checked_sub(1)?;
        self.instances.get_mut(idx).filter(|i| i.id == id)
    }

    pub fn category_of(&self, id: i32) -> Option<&ObjectCategory> {
        self.instance(id).map(|i| &self.categories[i.category])
    }

    /// Ground-truth affordance of any frame id; floor, walls and misses afford nothing.
    pub fn affords(&self, id: i32, affordance: Affordance) -> bool {
        self.category_of(id).is_some_and(|c| c.affords(affordance))
    }

    pub fn interactable(&self, id: i32) -> bool {
        self.category_of(id).is_some_and(|c| c.interactable())
    }

    pub fn ids(&self) -> impl Iterator<Item = i32> + '_ {
        self.instances.iter().map(|i| i.id)
    }

    /// Does `aabb` overlap a wall or any placed object other than those in `ignore`?
    pub fn collides(&self, aabb: &Aabb, ignore: &[i32]) -> bool {
        if self.walls.iter().any(|w| w.intersects(aabb)) {
            return true;
        }
        let b = self.room.bounds();
        if aabb.min[0] < b.min[0] - 1e-9
            || aabb.min[1] < b.min[1] - 1e-9
            || aabb.max[0] > b.max[0] + 1e-9
            || aabb.max[1] > b.max[1] + 1e-9
        {
            return true;
        }
        self.instances
            .iter()
            .filter(|i| !i.held && !ignore.contains(&i.id))
            .any(|i| i.aabb().intersects(aabb))
    }

    /// Is a disc of `radius` at (x, y) free of walls and placed objects?
    pub fn disc_free(&self, x: f64, y: f64, radius: f64) -> bool {
        if x < radius || y < radius || x > self.room.width - radius || y > self.room.depth - radius {
            return false;
        }
        if self.walls.iter().any(|w| w.overlaps_disc(x, y, radius)) {
            return false;
        }
        !self
            .instances
            .iter()
            .filter(|i| !i.held)
            .any(|i| i.aabb().overlaps_disc(x, y, radius))
    }

    /// The placed object whose top face supports `aabb`, if any.
    pub fn supporter_of(&self, aabb: &Aabb, ignore: &[i32]) -> Option<i32> {
        self.instances
            .iter()
            .filter(|i| !i.held && !ignore.contains(&i.id) && self.categories[i.category].surface)
            .find(|i| {
                let s = i.aabb();
                (s.max[2] - aabb.min[2]).abs() < 1e-6
                    && aabb.min[0] >= s.min[0] - 1e-9
                    && aabb.max[0] <= s.max[0] + 1e-9
                    && aabb.min[1] >= s.min[1] - 1e-9
                    && aabb.max[1] <= s.max[1] + 1e-9
            })
            .map(|i| i.id)
    }

    /// Placed objects resting directly on top of `id`.
    pub fn supported_by(&self, id: i32) -> Vec<i32> {
        let Some(base) = self.instance(id) else {
            return Vec::new();
        };
        let top = base.aabb();
        self.instances
            .iter()
            .filter(|i| !i.held && i.id != id)
            .filter(|i| {
                let a = i.aabb();
                (a.min[2] - top.max[2]).abs() < 1e-6 && a.intersects_2d(&top)
            })
            .map(|i| i.id)
            .collect()
    }

    /// Pseudo-geometry for the floor and walls, used by per-pixel features.
    pub fn background_geometry(&self, id: i32) -> Option<([f64; 3], [f64; 3])> {
        let r = &self.room;
        match id {
            FLOOR_ID => Some(([0.5 * r.width, 0.5 * r.depth, 0.0], [r.width, r.depth, 0.0])),
            WALL_ID => Some((
                [0.5 * r.width, 0.5 * r.depth, 0.5 * r.height],
                [r.width.max(r.depth), WALL_THICKNESS, r.height],
            )),
            _ => None,
        }
    }

    /// Insert an object by category name at a fixed pose; returns its id.
    /// The caller is responsible for keeping the layout collision free.
    pub fn add_object(&mut self, category: &str, position: [f64; 3], extent: [f64; 3], yaw: f64) -> Result<i32> {
        let cat = self
            .categories
            .iter()
            .position(|c| c.name == category)
            .ok_or_else(|| Error::Config(format!("unknown category '{category}'")))?;
        let id = self.instances.len() as i32 + 1;
        self.instances.push(ObjectInstance {
            id,
            category: cat,
            position,
            yaw,
            extent,
            held: false,
            color: self.categories[cat].base_color,
        });
        Ok(id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Scene> {
        let scene: Scene = serde_json::from_str(text)?;
        if scene.schema_version != SCENE_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported scene schema version {} (expected {SCENE_SCHEMA_VERSION})",
                scene.schema_version
            )));
        }
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Scene::from_json(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }
}

fn build_walls(cfg: &SceneConfig) -> Vec<Aabb> {
    let (w, d, h, t) = (cfg.room_width, cfg.room_depth, cfg.wall_height, WALL_THICKNESS);
    let mut walls = vec![
        Aabb::new([-t, -t, 0.0], [0.0, d + t, h]),
        Aabb::new([w, -t, 0.0], [w + t, d + t, h]),
        Aabb::new([0.0, -t, 0.0], [w, 0.0, h]),
        Aabb::new([0.0, d, 0.0], [w, d + t, h]),
    ];
    if cfg.layout == RoomLayout::TwoRoom {
        let (xm, ym) = (0.5 * w, 0.5 * d);
        walls.push(Aabb::new([xm - 0.05, 0.0, 0.0], [xm + 0.05, ym - 0.5, h]));
        walls.push(Aabb::new([xm - 0.05, ym + 0.5, 0.0], [xm + 0.05, d, h]));
    }
    walls
}

/// Regions kept clear of furniture so every part of the room stays reachable.
fn keep_out(scene: &Scene) -> Vec<Aabb> {
    match scene.layout {
        RoomLayout::OneRoom => Vec::new(),
        RoomLayout::TwoRoom => {
            let (xm, ym) = (0.5 * scene.room.width, 0.5 * scene.room.depth);
            vec![Aabb::new([xm - 0.8, ym - 0.6, 0.0], [xm + 0.8, ym + 0.6, scene.room.height])]
        }
    }
}

fn sample_extent(rng: &mut Rng, c: &ObjectCategory) -> [f64; 3] {
    let mut e = [0.0; 3];
    for (a, v) in e.iter_mut().enumerate() {
        *v = if c.extent_max[a] > c.extent_min[a] {
            rng.random_range(c.extent_min[a]..=c.extent_max[a])
        } else {
            c.extent_min[a]
        };
        // Quantize to millimetres so scenes serialize compactly and exactly.
        *v = (*v * 1000.0).round() / 1000.0;
    }
    e
}

fn quarter_turn(rng: &mut Rng) -> f64 {
    f64::from(rng.random_range(0..4u8)) * std::f64::consts::FRAC_PI_2
}

fn round_mm(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Generate a scene. Deterministic in `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let categories = config.categories.clone().unwrap_or_else(default_categories);
    let mut rng = rng::rng_for(seed, &[rng::tag::SCENE]);
    let count = if config.max_objects == 0 {
        0
    } else {
        rng.random_range(config.min_objects..=config.max_objects)
    };

    let anchor = categories
        .iter()
        .position(|c| c.placement == Placement::Floor && c.surface && !c.interactable());
    let first_pickup = categories
        .iter()
        .position(|c| c.pickupable && (c.placement == Placement::Floor || anchor.is_some()));
    let has_surface = categories.iter().any(|c| c.placement == Placement::Floor && c.surface);

    let mut instances = Vec::with_capacity(count);
    let (mut surfaces, mut items) = (0usize, 0usize);
    for i in 0..count {
        let category = match i {
            0 if anchor.is_some() => anchor.unwrap(),
            1 if first_pickup.is_some() => first_pickup.unwrap(),
            _ => loop {
                let k = rng.random_range(0..categories.len());
                let c = &categories[k];
                // At most three surface items per surface keeps tabletops placeable.
                if c.placement == Placement::Floor || (has_surface && items < 3 * surfaces) {
                    break k;
                }
            },
        };
        let c = &categories[category];
        if c.placement == Placement::OnSurface {
            items += 1;
        } else if c.surface {
            surfaces += 1;
        }
        let c = &categories[category];
        let extent = sample_extent(&mut rng, c);
        let mut color = c.base_color;
        for v in &mut color {
            *v = round_mm((*v + rng.random_range(-config.color_jitter..=config.color_jitter)).clamp(0.0, 1.0));
        }
        instances.push(ObjectInstance {
            id: i as i32 + 1,
            category,
            position: [0.0; 3],
            yaw: 0.0,
            extent,
            held: false,
            color,
        });
    }

    let mut scene = Scene {
        schema_version: SCENE_SCHEMA_VERSION,
        seed,
        room: Room {
            width: config.room_width,
            depth: config.room_depth,
            height: config.wall_height,
        },
        layout: config.layout,
        walls: build_walls(config),
        categories,
        instances,
    };
    place_instances(&mut scene, &mut rng, config.max_placement_attempts)?;
    Ok(scene)
}

/// Re-sample every object pose, keeping ids, categories, extents and colours.
pub fn randomize_layout(scene: &Scene, seed: u64, max_attempts: usize) -> Result<Scene> {
    let mut out = scene.clone();
    for inst in &mut out.instances {
        inst.held = false;
    }
    let mut rng = rng::rng_for(seed, &[rng::tag::LAYOUT]);
    place_instances(&mut out, &mut rng, max_attempts)?;
    Ok(out)
}

fn place_instances(scene: &mut Scene, rng: &mut Rng, max_attempts: usize) -> Result<()> {
    let keep_out = keep_out(scene);
    let n = scene.instances.len();
    let mut placed: Vec<bool> = vec![false; n];

    // Floor objects first, then items resting on surfaces. A surface item that
    // finds no free tabletop falls back to the floor.
    for pass in [Placement::Floor, Placement::OnSurface] {
        for idx in 0..n {
            let cat_idx = scene.instances[idx].category;
            if scene.categories[cat_idx].placement != pass {
                continue;
            }
            let mut found = None;
            if pass == Placement::OnSurface {
                found = (0..max_attempts.max(1)).find_map(|_| try_surface(scene, &placed, idx, rng));
            }
            if found.is_none() {
                found = (0..max_attempts.max(1)).find_map(|_| try_floor(scene, &placed, &keep_out, idx, rng));
            }
            match found {
                Some(probe) => {
                    scene.instances[idx] = probe;
                    placed[idx] = true;
                }
                None => {
                    return Err(Error::Placement {
                        category: scene.categories[cat_idx].name.clone(),
                        attempts: max_attempts,
                    })
                }
            }
        }
    }
    Ok(())
}

fn try_floor(scene: &Scene, placed: &[bool], keep_out: &[Aabb], idx: usize, rng: &mut Rng) -> Option<ObjectInstance> {
    let room = scene.room;
    let mut probe = scene.instances[idx].clone();
    probe.yaw = quarter_turn(rng);
    let half = probe.half_extents_world();
    let (lo_x, hi_x) = (FLOOR_GAP + half[0], room.width - FLOOR_GAP - half[0]);
    let (lo_y, hi_y) = (FLOOR_GAP + half[1], room.depth - FLOOR_GAP - half[1]);
    if lo_x >= hi_x || lo_y >= hi_y {
        return None;
    }
    probe.position = [
        round_mm(rng.random_range(lo_x..hi_x)),
        round_mm(rng.random_range(lo_y..hi_y)),
        half[2],
    ];
    let bb = probe.aabb();
    let inflated = bb.inflate(FLOOR_GAP);
    let clash = scene.walls.iter().any(|w| w.intersects(&inflated))
        || keep_out.iter().any(|k| k.intersects(&bb))
        || (0..placed.len()).any(|j| placed[j] && scene.instances[j].aabb().intersects(&inflated));
    (!clash).then_some(probe)
}

fn try_surface(scene: &Scene, placed: &[bool], idx: usize, rng: &mut Rng) -> Option<ObjectInstance> {
    let surfaces: Vec<usize> = (0..placed.len())
        .filter(|&j| placed[j] && scene.categories[scene.instances[j].category].surface)
        .collect();
    if surfaces.is_empty() {
        return None;
    }
    let s = surfaces[rng.random_range(0..surfaces.len())];
    let mut probe = scene.instances[idx].clone();
    probe.yaw = quarter_turn(rng);
    let half = probe.half_extents_world();
    let top = scene.instances[s].aabb();
    let (lo_x, hi_x) = (top.min[0] + SURFACE_MARGIN + half[0], top.max[0] - SURFACE_MARGIN - half[0]);
    let (lo_y, hi_y) = (top.min[1] + SURFACE_MARGIN + half[1], top.max[1] - SURFACE_MARGIN - half[1]);
    if lo_x >= hi_x || lo_y >= hi_y {
        return None;
    }
    probe.position = [
        round_mm(rng.random_range(lo_x..hi_x)),
        round_mm(rng.random_range(lo_y..hi_y)),
        top.max[2] + half[2],
    ];
    let bb = probe.aabb();
    let clash = (0..placed.len()).any(|j| j != s && placed[j] && scene.instances[j].aabb().intersects(&bb));
    (!clash).then_some(probe)
}

/// Random collision-free spawn on the 0.25 m lattice with a random heading and a
/// downward-tilted camera.
pub fn spawn_agent(scene: &Scene, seed: u64, agent_radius: f64) -> Result<AgentState> {
    let free = free_cells(scene, agent_radius);
    if free.is_empty() {
        return Err(Error::Config("scene has no free spawn cell".into()));
    }
    let mut rng = rng::rng_for(seed, &[rng::tag::SPAWN]);
    let cell = free[rng.random_range(0..free.len())];
    let yaw = 30 * rng.random_range(0..12);
    let pitch = -15 * rng.random_range(0..3);
    Ok(AgentState::new(cell, yaw, pitch))
}

/// All lattice cells where the agent's disc is collision free.
pub fn free_cells(scene: &Scene, agent_radius: f64) -> Vec<[i32; 2]> {
    let nx = (scene.room.width / super::LATTICE).floor() as i32;
    let ny = (scene.room.depth / super::LATTICE).floor() as i32;
    let mut out = Vec::new();
    for i in 0..=nx {
        for j in 0..=ny {
            let (x, y) = (f64::from(i) * super::LATTICE, f64::from(j) * super::LATTICE);
            if scene.disc_free(x, y, agent_radius) {
                out.push([i, j]);
            }
        }
    }
    out
}
