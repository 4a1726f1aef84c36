//! Object-level voxel map: instance-tagged occupancy with per-instance label
//! state, plus the 2D projections used as policy input.

mod grid;
mod snapshot;

pub use grid::{egocentric_crop, project_2d, project_all, Grid2, ProjectionKind, VisitGrid, VisitNovelty};
pub use snapshot::{MapSnapshot, MAP_SCHEMA_VERSION};

use std::collections::BTreeMap;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::world::{Affordance, Frame, Motion, Room, NO_HIT_ID, NUM_AFFORDANCES};

pub type VoxelKey = [i32; 3];

/// Back-projected points are pushed this far past the surface so that hits on
/// a face belong to the voxel inside the object.
const SURFACE_NUDGE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Interaction,
    Confidence,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    #[default]
    Unknown,
    Positive(Provenance),
    Negative(Provenance),
}

impl Label {
    pub fn provenance(self) -> Option<Provenance> {
        match self {
            Label::Unknown => None,
            Label::Positive(p) | Label::Negative(p) => Some(p),
        }
    }

    /// `Some(true)` for positive, `Some(false)` for negative.
    pub fn value(self) -> Option<bool> {
        match self {
            Label::Unknown => None,
            Label::Positive(_) => Some(true),
            Label::Negative(_) => Some(false),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionState {
    #[default]
    None,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: i32,
    pub voxels: FxHashSet<VoxelKey>,
    /// (step_index, pixel_count) for every integrated frame showing the instance.
    pub frames_seen: Vec<(usize, u32)>,
    pub labels: [Label; NUM_AFFORDANCES],
    pub interacted: [InteractionState; NUM_AFFORDANCES],
    /// Sub-voxel translation not yet applied to the voxel set.
    pub residual: [f64; 3],
}

impl InstanceRecord {
    fn new(id: i32) -> Self {
        Self {
            id,
            ..Self::default()
        }
    }

    pub fn label(&self, a: Affordance) -> Label {
        self.labels[a.index()]
    }

    pub fn any_interacted(&self) -> bool {
        self.interacted.iter().any(|s| *s != InteractionState::None)
    }

    /// Combined state over affordances; success dominates failure.
    pub fn combined_interaction(&self) -> InteractionState {
        if self.interacted.contains(&InteractionState::Succeeded) {
            InteractionState::Succeeded
        } else if self.interacted.contains(&InteractionState::Failed) {
            InteractionState::Failed
        } else {
            InteractionState::None
        }
    }

    /// Voxel keys in ascending order.
    pub fn sorted_voxels(&self) -> Vec<VoxelKey> {
        let mut v: Vec<VoxelKey> = self.voxels.iter().copied().collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Voxel {
    pub instance: i32,
    pub weight: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectLevelMap {
    pub resolution: f64,
    /// Room bounds inflated by one voxel; voxel (0,0,0) starts at `bounds.min`.
    pub bounds: Aabb,
    dims: [i32; 3],
    voxels: FxHashMap<VoxelKey, Voxel>,
    instances: BTreeMap<i32, InstanceRecord>,
    /// Pixels dropped because they back-projected outside the bounds.
    pub skipped_pixels: u64,
}

impl ObjectLevelMap {
    pub fn new(room: &Room, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::Config(format!("voxel resolution must be positive, got {resolution}")));
        }
        let bounds = room.bounds().inflate(resolution);
        Ok(Self::with_bounds(bounds, resolution))
    }

    pub(crate) fn with_bounds(bounds: Aabb, resolution: f64) -> Self {
        let size = bounds.size();
        let dims = size.map(|s| (s / resolution).ceil() as i32);
        Self {
            resolution,
            bounds,
            dims,
            voxels: FxHashMap::default(),
            instances: BTreeMap::new(),
            skipped_pixels: 0,
        }
    }

    pub fn dims(&self) -> [i32; 3] {
        self.dims
    }

    pub fn key_of(&self, p: Vec3) -> Option<VoxelKey> {
        let mut k = [0i32; 3];
        for a in 0..3 {
            let f = ((p[a] - self.bounds.min[a]) / self.resolution).floor();
            if !(f >= 0.0 && f < f64::from(self.dims[a])) {
                return None;
            }
            k[a] = f as i32;
        }
        Some(k)
    }

    pub fn voxel_center(&self, k: VoxelKey) -> [f64; 3] {
        [0, 1, 2].map(|a| self.bounds.min[a] + (f64::from(k[a]) + 0.5) * self.resolution)
    }

    fn in_bounds(&self, k: VoxelKey) -> bool {
        (0..3).all(|a| k[a] >= 0 && k[a] < self.dims[a])
    }

    pub fn voxel(&self, k: VoxelKey) -> Option<Voxel> {
        self.voxels.get(&k).copied()
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn voxels(&self) -> impl Iterator<Item = (&VoxelKey, &Voxel)> {
        self.voxels.iter()
    }

    pub fn instance(&self, id: i32) -> Option<&InstanceRecord> {
        self.instances.get(&id)
    }

    pub fn instance_mut(&mut self, id: i32) -> Option<&mut InstanceRecord> {
        self.instances.get_mut(&id)
    }

    /// Record for `id`, creating an empty one if the map has not seen it yet.
    pub fn ensure_instance(&mut self, id: i32) -> &mut InstanceRecord {
        self.instances.entry(id).or_insert_with(|| InstanceRecord::new(id))
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values()
    }

    pub fn instance_ids(&self) -> Vec<i32> {
        self.instances.keys().copied().collect()
    }

    /// Fuse a frame. Each voxel takes the majority instance among the pixels
    /// that fall into it; agreeing observations add weight, disagreeing ones
    /// remove it and take over the voxel once the weight is exhausted.
    pub fn integrate_frame(&mut self, frame: &Frame) {
        let mut votes: FxHashMap<VoxelKey, FxHashMap<i32, u32>> = FxHashMap::default();
        let mut pixel_counts: BTreeMap<i32, u32> = BTreeMap::new();
        let points = frame.points(SURFACE_NUDGE);
        for (idx, point) in points.into_iter().enumerate() {
            let id = frame.instance_ids[idx];
            if id == NO_HIT_ID {
                continue;
            }
            let Some(p) = point else { continue };
            *pixel_counts.entry(id).or_default() += 1;
            match self.key_of(p) {
                Some(k) => *votes.entry(k).or_default().entry(id).or_default() += 1,
                None => self.skipped_pixels += 1,
            }
        }
        for (&id, &count) in &pixel_counts {
            let rec = self.ensure_instance(id);
            if rec.frames_seen.last().is_none_or(|&(s, _)| s < frame.step_index) {
                rec.frames_seen.push((frame.step_index, count));
            }
        }
        let mut keys: Vec<VoxelKey> = votes.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            let (id, count) = votes[&k]
                .iter()
                .map(|(&id, &c)| (id, c))
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty vote");
            self.observe_voxel(k, id, count);
        }
    }

    fn observe_voxel(&mut self, k: VoxelKey, id: i32, count: u32) {
        match self.voxels.get_mut(&k) {
            None => {
                self.voxels.insert(k, Voxel { instance: id, weight: count });
                self.ensure_instance(id).voxels.insert(k);
            }
            Some(v) if v.instance == id => v.weight += count,
            Some(v) => {
                if v.weight > count {
                    v.weight -= count;
                } else {
                    let old = v.instance;
                    let remaining = (count - v.weight).max(1);
                    *v = Voxel { instance: id, weight: remaining };
                    if let Some(r) = self.instances.get_mut(&old) {
                        r.voxels.remove(&k);
                    }
                    self.ensure_instance(id).voxels.insert(k);
                }
            }
        }
    }

    /// Rigidly move instance voxel sets with their objects. Translations are
    /// applied in whole voxels with the remainder carried to the next motion.
    pub fn apply_motion(&mut self, moved: &[Motion]) -> Result<()> {
        for m in moved {
            if !self.instances.contains_key(&m.id) {
                return Err(Error::contract(format!("motion for instance {} unknown to the map", m.id)));
            }
        }
        for m in moved {
            self.move_instance(m);
        }
        Ok(())
    }

    fn move_instance(&mut self, m: &Motion) {
        let res = self.resolution;
        let rec = self.instances.get_mut(&m.id).expect("checked");
        let dyaw = m.new.yaw - m.old.yaw;
        let mut shift = [0i32; 3];
        for a in 0..3 {
            let exact = (m.new.position[a] - m.old.position[a]) / res + rec.residual[a];
            let whole = exact.round();
            shift[a] = whole as i32;
            rec.residual[a] = exact - whole;
        }
        if shift == [0; 3] && dyaw.abs() < 1e-12 {
            return;
        }
        let old_keys = rec.sorted_voxels();
        let mut moved: Vec<(VoxelKey, Voxel)> = Vec::with_capacity(old_keys.len());
        for k in &old_keys {
            if let Some(v) = self.voxels.get(k) {
                if v.instance == m.id {
                    moved.push((*k, *v));
                    self.voxels.remove(k);
                }
            }
        }
        let (s, c) = dyaw.sin_cos();
        let pivot = [0, 1].map(|a| (m.old.position[a] - self.bounds.min[a]) / res);
        let mut new_set = FxHashSet::default();
        for (k, v) in moved {
            let mut nk = [k[0] + shift[0], k[1] + shift[1], k[2] + shift[2]];
            if dyaw.abs() >= 1e-12 {
                let rx = f64::from(k[0]) + 0.5 - pivot[0];
                let ry = f64::from(k[1]) + 0.5 - pivot[1];
                nk[0] = (pivot[0] + c * rx - s * ry - 0.5).round() as i32 + shift[0];
                nk[1] = (pivot[1] + s * rx + c * ry - 0.5).round() as i32 + shift[1];
            }
            if !self.in_bounds(nk) {
                continue;
            }
            if let Some(prev) = self.voxels.insert(nk, v) {
                if prev.instance != m.id {
                    if let Some(r) = self.instances.get_mut(&prev.instance) {
                        r.voxels.remove(&nk);
                    }
                }
            }
            new_set.insert(nk);
        }
        self.instances.get_mut(&m.id).expect("checked").voxels = new_set;
    }

    /// Per-pixel interaction state of the pixel's instance.
    pub fn interacted_objects_mask(&self, frame: &Frame) -> Vec<InteractionState> {
        let mut cache: FxHashMap<i32, InteractionState> = FxHashMap::default();
        frame
            .instance_ids
            .iter()
            .map(|&id| {
                *cache
                    .entry(id)
                    .or_insert_with(|| self.instance(id).map_or(InteractionState::None, |r| r.combined_interaction()))
            })
            .collect()
    }
}
