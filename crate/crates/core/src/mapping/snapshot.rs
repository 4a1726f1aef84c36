//! JSON dump of a map. Each instance stores its voxels as z-runs
//! `[x, y, z_start, length]` in ascending key order, with one weight per voxel
//! in the same order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::world::NUM_AFFORDANCES;

use super::{InstanceRecord, InteractionState, Label, ObjectLevelMap, Voxel, VoxelKey};

pub const MAP_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSnapshot {
    pub schema_version: u32,
    pub resolution: f64,
    pub bounds: Aabb,
    pub skipped_pixels: u64,
    pub instances: Vec<InstanceSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSnapshot {
    pub id: i32,
    pub runs: Vec<[i32; 4]>,
    pub weights: Vec<u32>,
    pub frames_seen: Vec<(usize, u32)>,
    pub labels: [Label; NUM_AFFORDANCES],
    pub interacted: [InteractionState; NUM_AFFORDANCES],
    pub residual: [f64; 3],
}

impl ObjectLevelMap {
    pub fn snapshot(&self) -> MapSnapshot {
        let instances = self
            .instances()
            .map(|rec| {
                let keys = rec.sorted_voxels();
                let mut runs: Vec<[i32; 4]> = Vec::new();
                for k in &keys {
                    match runs.last_mut() {
                        Some(r) if r[0] == k[0] && r[1] == k[1] && r[2] + r[3] == k[2] => r[3] += 1,
                        _ => runs.push([k[0], k[1], k[2], 1]),
                    }
                }
                let weights = keys.iter().map(|k| self.voxel(*k).map_or(0, |v| v.weight)).collect();
                InstanceSnapshot {
                    id: rec.id,
                    runs,
                    weights,
                    frames_seen: rec.frames_seen.clone(),
                    labels: rec.labels,
                    interacted: rec.interacted,
                    residual: rec.residual,
                }
            })
            .collect();
        MapSnapshot {
            schema_version: MAP_SCHEMA_VERSION,
            resolution: self.resolution,
            bounds: self.bounds,
            skipped_pixels: self.skipped_pixels,
            instances,
        }
    }

    pub fn from_snapshot(s: &MapSnapshot) -> Result<Self> {
        if s.schema_version != MAP_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "map schema version {} unsupported (expected {MAP_SCHEMA_VERSION})",
                s.schema_version
            )));
        }
        let mut map = ObjectLevelMap::with_bounds(s.bounds, s.resolution);
        map.skipped_pixels = s.skipped_pixels;
        for inst in &s.instances {
            let keys: Vec<VoxelKey> = inst
                .runs
                .iter()
                .flat_map(|r| (0..r[3]).map(move |dz| [r[0], r[1], r[2] + dz]))
                .collect();
            if keys.len() != inst.weights.len() {
                return Err(Error::Config(format!("instance {}: run/weight length mismatch", inst.id)));
            }
            let rec = map.ensure_instance(inst.id);
            *rec = InstanceRecord {
                id: inst.id,
                voxels: keys.iter().copied().collect(),
                frames_seen: inst.frames_seen.clone(),
                labels: inst.labels,
                interacted: inst.interacted,
                residual: inst.residual,
            };
            for (k, w) in keys.into_iter().zip(&inst.weights) {
                map.voxels.insert(k, Voxel { instance: inst.id, weight: *w });
            }
        }
        Ok(map)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.snapshot())?)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let snap: MapSnapshot = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        Self::from_snapshot(&snap)
    }

    /// Voxel counts per instance, for quick diagnostics.
    pub fn voxel_histogram(&self) -> BTreeMap<i32, usize> {
        self.instances().map(|r| (r.id, r.voxels.len())).collect()
    }
}
