use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::world::{AgentState, Room, FLOOR_ID, LATTICE};

use super::ObjectLevelMap;

/// Dense 2D grid in world coordinates. Cell (ix, iy) spans
/// `origin + [ix, ix+1) * resolution` in x and likewise in y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub nx: usize,
    pub ny: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
    pub data: Vec<f32>,
}

impl Grid2 {
    pub fn zeros(nx: usize, ny: usize, resolution: f64, origin: [f64; 2]) -> Self {
        Self {
            nx,
            ny,
            resolution,
            origin,
            data: vec![0.0; nx * ny],
        }
    }

    pub fn get(&self, ix: usize, iy: usize) -> f32 {
        self.data[iy * self.nx + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f32) {
        self.data[iy * self.nx + ix] = v;
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin[0]) / self.resolution).floor();
        let fy = ((y - self.origin[1]) / self.resolution).floor();
        if fx >= 0.0 && fy >= 0.0 && (fx as usize) < self.nx && (fy as usize) < self.ny {
            Some((fx as usize, fy as usize))
        } else {
            None
        }
    }

    /// Value of the cell containing (x, y); zero outside the grid.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        self.cell_of(x, y).map_or(0.0, |(ix, iy)| self.get(ix, iy))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Occupancy,
    Interacted,
    NonInteracted,
}

/// Project occupied voxels onto the floor plane at voxel resolution over the
/// room footprint. Floor voxels are not obstacles and never count.
pub fn project_2d(map: &ObjectLevelMap, room: &Room, kind: ProjectionKind) -> Grid2 {
    let [occ, int, non] = project_all(map, room);
    match kind {
        ProjectionKind::Occupancy => occ,
        ProjectionKind::Interacted => int,
        ProjectionKind::NonInteracted => non,
    }
}

/// Occupancy, interacted and non-interacted projections in one pass.
pub fn project_all(map: &ObjectLevelMap, room: &Room) -> [Grid2; 3] {
    let res = map.resolution;
    let nx = (room.width / res).round() as usize;
    let ny = (room.depth / res).round() as usize;
    let mut out = std::array::from_fn(|_| Grid2::zeros(nx, ny, res, [0.0, 0.0]));
    // Voxel index of the room origin; the map bounds start one voxel outside.
    let off = [0, 1].map(|a| (-map.bounds.min[a] / res).round() as i32);
    let interacted: FxHashSet<i32> = map.instances().filter(|r| r.id > 0 && r.any_interacted()).map(|r| r.id).collect();
    for (k, v) in map.voxels() {
        if v.instance == FLOOR_ID {
            continue;
        }
        let (ix, iy) = (k[0] - off[0], k[1] - off[1]);
        if ix < 0 || iy < 0 || ix as usize >= nx || iy as usize >= ny {
            continue;
        }
        let cell = iy as usize * nx + ix as usize;
        out[0].data[cell] = 1.0;
        let which = if interacted.contains(&v.instance) { 1 } else { 2 };
        out[which].data[cell] = 1.0;
    }
    out
}

/// Square crop of `side` metres centred on the agent, rotated so the agent's
/// heading points to row 0. Output is `cells * cells` row-major, sampled by
/// nearest neighbour, zero outside the source grid.
pub fn egocentric_crop(grid: &Grid2, agent: &AgentState, side: f64, cells: usize) -> Vec<f32> {
    let (ax, ay) = agent.position();
    let (fx, fy) = agent.forward();
    let (rx, ry) = (fy, -fx);
    let step = side / cells as f64;
    let mut out = vec![0.0; cells * cells];
    for r in 0..cells {
        let ahead = (0.5 * cells as f64 - (r as f64 + 0.5)) * step;
        for c in 0..cells {
            let right = ((c as f64 + 0.5) - 0.5 * cells as f64) * step;
            out[r * cells + c] = grid.sample(ax + right * rx + ahead * fx, ay + right * ry + ahead * fy);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitNovelty {
    NewPosition,
    NewOrientation,
    Repeat,
}

/// Visited lattice cells, each with a bitmask of visited 30-degree yaw bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitGrid {
    pub nx: usize,
    pub ny: usize,
    bins: Vec<u16>,
}

impl VisitGrid {
    pub fn new(room: &Room) -> Self {
        let nx = (room.width / LATTICE).floor() as usize + 1;
        let ny = (room.depth / LATTICE).floor() as usize + 1;
        Self {
            nx,
            ny,
            bins: vec![0; nx * ny],
        }
    }

    fn index(&self, cell: [i32; 2]) -> Option<usize> {
        let (i, j) = (usize::try_from(cell[0]).ok()?, usize::try_from(cell[1]).ok()?);
        (i < self.nx && j < self.ny).then_some(j * self.nx + i)
    }

    /// Novelty of the agent's current (cell, yaw bin) before recording it.
    pub fn lookup(&self, agent: &AgentState) -> VisitNovelty {
        let Some(i) = self.index(agent.cell) else {
            return VisitNovelty::Repeat;
        };
        let bits = self.bins[i];
        if bits == 0 {
            VisitNovelty::NewPosition
        } else if bits & (1 << agent.yaw_bin()) == 0 {
            VisitNovelty::NewOrientation
        } else {
            VisitNovelty::Repeat
        }
    }

    pub fn record(&mut self, agent: &AgentState) {
        if let Some(i) = self.index(agent.cell) {
            self.bins[i] |= 1 << agent.yaw_bin();
        }
    }

    /// Lookup then record.
    pub fn visit(&mut self, agent: &AgentState) -> VisitNovelty {
        let n = self.lookup(agent);
        self.record(agent);
        n
    }

    /// Yaw bins (multiples of 30 degrees) visited at a cell.
    pub fn yaw_bins(&self, cell: [i32; 2]) -> Vec<i32> {
        self.index(cell)
            .map(|i| (0..12).filter(|b| self.bins[i] & (1 << b) != 0).map(|b| b * 30).collect())
            .unwrap_or_default()
    }

    pub fn visited_cells(&self) -> usize {
        self.bins.iter().filter(|b| **b != 0).count()
    }

    /// Visited cells as a grid whose cell centres are the lattice points.
    pub fn to_grid(&self) -> Grid2 {
        let mut g = Grid2::zeros(self.nx, self.ny, LATTICE, [-0.5 * LATTICE, -0.5 * LATTICE]);
        for (i, b) in self.bins.iter().enumerate() {
            if *b != 0 {
                g.data[i] = 1.0;
            }
        }
        g
    }
}
