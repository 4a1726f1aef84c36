//! Small geometric helpers shared by the simulator and the map.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// Contact tolerance: boxes touching within this distance do not overlap.
pub const CONTACT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn from_center(center: [f64; 3], half: [f64; 3]) -> Self {
        Self {
            min: [center[0] - half[0], center[1] - half[1], center[2] - half[2]],
            max: [center[0] + half[0], center[1] + half[1], center[2] + half[2]],
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn size(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    /// Strict overlap: boxes sharing only a face do not intersect.
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] < other.max[a] - CONTACT_EPS && other.min[a] < self.max[a] - CONTACT_EPS)
    }

    /// Footprint overlap in the horizontal plane only.
    pub fn intersects_2d(&self, other: &Aabb) -> bool {
        (0..2).all(|a| self.min[a] < other.max[a] - CONTACT_EPS && other.min[a] < self.max[a] - CONTACT_EPS)
    }

    pub fn contains_point(&self, p: [f64; 3], margin: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - margin && p[a] <= self.max[a] + margin)
    }

    pub fn inflate(&self, by: f64) -> Aabb {
        Aabb {
            min: [self.min[0] - by, self.min[1] - by, self.min[2] - by],
            max: [self.max[0] + by, self.max[1] + by, self.max[2] + by],
        }
    }

    pub fn translated(&self, d: [f64; 3]) -> Aabb {
        Aabb {
            min: [self.min[0] + d[0], self.min[1] + d[1], self.min[2] + d[2]],
            max: [self.max[0] + d[0], self.max[1] + d[1], self.max[2] + d[2]],
        }
    }

    /// Euclidean distance from `p` to the closest point of the box (0 inside).
    pub fn distance_to(&self, p: [f64; 3]) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let v = if p[a] < self.min[a] {
                self.min[a] - p[a]
            } else if p[a] > self.max[a] {
                p[a] - self.max[a]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2.sqrt()
    }

    /// Does a disc of `radius` centred at (x, y) overlap the box footprint?
    pub fn overlaps_disc(&self, x: f64, y: f64, radius: f64) -> bool {
        let dx = (self.min[0] - x).max(0.0).max(x - self.max[0]);
        let dy = (self.min[1] - y).max(0.0).max(y - self.max[1]);
        dx * dx + dy * dy < radius * radius - CONTACT_EPS
    }
}

/// Slab test against an oriented box given in its local frame.
/// Returns the entry distance and the local-frame face normal.
pub fn ray_box_local(origin: Vec3, dir: Vec3, half: [f64; 3], t_max: f64) -> Option<(f64, Vec3)> {
    let mut t_near = 0.0_f64;
    let mut t_far = t_max;
    let mut axis = usize::MAX;
    let mut sign = 0.0;
    for a in 0..3 {
        let o = origin[a];
        let d = dir[a];
        if d.abs() < 1e-12 {
            if o < -half[a] || o > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut t0 = (-half[a] - o) * inv;
        let mut t1 = (half[a] - o) * inv;
        let mut s = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            s = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
            sign = s;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if axis == usize::MAX {
        // Origin inside the box.
        return None;
    }
    let mut n = Vec3::zeros();
    n[axis] = sign;
    Some((t_near, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn touching_boxes_do_not_intersect() {
        let a = Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        let b = Aabb::new([1.0, 0.0, 0.0], [2.0, 1.0, 1.0]);
        assert!(!a.intersects(&b));
        assert!(a.intersects(&b.translated([-0.1, 0.0, 0.0])));
    }

    #[test]
    fn ray_hits_front_face() {
        let (t, n) = ray_box_local(Vec3::new(-3.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), [0.5, 0.5, 0.5], 10.0).unwrap();
        assert!((t - 2.5).abs() < 1e-12);
        assert_eq!(n, Vec3::new(-1.0, 0.0, 0.0));
        assert!(ray_box_local(Vec3::new(-3.0, 2.0, 0.0), Vec3::new(1.0, 0.0, 0.0), [0.5, 0.5, 0.5], 10.0).is_none());
    }

    #[test]
    fn distance_to_box() {
        let a = Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        assert_eq!(a.distance_to([0.5, 0.5, 0.5]), 0.0);
        assert!((a.distance_to([2.0, 0.5, 0.5]) - 1.0).abs() < 1e-12);
    }
}
