//! Pinhole raycaster producing depth, instance-id and appearance images.

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{ray_box_local, Vec3};
use crate::rng;

use super::{AgentState, Scene, FLOOR_ID, NO_HIT_ID, WALL_ID};

const FLOOR_COLOR: [f64; 3] = [0.55, 0.50, 0.45];
const WALL_COLOR: [f64; 3] = [0.85, 0.85, 0.80];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub vfov_deg: f64,
    pub max_range: f64,
    pub noise_sigma: f64,
    /// Salt for the per-pixel appearance noise.
    pub noise_seed: u64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            vfov_deg: 90.0,
            max_range: 10.0,
            noise_sigma: 0.02,
            noise_seed: 0,
        }
    }
}

/// Camera position plus heading (clockwise from +y) and tilt, both in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

impl CameraPose {
    pub fn of_agent(agent: &AgentState, camera_height: f64) -> Self {
        let (x, y) = agent.position();
        Self {
            position: [x, y, camera_height],
            yaw_deg: f64::from(agent.yaw_deg),
            pitch_deg: f64::from(agent.pitch_deg),
        }
    }

    /// (forward, right, up) unit vectors in world coordinates.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let (sy, cy) = self.yaw_deg.to_radians().sin_cos();
        let (sp, cp) = self.pitch_deg.to_radians().sin_cos();
        let fwd = Vec3::new(sy * cp, cy * cp, sp);
        let right = Vec3::new(cy, -sy, 0.0);
        let up = right.cross(&fwd);
        (fwd, right, up)
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    /// Full 6-DoF pose; the camera frame is (right, up, -forward).
    pub fn isometry(&self) -> Isometry3<f64> {
        let (fwd, right, up) = self.basis();
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, up, -fwd]));
        Isometry3::from_parts(Translation3::from(self.origin()), UnitQuaternion::from_rotation_matrix(&rot))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibleInstance {
    pub id: i32,
    pub center: [f64; 3],
    pub extent: [f64; 3],
    pub volume: f64,
    pub pixel_count: u32,
}

/// One sensor capture. Images are row-major, row 0 at the top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub vfov_deg: f64,
    pub max_range: f64,
    /// Euclidean ray length to the hit (m); +inf when nothing is hit in range.
    pub depth: Vec<f32>,
    pub instance_ids: Vec<i32>,
    /// Interleaved RGB in [0, 1].
    pub appearance: Vec<f32>,
    pub camera: CameraPose,
    pub step_index: usize,
    /// Geometry snapshot of every instance with at least one pixel, sorted by id.
    pub visible: Vec<VisibleInstance>,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn focal_px(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.vfov_deg.to_radians()).tan()
    }

    /// Unit ray direction through the centre of pixel (row, col).
    pub fn ray(&self, row: usize, col: usize) -> Vec3 {
        pixel_ray(&self.camera, self.width, self.height, self.vfov_deg, row, col)
    }

    /// Back-projected 3D point of a pixel, if it hit something.
    pub fn point(&self, idx: usize) -> Option<Vec3> {
        self.point_beyond(idx, 0.0)
    }

    /// Point `extra` metres further along the pixel ray than the hit.
    pub fn point_beyond(&self, idx: usize, extra: f64) -> Option<Vec3> {
        let d = self.depth[idx];
        if !d.is_finite() {
            return None;
        }
        let (row, col) = (idx / self.width, idx % self.width);
        Some(self.camera.origin() + self.ray(row, col) * (f64::from(d) + extra))
    }

    /// Unit ray directions for every pixel, row-major.
    pub fn rays(&self) -> Vec<Vec3> {
        let (fwd, right, up) = self.camera.basis();
        let tan_v = (0.5 * self.vfov_deg.to_radians()).tan();
        let tan_h = tan_v * self.width as f64 / self.height as f64;
        let mut out = Vec::with_capacity(self.len());
        for row in 0..self.height {
            let y = (1.0 - (row as f64 + 0.5) / self.height as f64 * 2.0) * tan_v;
            for col in 0..self.width {
                let x = ((col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * tan_h;
                out.push((fwd + right * x + up * y).normalize());
            }
        }
        out
    }

    /// Back-projected points for every pixel (`None` where nothing was hit),
    /// each pushed `extra` metres along its ray.
    pub fn points(&self, extra: f64) -> Vec<Option<Vec3>> {
        let o = self.camera.origin();
        self.rays()
            .into_iter()
            .zip(&self.depth)
            .map(|(r, d)| d.is_finite().then(|| o + r * (f64::from(*d) + extra)))
            .collect()
    }

    pub fn visible_instance(&self, id: i32) -> Option<&VisibleInstance> {
        self.visible.binary_search_by_key(&id, |v| v.id).ok().map(|i| &self.visible[i])
    }

    pub fn pixel_count(&self, id: i32) -> u32 {
        self.visible_instance(id).map_or(0, |v| v.pixel_count)
    }

    /// Project a world point to (row, col) in continuous pixel coordinates.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let (fwd, right, up) = self.camera.basis();
        let rel = p - self.camera.origin();
        let z = rel.dot(&fwd);
        if z <= 1e-9 {
            return None;
        }
        let f = self.focal_px();
        let col = 0.5 * self.width as f64 + f * rel.dot(&right) / z;
        let row = 0.5 * self.height as f64 - f * rel.dot(&up) / z;
        Some((row, col, z))
    }
}

fn pixel_ray(cam: &CameraPose, width: usize, height: usize, vfov_deg: f64, row: usize, col: usize) -> Vec3 {
    let (fwd, right, up) = cam.basis();
    let tan_v = (0.5 * vfov_deg.to_radians()).tan();
    let tan_h = tan_v * width as f64 / height as f64;
    let x = ((col as f64 + 0.5) / width as f64 * 2.0 - 1.0) * tan_h;
    let y = (1.0 - (row as f64 + 0.5) / height as f64 * 2.0) * tan_v;
    (fwd + right * x + up * y).normalize()
}

struct BoxProxy {
    id: i32,
    center: Vec3,
    cos: f64,
    sin: f64,
    half: [f64; 3],
    radius: f64,
    color: [f64; 3],
}

/// Render the scene from the agent's camera. Deterministic in all inputs.
pub fn render(scene: &Scene, agent: &AgentState, camera: &CameraConfig, camera_height: f64, step_index: usize) -> Frame {
    let pose = CameraPose::of_agent(agent, camera_height);
    let origin = pose.origin();
    let light = Vec3::new(0.3, 0.5, 0.8).normalize();

    let mut boxes: Vec<BoxProxy> = Vec::with_capacity(scene.walls.len() + scene.instances.len());
    for w in &scene.walls {
        let c = w.center();
        let half = w.size().map(|s| 0.5 * s);
        boxes.push(BoxProxy {
            id: WALL_ID,
            center: Vec3::from(c),
            cos: 1.0,
            sin: 0.0,
            half,
            radius: Vec3::from(half).norm(),
            color: WALL_COLOR,
        });
    }
    for inst in scene.instances.iter().filter(|i| !i.held) {
        let half = inst.extent.map(|e| 0.5 * e);
        boxes.push(BoxProxy {
            id: inst.id,
            center: Vec3::from(inst.position),
            cos: inst.yaw.cos(),
            sin: inst.yaw.sin(),
            half,
            radius: Vec3::from(half).norm(),
            color: inst.color,
        });
    }

    let (w, h) = (camera.width, camera.height);
    let n = w * h;
    let mut depth = vec![f32::INFINITY; n];
    let mut ids = vec![NO_HIT_ID; n];
    let mut appearance = vec![0.0f32; 3 * n];
    let mut noise_rng = rng::rng_for(camera.noise_seed ^ scene.seed, &[rng::tag::RENDER, step_index as u64]);

    for row in 0..h {
        for col in 0..w {
            let dir = pixel_ray(&pose, w, h, camera.vfov_deg, row, col);
            let mut best_t = camera.max_range;
            let mut best: Option<(i32, Vec3, [f64; 3])> = None;
            if dir.z < -1e-12 {
                let t = -origin.z / dir.z;
                if t < best_t {
                    best_t = t;
                    best = Some((FLOOR_ID, Vec3::z(), FLOOR_COLOR));
                }
            }
            for b in &boxes {
                let rel = b.center - origin;
                let along = rel.dot(&dir);
                if along + b.radius < 0.0 || (rel.norm_squared() - along * along) > b.radius * b.radius {
                    continue;
                }
                let lo = Vec3::new(-rel.x * b.cos - rel.y * b.sin, rel.x * b.sin - rel.y * b.cos, -rel.z);
                let ld = Vec3::new(dir.x * b.cos + dir.y * b.sin, -dir.x * b.sin + dir.y * b.cos, dir.z);
                if let Some((t, ln)) = ray_box_local(lo, ld, b.half, best_t) {
                    if t < best_t {
                        best_t = t;
                        let nw = Vec3::new(ln.x * b.cos - ln.y * b.sin, ln.x * b.sin + ln.y * b.cos, ln.z);
                        best = Some((b.id, nw, b.color));
                    }
                }
            }
            let idx = row * w + col;
            if let Some((id, normal, color)) = best {
                depth[idx] = best_t as f32;
                ids[idx] = id;
                let shade = 0.35 + 0.65 * normal.dot(&light).max(0.0);
                for ch in 0..3 {
                    let eps: f64 = StandardNormal.sample(&mut noise_rng);
                    appearance[3 * idx + ch] = (color[ch] * shade + camera.noise_sigma * eps).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let visible = visible_instances(scene, &ids);
    Frame {
        width: w,
        height: h,
        vfov_deg: camera.vfov_deg,
        max_range: camera.max_range,
        depth,
        instance_ids: ids,
        appearance,
        camera: pose,
        step_index,
        visible,
    }
}

fn visible_instances(scene: &Scene, ids: &[i32]) -> Vec<VisibleInstance> {
    let mut counts: std::collections::BTreeMap<i32, u32> = std::collections::BTreeMap::new();
    for &id in ids.iter().filter(|&&id| id != NO_HIT_ID) {
        *counts.entry(id).or_default() += 1;
    }
    counts
        .into_iter()
        .filter_map(|(id, pixel_count)| {
            if let Some(inst) = scene.instance(id) {
                let half = inst.half_extents_world();
                Some(VisibleInstance {
                    id,
                    center: inst.position,
                    extent: half.map(|v| 2.0 * v),
                    volume: inst.volume(),
                    pixel_count,
                })
            } else {
                scene.background_geometry(id).map(|(center, extent)| VisibleInstance {
                    id,
                    center,
                    extent,
                    volume: 0.0,
                    pixel_count,
                })
            }
        })
        .collect()
}

/// Per-pixel Euclidean distance from the arm base to each back-projected point.
pub fn distance_image(frame: &Frame, arm_base: &Isometry3<f64>) -> Vec<f32> {
    let base = arm_base.translation.vector;
    (0..frame.len())
        .map(|idx| match frame.point(idx) {
            Some(p) => (p - base).norm() as f32,
            None => f32::INFINITY,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, AgentState, SceneConfig, LATTICE};

    fn empty_scene() -> Scene {
        generate_scene(
            0,
            &SceneConfig {
                min_objects: 0,
                max_objects: 0,
                ..SceneConfig::default()
            },
        )
        .unwrap()
    }

    fn odd_camera() -> CameraConfig {
        CameraConfig {
            width: 65,
            height: 65,
            ..CameraConfig::default()
        }
    }

    #[test]
    fn facing_wall_at_one_metre() {
        let scene = empty_scene();
        // North wall face at y = 10; agent at y = 9 facing north.
        let agent = AgentState::new([20, (9.0 / LATTICE) as i32], 0, 0);
        let f = render(&scene, &agent, &odd_camera(), 1.5, 0);
        let c = 32 * 65 + 32;
        assert!((f64::from(f.depth[c]) - 1.0).abs() < 0.025, "depth {}", f.depth[c]);
        assert_eq!(f.instance_ids[c], WALL_ID);
    }

    #[test]
    fn pitched_down_sees_floor() {
        let scene = empty_scene();
        let agent = AgentState::new([20, 20], 0, -60);
        let f = render(&scene, &agent, &odd_camera(), 1.5, 0);
        let c = 32 * 65 + 32;
        let expected = 1.5 / 60f64.to_radians().sin();
        assert_eq!(f.instance_ids[c], FLOOR_ID);
        assert!((f64::from(f.depth[c]) - expected).abs() < 1e-5);
        assert!(f.instance_ids[64 * 65..].iter().all(|&id| id == FLOOR_ID));
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = generate_scene(3, &SceneConfig::default()).unwrap();
        let agent = AgentState::new([20, 20], 90, -15);
        let a = render(&scene, &agent, &CameraConfig::default(), 1.5, 4);
        let b = render(&scene, &agent, &CameraConfig::default(), 1.5, 4);
        assert_eq!(a, b);
        assert!(a.depth.iter().zip(&a.instance_ids).all(|(d, &id)| id == NO_HIT_ID || *d > 0.0));
    }

    #[test]
    fn distance_image_cases() {
        let scene = empty_scene();
        let agent = AgentState::new([20, (9.0 / LATTICE) as i32], 0, 0);
        let f = render(&scene, &agent, &odd_camera(), 1.5, 0);
        let at_camera = distance_image(&f, &f.camera.isometry());
        for (a, b) in at_camera.iter().zip(&f.depth) {
            if b.is_finite() {
                assert!((a - b).abs() < 1e-4);
            } else {
                assert!(a.is_infinite());
            }
        }
        let mut below = f.camera.isometry();
        below.translation.vector.z -= 0.5;
        let d = distance_image(&f, &below);
        let c = 32 * 65 + 32;
        let expected = (f64::from(f.depth[c]).powi(2) + 0.25).sqrt();
        assert!((f64::from(d[c]) - expected).abs() < 1e-5);
    }

    #[test]
    fn no_hit_beyond_range() {
        let scene = empty_scene();
        let agent = AgentState::new([20, 20], 0, 60);
        let cam = CameraConfig {
            max_range: 1.0,
            ..odd_camera()
        };
        let f = render(&scene, &agent, &cam, 1.5, 0);
        assert!(f.depth[0].is_infinite());
        assert_eq!(f.instance_ids[0], NO_HIT_ID);
    }

    #[test]
    fn projection_inverts_ray() {
        let scene = empty_scene();
        let agent = AgentState::new([20, 20], 30, -30);
        let f = render(&scene, &agent, &CameraConfig::default(), 1.5, 0);
        let idx = 40 * 64 + 21;
        let p = f.point(idx).unwrap();
        let (r, c, _) = f.project(p).unwrap();
        assert!((r - 40.5).abs() < 1e-6 && (c - 21.5).abs() < 1e-6);
    }
}
