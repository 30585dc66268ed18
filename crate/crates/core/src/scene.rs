//! Synthetic scenes and a ray-casting LIDAR simulator.
//!
//! Every ray returns the nearest intersection among all objects, so range
//! shadows and self-occlusion fall out of the geometry. Moving objects are
//! displaced by `velocity * frame * frame_interval` before casting.

use std::path::{Path, PathBuf};

use nalgebra::{Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::cloud::{PointCloud, RigidTransform, SphericalGridSpec, VoxelId};
use crate::error::{Error, Result};
use crate::mesh::{load_off_mesh, TriangleMesh};

/// Hits closer than this along a ray are ignored.
const RAY_EPS: f64 = 1e-9;

/// Geometric primitive in world coordinates (before any motion).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Infinite plane through `point` with normal `normal`.
    Plane { point: [f64; 3], normal: [f64; 3] },
    /// Box with half extents, rotated by `yaw` about the vertical axis.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        yaw: f64,
    },
    /// Vertical capped cylinder between `z_min` and `z_max`.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
    Sphere { center: [f64; 3], radius: f64 },
    /// Triangles loaded from an OFF file, scaled, rotated (roll, pitch, yaw)
    /// and translated. Resolved into `Triangles` by [`SceneSpec::resolve`].
    OffMesh {
        path: PathBuf,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        rotation: [f64; 3],
        #[serde(default)]
        translation: [f64; 3],
    },
    Triangles { mesh: PreparedMesh },
}

fn one() -> f64 {
    1.0
}

/// Mesh with a cached bounding box for ray rejection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TriangleMesh", into = "TriangleMesh")]
pub struct PreparedMesh {
    pub mesh: TriangleMesh,
    lo: Point3<f64>,
    hi: Point3<f64>,
}

impl From<TriangleMesh> for PreparedMesh {
    fn from(mesh: TriangleMesh) -> Self {
        let (lo, hi) = mesh.bounds();
        Self { mesh, lo, hi }
    }
}

impl From<PreparedMesh> for TriangleMesh {
    fn from(m: PreparedMesh) -> Self {
        m.mesh
    }
}

/// Slab test; returns the entry/exit parameters when the ray meets the box.
fn ray_aabb(o: &Point3<f64>, d: &Vector3<f64>, lo: &Point3<f64>, hi: &Point3<f64>) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if d[i].abs() < 1e-300 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let (a, b) = ((lo[i] - o[i]) * inv, (hi[i] - o[i]) * inv);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    if t1 < RAY_EPS {
        None
    } else {
        Some((t0, t1))
    }
}

/// Two-sided Moller-Trumbore intersection.
pub fn ray_triangle(o: &Point3<f64>, d: &Vector3<f64>, t: &[Point3<f64>; 3]) -> Option<f64> {
    let e1 = t[1] - t[0];
    let e2 = t[2] - t[0];
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - t[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let dist = e2.dot(&q) * inv;
    (dist > RAY_EPS).then_some(dist)
}

fn smallest_positive(a: f64, b: f64) -> Option<f64> {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    if a > RAY_EPS {
        Some(a)
    } else if b > RAY_EPS {
        Some(b)
    } else {
        None
    }
}

impl Shape {
    /// Distance along the unit direction `d` to the first surface hit.
    pub fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self {
            Shape::Plane { point, normal } => {
                let n = Vector3::from(*normal);
                let den = n.dot(d);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(Point3::from(*point) - o)) / den;
                (t > RAY_EPS).then_some(t)
            }
            Shape::Box {
                center,
                half_extents,
                yaw,
            } => {
                let r = Rotation3::from_axis_angle(&Vector3::z_axis(), -yaw);
                let lo_o = Point3::from(r * (o - Point3::from(*center)));
                let ld = r * d;
                let h = Vector3::from(*half_extents);
                let (t0, t1) = ray_aabb(&lo_o, &ld, &Point3::from(-h), &Point3::from(h))?;
                smallest_positive(t0, t1)
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let (cx, cy) = (o.x - center[0], o.y - center[1]);
                let mut best: Option<f64> = None;
                let mut keep = |t: f64| {
                    if t > RAY_EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-300 {
                    let b = cx * d.x + cy * d.y;
                    let c = cx * cx + cy * cy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            let z = o.z + t * d.z;
                            if z >= *z_min && z <= *z_max {
                                keep(t);
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-300 {
                    for zc in [*z_min, *z_max] {
                        let t = (zc - o.z) / d.z;
                        let (x, y) = (cx + t * d.x, cy + t * d.y);
                        if x * x + y * y <= radius * radius {
                            keep(t);
                        }
                    }
                }
                best
            }
            Shape::Sphere { center, radius } => {
                let oc = o - Point3::from(*center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                smallest_positive(-b - sq, -b + sq)
            }
            Shape::Triangles { mesh } => {
                ray_aabb(o, d, &mesh.lo, &mesh.hi)?;
                mesh.mesh
                    .triangles()
                    .filter_map(|t| ray_triangle(o, d, &t))
                    .min_by(f64::total_cmp)
            }
            Shape::OffMesh { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub shape: Shape,
    /// World-frame velocity, m/s.
    #[serde(default)]
    pub velocity: [f64; 3],
    /// Blocks rays without producing a return (dark or sparse foliage).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_return: bool,
}

impl SceneObject {
    pub fn fixed(shape: Shape) -> Self {
        Self {
            shape,
            velocity: [0.0; 3],
            no_return: false,
        }
    }

    pub fn moving(shape: Shape, velocity: Vector3<f64>) -> Self {
        Self {
            shape,
            velocity: velocity.into(),
            no_return: false,
        }
    }

    pub fn occluder(shape: Shape) -> Self {
        Self {
            no_return: true,
            ..Self::fixed(shape)
        }
    }

    pub fn is_moving(&self) -> bool {
        self.velocity != [0.0; 3]
    }
}

/// Sensor pose as translation plus roll/pitch/yaw, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub translation: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl PoseSpec {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_euler(self.rpy[0], self.rpy[1], self.rpy[2], Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPattern {
    /// Horizontal angular step, radians; a full turn is swept.
    pub azimuth_step: f64,
    /// Elevation of every ring, radians.
    pub elevation_rings: Vec<f64>,
    pub max_range: f64,
}

impl Default for ScanPattern {
    /// 64 rings over +-0.44 rad and 0.25 degree azimuth steps out to 40 m,
    /// which puts on the order of a hundred returns in a surface-filled
    /// voxel of the default grid.
    fn default() -> Self {
        Self::uniform(64, -0.44, 0.44, 0.25f64.to_radians(), 40.0)
    }
}

impl ScanPattern {
    pub fn uniform(rings: usize, min_elevation: f64, max_elevation: f64, azimuth_step: f64, max_range: f64) -> Self {
        let elevation_rings = (0..rings)
            .map(|i| {
                if rings == 1 {
                    0.5 * (min_elevation + max_elevation)
                } else {
                    min_elevation + (max_elevation - min_elevation) * i as f64 / (rings - 1) as f64
                }
            })
            .collect();
        Self {
            azimuth_step,
            elevation_rings,
            max_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_step > 0.0) || !(self.max_range > 0.0) || self.elevation_rings.is_empty() {
            return Err(Error::InvalidInput(
                "scan pattern needs a positive step, positive range and at least one ring".into(),
            ));
        }
        Ok(())
    }

    pub fn azimuth_count(&self) -> usize {
        (2.0 * std::f64::consts::PI / self.azimuth_step).round().max(1.0) as usize
    }

    /// Unit ray directions in the sensor frame, ring-major.
    pub fn directions(&self) -> Vec<(usize, Vector3<f64>)> {
        let na = self.azimuth_count();
        let mut out = Vec::with_capacity(na * self.elevation_rings.len());
        for (ring, &el) in self.elevation_rings.iter().enumerate() {
            for j in 0..na {
                let az = -std::f64::consts::PI + j as f64 * 2.0 * std::f64::consts::PI / na as f64;
                out.push((ring, Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    pub trajectory: Vec<PoseSpec>,
    /// Standard deviation of the range noise, meters.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Seconds between frames.
    #[serde(default = "default_frame_interval")]
    pub frame_interval: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<OcclusionSpec>,
}

/// Unmodeled partial occluders (foliage, clutter): in each frame a random
/// subset of the sensor-frame grid cells loses the points on one side of a
/// plane through the cell, tangential to the line of sight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionSpec {
    /// Probability that a cell is partially occluded in a frame.
    pub fraction: f64,
    /// Range of the share of the cell's points removed.
    pub crop: [f64; 2],
    /// Cells with fewer points are left alone.
    pub min_points: usize,
    pub grid: SphericalGridSpec,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            crop: [0.3, 0.6],
            min_points: 25,
            grid: SphericalGridSpec::default(),
        }
    }
}

impl OcclusionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidInput("occlusion fraction must be in [0, 1]".into()));
        }
        if !(0.0 <= self.crop[0] && self.crop[0] <= self.crop[1] && self.crop[1] < 1.0) {
            return Err(Error::InvalidInput("occlusion crop must satisfy 0 <= low <= high < 1".into()));
        }
        self.grid.validate()
    }
}

fn default_frame_interval() -> f64 {
    0.1
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("noise_sigma must be >= 0".into()));
        }
        if self.trajectory.is_empty() {
            return Err(Error::InvalidInput("trajectory must contain at least one pose".into()));
        }
        if !(self.frame_interval > 0.0) {
            return Err(Error::InvalidInput("frame_interval must be > 0".into()));
        }
        if let Some(o) = &self.occlusion {
            o.validate()?;
        }
        Ok(())
    }

    /// Parses a TOML scene description. Relative mesh paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SceneSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads OFF meshes into memory and validates the result.
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        for obj in &mut self.objects {
            if let Shape::OffMesh {
                path,
                scale,
                rotation,
                translation,
            } = &obj.shape
            {
                let full = if path.is_absolute() { path.clone() } else { base.join(path) };
                let mesh = load_off_mesh(&full)?.scaled(*scale).transformed(
                    &Rotation3::from_euler_angles(rotation[0], rotation[1], rotation[2]),
                    &Vector3::from(*translation),
                );
                obj.shape = Shape::Triangles { mesh: mesh.into() };
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn frames(&self) -> usize {
        self.trajectory.len()
    }

    /// Sensor-to-world transform of a frame.
    pub fn sensor_pose(&self, frame: usize) -> Result<RigidTransform> {
        self.trajectory
            .get(frame)
            .map(PoseSpec::transform)
            .ok_or_else(|| Error::InvalidInput(format!("frame {frame} beyond trajectory of {}", self.frames())))
    }

    /// Displacement of an object at a frame relative to frame 0.
    pub fn displacement(&self, object: usize, frame: usize) -> Vector3<f64> {
        Vector3::from(self.objects[object].velocity) * (frame as f64 * self.frame_interval)
    }

    /// Nearest hit along a world-frame ray at a given frame: (object index, distance).
    pub fn cast(&self, frame: usize, origin: &Point3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            let o = if obj.is_moving() {
                origin - self.displacement(i, frame)
            } else {
                *origin
            };
            if let Some(t) = obj.shape.intersect(&o, dir) {
                if t <= max_range && best.is_none_or(|(_, b)| t < b) {
                    best = Some((i, t));
                }
            }
        }
        best
    }
}

/// Simulated scan with per-point ground truth.
#[derive(Debug, Clone)]
pub struct LabeledScan {
    /// Sensor-frame points including range noise.
    pub cloud: PointCloud,
    /// Object index hit by each point's ray.
    pub object: Vec<usize>,
    /// Ring of each point.
    pub ring: Vec<usize>,
    /// Sensor-frame unit direction of each point's ray.
    pub direction: Vec<Vector3<f64>>,
    /// The point survived inside a partially occluded cell.
    pub occluded: Vec<bool>,
}

impl LabeledScan {
    fn retain(&mut self, keep: &[bool]) {
        fn filter<T>(v: &mut Vec<T>, keep: &[bool]) {
            let mut k = keep.iter();
            v.retain(|_| *k.next().expect("one flag per point"));
        }
        filter(&mut self.cloud.points, keep);
        filter(&mut self.object, keep);
        filter(&mut self.ring, keep);
        filter(&mut self.direction, keep);
        filter(&mut self.occluded, keep);
    }
}

fn apply_occlusion(scan: &mut LabeledScan, spec: &OcclusionSpec, seed: u64, frame: usize) {
    let mut cells: BTreeMap<VoxelId, Vec<usize>> = BTreeMap::new();
    for (i, p) in scan.cloud.points.iter().enumerate() {
        if let Some(id) = spec.grid.locate(p) {
            cells.entry(id).or_default().push(i);
        }
    }
    let mut keep = vec![true; scan.cloud.len()];
    let frame_seed = seed ^ (frame as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for (id, members) in cells {
        if members.len() < spec.min_points {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(id.seed(frame_seed));
        if rng.random::<f64>() >= spec.fraction {
            continue;
        }
        let n = members.len() as f64;
        let c = members.iter().fold(Vector3::zeros(), |a, &i| a + scan.cloud.points[i].coords) / n;
        let los = c.normalize();
        let side = los.cross(&Vector3::z());
        let side = if side.norm() > 1e-6 { side.normalize() } else { Vector3::x() };
        let up = side.cross(&los);
        let angle = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let u = side * angle.cos() + up * angle.sin();
        let share = rng.random_range(spec.crop[0]..=spec.crop[1]);
        let mut proj: Vec<(f64, usize)> = members.iter().map(|&i| ((scan.cloud.points[i].coords - c).dot(&u), i)).collect();
        proj.sort_by(|a, b| a.0.total_cmp(&b.0));
        let drop = (share * n).round() as usize;
        for &(_, i) in &proj[..drop] {
            keep[i] = false;
        }
        for &(_, i) in &proj[drop..] {
            scan.occluded[i] = true;
        }
    }
    scan.retain(&keep);
}

pub fn simulate_lidar(scene: &SceneSpec, frame: usize, pattern: &ScanPattern) -> Result<PointCloud> {
    simulate_lidar_labeled(scene, frame, pattern).map(|s| s.cloud)
}

pub fn simulate_lidar_labeled(scene: &SceneSpec, frame: usize, pattern: &ScanPattern) -> Result<LabeledScan> {
    scene.validate()?;
    pattern.validate()?;
    let pose = scene.sensor_pose(frame)?;
    let origin = Point3::from(pose.translation);
    let noise = (scene.noise_sigma > 0.0).then(|| Normal::new(0.0, scene.noise_sigma).expect("sigma > 0"));
    let mut scan = LabeledScan {
        cloud: PointCloud::new(Vec::new()),
        object: Vec::new(),
        ring: Vec::new(),
        direction: Vec::new(),
        occluded: Vec::new(),
    };
    let mut current_ring = usize::MAX;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (ring, dir) in pattern.directions() {
        if ring != current_ring {
            // one stream per (scene seed, frame, ring)
            current_ring = ring;
            rng = ChaCha8Rng::seed_from_u64(scene.seed);
            rng.set_stream(((frame as u64) << 20) | ring as u64);
        }
        let world_dir = pose.apply_vector(&dir);
        let Some((obj, t)) = scene.cast(frame, &origin, &world_dir, pattern.max_range) else {
            continue;
        };
        if scene.objects[obj].no_return {
            continue;
        }
        let range = match &noise {
            Some(n) => (t + n.sample(&mut rng)).max(0.0),
            None => t,
        };
        scan.cloud.points.push(Point3::from(dir * range));
        scan.object.push(obj);
        scan.ring.push(ring);
        scan.direction.push(dir);
        scan.occluded.push(false);
    }
    if let Some(spec) = &scene.occlusion {
        apply_occlusion(&mut scan, spec, scene.seed, frame);
    }
    Ok(scan)
}
