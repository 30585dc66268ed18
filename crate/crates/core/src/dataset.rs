//! Procedural scene families, per-voxel ground truth and training-set
//! generation.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{fit_gaussian, PointCloud, truncation_basis, GaussianCell, RigidTransform, TruncationBasis, VoxelId};
use crate::d2d::{pair_scan, register_against, ReferenceScan, SolverConfig};
use crate::error::{Error, Result};
use crate::filter::voxel_sample;
use crate::mesh::{sample_mesh_uniform, ObjectKind, TriangleMesh};
use crate::net::{self, VoxelSample};
use crate::scene::{simulate_lidar, simulate_lidar_labeled, LabeledScan, OcclusionSpec, PoseSpec, ScanPattern, SceneObject, SceneSpec, Shape};

/// Height of the ground plane below the sensor, meters.
pub const GROUND_Z: f64 = -1.7;

/// Independent stream seed for item `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    VoxelId::new(index as u32, (index >> 32) as u32, 0x51ce).seed(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneFamily {
    /// Trunks on flat ground with a few walkers.
    Forest,
    /// Street canyon: facades, poles, parked and moving cars.
    City,
    /// Forest geometry with a stationary sensor and nothing moving.
    Static,
    /// Three orthogonal walls, sensor drifting slowly.
    ThreeWalls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyOptions {
    pub frames: usize,
    /// Sensor speed along its x axis, m/s.
    pub speed: f64,
    pub noise_sigma: f64,
    /// Moving objects placed near the path.
    pub movers: usize,
    /// Trunks per square meter (forest).
    pub trunk_density: f64,
    pub trunk_radius_max: f64,
    /// Bushes per square meter (forest).
    pub bush_density: f64,
    /// Thin saplings per square meter (forest); they cast narrow shadows.
    pub sapling_density: f64,
    /// Non-returning foliage clumps per square meter (forest).
    pub foliage_density: f64,
    /// Speed range of moving objects, m/s; each family has its own default.
    pub mover_speed: Option<[f64; 2]>,
    pub occlusion: Option<OcclusionSpec>,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        Self {
            frames: 10,
            speed: 5.0,
            noise_sigma: 0.01,
            movers: 4,
            trunk_density: 0.05,
            trunk_radius_max: 0.4,
            bush_density: 0.0,
            sapling_density: 0.0,
            foliage_density: 0.0,
            mover_speed: None,
            occlusion: None,
        }
    }
}

fn ground() -> SceneObject {
    SceneObject::fixed(Shape::Plane {
        point: [0.0, 0.0, GROUND_Z],
        normal: [0.0, 0.0, 1.0],
    })
}

fn straight_trajectory(frames: usize, step: f64, rng: &mut ChaCha8Rng) -> Vec<PoseSpec> {
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..frames)
        .map(|i| {
            let s = i as f64;
            PoseSpec {
                translation: [step * s, 0.15 * (0.3 * s + phase).sin(), 0.0],
                rpy: [0.0, 0.0, 0.03 * (0.4 * s + phase).sin()],
            }
        })
        .collect()
}

pub fn forest_scene(seed: u64, opts: &FamilyOptions) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 0.1;
    let length = opts.speed * dt * opts.frames as f64;
    let (x0, x1, y_max) = (-35.0, length + 35.0, 30.0);
    let mut objects = vec![ground()];
    let area = (x1 - x0) * 2.0 * y_max;
    let trunks = (area * opts.trunk_density).round() as usize;
    for _ in 0..trunks {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(-y_max..y_max);
        if y.abs() < 1.8 {
            continue;
        }
        objects.push(SceneObject::fixed(Shape::Cylinder {
            center: [x, y],
            radius: rng.random_range(0.1..opts.trunk_radius_max),
            z_min: GROUND_Z,
            z_max: rng.random_range(4.0..12.0),
        }));
    }
    let bushes = (area * opts.bush_density).round() as usize;
    for _ in 0..bushes {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(-y_max..y_max);
        if y.abs() < 1.5 {
            continue;
        }
        let r = rng.random_range(0.25..0.6);
        objects.push(SceneObject::fixed(Shape::Sphere {
            center: [x, y, GROUND_Z + 0.6 * r],
            radius: r,
        }));
    }
    let saplings = (area * opts.sapling_density).round() as usize;
    for _ in 0..saplings {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(-y_max..y_max);
        if y.abs() < 1.5 {
            continue;
        }
        objects.push(SceneObject::fixed(Shape::Cylinder {
            center: [x, y],
            radius: rng.random_range(0.02..0.06),
            z_min: GROUND_Z,
            z_max: rng.random_range(1.5..4.0),
        }));
    }
    let clumps = (area * opts.foliage_density).round() as usize;
    for _ in 0..clumps {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(-y_max..y_max);
        if y.abs() < 1.5 {
            continue;
        }
        objects.push(SceneObject::occluder(Shape::Sphere {
            center: [x, y, GROUND_Z + rng.random_range(0.5..3.5)],
            radius: rng.random_range(0.2..0.6),
        }));
    }
    for _ in 0..opts.movers {
        let x = rng.random_range(0.0..length + 20.0);
        let y = rng.random_range(2.5..10.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let heading: f64 = rng.random_range(-0.5..0.5) + if rng.random_bool(0.5) { 0.0 } else { PI };
        let [v0, v1] = opts.mover_speed.unwrap_or([2.0, 6.0]);
        let v = rng.random_range(v0..=v1);
        objects.push(SceneObject::moving(
            Shape::Box {
                center: [x, y, GROUND_Z + 0.85],
                half_extents: [0.3, 0.25, 0.85],
                yaw: heading,
            },
            Vector3::new(v * heading.cos(), v * heading.sin(), 0.0),
        ));
    }
    SceneSpec {
        objects,
        trajectory: straight_trajectory(opts.frames, opts.speed * dt, &mut rng),
        noise_sigma: opts.noise_sigma,
        seed,
        frame_interval: dt,
        occlusion: opts.occlusion.clone(),
    }
}

pub fn city_scene(seed: u64, opts: &FamilyOptions) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 0.1;
    let length = opts.speed * dt * opts.frames as f64;
    let mut objects = vec![ground()];
    for side in [-1.0, 1.0] {
        let mut x = -45.0;
        while x < length + 45.0 {
            let len = rng.random_range(8.0..22.0);
            let setback = rng.random_range(7.0..10.0);
            let depth = 10.0;
            objects.push(SceneObject::fixed(Shape::Box {
                center: [x + len / 2.0, side * (setback + depth / 2.0), 5.0],
                half_extents: [len / 2.0, depth / 2.0, 6.7],
                yaw: 0.0,
            }));
            // entrance steps and pillars break up the facades
            if rng.random_bool(0.6) {
                let px = x + rng.random_range(1.0..len - 1.0);
                objects.push(SceneObject::fixed(Shape::Box {
                    center: [px, side * (setback - 0.4), GROUND_Z + 1.5],
                    half_extents: [rng.random_range(0.3..1.2), 0.4, 1.5],
                    yaw: 0.0,
                }));
            }
            x += len + rng.random_range(1.0..4.0);
        }
        let mut px = -40.0 + rng.random_range(0.0..10.0);
        while px < length + 40.0 {
            objects.push(SceneObject::fixed(Shape::Cylinder {
                center: [px, side * 5.6],
                radius: 0.12,
                z_min: GROUND_Z,
                z_max: 3.5,
            }));
            px += rng.random_range(10.0..16.0);
        }
        let mut cx = -40.0 + rng.random_range(0.0..8.0);
        while cx < length + 40.0 {
            if rng.random_bool(0.6) {
                objects.push(SceneObject::fixed(Shape::Box {
                    center: [cx, side * 4.2, GROUND_Z + 0.75],
                    half_extents: [2.2, 0.9, 0.75],
                    yaw: rng.random_range(-0.05..0.05),
                }));
            }
            cx += rng.random_range(5.5..9.0);
        }
    }
    for _ in 0..opts.movers {
        let lane = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let [v0, v1] = opts.mover_speed.unwrap_or([5.0, 10.0]);
        let v = rng.random_range(v0..=v1) * lane;
        objects.push(SceneObject::moving(
            Shape::Box {
                center: [rng.random_range(-20.0..length + 30.0), -lane * 2.0, GROUND_Z + 0.75],
                half_extents: [2.2, 0.9, 0.75],
                yaw: 0.0,
            },
            Vector3::new(v, 0.0, 0.0),
        ));
    }
    SceneSpec {
        objects,
        trajectory: straight_trajectory(opts.frames, opts.speed * dt, &mut rng),
        noise_sigma: opts.noise_sigma,
        seed,
        frame_interval: dt,
        occlusion: opts.occlusion.clone(),
    }
}

pub fn static_scene(seed: u64, opts: &FamilyOptions) -> SceneSpec {
    let mut o = opts.clone();
    o.movers = 0;
    let mut s = forest_scene(seed, &o);
    for p in &mut s.trajectory {
        *p = PoseSpec {
            translation: [0.0; 3],
            rpy: [0.0; 3],
        };
    }
    s
}

pub fn three_wall_scene(seed: u64, opts: &FamilyOptions) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wall = |c: [f64; 3], h: [f64; 3]| SceneObject::fixed(Shape::Box { center: c, half_extents: h, yaw: 0.0 });
    SceneSpec {
        objects: vec![
            ground(),
            wall([12.0, 0.0, 3.0], [0.2, 20.0, 5.0]),
            wall([0.0, 9.0, 3.0], [20.0, 0.2, 5.0]),
            wall([0.0, -9.0, 3.0], [20.0, 0.2, 5.0]),
        ],
        trajectory: straight_trajectory(opts.frames, opts.speed * 0.1, &mut rng),
        noise_sigma: opts.noise_sigma,
        seed,
        frame_interval: 0.1,
        occlusion: opts.occlusion.clone(),
    }
}

impl SceneFamily {
    pub fn build(self, seed: u64, opts: &FamilyOptions) -> SceneSpec {
        match self {
            SceneFamily::Forest => forest_scene(seed, opts),
            SceneFamily::City => city_scene(seed, opts),
            SceneFamily::Static => static_scene(seed, opts),
            SceneFamily::ThreeWalls => three_wall_scene(seed, opts),
        }
    }
}

/// Every frame of a scene with its sensor-to-world pose.
pub fn simulate_sequence(scene: &SceneSpec, pattern: &ScanPattern) -> Result<(Vec<PointCloud>, Vec<RigidTransform>)> {
    let mut clouds = Vec::with_capacity(scene.frames());
    let mut poses = Vec::with_capacity(scene.frames());
    for f in 0..scene.frames() {
        clouds.push(simulate_lidar(scene, f, pattern)?);
        poses.push(scene.sensor_pose(f)?);
    }
    Ok((clouds, poses))
}

// ---------------------------------------------------------------------------
// ground truth

/// Two simulated frames of one scene with the true relative pose.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub reference_frame: usize,
    pub new_frame: usize,
    pub reference: LabeledScan,
    pub new: LabeledScan,
    /// Maps new-frame sensor coordinates into reference-frame sensor coordinates.
    pub true_relative: RigidTransform,
}

impl FramePair {
    pub fn simulate(scene: &SceneSpec, reference_frame: usize, new_frame: usize, pattern: &ScanPattern) -> Result<Self> {
        let reference = simulate_lidar_labeled(scene, reference_frame, pattern)?;
        let new = simulate_lidar_labeled(scene, new_frame, pattern)?;
        let true_relative = scene.sensor_pose(reference_frame)?.inverse() * scene.sensor_pose(new_frame)?;
        Ok(Self {
            reference_frame,
            new_frame,
            reference,
            new,
            true_relative,
        })
    }

    /// Where the surface point behind new-scan point `i` sat, in reference
    /// sensor coordinates, at the time of the reference scan.
    pub fn correspondence(&self, scene: &SceneSpec, i: usize) -> Result<Point3<f64>> {
        let obj = self.new.object[i];
        let world = scene.sensor_pose(self.new_frame)?.apply(&self.new.cloud.points[i]);
        let back = scene.displacement(obj, self.new_frame) - scene.displacement(obj, self.reference_frame);
        Ok(scene.sensor_pose(self.reference_frame)?.inverse().apply(&(world - back)))
    }

    /// Mean translation that would carry the listed new points, placed by
    /// `estimate`, onto their true correspondences.
    pub fn voxel_truth(&self, scene: &SceneSpec, estimate: &RigidTransform, members: &[usize]) -> Result<Vector3<f64>> {
        let mut acc = Vector3::zeros();
        for &i in members {
            acc += self.correspondence(scene, i)? - estimate.apply(&self.new.cloud.points[i]);
        }
        Ok(acc / members.len().max(1) as f64)
    }
}

// ---------------------------------------------------------------------------
// training sets

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub scene: u32,
    pub frame: u32,
    pub voxel: VoxelId,
    /// `|L U^T (x_d2d - truth)|` over the full cells, meters.
    pub bias: f64,
    pub biased: bool,
    /// Some new-scan point in the voxel lies on a moving object.
    pub moving: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub samples: Vec<VoxelSample>,
    pub meta: Vec<SampleMeta>,
    /// Frame pairs whose registration failed and were skipped.
    pub skipped_pairs: usize,
    /// Requested minus produced samples.
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Families cycled over scene instances.
    pub families: Vec<SceneFamily>,
    pub family: FamilyOptions,
    /// Frame gap between the two scans of a pair.
    pub frame_gap: usize,
    /// Pairs drawn from each scene instance.
    pub pairs_per_scene: usize,
    /// At most this many voxels are kept from one pair.
    pub voxels_per_pair: usize,
    /// Half-width of the uniform random offset added to every sample, meters.
    pub augment: f64,
    /// Reduced disagreement above which a sample is labeled biased, meters.
    pub bias_label: f64,
    pub max_scenes: usize,
    pub pattern: ScanPattern,
    pub solver: SolverConfig,
    pub sample_points: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            families: vec![SceneFamily::Forest, SceneFamily::City],
            family: FamilyOptions {
                frames: 6,
                ..FamilyOptions::default()
            },
            frame_gap: 1,
            pairs_per_scene: 2,
            voxels_per_pair: 120,
            augment: 0.05,
            bias_label: 0.03,
            max_scenes: 200,
            pattern: ScanPattern::default(),
            solver: SolverConfig::default(),
            sample_points: net::SAMPLE_POINTS,
        }
    }
}

pub fn make_training_set(spec: &DatasetSpec, count: usize, seed: u64) -> Result<TrainingSet> {
    if spec.families.is_empty() {
        return Err(Error::InvalidInput("dataset needs at least one scene family".into()));
    }
    if spec.family.frames <= spec.frame_gap {
        return Err(Error::InvalidInput("frames must exceed frame_gap".into()));
    }
    let mut set = TrainingSet::default();
    let mut scene_idx = 0u64;
    while set.samples.len() < count && (scene_idx as usize) < spec.max_scenes {
        let scene_seed = derive_seed(seed, scene_idx);
        let family = spec.families[scene_idx as usize % spec.families.len()];
        let scene = family.build(scene_seed, &spec.family);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0xda7a);
        for _ in 0..spec.pairs_per_scene {
            if set.samples.len() >= count {
                break;
            }
            let a = rng.random_range(0..spec.family.frames - spec.frame_gap);
            let pair = FramePair::simulate(&scene, a, a + spec.frame_gap, &spec.pattern)?;
            let remaining = count - set.samples.len();
            match pair_samples(&scene, &pair, spec, scene_idx as u32, remaining.min(spec.voxels_per_pair), &mut rng) {
                Ok((samples, meta)) => {
                    set.samples.extend(samples);
                    set.meta.extend(meta);
                }
                Err(e) => {
                    log::debug!("scene {scene_idx} frames {a}+{}: skipped ({e})", spec.frame_gap);
                    set.skipped_pairs += 1;
                }
            }
        }
        scene_idx += 1;
    }
    set.shortfall = count.saturating_sub(set.samples.len());
    if set.shortfall > 0 {
        log::warn!("training set short by {} samples after {scene_idx} scenes", set.shortfall);
    }
    Ok(set)
}

fn pair_samples(
    scene: &SceneSpec,
    pair: &FramePair,
    spec: &DatasetSpec,
    scene_idx: u32,
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<VoxelSample>, Vec<SampleMeta>)> {
    let solver = &spec.solver;
    let reference = ReferenceScan::from_config(&pair.reference.cloud, solver);
    let sol = register_against(&reference, &pair.new.cloud, &pair.true_relative, solver, &BTreeSet::new())?;
    let paired = pair_scan(&reference, &pair.new.cloud, &sol.pose, &solver.grid, solver.min_points)?;
    let mut order: Vec<usize> = (0..paired.pairs.len()).collect();
    // partial shuffle for a random subset
    for i in 0..order.len().min(limit) {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut samples = Vec::new();
    let mut meta = Vec::new();
    for &pi in order.iter().take(limit) {
        let vp = &paired.pairs[pi];
        let (_, members) = paired.voxels.cell(vp.id).expect("paired voxel");
        let truth = pair.voxel_truth(scene, &sol.pose, members)?;
        let mut sample = voxel_sample(&reference, &pair.reference.cloud, &paired, vp.id, spec.sample_points, rng.random())?;
        let x_d2d = vp.reference.mean - vp.new.mean;
        let bias = vp.basis.project(&(x_d2d - truth)).norm();
        let shift = Vector3::from_fn(|_, _| rng.random_range(-spec.augment..=spec.augment));
        for p in &mut sample.new {
            *p += shift;
        }
        sample.truth = truth - shift;
        samples.push(sample);
        meta.push(SampleMeta {
            scene: scene_idx,
            frame: pair.reference_frame as u32,
            voxel: vp.id,
            bias,
            biased: bias > spec.bias_label,
            moving: members.iter().any(|&i| scene.objects[pair.new.object[i]].is_moving()),
        });
    }
    Ok((samples, meta))
}

// ---------------------------------------------------------------------------
// single-object trials

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectTrial {
    /// Both scans sample the whole object surface uniformly.
    Uniform,
    /// Each scan keeps only what a LIDAR sees from its own viewpoint.
    SimulatedLidar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectTrialOptions {
    /// Half-width of the uniform true offset per axis, meters.
    pub offset: f64,
    pub sample_points: usize,
    /// Side of the cubic voxel used for the truncation test, meters.
    pub voxel_size: f64,
    pub noise_sigma: f64,
    /// Angular ray spacing of the simulated LIDAR, radians.
    pub angular_step: f64,
    /// Range of the object from the first sensor, meters.
    pub range: [f64; 2],
    /// Horizontal distance between the two sensor positions, meters.
    pub baseline: [f64; 2],
}

impl Default for ObjectTrialOptions {
    fn default() -> Self {
        Self {
            offset: 0.1,
            sample_points: net::SAMPLE_POINTS,
            voxel_size: 1.5,
            noise_sigma: 0.005,
            angular_step: 0.15f64.to_radians(),
            range: [5.0, 9.0],
            baseline: [3.0, 6.0],
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    // upright objects with a random heading and a small tilt
    Rotation3::from_euler_angles(
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
        rng.random_range(-PI..PI),
    )
}

/// Rays from `origin` covering the bounding sphere of `mesh`; returns the hit
/// points with range noise.
fn scan_object(
    mesh: &crate::scene::PreparedMesh,
    center: &Point3<f64>,
    radius: f64,
    origin: &Point3<f64>,
    step: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Point3<f64>> {
    let to = center - origin;
    let dist = to.norm();
    let half = (radius / dist).min(1.0).asin() * 1.05;
    let (az0, el0) = (to.y.atan2(to.x), (to.z / dist).asin());
    let n = (2.0 * half / step).ceil() as i64;
    let shape = Shape::Triangles { mesh: mesh.clone() };
    let normal = rand_distr::Normal::new(0.0, noise.max(1e-300)).unwrap();
    let mut out = Vec::new();
    for i in -n / 2..=n / 2 {
        for j in -n / 2..=n / 2 {
            let (az, el) = (az0 + i as f64 * step, el0 + j as f64 * step);
            let d = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            if let Some(t) = shape.intersect(origin, &d) {
                let r = if noise > 0.0 { t + rand_distr::Distribution::sample(&normal, rng) } else { t };
                out.push(origin + d * r);
            }
        }
    }
    out
}

/// Labeled single-object voxel samples. The new scan sees the object moved by
/// `-truth`, so `truth` carries the new points back onto the reference.
pub fn object_samples(trial: ObjectTrial, count: usize, seed: u64, opts: &ObjectTrialOptions) -> Result<Vec<VoxelSample>> {
    let mut out = Vec::with_capacity(count);
    let kinds = ObjectKind::ALL;
    let meshes: Vec<TriangleMesh> = kinds.iter().map(|k| k.mesh()).collect();
    let mut attempt = 0u64;
    while out.len() < count {
        if attempt > 20 * count as u64 + 100 {
            return Err(Error::InvalidInput("object trial keeps producing empty scans".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt));
        attempt += 1;
        let mesh = &meshes[rng.random_range(0..meshes.len())];
        let rot = random_rotation(&mut rng);
        let scale = rng.random_range(0.8..1.2);
        let truth = Vector3::from_fn(|_, _| rng.random_range(-opts.offset..=opts.offset));
        let (ref_pts, new_pts) = match trial {
            ObjectTrial::Uniform => {
                let m = mesh.scaled(scale).transformed(&rot, &Vector3::zeros());
                let r = sample_mesh_uniform(&m, opts.sample_points, rng.random()).points;
                let n: Vec<Point3<f64>> = sample_mesh_uniform(&m, opts.sample_points, rng.random())
                    .points
                    .into_iter()
                    .map(|p| p - truth)
                    .collect();
                (r, n)
            }
            ObjectTrial::SimulatedLidar => {
                let range = rng.random_range(opts.range[0]..opts.range[1]);
                let az = rng.random_range(-PI..PI);
                let center = Point3::new(range * az.cos(), range * az.sin(), GROUND_Z + 0.6);
                let placed = mesh.scaled(scale).transformed(&rot, &center.coords);
                let moved = placed.transformed(&Rotation3::identity(), &-truth);
                let (lo, hi) = placed.bounds();
                let radius = 0.5 * (hi - lo).norm() + opts.offset * 2.0;
                let base = rng.random_range(opts.baseline[0]..opts.baseline[1]);
                let side = az + PI / 2.0 * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let second = Point3::new(base * side.cos(), base * side.sin(), rng.random_range(-0.3..0.3));
                let r = scan_object(&placed.into(), &center, radius, &Point3::origin(), opts.angular_step, opts.noise_sigma, &mut rng);
                let n = scan_object(&moved.into(), &center, radius, &second, opts.angular_step, opts.noise_sigma, &mut rng);
                if r.len() < 10 || n.len() < 10 {
                    continue;
                }
                let r = net::sample_voxel_points(&r, opts.sample_points, rng.random())?;
                let n = net::sample_voxel_points(&n, opts.sample_points, rng.random())?;
                (r, n)
            }
        };
        let (mean, covariance) = fit_gaussian(&ref_pts)?;
        let cell = GaussianCell {
            id: VoxelId::new(0, 0, 0),
            mean,
            covariance,
            count: ref_pts.len(),
        };
        let basis = truncation_basis(&cell, &Vector3::repeat(opts.voxel_size), 0.5);
        out.push(VoxelSample::centered(&ref_pts, &new_pts, truth, basis));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// dataset files
//
// magic "VXDATSET", u32 version, u64 sample count, then per sample:
// u32 scene, u32 frame, u32 x3 voxel id, f64 bias, u8 biased, u8 moving,
// f64 x9 U (column-major), f64 x3 eigenvalues, u8 x3 retained, f64 x3 truth,
// u32 n_ref, f64 x3 per reference point, u32 n_new, f64 x3 per new point.

const DATASET_MAGIC: &[u8; 8] = b"VXDATSET";
const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(set: &TrainingSet) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(DATASET_MAGIC);
    b.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    b.extend_from_slice(&(set.samples.len() as u64).to_le_bytes());
    let f = |b: &mut Vec<u8>, v: f64| b.extend_from_slice(&v.to_le_bytes());
    let u = |b: &mut Vec<u8>, v: u32| b.extend_from_slice(&v.to_le_bytes());
    for (i, s) in set.samples.iter().enumerate() {
        let m = set.meta.get(i).copied().unwrap_or(SampleMeta {
            scene: 0,
            frame: 0,
            voxel: VoxelId::new(0, 0, 0),
            bias: 0.0,
            biased: false,
            moving: false,
        });
        u(&mut b, m.scene);
        u(&mut b, m.frame);
        u(&mut b, m.voxel.azimuth);
        u(&mut b, m.voxel.elevation);
        u(&mut b, m.voxel.radial);
        f(&mut b, m.bias);
        b.push(m.biased as u8);
        b.push(m.moving as u8);
        s.basis.u.iter().for_each(|&v| f(&mut b, v));
        s.basis.eigenvalues.iter().for_each(|&v| f(&mut b, v));
        b.extend(s.basis.retained.iter().map(|&r| r as u8));
        s.truth.iter().for_each(|&v| f(&mut b, v));
        for pts in [&s.reference, &s.new] {
            u(&mut b, pts.len() as u32);
            for p in pts.iter() {
                p.iter().for_each(|&v| f(&mut b, v));
            }
        }
    }
    b
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn bad(&self, what: &str) -> Error {
        Error::Format(format!("dataset truncated or corrupt at byte {} ({what})", self.pos))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.bad(what));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TrainingSet> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = c.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = u64::from_le_bytes(c.take(8, "count")?.try_into().unwrap()) as usize;
    let mut set = TrainingSet::default();
    macro_rules! rd_u32 {
        ($w:expr) => {
            c.u32($w)?
        };
    }
    macro_rules! rd_f64 {
        ($w:expr) => {
            c.f64($w)?
        };
    }
    for _ in 0..count {
        let scene = rd_u32!("scene");
        let frame = rd_u32!("frame");
        let voxel = VoxelId::new(rd_u32!("voxel"), rd_u32!("voxel"), rd_u32!("voxel"));
        let bias = rd_f64!("bias");
        let flags = c.take(2, "flags")?;
        let (biased, moving) = (flags[0] != 0, flags[1] != 0);
        let mut uv = [0.0; 9];
        for v in &mut uv {
            *v = rd_f64!("basis");
        }
        let ev = Vector3::new(rd_f64!("eigenvalues"), rd_f64!("eigenvalues"), rd_f64!("eigenvalues"));
        let r = c.take(3, "retained")?;
        let retained = [r[0] != 0, r[1] != 0, r[2] != 0];
        let truth = Vector3::new(rd_f64!("truth"), rd_f64!("truth"), rd_f64!("truth"));
        let mut clouds = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = rd_u32!("point count") as usize;
            if n == 0 || n > c.remaining() / 24 {
                return Err(c.bad("point count"));
            }
            let mut pts = Vec::with_capacity(n);
            for _ in 0..n {
                pts.push(Point3::new(rd_f64!("point"), rd_f64!("point"), rd_f64!("point")));
            }
            clouds.push(pts);
        }
        let new = clouds.pop().unwrap();
        let reference = clouds.pop().unwrap();
        let basis = TruncationBasis {
            u: Matrix3::from_column_slice(&uv),
            eigenvalues: ev,
            retained,
        };
        set.samples.push(VoxelSample {
            reference,
            new,
            truth,
            basis,
        });
        set.meta.push(SampleMeta {
            scene,
            frame,
            voxel,
            bias,
            biased,
            moving,
        });
    }
    if c.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in dataset", c.remaining())));
    }
    Ok(set)
}

/// Written through a temp file and renamed into place.
pub fn save_dataset(set: &TrainingSet, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_dataset(set))?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TrainingSet> {
    decode_dataset(&fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
