//! Core geometry: point clouds, rigid transforms, the spherical voxel grid,
//! per-voxel Gaussian fitting and the truncation basis that separates
//! compact principal axes from axes stretched by the voxel boundary.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Point3, Rotation3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    /// Per-point intensity in `[0, 1]`, when the source provides it.
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the registration preconditions: non-empty, finite, and
    /// intensity (if any) aligned with the points.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = self.points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite component")));
        }
        if let Some(intensity) = &self.intensity {
            if intensity.len() != self.points.len() {
                return Err(Error::InvalidInput(format!(
                    "{} intensities for {} points",
                    intensity.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }

    pub fn transformed(&self, pose: &RigidTransform) -> PointCloud {
        transform_cloud(self, pose)
    }
}

impl FromIterator<Point3<f64>> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point3<f64>>>(iter: I) -> Self {
        PointCloud::new(iter.into_iter().collect())
    }
}

/// Proper rigid motion `p -> R p + t`.
///
/// Six-vectors in pose-parameter space are ordered `[tx, ty, tz, rx, ry, rz]`
/// throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Rotation3::identity(), translation)
    }

    /// Roll/pitch/yaw in radians (applied as yaw * pitch * roll).
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(Rotation3::from_euler_angles(roll, pitch, yaw), translation)
    }

    /// Builds a transform from a raw rotation matrix, rejecting matrices that
    /// are not proper rotations to within 1e-9.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if err > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal (|RtR - I| = {err:.3e}, det = {det:.12})"
            )));
        }
        Ok(Self::new(Rotation3::from_matrix_unchecked(rotation), translation))
    }

    /// Projects an approximately orthonormal matrix onto SO(3).
    pub fn from_matrix_orthonormalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let svd = rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self::new(Rotation3::from_matrix_unchecked(u * d * v_t), translation)
    }

    /// Exponential-map pose increment from a `[tx, ty, tz, rx, ry, rz]` vector.
    pub fn from_increment(delta: &[f64; 6]) -> Self {
        Self::new(
            Rotation3::from_scaled_axis(Vector3::new(delta[3], delta[4], delta[5])),
            Vector3::new(delta[0], delta[1], delta[2]),
        )
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r_inv = self.rotation.inverse();
        RigidTransform {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle (radians) of the rotational part.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn matrix3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

pub fn transform_cloud(cloud: &PointCloud, pose: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.apply(p)).collect(),
        intensity: cloud.intensity.clone(),
    }
}

/// Integer address of a spherical voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoxelId {
    pub azimuth: u32,
    pub elevation: u32,
    pub radial: u32,
}

impl VoxelId {
    pub fn new(azimuth: u32, elevation: u32, radial: u32) -> Self {
        Self {
            azimuth,
            elevation,
            radial,
        }
    }

    /// Per-voxel RNG seed derived from a run seed (splitmix64 finalizer), so
    /// sampling does not depend on the order voxels are visited in.
    pub fn seed(&self, base: u64) -> u64 {
        let mut z = base
            ^ (self.azimuth as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (self.elevation as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
            ^ (self.radial as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

impl std::fmt::Display for VoxelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.azimuth, self.elevation, self.radial)
    }
}

/// Spherical voxel grid around the sensor origin.
///
/// Azimuth covers `[-pi, pi)` in equal bins, elevation covers
/// `[min_elevation, max_elevation)` in equal bins, and range is split by
/// `radial_edges`. All intervals are half-open `[low, high)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphericalGridSpec {
    pub azimuth_bins: u32,
    pub elevation_bins: u32,
    pub radial_edges: Vec<f64>,
    pub min_elevation: f64,
    pub max_elevation: f64,
}

impl Default for SphericalGridSpec {
    fn default() -> Self {
        Self {
            azimuth_bins: 72,
            elevation_bins: 12,
            radial_edges: vec![1.0, 3.0, 5.0, 8.0, 12.0, 18.0, 26.0, 40.0],
            min_elevation: -0.45,
            max_elevation: 0.45,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelBounds {
    pub azimuth: (f64, f64),
    pub elevation: (f64, f64),
    pub range: (f64, f64),
}

impl VoxelBounds {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let (az, el, r) = spherical(p);
        let az = if az >= PI { az - 2.0 * PI } else { az };
        az >= self.azimuth.0
            && az < self.azimuth.1
            && el >= self.elevation.0
            && el < self.elevation.1
            && r >= self.range.0
            && r < self.range.1
    }

    pub fn center(&self) -> Point3<f64> {
        from_spherical(
            0.5 * (self.azimuth.0 + self.azimuth.1),
            0.5 * (self.elevation.0 + self.elevation.1),
            0.5 * (self.range.0 + self.range.1),
        )
    }

    /// Upper bound on the distance between two points of the voxel, from a
    /// 3x3x3 lattice of spherical-coordinate samples.
    fn diameter(&self) -> f64 {
        let lerp = |(a, b): (f64, f64), t: f64| a + (b - a) * t;
        let mut pts = Vec::with_capacity(27);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    pts.push(from_spherical(
                        lerp(self.azimuth, i as f64 / 2.0),
                        lerp(self.elevation, j as f64 / 2.0),
                        lerp(self.range, k as f64 / 2.0),
                    ));
                }
            }
        }
        let mut d: f64 = 0.0;
        for a in &pts {
            for b in &pts {
                d = d.max((a - b).norm());
            }
        }
        d
    }
}

/// (azimuth, elevation, range) of a point, azimuth in `(-pi, pi]`.
pub fn spherical(p: &Point3<f64>) -> (f64, f64, f64) {
    let horiz = p.x.hypot(p.y);
    (p.y.atan2(p.x), p.z.atan2(horiz), p.coords.norm())
}

pub fn from_spherical(azimuth: f64, elevation: f64, range: f64) -> Point3<f64> {
    let h = range * elevation.cos();
    Point3::new(h * azimuth.cos(), h * azimuth.sin(), range * elevation.sin())
}

impl SphericalGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.azimuth_bins < 1 || self.elevation_bins < 1 {
            return Err(Error::InvalidInput("bin counts must be >= 1".into()));
        }
        if self.radial_edges.len() < 2 {
            return Err(Error::InvalidInput("need at least two radial edges".into()));
        }
        if self.radial_edges.windows(2).any(|w| !(w[1] > w[0])) || self.radial_edges[0] < 0.0 {
            return Err(Error::InvalidInput(
                "radial edges must be non-negative and strictly increasing".into(),
            ));
        }
        let half = PI / 2.0;
        if !(self.min_elevation > -half
            && self.max_elevation < half
            && self.min_elevation < self.max_elevation)
        {
            return Err(Error::InvalidInput(
                "elevation bounds must satisfy -pi/2 < min < max < pi/2".into(),
            ));
        }
        Ok(())
    }

    pub fn azimuth_width(&self) -> f64 {
        2.0 * PI / self.azimuth_bins as f64
    }

    pub fn elevation_width(&self) -> f64 {
        (self.max_elevation - self.min_elevation) / self.elevation_bins as f64
    }

    /// Voxel containing `p`, or `None` if it lies outside the grid.
    pub fn locate(&self, p: &Point3<f64>) -> Option<VoxelId> {
        let (az, el, r) = spherical(p);
        if !(el >= self.min_elevation && el < self.max_elevation) {
            return None;
        }
        // edges <= r; zero means below the first edge, len means at/after the last
        let above = self.radial_edges.partition_point(|&e| e <= r);
        if above == 0 || above == self.radial_edges.len() {
            return None;
        }
        let az = if az >= PI { az - 2.0 * PI } else { az };
        let ai = (((az + PI) / self.azimuth_width()).floor() as i64)
            .clamp(0, self.azimuth_bins as i64 - 1) as u32;
        let ei = (((el - self.min_elevation) / self.elevation_width()).floor() as i64)
            .clamp(0, self.elevation_bins as i64 - 1) as u32;
        Some(VoxelId::new(ai, ei, (above - 1) as u32))
    }

    pub fn bounds(&self, id: VoxelId) -> VoxelBounds {
        let aw = self.azimuth_width();
        let ew = self.elevation_width();
        let a0 = -PI + id.azimuth as f64 * aw;
        let e0 = self.min_elevation + id.elevation as f64 * ew;
        let r = id.radial as usize;
        VoxelBounds {
            azimuth: (a0, a0 + aw),
            elevation: (e0, e0 + ew),
            range: (self.radial_edges[r], self.radial_edges[r + 1]),
        }
    }
}

/// Sample mean and covariance of the points in one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCell {
    pub id: VoxelId,
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub count: usize,
}

/// Arithmetic mean and `1/(n-1)` sample covariance.
pub fn fit_gaussian(points: &[Point3<f64>]) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let n = points.len();
    if n < 2 {
        return Err(Error::DegenerateCell { needed: 2, got: n });
    }
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= (n - 1) as f64;
    // exact symmetry
    cov = 0.5 * (cov + cov.transpose());
    Ok((mean, cov))
}

/// Result of binning a cloud on a spherical grid.
#[derive(Debug, Clone)]
pub struct Voxelized {
    /// Cells with at least `min_points` points, ordered by voxel id.
    pub cells: Vec<GaussianCell>,
    /// Indices into the source cloud for each cell, parallel to `cells`.
    pub members: Vec<Vec<usize>>,
    /// Points outside the grid or in under-populated bins.
    pub discarded: usize,
}

impl Voxelized {
    pub fn cell(&self, id: VoxelId) -> Option<(&GaussianCell, &[usize])> {
        self.cells
            .binary_search_by(|c| c.id.cmp(&id))
            .ok()
            .map(|i| (&self.cells[i], self.members[i].as_slice()))
    }
}

pub fn voxelize(cloud: &PointCloud, spec: &SphericalGridSpec, min_points: usize) -> Voxelized {
    let mut bins: BTreeMap<VoxelId, Vec<usize>> = BTreeMap::new();
    let mut discarded = 0;
    for (i, p) in cloud.points.iter().enumerate() {
        match spec.locate(p) {
            Some(id) => bins.entry(id).or_default().push(i),
            None => discarded += 1,
        }
    }
    let min_points = min_points.max(2);
    let mut cells = Vec::with_capacity(bins.len());
    let mut members = Vec::with_capacity(bins.len());
    let mut scratch = Vec::new();
    for (id, idx) in bins {
        if idx.len() < min_points {
            discarded += idx.len();
            continue;
        }
        scratch.clear();
        scratch.extend(idx.iter().map(|&i| cloud.points[i]));
        let (mean, covariance) = fit_gaussian(&scratch).expect("count >= 2");
        cells.push(GaussianCell {
            id,
            mean,
            covariance,
            count: idx.len(),
        });
        members.push(idx);
    }
    Voxelized {
        cells,
        members,
        discarded,
    }
}

pub fn build_spherical_grid(
    cloud: &PointCloud,
    spec: &SphericalGridSpec,
    min_points: usize,
) -> Vec<GaussianCell> {
    voxelize(cloud, spec, min_points).cells
}

/// Anything that can report the length of a line segment through it.
pub trait VoxelShape {
    /// Length of the chord through `origin` along unit direction `dir`.
    fn chord(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64;
}

/// Axis-aligned box with the given side lengths, centered on the chord origin.
impl VoxelShape for Vector3<f64> {
    fn chord(&self, _origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        (0..3)
            .filter(|&j| dir[j].abs() > 0.0)
            .map(|j| self[j] / dir[j].abs())
            .fold(f64::INFINITY, f64::min)
    }
}

impl VoxelShape for VoxelBounds {
    /// Measured by sampling the line over one voxel diameter either side of
    /// `origin` and accumulating the inside length.
    fn chord(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        const STEPS: usize = 400;
        let reach = self.diameter();
        let ds = 2.0 * reach / STEPS as f64;
        (0..STEPS)
            .filter(|&i| {
                let s = -reach + (i as f64 + 0.5) * ds;
                self.contains(&Point3::from(origin + dir * s))
            })
            .count() as f64
            * ds
    }
}

/// Principal axes of a cell and the subset that carries registration
/// information.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationBasis {
    /// Columns are principal axes in world frame, by descending eigenvalue.
    pub u: Matrix3<f64>,
    pub eigenvalues: Vector3<f64>,
    pub retained: [bool; 3],
}

impl TruncationBasis {
    /// Basis that keeps all three axes of `u`.
    pub fn full(u: Matrix3<f64>) -> Self {
        Self {
            u,
            eigenvalues: Vector3::zeros(),
            retained: [true; 3],
        }
    }

    pub fn identity() -> Self {
        Self::full(Matrix3::identity())
    }

    pub fn with_retained(u: Matrix3<f64>, retained: [bool; 3]) -> Self {
        Self {
            u,
            eigenvalues: Vector3::zeros(),
            retained,
        }
    }

    pub fn k(&self) -> usize {
        self.retained.iter().filter(|&&r| r).count()
    }

    /// `L`: k x 3 selection of the retained axes.
    pub fn selection(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.k(), 3);
        for (row, col) in (0..3).filter(|&i| self.retained[i]).enumerate() {
            l[(row, col)] = 1.0;
        }
        l
    }

    /// `L U^T` as a dense k x 3 matrix.
    pub fn projector(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.k(), 3);
        for (row, col) in (0..3).filter(|&i| self.retained[i]).enumerate() {
            let axis = self.u.column(col);
            for j in 0..3 {
                p[(row, j)] = axis[j];
            }
        }
        p
    }

    /// `L U^T v`.
    pub fn project(&self, v: &Vector3<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.k(),
            (0..3)
                .filter(|&i| self.retained[i])
                .map(|i| self.u.column(i).dot(v)),
        )
    }

    /// `U L^T L U^T`, the 3x3 orthogonal projector onto retained axes.
    pub fn projector3(&self) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for i in (0..3).filter(|&i| self.retained[i]) {
            let a = self.u.column(i);
            m += a * a.transpose();
        }
        m
    }
}

/// Eigen-decomposition of a symmetric 3x3 matrix, eigenvalues descending.
pub fn sorted_eigen(m: &Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vector3::from_fn(|i, _| eig.eigenvalues[order[i]]);
    let mut vectors = Matrix3::from_fn(|r, c| eig.eigenvectors[(r, order[c])]);
    if vectors.determinant() < 0.0 {
        vectors.column_mut(2).neg_mut();
    }
    (values, vectors)
}

/// Splits a cell's principal axes into compact and extended ones.
///
/// Axis `i` is dropped when `2 sqrt(lambda_i)` exceeds `extension_fraction`
/// times the voxel chord through the cell mean along that axis.
pub fn truncation_basis<S: VoxelShape + ?Sized>(
    cell: &GaussianCell,
    voxel: &S,
    extension_fraction: f64,
) -> TruncationBasis {
    let (eigenvalues, u) = sorted_eigen(&cell.covariance);
    let mut retained = [true; 3];
    for i in 0..3 {
        let spread = 2.0 * eigenvalues[i].max(0.0).sqrt();
        let axis: Vector3<f64> = u.column(i).into();
        let chord = voxel.chord(&cell.mean, &axis);
        retained[i] = !(spread > extension_fraction * chord);
    }
    TruncationBasis {
        u,
        eigenvalues,
        retained,
    }
}
