//! Distribution-to-distribution registration over the spherical grid.
//!
//! Each voxel contributes the reduced mean difference `L U^T (mean_ref - mean_new)`,
//! weighted by the inverse of the reduced combined mean covariance. The pose is
//! refined by Gauss-Newton with a left-multiplied exponential-map increment,
//! re-binning the new scan after every accepted step.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::cloud::{
    transform_cloud, truncation_basis, voxelize, GaussianCell, PointCloud, RigidTransform,
    SphericalGridSpec, TruncationBasis, VoxelId, Voxelized,
};
use crate::error::{Error, NullDirection, Result};

/// Added to every reduced weight matrix before inversion.
pub const WEIGHT_REGULARIZATION: f64 = 1e-9;

/// Eigenvalues of the normal matrix below this fraction of the largest are
/// treated as unconstrained.
pub const RANK_TOLERANCE: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Meters.
    pub translation_tolerance: f64,
    /// Radians.
    pub rotation_tolerance: f64,
    pub extension_fraction: f64,
    pub min_points: usize,
    pub grid: SphericalGridSpec,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            translation_tolerance: 1e-4,
            rotation_tolerance: 1e-5,
            extension_fraction: 0.5,
            min_points: 25,
            grid: SphericalGridSpec::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidInput("max_iterations must be >= 1".into()));
        }
        if !(self.translation_tolerance > 0.0 && self.rotation_tolerance > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if !(self.extension_fraction > 0.0) {
            return Err(Error::InvalidInput("extension_fraction must be positive".into()));
        }
        self.grid.validate()
    }
}

/// Voxelized reference scan together with the truncation basis of each cell.
#[derive(Debug, Clone)]
pub struct ReferenceScan {
    pub voxels: Voxelized,
    /// Parallel to `voxels.cells`.
    pub bases: Vec<TruncationBasis>,
}

impl ReferenceScan {
    pub fn build(cloud: &PointCloud, grid: &SphericalGridSpec, min_points: usize, extension_fraction: f64) -> Self {
        let voxels = voxelize(cloud, grid, min_points);
        let bases = voxels
            .cells
            .iter()
            .map(|c| truncation_basis(c, &grid.bounds(c.id), extension_fraction))
            .collect();
        Self { voxels, bases }
    }

    pub fn from_config(cloud: &PointCloud, cfg: &SolverConfig) -> Self {
        Self::build(cloud, &cfg.grid, cfg.min_points, cfg.extension_fraction)
    }

    pub fn index_of(&self, id: VoxelId) -> Option<usize> {
        self.voxels.cells.binary_search_by(|c| c.id.cmp(&id)).ok()
    }

    pub fn cell(&self, id: VoxelId) -> Option<(&GaussianCell, &TruncationBasis)> {
        self.index_of(id).map(|i| (&self.voxels.cells[i], &self.bases[i]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPair {
    pub id: VoxelId,
    pub reference: GaussianCell,
    /// New-scan cell, already expressed in the reference frame.
    pub new: GaussianCell,
    /// Derived from the reference covariance.
    pub basis: TruncationBasis,
}

/// New scan binned at a given pose and matched against the reference.
#[derive(Debug, Clone)]
pub struct PairedScan {
    pub pairs: Vec<VoxelPair>,
    /// New cloud expressed in the reference frame.
    pub transformed: PointCloud,
    pub voxels: Voxelized,
}

pub fn pair_scan(
    reference: &ReferenceScan,
    new_cloud: &PointCloud,
    pose: &RigidTransform,
    spec: &SphericalGridSpec,
    min_points: usize,
) -> Result<PairedScan> {
    let transformed = transform_cloud(new_cloud, pose);
    let voxels = voxelize(&transformed, spec, min_points);
    let pairs: Vec<VoxelPair> = voxels
        .cells
        .iter()
        .filter_map(|new| {
            reference.cell(new.id).map(|(r, basis)| VoxelPair {
                id: new.id,
                reference: r.clone(),
                new: new.clone(),
                basis: basis.clone(),
            })
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::InsufficientOverlap);
    }
    Ok(PairedScan {
        pairs,
        transformed,
        voxels,
    })
}

/// Transforms `new_cloud` by `pose`, re-bins it on `spec` and matches cells to
/// the reference by voxel id.
pub fn pair_voxels(
    reference: &ReferenceScan,
    new_cloud: &PointCloud,
    pose: &RigidTransform,
    spec: &SphericalGridSpec,
    min_points: usize,
) -> Result<Vec<VoxelPair>> {
    pair_scan(reference, new_cloud, pose, spec, min_points).map(|p| p.pairs)
}

/// `L U^T (mean_ref - mean_new)`; empty when the basis retains no axis.
pub fn reduced_residual(pair: &VoxelPair) -> DVector<f64> {
    pair.basis.project(&(pair.reference.mean - pair.new.mean))
}

/// Covariance of the mean difference, `Sigma_r / n_r + Sigma_n / n_n`.
pub fn mean_difference_covariance(pair: &VoxelPair) -> Matrix3<f64> {
    pair.reference.covariance / pair.reference.count as f64 + pair.new.covariance / pair.new.count as f64
}

/// Inverse of the reduced combined mean covariance (k x k).
pub fn pair_weight(pair: &VoxelPair) -> DMatrix<f64> {
    let k = pair.basis.k();
    let p = pair.basis.projector();
    let c = mean_difference_covariance(pair);
    let c = DMatrix::from_column_slice(3, 3, c.as_slice());
    let reduced = &p * c * p.transpose() + DMatrix::identity(k, k) * WEIGHT_REGULARIZATION;
    match reduced.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => reduced
            .pseudo_inverse(1e-15)
            .unwrap_or_else(|_| DMatrix::zeros(k, k)),
    }
}

/// Jacobian (k x 6) of the reduced residual with respect to a left pose
/// increment `[tx, ty, tz, rx, ry, rz]`, using the transformed new mean as
/// lever arm.
pub fn pair_jacobian(pair: &VoxelPair) -> DMatrix<f64> {
    let p = pair.basis.projector();
    let m = pair.new.mean;
    let skew = Matrix3::new(0.0, -m.z, m.y, m.z, 0.0, -m.x, -m.y, m.x, 0.0);
    let mut j = DMatrix::zeros(p.nrows(), 6);
    for row in 0..p.nrows() {
        let prow = Vector3::new(p[(row, 0)], p[(row, 1)], p[(row, 2)]);
        let rot = skew.transpose() * prow;
        for c in 0..3 {
            j[(row, c)] = -prow[c];
            j[(row, 3 + c)] = rot[c];
        }
    }
    j
}

#[derive(Debug, Clone)]
struct NormalEquations {
    h: Matrix6<f64>,
    g: Vector6<f64>,
    cost: f64,
}

fn accumulate<'a>(pairs: impl IntoIterator<Item = &'a VoxelPair>) -> NormalEquations {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut cost = 0.0;
    for pair in pairs {
        if pair.basis.k() == 0 {
            continue;
        }
        let r = reduced_residual(pair);
        let w = pair_weight(pair);
        let j = pair_jacobian(pair);
        let jt_w = j.transpose() * &w;
        let hj = &jt_w * &j;
        let gj = &jt_w * &r;
        for a in 0..6 {
            g[a] += gj[a];
            for b in 0..6 {
                h[(a, b)] += hj[(a, b)];
            }
        }
        cost += (r.transpose() * &w * &r)[(0, 0)];
    }
    NormalEquations { h, g, cost }
}

fn null_directions(h: &Matrix6<f64>) -> Vec<NullDirection> {
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    (0..6)
        .filter(|&i| max <= 0.0 || eig.eigenvalues[i] <= RANK_TOLERANCE * max)
        .map(|i| {
            let v = eig.eigenvectors.column(i);
            let mut d = [0.0; 6];
            for (k, x) in d.iter_mut().enumerate() {
                *x = v[k];
            }
            NullDirection(d)
        })
        .collect()
}

fn invert_normal(h: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let null = null_directions(h);
    if !null.is_empty() {
        return Err(Error::RankDeficient {
            null_directions: null,
        });
    }
    let sym = 0.5 * (h + h.transpose());
    let inv = sym
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| sym.try_inverse())
        .ok_or_else(|| Error::RankDeficient {
            null_directions: null_directions(&sym),
        })?;
    Ok(0.5 * (inv + inv.transpose()))
}

/// `(J^T W J)^-1` over the given pairs.
pub fn solution_covariance(pairs: &[VoxelPair]) -> Result<Matrix6<f64>> {
    invert_normal(&accumulate(pairs).h)
}

#[derive(Debug, Clone)]
pub struct D2DSolution {
    /// Maps the new scan into the reference frame.
    pub pose: RigidTransform,
    /// 6x6 covariance over `[tx, ty, tz, rx, ry, rz]`.
    pub covariance: Matrix6<f64>,
    pub residuals: BTreeMap<VoxelId, DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Weighted cost at the returned pose.
    pub cost: f64,
    /// Cost after every accepted step, starting with the initial pose.
    pub cost_history: Vec<f64>,
}

pub fn register_d2d(
    ref_cloud: &PointCloud,
    new_cloud: &PointCloud,
    init: &RigidTransform,
    cfg: &SolverConfig,
    excluded: &BTreeSet<VoxelId>,
) -> Result<D2DSolution> {
    ref_cloud.validate()?;
    cfg.validate()?;
    let reference = ReferenceScan::from_config(ref_cloud, cfg);
    register_against(&reference, new_cloud, init, cfg, excluded)
}

fn active_pairs(
    reference: &ReferenceScan,
    new_cloud: &PointCloud,
    pose: &RigidTransform,
    cfg: &SolverConfig,
    excluded: &BTreeSet<VoxelId>,
) -> Result<Vec<VoxelPair>> {
    let mut pairs = pair_voxels(reference, new_cloud, pose, &cfg.grid, cfg.min_points)?;
    pairs.retain(|p| !excluded.contains(&p.id));
    if pairs.is_empty() {
        return Err(Error::InsufficientOverlap);
    }
    Ok(pairs)
}

/// Registration against a prebuilt reference scan.
pub fn register_against(
    reference: &ReferenceScan,
    new_cloud: &PointCloud,
    init: &RigidTransform,
    cfg: &SolverConfig,
    excluded: &BTreeSet<VoxelId>,
) -> Result<D2DSolution> {
    new_cloud.validate()?;
    cfg.validate()?;
    let mut pose = *init;
    let mut pairs = active_pairs(reference, new_cloud, &pose, cfg, excluded)?;
    let mut normal = accumulate(&pairs);
    let mut cost_history = vec![normal.cost];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let cov = invert_normal(&normal.h)?;
        let delta = -(cov * normal.g);
        let dt = delta.fixed_rows::<3>(0).norm();
        let dr = delta.fixed_rows::<3>(3).norm();
        if dt < cfg.translation_tolerance && dr < cfg.rotation_tolerance {
            let candidate = RigidTransform::from_increment(&delta.into()).compose(&pose);
            if let Ok(p) = active_pairs(reference, new_cloud, &candidate, cfg, excluded) {
                let n = accumulate(&p);
                if n.cost <= normal.cost {
                    pose = candidate;
                    pairs = p;
                    normal = n;
                    cost_history.push(normal.cost);
                }
            }
            converged = true;
            break;
        }

        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..6 {
            let step: [f64; 6] = (delta * scale).into();
            let candidate = RigidTransform::from_increment(&step).compose(&pose);
            if let Ok(p) = active_pairs(reference, new_cloud, &candidate, cfg, excluded) {
                let n = accumulate(&p);
                if n.cost <= normal.cost {
                    pose = candidate;
                    pairs = p;
                    normal = n;
                    cost_history.push(normal.cost);
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            // no descent left along the Gauss-Newton direction
            break;
        }
    }

    let covariance = invert_normal(&normal.h)?;
    let residuals = pairs.iter().map(|p| (p.id, reduced_residual(p))).collect();
    Ok(D2DSolution {
        pose,
        covariance,
        residuals,
        iterations,
        converged,
        cost: normal.cost,
        cost_history,
    })
}

/// Voxels whose reduced residual magnitude exceeds mean + 2 std over the
/// scan. Voxels with an empty residual do not enter the statistic.
pub fn two_sigma_reject(residuals: &BTreeMap<VoxelId, DVector<f64>>) -> BTreeSet<VoxelId> {
    let mags: Vec<(VoxelId, f64)> = residuals
        .iter()
        .filter(|(_, r)| !r.is_empty())
        .map(|(id, r)| (*id, r.norm()))
        .collect();
    if mags.len() < 2 {
        return BTreeSet::new();
    }
    let n = mags.len() as f64;
    let mean = mags.iter().map(|m| m.1).sum::<f64>() / n;
    let var = mags.iter().map(|m| (m.1 - mean).powi(2)).sum::<f64>() / n;
    let limit = mean + 2.0 * var.sqrt();
    mags.into_iter()
        .filter(|&(_, m)| m > limit)
        .map(|(id, _)| id)
        .collect()
}
