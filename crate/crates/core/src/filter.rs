//! Per-voxel consistency check between the D2D mean-difference estimate and
//! the learned translation estimate, and the filtered registration built on it.
//!
//! Under the unbiased hypothesis both estimates carry independent zero-mean
//! normal errors, so `|D|^2 / (s_d2d^2 + s_dnn^2)` with `D = x_d2d - x_dnn`
//! follows a chi-square law with three degrees of freedom. The threshold on
//! `|D|` is chosen from a false-alarm budget; a biased voxel shifts the mean
//! of `D` and the missed-detection rate follows from the noncentral law.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform, TruncationBasis, VoxelId};
use crate::d2d::{
    mean_difference_covariance, pair_jacobian, pair_scan, register_against, two_sigma_reject, D2DSolution,
    PairedScan, ReferenceScan, SolverConfig,
};
use crate::error::{Error, Result};
use crate::net::{self, NetParams, VoxelSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorModel {
    /// Per-axis standard deviation of the D2D estimate, meters.
    pub sigma_d2d: f64,
    /// Per-axis standard deviation of the network estimate, meters.
    pub sigma_dnn: f64,
    /// Mean of the difference under the faulted hypothesis, meters.
    pub bias: Vector3<f64>,
}

impl ErrorModel {
    pub fn new(sigma_d2d: f64, sigma_dnn: f64, bias: Vector3<f64>) -> Result<Self> {
        let m = Self {
            sigma_d2d,
            sigma_dnn,
            bias,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d2d > 0.0 && self.sigma_dnn > 0.0) || !self.sigma_d2d.is_finite() || !self.sigma_dnn.is_finite() {
            return Err(Error::Domain("error-model standard deviations must be positive and finite".into()));
        }
        if !self.bias.iter().all(|b| b.is_finite()) {
            return Err(Error::Domain("bias must be finite".into()));
        }
        Ok(())
    }

    /// Per-axis standard deviation of the difference.
    pub fn combined_sigma(&self) -> f64 {
        self.sigma_d2d.hypot(self.sigma_dnn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorStatistic {
    pub delta: Vector3<f64>,
    /// `|delta|`.
    pub magnitude: f64,
}

impl MonitorStatistic {
    pub fn new(x_d2d: &Vector3<f64>, x_dnn: &Vector3<f64>) -> Self {
        let delta = x_d2d - x_dnn;
        Self {
            delta,
            magnitude: delta.norm(),
        }
    }
}

// ---------------------------------------------------------------------------
// chi-square(3) and its noncentral chi counterpart

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// CDF of the chi-square law with three degrees of freedom.
pub fn chi3_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    (libm::erf((x / 2.0).sqrt()) - (2.0 * x / PI).sqrt() * (-x / 2.0).exp()).clamp(0.0, 1.0)
}

/// Survival function `1 - chi3_cdf(x)`, accurate in the far tail.
pub fn chi3_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    (libm::erfc((x / 2.0).sqrt()) + (2.0 * x / PI).sqrt() * (-x / 2.0).exp()).clamp(0.0, 1.0)
}

/// Smallest `q` with `chi3_sf(q) = p`, by bisection.
pub fn chi3_isf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} outside (0, 1)")));
    }
    // residual with the sign of (sf - p), evaluated on the better-conditioned side
    let f = |q: f64| {
        if p < 0.5 {
            chi3_sf(q) - p
        } else {
            (1.0 - p) - chi3_cdf(q)
        }
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Domain(format!("probability {p} too small to invert")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Density of `|z|` for `z ~ N(mu, I_3)` with `|mu| = m`.
pub fn noncentral_chi3_pdf(rho: f64, m: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    let x = rho * m;
    if x > 1.0 {
        (rho / m) * (std_normal_pdf(rho - m) - std_normal_pdf(rho + m))
    } else {
        // product form avoids the cancellation of the difference at small rho * m
        let sinhc = if x > 0.0 { x.sinh() / x } else { 1.0 };
        2.0 * rho * rho * std_normal_pdf(rho) * (-0.5 * m * m).exp() * sinhc
    }
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `P(|z| <= r)` for `z ~ N(mu, I_3)`, `|mu| = m`, by quadrature of the density.
pub fn noncentral_chi3_cdf(r: f64, m: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let f = |rho| noncentral_chi3_pdf(rho, m);
    let tol = 1e-12;
    // split at the mode region so the integrator sees the peak
    let cut = [m - 6.0, m, m + 6.0];
    let mut edges = vec![0.0];
    edges.extend(cut.iter().copied().filter(|&c| c > 0.0 && c < r));
    edges.push(r);
    let total: f64 = edges.windows(2).map(|w| integrate(f, w[0], w[1], tol)).sum();
    total.clamp(0.0, 1.0)
}

/// Threshold on `|D|` giving the requested false-alarm probability under the
/// unbiased model.
pub fn threshold_from_false_alarm(model: &ErrorModel, rate: f64) -> Result<f64> {
    model.validate()?;
    Ok(model.combined_sigma() * chi3_isf(rate)?.sqrt())
}

/// `P(|D| > t)` under the unbiased model.
pub fn false_alarm_rate(model: &ErrorModel, t: f64) -> f64 {
    let s = model.combined_sigma();
    chi3_sf((t / s).powi(2))
}

/// `P(|D| <= t)` when `D` has mean `model.bias`.
pub fn missed_detection_rate(model: &ErrorModel, t: f64) -> f64 {
    let s = model.combined_sigma();
    noncentral_chi3_cdf(t / s, model.bias.norm() / s)
}

// ---------------------------------------------------------------------------
// per-voxel verdicts

/// Reduced network estimate `L U^T x_dnn_raw` and `|x_dnn - x_d2d|`. The
/// magnitude is `None` when the basis retains no axis.
pub fn monitor_delta(
    x_d2d: &DVector<f64>,
    x_dnn_raw: &Vector3<f64>,
    basis: &TruncationBasis,
) -> Result<(DVector<f64>, Option<f64>)> {
    let k = basis.k();
    if x_d2d.len() != k {
        return Err(Error::InvalidInput(format!(
            "D2D residual has {} components but the basis retains {k}",
            x_d2d.len()
        )));
    }
    let x_dnn = basis.project(x_dnn_raw);
    if k == 0 {
        return Ok((x_dnn, None));
    }
    let d = (&x_dnn - x_d2d).norm();
    Ok((x_dnn, Some(d)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVerdict {
    pub id: VoxelId,
    pub k: usize,
    pub x_d2d: DVector<f64>,
    /// Reduced network estimate; empty when the network did not run.
    pub x_dnn: DVector<f64>,
    pub delta_x: Option<f64>,
    /// Threshold applied to `delta_x`, meters.
    pub threshold: Option<f64>,
    pub rejected_two_sigma: bool,
    pub rejected_network: bool,
}

impl VoxelVerdict {
    pub fn rejected(&self) -> bool {
        self.rejected_two_sigma || self.rejected_network
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Fixed threshold on `delta_x`, meters. When absent, a per-voxel threshold
    /// is derived from `false_alarm_rate`.
    pub threshold: Option<f64>,
    pub false_alarm_rate: f64,
    /// Per-axis standard deviation assumed for the network estimate, meters.
    pub network_sigma: f64,
    pub enable_two_sigma: bool,
    pub enable_network: bool,
    /// Points drawn per scan per voxel for the network.
    pub sample_points: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold: None,
            false_alarm_rate: 0.05,
            network_sigma: 0.02,
            enable_two_sigma: true,
            enable_network: true,
            sample_points: net::SAMPLE_POINTS,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.threshold {
            if !(t > 0.0) {
                return Err(Error::InvalidInput("threshold must be > 0".into()));
            }
        }
        if !(self.false_alarm_rate > 0.0 && self.false_alarm_rate < 1.0) {
            return Err(Error::InvalidInput("false_alarm_rate must be in (0, 1)".into()));
        }
        if !(self.network_sigma > 0.0) {
            return Err(Error::InvalidInput("network_sigma must be > 0".into()));
        }
        if self.sample_points == 0 {
            return Err(Error::InvalidInput("sample_points must be >= 1".into()));
        }
        Ok(())
    }

    /// Neither rejection stage enabled.
    pub fn pass_through() -> Self {
        Self {
            enable_two_sigma: false,
            enable_network: false,
            ..Self::default()
        }
    }

    pub fn two_sigma_only() -> Self {
        Self {
            enable_network: false,
            ..Self::default()
        }
    }
}

/// Network input for one paired voxel: `n` points from each scan, centered
/// on the reference points' mean. The truth is left at zero.
pub fn voxel_sample(
    reference: &ReferenceScan,
    ref_cloud: &PointCloud,
    paired: &PairedScan,
    id: VoxelId,
    n: usize,
    seed: u64,
) -> Result<VoxelSample> {
    let (_, ref_idx) = reference
        .voxels
        .cell(id)
        .ok_or_else(|| Error::InvalidInput(format!("voxel {id} not in the reference scan")))?;
    let (_, new_idx) = paired
        .voxels
        .cell(id)
        .ok_or_else(|| Error::InvalidInput(format!("voxel {id} not in the new scan")))?;
    let basis = reference.cell(id).map(|(_, b)| b.clone()).expect("checked above");
    let ref_pts: Vec<Point3<f64>> = ref_idx.iter().map(|&i| ref_cloud.points[i]).collect();
    let new_pts: Vec<Point3<f64>> = new_idx.iter().map(|&i| paired.transformed.points[i]).collect();
    let seed = id.seed(seed);
    let r = net::sample_voxel_points(&ref_pts, n, seed)?;
    let m = net::sample_voxel_points(&new_pts, n, seed ^ 0xa5a5_a5a5_a5a5_a5a5)?;
    Ok(VoxelSample::centered(&r, &m, Vector3::zeros(), basis))
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Registration after excluding every rejected voxel.
    pub solution: D2DSolution,
    /// Shared preliminary convergence both rejection stages read from.
    pub preliminary: D2DSolution,
    /// One entry per voxel paired at the preliminary pose, ordered by id.
    pub verdicts: Vec<VoxelVerdict>,
    pub excluded: BTreeSet<VoxelId>,
}

impl FilterOutcome {
    pub fn rejected_two_sigma(&self) -> usize {
        self.verdicts.iter().filter(|v| v.rejected_two_sigma).count()
    }

    pub fn rejected_network(&self) -> usize {
        self.verdicts.iter().filter(|v| v.rejected_network).count()
    }
}

pub fn filtered_register(
    ref_cloud: &PointCloud,
    new_cloud: &PointCloud,
    init: &RigidTransform,
    params: Option<&NetParams>,
    solver: &SolverConfig,
    filter: &FilterConfig,
) -> Result<FilterOutcome> {
    ref_cloud.validate()?;
    solver.validate()?;
    let reference = ReferenceScan::from_config(ref_cloud, solver);
    filtered_register_against(&reference, ref_cloud, new_cloud, init, params, solver, filter)
}

/// As [`filtered_register`] with a prebuilt reference scan.
pub fn filtered_register_against(
    reference: &ReferenceScan,
    ref_cloud: &PointCloud,
    new_cloud: &PointCloud,
    init: &RigidTransform,
    params: Option<&NetParams>,
    solver: &SolverConfig,
    filter: &FilterConfig,
) -> Result<FilterOutcome> {
    filter.validate()?;
    let params = if filter.enable_network {
        Some(params.ok_or_else(|| Error::InvalidInput("network rejection enabled but no parameters given".into()))?)
    } else {
        None
    };
    let preliminary = register_against(reference, new_cloud, init, solver, &BTreeSet::new())?;

    let two_sigma = if filter.enable_two_sigma {
        two_sigma_reject(&preliminary.residuals)
    } else {
        BTreeSet::new()
    };

    let mut verdicts: Vec<VoxelVerdict> = preliminary
        .residuals
        .iter()
        .map(|(id, r)| VoxelVerdict {
            id: *id,
            k: r.len(),
            x_d2d: r.clone(),
            x_dnn: DVector::zeros(0),
            delta_x: None,
            threshold: None,
            rejected_two_sigma: two_sigma.contains(id),
            rejected_network: false,
        })
        .collect();

    if let Some(params) = params {
        let paired = pair_scan(reference, new_cloud, &preliminary.pose, &solver.grid, solver.min_points)?;
        let mut samples = Vec::new();
        let mut slots = Vec::new();
        for (slot, v) in verdicts.iter().enumerate() {
            if v.rejected_two_sigma || v.k == 0 {
                continue;
            }
            samples.push(voxel_sample(reference, ref_cloud, &paired, v.id, filter.sample_points, filter.seed)?);
            slots.push(slot);
        }
        let raw = net::forward_batch(params, &samples)?;
        for ((slot, sample), x) in slots.into_iter().zip(&samples).zip(&raw) {
            let v = &mut verdicts[slot];
            let (x_dnn, delta) = monitor_delta(&v.x_d2d, x, &sample.basis)?;
            let t = match filter.threshold {
                Some(t) => t,
                None => {
                    let pair = paired.pairs.iter().find(|p| p.id == v.id).expect("paired at this pose");
                    let sigma = d2d_voxel_sigma(pair, &preliminary);
                    let model = ErrorModel::new(sigma.max(1e-9), filter.network_sigma, Vector3::zeros())?;
                    threshold_from_false_alarm(&model, filter.false_alarm_rate)?
                }
            };
            v.x_dnn = x_dnn;
            v.delta_x = delta;
            v.threshold = Some(t);
            v.rejected_network = delta.is_some_and(|d| d > t);
        }
    }

    let excluded: BTreeSet<VoxelId> = verdicts.iter().filter(|v| v.rejected()).map(|v| v.id).collect();
    if !verdicts.is_empty() && excluded.len() == verdicts.len() {
        return Err(Error::FilterStarved {
            rejected: excluded.len(),
            total: verdicts.len(),
        });
    }
    let solution = if excluded.is_empty() {
        preliminary.clone()
    } else {
        register_against(reference, new_cloud, &preliminary.pose, solver, &excluded)?
    };
    Ok(FilterOutcome {
        solution,
        preliminary,
        verdicts,
        excluded,
    })
}

/// Per-axis standard deviation of a voxel's reduced D2D estimate: sampling
/// noise of the two means plus the pose uncertainty seen through the voxel's
/// Jacobian, averaged over the retained axes.
pub fn d2d_voxel_sigma(pair: &crate::d2d::VoxelPair, solution: &D2DSolution) -> f64 {
    let k = pair.basis.k();
    if k == 0 {
        return 0.0;
    }
    let p = pair.basis.projector();
    let c = mean_difference_covariance(pair);
    let c = DMatrix::from_column_slice(3, 3, c.as_slice());
    let j = pair_jacobian(pair);
    let cov = DMatrix::from_column_slice(6, 6, solution.covariance.as_slice());
    let total = &p * c * p.transpose() + &j * cov * j.transpose();
    (total.trace().max(0.0) / k as f64).sqrt()
}

/// One CSV row per voxel; missing components are left empty.
pub fn write_verdicts_csv<W: Write>(verdicts: &[VoxelVerdict], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "azimuth",
        "elevation",
        "radial",
        "k",
        "x_d2d_0",
        "x_d2d_1",
        "x_d2d_2",
        "x_dnn_0",
        "x_dnn_1",
        "x_dnn_2",
        "delta_x",
        "threshold",
        "rejected_2sigma",
        "rejected_network",
    ])
    .map_err(csv_err)?;
    let comp = |v: &DVector<f64>, i: usize| v.get(i).map(|x| format!("{x:e}")).unwrap_or_default();
    let opt = |x: Option<f64>| x.map(|x| format!("{x:e}")).unwrap_or_default();
    for v in verdicts {
        w.write_record([
            v.id.azimuth.to_string(),
            v.id.elevation.to_string(),
            v.id.radial.to_string(),
            v.k.to_string(),
            comp(&v.x_d2d, 0),
            comp(&v.x_d2d, 1),
            comp(&v.x_d2d, 2),
            comp(&v.x_dnn, 0),
            comp(&v.x_dnn, 1),
            comp(&v.x_dnn, 2),
            opt(v.delta_x),
            opt(v.threshold),
            (v.rejected_two_sigma as u8).to_string(),
            (v.rejected_network as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}
