//! Experiment drivers shared by the command-line tool and the acceptance
//! suite: filtered odometry, per-voxel accuracy, detection curves.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform};
use crate::d2d::{ReferenceScan, SolverConfig};
use crate::error::{Error, Result};
use crate::filter::{self, csv_err, filtered_register_against, ErrorModel, FilterConfig};
use crate::net::{self, NetParams, VoxelSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rejection {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "2sigma")]
    TwoSigma,
    #[serde(rename = "2sigma+net")]
    TwoSigmaNet,
}

impl Rejection {
    pub const ALL: [Rejection; 3] = [Rejection::None, Rejection::TwoSigma, Rejection::TwoSigmaNet];

    /// Applies this configuration's stage switches on top of `base`.
    pub fn filter_config(self, base: &FilterConfig) -> FilterConfig {
        let (two_sigma, network) = match self {
            Rejection::None => (false, false),
            Rejection::TwoSigma => (true, false),
            Rejection::TwoSigmaNet => (true, true),
        };
        FilterConfig {
            enable_two_sigma: two_sigma,
            enable_network: network,
            ..base.clone()
        }
    }

    pub fn needs_network(self) -> bool {
        self == Rejection::TwoSigmaNet
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rejection::None => "none",
            Rejection::TwoSigma => "2sigma",
            Rejection::TwoSigmaNet => "2sigma+net",
        })
    }
}

impl FromStr for Rejection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Rejection::None),
            "2sigma" => Ok(Rejection::TwoSigma),
            "2sigma+net" => Ok(Rejection::TwoSigmaNet),
            other => Err(Error::Config(format!(
                "unknown rejection {other:?}; expected none, 2sigma or 2sigma+net"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// odometry

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryFrame {
    pub frame: usize,
    /// Estimated motion from the previous frame, in the previous sensor frame.
    pub estimate: RigidTransform,
    pub truth: RigidTransform,
    /// Estimated minus true translation of the frame-to-frame motion.
    pub translation_error: Vector3<f64>,
    /// Component of `translation_error` along the previous sensor's x axis.
    pub forward_error: f64,
    pub voxels: usize,
    pub rejected_two_sigma: usize,
    pub rejected_network: usize,
    /// Registration failed and the prior was carried forward.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryReport {
    pub rejection: Rejection,
    pub frames: Vec<OdometryFrame>,
    /// Sensor-to-world pose estimates, starting at the first reference pose.
    pub poses: Vec<RigidTransform>,
}

impl OdometryReport {
    pub fn rms_forward_error(&self) -> f64 {
        rms(self.frames.iter().map(|f| f.forward_error))
    }

    pub fn failed_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.failed).count()
    }

    pub fn degraded(&self) -> bool {
        self.failed_frames() > 0
    }
}

pub fn rms(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryConfig {
    pub solver: SolverConfig,
    pub filter: FilterConfig,
    /// Frames registered against the same keyframe; 1 is frame-to-frame.
    pub keyframe_interval: usize,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            filter: FilterConfig::default(),
            keyframe_interval: 1,
        }
    }
}

/// Registers every frame against the current keyframe. The initial guess
/// for frame i is the estimate for frame i-1 advanced by the last estimated
/// frame-to-frame motion; frame 1 starts from identity.
pub fn run_odometry(
    clouds: &[PointCloud],
    reference_poses: &[RigidTransform],
    rejection: Rejection,
    params: Option<&NetParams>,
    cfg: &OdometryConfig,
) -> Result<OdometryReport> {
    if clouds.len() != reference_poses.len() {
        return Err(Error::InvalidInput(format!(
            "{} clouds but {} reference poses",
            clouds.len(),
            reference_poses.len()
        )));
    }
    if clouds.is_empty() {
        return Err(Error::InvalidInput("empty frame sequence".into()));
    }
    if cfg.keyframe_interval == 0 {
        return Err(Error::Config("keyframe_interval must be >= 1".into()));
    }
    if rejection.needs_network() && params.is_none() {
        return Err(Error::InvalidInput(
            "2sigma+net needs trained weights; run the train subcommand first".into(),
        ));
    }
    cfg.solver.validate()?;
    let filter_cfg = rejection.filter_config(&cfg.filter);
    filter_cfg.validate()?;

    let mut poses = vec![reference_poses[0].clone()];
    let mut frames = Vec::with_capacity(clouds.len() - 1);
    let mut keyframe = 0usize;
    let mut reference = ReferenceScan::from_config(&clouds[0], &cfg.solver);
    // motion of the last frame relative to the keyframe, and the last step
    let mut from_key = RigidTransform::identity();
    let mut step = RigidTransform::identity();

    for i in 1..clouds.len() {
        let init = &from_key * &step;
        let (estimate_from_key, counts, failed) = match filtered_register_against(
            &reference,
            &clouds[keyframe],
            &clouds[i],
            &init,
            params,
            &cfg.solver,
            &filter_cfg,
        ) {
            Ok(out) => {
                let counts = (out.verdicts.len(), out.rejected_two_sigma(), out.rejected_network());
                (out.solution.pose, counts, false)
            }
            Err(e) => {
                log::warn!("frame {i}: registration failed ({e}); carrying the prior forward");
                (init.clone(), (0, 0, 0), true)
            }
        };
        let key_pose = &poses[keyframe];
        let pose = key_pose * &estimate_from_key;
        let estimate = &poses[i - 1].inverse() * &pose;
        let truth = &reference_poses[i - 1].inverse() * &reference_poses[i];
        let translation_error = estimate.translation - truth.translation;
        frames.push(OdometryFrame {
            frame: i,
            forward_error: translation_error.x,
            translation_error,
            estimate: estimate.clone(),
            truth,
            voxels: counts.0,
            rejected_two_sigma: counts.1,
            rejected_network: counts.2,
            failed,
        });
        poses.push(pose);
        step = estimate;
        if i - keyframe >= cfg.keyframe_interval {
            keyframe = i;
            reference = ReferenceScan::from_config(&clouds[i], &cfg.solver);
            from_key = RigidTransform::identity();
        } else {
            from_key = estimate_from_key;
        }
    }
    Ok(OdometryReport {
        rejection,
        frames,
        poses,
    })
}

pub const ODOMETRY_CSV_HEADER: [&str; 11] = [
    "frame",
    "tx",
    "ty",
    "tz",
    "err_x",
    "err_y",
    "err_z",
    "voxels",
    "rejected_2sigma",
    "rejected_network",
    "failed",
];

pub fn write_odometry_csv<W: Write>(report: &OdometryReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ODOMETRY_CSV_HEADER).map_err(csv_err)?;
    for f in &report.frames {
        let t = f.estimate.translation;
        let e = f.translation_error;
        w.write_record([
            f.frame.to_string(),
            format!("{:e}", t.x),
            format!("{:e}", t.y),
            format!("{:e}", t.z),
            format!("{:e}", e.x),
            format!("{:e}", e.y),
            format!("{:e}", e.z),
            f.voxels.to_string(),
            f.rejected_two_sigma.to_string(),
            f.rejected_network.to_string(),
            (f.failed as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// per-voxel accuracy

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelErrors {
    pub k: usize,
    /// Reduced error of the mean-difference estimate, meters.
    pub d2d: f64,
    /// Reduced error of the network estimate, meters.
    pub network: f64,
}

pub fn pervoxel_errors(samples: &[VoxelSample], params: &NetParams) -> Result<Vec<VoxelErrors>> {
    let raw = net::forward_batch(params, samples)?;
    Ok(samples
        .iter()
        .zip(&raw)
        .map(|(s, x)| VoxelErrors {
            k: s.basis.k(),
            d2d: s.basis.project(&(s.mean_difference() - s.truth)).norm(),
            network: s.basis.project(&(x - s.truth)).norm(),
        })
        .collect())
}

/// RMS of the mean-difference and network errors.
pub fn pervoxel_rms(errors: &[VoxelErrors]) -> (f64, f64) {
    (rms(errors.iter().map(|e| e.d2d)), rms(errors.iter().map(|e| e.network)))
}

pub fn write_pervoxel_csv<W: Write>(trial: &str, errors: &[VoxelErrors], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "sample", "k", "d2d_error", "network_error"])
        .map_err(csv_err)?;
    for (i, e) in errors.iter().enumerate() {
        w.write_record([
            trial.to_string(),
            i.to_string(),
            e.k.to_string(),
            format!("{:e}", e.d2d),
            format!("{:e}", e.network),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// detection curves

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub sigma_d2d: f64,
    pub sigma_dnn: f64,
    /// Magnitude of the bias under the faulty hypothesis, meters.
    pub bias: f64,
    /// Thresholds swept from 0 to `max_threshold_sigmas` combined sigmas.
    pub max_threshold_sigmas: f64,
    pub steps: usize,
    /// Monte Carlo draws per hypothesis and threshold; 0 skips the check.
    pub monte_carlo_draws: usize,
    pub operating_false_alarm: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            sigma_d2d: 0.02,
            sigma_dnn: 0.02,
            bias: 0.05,
            max_threshold_sigmas: 6.0,
            steps: 60,
            monte_carlo_draws: 100_000,
            operating_false_alarm: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub false_alarm: f64,
    pub missed_detection: f64,
    pub false_alarm_mc: Option<f64>,
    pub missed_detection_mc: Option<f64>,
    /// The row sits at the configured false-alarm operating point.
    pub operating_point: bool,
}

pub fn detection_curves(cfg: &CurveConfig, seed: u64) -> Result<Vec<CurvePoint>> {
    if cfg.steps < 1 || !(cfg.max_threshold_sigmas > 0.0) {
        return Err(Error::Config("steps must be >= 1 and max_threshold_sigmas > 0".into()));
    }
    let model = ErrorModel::new(cfg.sigma_d2d, cfg.sigma_dnn, Vector3::new(cfg.bias, 0.0, 0.0))?;
    let s = model.combined_sigma();
    let mut thresholds: Vec<(f64, bool)> = (0..=cfg.steps)
        .map(|i| (cfg.max_threshold_sigmas * s * i as f64 / cfg.steps as f64, false))
        .collect();
    thresholds.push((filter::threshold_from_false_alarm(&model, cfg.operating_false_alarm)?, true));
    thresholds.sort_by(|a, b| a.0.total_cmp(&b.0));

    // one shared set of magnitudes per hypothesis keeps the MC columns monotone
    let (null, alt) = if cfg.monte_carlo_draws > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |bias: &Vector3<f64>| -> Vec<f64> {
            let mut m: Vec<f64> = (0..cfg.monte_carlo_draws)
                .map(|_| {
                    let e = Vector3::from_fn(|_, _| {
                        let a: f64 = StandardNormal.sample(&mut rng);
                        let b: f64 = StandardNormal.sample(&mut rng);
                        a * cfg.sigma_d2d - b * cfg.sigma_dnn
                    });
                    (e + bias).norm()
                })
                .collect();
            m.sort_by(f64::total_cmp);
            m
        };
        (draw(&Vector3::zeros()), draw(&model.bias))
    } else {
        (Vec::new(), Vec::new())
    };
    let mc = |sorted: &[f64], t: f64| -> Option<f64> {
        (!sorted.is_empty()).then(|| sorted.partition_point(|&m| m <= t) as f64 / sorted.len() as f64)
    };
    Ok(thresholds
        .into_iter()
        .map(|(t, op)| CurvePoint {
            threshold: t,
            false_alarm: filter::false_alarm_rate(&model, t),
            missed_detection: filter::missed_detection_rate(&model, t),
            false_alarm_mc: mc(&null, t).map(|below| 1.0 - below),
            missed_detection_mc: mc(&alt, t),
            operating_point: op,
        })
        .collect())
}

pub fn write_curves_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "threshold",
        "false_alarm",
        "missed_detection",
        "false_alarm_mc",
        "missed_detection_mc",
        "operating_point",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
    for p in points {
        w.write_record([
            format!("{:e}", p.threshold),
            format!("{:e}", p.false_alarm),
            format!("{:e}", p.missed_detection),
            opt(p.false_alarm_mc),
            opt(p.missed_detection_mc),
            (p.operating_point as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
