//! Run configuration and the subcommand bodies behind the `scanfilter` tool.
//! Each command writes its CSV files and a plain-text `summary.txt` into the
//! output directory.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform};
use crate::d2d::SolverConfig;
use crate::dataset::{
    self, derive_seed, make_training_set, object_samples, simulate_sequence, DatasetSpec, FamilyOptions, ObjectTrial,
    ObjectTrialOptions, SampleMeta, SceneFamily, TrainingSet,
};
use crate::error::{Error, Result};
use crate::experiments::{
    self, detection_curves, pervoxel_errors, pervoxel_rms, run_odometry, CurveConfig, CurvePoint, OdometryConfig,
    OdometryReport, Rejection,
};
use crate::filter::FilterConfig;
use crate::formats;
use crate::cloud::VoxelId;
use crate::net::{self, NetParams, TrainConfig, TrainOutcome};
use crate::scene::{ScanPattern, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Voxels from registered scan pairs of procedural scenes.
    Scenes,
    /// Single-object voxels, split evenly over `object_trials`.
    Objects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub samples: usize,
    /// Existing dataset file; when set nothing is generated.
    pub path: Option<PathBuf>,
    pub scenes: DatasetSpec,
    pub objects: ObjectTrialOptions,
    pub object_trials: Vec<ObjectTrial>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Scenes,
            samples: 1000,
            path: None,
            scenes: DatasetSpec::default(),
            objects: ObjectTrialOptions::default(),
            object_trials: vec![ObjectTrial::Uniform, ObjectTrial::SimulatedLidar],
        }
    }
}

/// Where an odometry run gets its frames and reference poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SequenceInput {
    Synthetic {
        family: SceneFamily,
        #[serde(default)]
        options: FamilyOptions,
        #[serde(default)]
        pattern: ScanPattern,
    },
    SceneFile {
        path: PathBuf,
        #[serde(default)]
        pattern: ScanPattern,
    },
    /// Directory of `.bin` scans (sorted by name) and a pose file.
    Kitti {
        clouds: PathBuf,
        poses: PathBuf,
        #[serde(default)]
        max_frames: Option<usize>,
    },
}

impl Default for SequenceInput {
    fn default() -> Self {
        SequenceInput::Synthetic {
            family: SceneFamily::Forest,
            options: FamilyOptions::default(),
            pattern: ScanPattern::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryRunConfig {
    pub input: SequenceInput,
    pub rejection: Rejection,
    pub solver: SolverConfig,
    pub filter: FilterConfig,
    pub keyframe_interval: usize,
}

impl Default for OdometryRunConfig {
    fn default() -> Self {
        let base = OdometryConfig::default();
        Self {
            input: SequenceInput::default(),
            rejection: Rejection::TwoSigma,
            solver: base.solver,
            filter: base.filter,
            keyframe_interval: base.keyframe_interval,
        }
    }
}

impl OdometryRunConfig {
    pub fn odometry_config(&self, seed: u64) -> OdometryConfig {
        OdometryConfig {
            solver: self.solver.clone(),
            filter: FilterConfig {
                seed,
                ..self.filter.clone()
            },
            keyframe_interval: self.keyframe_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PervoxelConfig {
    /// Samples per trial.
    pub samples: usize,
    pub trials: Vec<ObjectTrial>,
    pub options: ObjectTrialOptions,
}

impl Default for PervoxelConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            trials: vec![ObjectTrial::Uniform, ObjectTrial::SimulatedLidar],
            options: ObjectTrialOptions::default(),
        }
    }
}

/// Everything a subcommand may read. Command-line flags override `seed`,
/// `out` and `weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub weights: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub odometry: OdometryRunConfig,
    pub pervoxel: PervoxelConfig,
    pub curves: CurveConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            weights: None,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            odometry: OdometryRunConfig::default(),
            pervoxel: PervoxelConfig::default(),
            curves: CurveConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Relative paths inside the file resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.dataset.path.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.weights.as_mut() {
            fix(p);
        }
        match &mut cfg.odometry.input {
            SequenceInput::SceneFile { path, .. } => fix(path),
            SequenceInput::Kitti { clouds, poses, .. } => {
                fix(clouds);
                fix(poses);
            }
            SequenceInput::Synthetic { .. } => {}
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The weight file: explicit setting or `<out>/weights.bin`.
    pub fn weights_path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| self.out.join("weights.bin"))
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Config(format!("output directory {}: {e}", self.out.display())))
    }
}

fn write_summary(out: &Path, text: &str) -> Result<()> {
    fs::write(out.join("summary.txt"), text)?;
    Ok(())
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Loads weights, turning a missing file into an error that names `train`.
pub fn load_weights(path: &Path) -> Result<NetParams> {
    if !path.exists() {
        return Err(Error::MissingWeights(path.to_path_buf()));
    }
    net::load_params(path)
}

// ---------------------------------------------------------------------------
// datasets

pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<TrainingSet> {
    if let Some(path) = &cfg.path {
        return dataset::load_dataset(path);
    }
    match cfg.source {
        DataSource::Scenes => make_training_set(&cfg.scenes, cfg.samples, seed),
        DataSource::Objects => {
            if cfg.object_trials.is_empty() {
                return Err(Error::Config("object_trials is empty".into()));
            }
            let mut set = TrainingSet::default();
            let n = cfg.object_trials.len();
            for (i, trial) in cfg.object_trials.iter().enumerate() {
                let count = cfg.samples / n + usize::from(i < cfg.samples % n);
                for s in object_samples(*trial, count, derive_seed(seed, i as u64), &cfg.objects)? {
                    let bias = s.basis.project(&(s.mean_difference() - s.truth)).norm();
                    set.meta.push(SampleMeta {
                        scene: i as u32,
                        frame: 0,
                        voxel: VoxelId::new(0, 0, 0),
                        bias,
                        biased: bias > cfg.scenes.bias_label,
                        moving: false,
                    });
                    set.samples.push(s);
                }
            }
            Ok(set)
        }
    }
}

pub fn cmd_gen_dataset(cfg: &RunConfig) -> Result<TrainingSet> {
    cfg.prepare_out()?;
    let set = build_dataset(&cfg.dataset, cfg.seed)?;
    dataset::save_dataset(&set, &cfg.out.join("dataset.bin"))?;
    let biased = set.meta.iter().filter(|m| m.biased).count();
    let moving = set.meta.iter().filter(|m| m.moving).count();
    let mut s = String::new();
    let _ = writeln!(s, "samples        {}", set.samples.len());
    let _ = writeln!(s, "shortfall      {}", set.shortfall);
    let _ = writeln!(s, "skipped_pairs  {}", set.skipped_pairs);
    let _ = writeln!(s, "biased         {biased}");
    let _ = writeln!(s, "moving         {moving}");
    write_summary(&cfg.out, &s)?;
    Ok(set)
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    /// Validation RMS of the constant-zero predictor, meters.
    pub zero_rms: f64,
    pub weights: PathBuf,
}

impl TrainReport {
    pub fn final_validation_rms(&self) -> f64 {
        self.outcome.history.last().map_or(f64::NAN, |h| h.validation_rms())
    }
}

pub fn write_history_csv<W: std::io::Write>(outcome: &TrainOutcome, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_rms", "validation_rms"])
        .map_err(crate::filter::csv_err)?;
    for h in &outcome.history {
        w.write_record([
            h.epoch.to_string(),
            format!("{:e}", h.train_loss.sqrt()),
            format!("{:e}", h.validation_rms()),
        ])
        .map_err(crate::filter::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.train.validate()?;
    cfg.prepare_out()?;
    let set = build_dataset(&cfg.dataset, cfg.seed)?;
    if set.samples.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let outcome = net::train(&set.samples, &train_cfg)?;
    let zero_rms = net::zero_predictor_rms(&set.samples, &outcome.validation_indices);
    let weights = cfg.weights_path();
    net::save_params(&outcome.params, &weights)?;
    write_history_csv(&outcome, create(cfg.out.join("history.csv"))?)?;
    let report = TrainReport {
        outcome,
        zero_rms,
        weights,
    };
    let mut s = String::new();
    let _ = writeln!(s, "samples              {}", set.samples.len());
    let _ = writeln!(s, "train/validation     {}/{}", report.outcome.train_indices.len(), report.outcome.validation_indices.len());
    let _ = writeln!(s, "epochs               {}", train_cfg.epochs);
    let _ = writeln!(s, "final_validation_rms {:.6}", report.final_validation_rms());
    let _ = writeln!(s, "zero_predictor_rms   {:.6}", report.zero_rms);
    let _ = writeln!(s, "weights              {}", report.weights.display());
    write_summary(&cfg.out, &s)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// per-voxel accuracy

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub trial: ObjectTrial,
    pub samples: usize,
    pub d2d_rms: f64,
    pub network_rms: f64,
}

fn trial_name(t: ObjectTrial) -> &'static str {
    match t {
        ObjectTrial::Uniform => "uniform",
        ObjectTrial::SimulatedLidar => "simulated_lidar",
    }
}

/// Per-voxel RMS of both estimators on freshly generated trial samples.
pub fn pervoxel_trials(cfg: &PervoxelConfig, params: &NetParams, seed: u64) -> Result<Vec<(TrialSummary, Vec<experiments::VoxelErrors>)>> {
    let mut out = Vec::new();
    for (i, trial) in cfg.trials.iter().enumerate() {
        // offset past the streams a training set with the same seed would use
        let samples = object_samples(*trial, cfg.samples, derive_seed(seed ^ 0xe7a1, i as u64), &cfg.options)?;
        let errors = pervoxel_errors(&samples, params)?;
        let (d2d_rms, network_rms) = pervoxel_rms(&errors);
        out.push((
            TrialSummary {
                trial: *trial,
                samples: samples.len(),
                d2d_rms,
                network_rms,
            },
            errors,
        ));
    }
    Ok(out)
}

pub fn cmd_pervoxel_eval(cfg: &RunConfig) -> Result<Vec<TrialSummary>> {
    let params = load_weights(&cfg.weights_path())?;
    cfg.prepare_out()?;
    let results = pervoxel_trials(&cfg.pervoxel, &params, cfg.seed)?;
    let mut w = csv::Writer::from_writer(create(cfg.out.join("pervoxel.csv"))?);
    w.write_record(["trial", "sample", "k", "d2d_error", "network_error"])
        .map_err(crate::filter::csv_err)?;
    let mut s = String::from("per-voxel RMS translation error (cm)\ntrial              samples      d2d  network\n");
    for (summary, errors) in &results {
        for (i, e) in errors.iter().enumerate() {
            w.write_record([
                trial_name(summary.trial).to_string(),
                i.to_string(),
                e.k.to_string(),
                format!("{:e}", e.d2d),
                format!("{:e}", e.network),
            ])
            .map_err(crate::filter::csv_err)?;
        }
        let _ = writeln!(
            s,
            "{:<18} {:>7} {:>8.3} {:>8.3}",
            trial_name(summary.trial),
            summary.samples,
            summary.d2d_rms * 100.0,
            summary.network_rms * 100.0
        );
    }
    w.flush()?;
    write_summary(&cfg.out, &s)?;
    Ok(results.into_iter().map(|(s, _)| s).collect())
}

// ---------------------------------------------------------------------------
// odometry

pub fn load_sequence(input: &SequenceInput, seed: u64) -> Result<(Vec<PointCloud>, Vec<RigidTransform>)> {
    match input {
        SequenceInput::Synthetic {
            family,
            options,
            pattern,
        } => simulate_sequence(&family.build(seed, options), pattern),
        SequenceInput::SceneFile { path, pattern } => simulate_sequence(&SceneSpec::load(path)?, pattern),
        SequenceInput::Kitti {
            clouds,
            poses,
            max_frames,
        } => {
            let mut files: Vec<PathBuf> = fs::read_dir(clouds)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                .collect();
            files.sort();
            let mut poses = formats::load_pose_file(poses)?;
            let n = max_frames.unwrap_or(usize::MAX).min(files.len());
            if poses.len() < n {
                return Err(Error::InvalidInput(format!("{} scans but only {} poses", n, poses.len())));
            }
            poses.truncate(n);
            let clouds = files[..n].iter().map(|f| formats::load_kitti_bin(f)).collect::<Result<_>>()?;
            Ok((clouds, poses))
        }
    }
}

pub fn cmd_odometry(cfg: &RunConfig) -> Result<OdometryReport> {
    let rejection = cfg.odometry.rejection;
    let params = if rejection.needs_network() {
        Some(load_weights(&cfg.weights_path())?)
    } else {
        None
    };
    cfg.prepare_out()?;
    let (clouds, poses) = load_sequence(&cfg.odometry.input, cfg.seed)?;
    let report = run_odometry(&clouds, &poses, rejection, params.as_ref(), &cfg.odometry.odometry_config(cfg.seed))?;
    experiments::write_odometry_csv(&report, create(cfg.out.join("odometry.csv"))?)?;
    formats::save_pose_file(&report.poses, &cfg.out.join("poses.txt"))?;
    let mut s = String::new();
    let _ = writeln!(s, "rejection          {rejection}");
    let _ = writeln!(s, "frames             {}", clouds.len());
    let _ = writeln!(s, "rms_forward_error  {:.6}", report.rms_forward_error());
    let _ = writeln!(s, "rejected_2sigma    {}", report.frames.iter().map(|f| f.rejected_two_sigma).sum::<usize>());
    let _ = writeln!(s, "rejected_network   {}", report.frames.iter().map(|f| f.rejected_network).sum::<usize>());
    let _ = writeln!(s, "failed_frames      {}", report.failed_frames());
    write_summary(&cfg.out, &s)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// detection curves

pub fn cmd_detection_curves(cfg: &RunConfig) -> Result<Vec<CurvePoint>> {
    cfg.prepare_out()?;
    let points = detection_curves(&cfg.curves, cfg.seed)?;
    experiments::write_curves_csv(&points, create(cfg.out.join("curves.csv"))?)?;
    let mut s = String::new();
    if let Some(op) = points.iter().find(|p| p.operating_point) {
        let _ = writeln!(s, "sigma_d2d          {}", cfg.curves.sigma_d2d);
        let _ = writeln!(s, "sigma_dnn          {}", cfg.curves.sigma_dnn);
        let _ = writeln!(s, "bias               {}", cfg.curves.bias);
        let _ = writeln!(s, "threshold          {:.6}", op.threshold);
        let _ = writeln!(s, "false_alarm        {:.6}", op.false_alarm);
        let _ = writeln!(s, "missed_detection   {:.6}", op.missed_detection);
        if let Some(md) = op.missed_detection_mc {
            let _ = writeln!(s, "missed_detection_mc {md:.6}");
        }
    }
    write_summary(&cfg.out, &s)?;
    Ok(points)
}
