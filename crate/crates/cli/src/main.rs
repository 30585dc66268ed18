use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scanfilter::experiments::Rejection;
use scanfilter::pipeline::{self, RunConfig};
use scanfilter::Error;

/// Exit status for configuration problems (bad flags, bad config file, missing weights).
const EXIT_CONFIG: u8 = 2;
/// Exit status for unreadable or inconsistent data and failed computations.
const EXIT_DATA: u8 = 3;
/// Exit status when a run finished but some frames fell back to the prior.
const EXIT_DEGRADED: u8 = 4;

#[derive(Parser)]
#[command(name = "scanfilter", version, about = "Voxel-filtered D2D scan registration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network weight file; defaults to <out>/weights.bin.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-voxel translation accuracy of D2D and the network on object trials.
    PervoxelEval(Common),
    /// Frame-to-frame odometry with a voxel rejection configuration.
    Odometry {
        #[command(flatten)]
        common: Common,
        /// none, 2sigma or 2sigma+net; overrides the config file.
        #[arg(long)]
        reject: Option<String>,
    },
    /// False-alarm / missed-detection trade-off of the monitor.
    DetectionCurves(Common),
    /// Train the voxel network and write weights plus loss history.
    Train(Common),
    /// Generate a labeled voxel dataset file.
    GenDataset(Common),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(w) = &common.weights {
        cfg.weights = Some(w.clone());
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::MissingWeights(_) | Error::Domain(_) | Error::ParamShape(_) => {
            EXIT_CONFIG
        }
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::PervoxelEval(c) => {
            let cfg = load(&c)?;
            for t in pipeline::cmd_pervoxel_eval(&cfg)? {
                println!(
                    "{:?}: d2d {:.2} cm, network {:.2} cm over {} samples",
                    t.trial,
                    t.d2d_rms * 100.0,
                    t.network_rms * 100.0,
                    t.samples
                );
            }
        }
        Command::Odometry { common, reject } => {
            let mut cfg = load(&common)?;
            if let Some(r) = reject {
                cfg.odometry.rejection = r.parse::<Rejection>()?;
            }
            let report = pipeline::cmd_odometry(&cfg)?;
            println!(
                "{}: RMS forward error {:.4} m over {} frames",
                report.rejection,
                report.rms_forward_error(),
                report.frames.len()
            );
            if report.degraded() {
                eprintln!("degraded run: {} frame(s) failed to register", report.failed_frames());
                return Ok(EXIT_DEGRADED);
            }
        }
        Command::DetectionCurves(c) => {
            let cfg = load(&c)?;
            let points = pipeline::cmd_detection_curves(&cfg)?;
            if let Some(op) = points.iter().find(|p| p.operating_point) {
                println!(
                    "threshold {:.4} m: false alarm {:.4}, missed detection {:.4}",
                    op.threshold, op.false_alarm, op.missed_detection
                );
            }
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let r = pipeline::cmd_train(&cfg)?;
            println!(
                "validation RMS {:.4} m (zero predictor {:.4} m); weights in {}",
                r.final_validation_rms(),
                r.zero_rms,
                r.weights.display()
            );
        }
        Command::GenDataset(c) => {
            let cfg = load(&c)?;
            let set = pipeline::cmd_gen_dataset(&cfg)?;
            println!("{} samples written to {}", set.samples.len(), cfg.out.join("dataset.bin").display());
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
