//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p scanfilter --test acceptance` (release-level
//! optimization comes from the workspace test profile).

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Rotation3, SymmetricEigen, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use scanfilter::cloud::{PointCloud, RigidTransform, VoxelShape};
use scanfilter::d2d::{self, register_d2d, solution_covariance, ReferenceScan, SolverConfig, VoxelPair};
use scanfilter::dataset::{self, FamilyOptions, ObjectTrial, SceneFamily};
use scanfilter::experiments::{rms, run_odometry, OdometryConfig, Rejection};
use scanfilter::filter::{self, ErrorModel, MonitorStatistic};
use scanfilter::formats;
use scanfilter::net::{self, NetParams, TrainConfig, VoxelSample};
use scanfilter::pipeline::{build_dataset, pervoxel_trials, DataSource, DatasetConfig, PervoxelConfig};
use scanfilter::scene::ScanPattern;
use scanfilter::Error;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * sigma
}

fn within(limit: Duration, start: Instant, out: Outcome) -> Outcome {
    let took = start.elapsed();
    match out {
        Ok(d) if took <= limit => Ok(d),
        Ok(d) => Err(format!("{d}; took {took:.1?}, limit {limit:?}")),
        Err(d) => Err(d),
    }
}

// 1. distribution of the monitor statistic

fn monitor_distribution() -> Outcome {
    let start = Instant::now();
    let (sd, sn) = (0.03, 0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let chi = ChiSquared::new(3.0).unwrap();
    let bins = 20;
    let edges: Vec<f64> = (1..bins).map(|i| chi.inverse_cdf(i as f64 / bins as f64)).collect();
    let mut counts = vec![0usize; bins];
    let n = 10_000;
    let truth = Vector3::new(0.4, -0.1, 0.25);
    for _ in 0..n {
        let x_d2d = truth + normal3(&mut rng, sd);
        let x_dnn = truth + normal3(&mut rng, sn);
        let q = MonitorStatistic::new(&x_d2d, &x_dnn).magnitude.powi(2) / (sd * sd + sn * sn);
        counts[edges.partition_point(|&e| e <= q)] += 1;
    }
    let expected = n as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
    within(
        Duration::from_secs(10),
        start,
        check(p >= 0.01, format!("Pearson {stat:.2} on {} dof, p = {p:.3}", bins - 1)),
    )
}

// 2. analytic missed detection vs Monte Carlo

fn detection_tradeoff() -> Outcome {
    let start = Instant::now();
    let (sd, sn, b) = (0.02, 0.02, 0.05);
    let model = ErrorModel::new(sd, sn, Vector3::new(b, 0.0, 0.0)).map_err(|e| e.to_string())?;
    let t = filter::threshold_from_false_alarm(&model, 0.05).map_err(|e| e.to_string())?;
    let analytic = filter::missed_detection_rate(&model, t);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let draws = 100_000;
    let bias = Vector3::new(b, 0.0, 0.0);
    let (mut missed, mut false_alarms) = (0usize, 0usize);
    for _ in 0..draws {
        let e_d2d = normal3(&mut rng, sd);
        let e_dnn = normal3(&mut rng, sn);
        if MonitorStatistic::new(&(bias + e_d2d), &e_dnn).magnitude <= t {
            missed += 1;
        }
        if MonitorStatistic::new(&e_d2d, &e_dnn).magnitude > t {
            false_alarms += 1;
        }
    }
    let mc = missed as f64 / draws as f64;
    let fa = false_alarms as f64 / draws as f64;
    within(
        Duration::from_secs(30),
        start,
        check(
            (analytic - mc).abs() <= 0.005,
            format!("T = {t:.4} m, missed analytic {analytic:.4} vs MC {mc:.4}, MC false alarms {fa:.4}"),
        ),
    )
}

// 3. exact recovery on noiseless walls

fn wall_grid(a: (f64, f64), b: (f64, f64), step: f64, f: impl Fn(f64, f64) -> Point3<f64>) -> Vec<Point3<f64>> {
    let na = ((a.1 - a.0) / step) as usize;
    let nb = ((b.1 - b.0) / step) as usize;
    let mut out = Vec::with_capacity(na * nb);
    for i in 0..na {
        for j in 0..nb {
            out.push(f(a.0 + (i as f64 + 0.5) * step, b.0 + (j as f64 + 0.5) * step));
        }
    }
    out
}

fn d2d_exactness() -> Outcome {
    let start = Instant::now();
    let mut pts = wall_grid((-6.0, 6.0), (-1.5, 2.0), 0.05, |y, z| Point3::new(6.0, y, z));
    pts.extend(wall_grid((-6.0, 6.0), (-1.5, 2.0), 0.05, |x, z| Point3::new(x, 5.0, z)));
    pts.extend(wall_grid((-6.0, 6.0), (-6.0, 6.0), 0.05, |x, y| Point3::new(x, y, -1.5)));
    let reference = PointCloud::new(pts);
    let truth = RigidTransform::from_euler(0.0, 0.0, 10f64.to_radians(), Vector3::new(0.3, -0.2, 0.1));
    let new = reference.transformed(&truth.inverse());
    let cfg = SolverConfig {
        translation_tolerance: 1e-9,
        rotation_tolerance: 1e-10,
        ..Default::default()
    };
    let sol = register_d2d(&reference, &new, &RigidTransform::identity(), &cfg, &BTreeSet::new())
        .map_err(|e| e.to_string())?;
    let err = sol.pose.compose(&truth.inverse());
    let (t, r) = (err.translation.norm(), err.angle());
    within(
        Duration::from_secs(5),
        start,
        check(
            t < 1e-6 && r < 1e-6,
            format!("{} iterations, translation error {t:.2e} m, rotation error {r:.2e} rad", sol.iterations),
        ),
    )
}

// 4. reduced residuals and delta vs dense oracles

fn forest_pairs(seed: u64) -> scanfilter::Result<(ReferenceScan, d2d::PairedScan, dataset::FramePair)> {
    let scene = SceneFamily::Forest.build(seed, &FamilyOptions::default());
    let pair = dataset::FramePair::simulate(&scene, 0, 1, &ScanPattern::default())?;
    let cfg = SolverConfig::default();
    let reference = ReferenceScan::from_config(&pair.reference.cloud, &cfg);
    let paired = d2d::pair_scan(&reference, &pair.new.cloud, &pair.true_relative, &cfg.grid, cfg.min_points)?;
    Ok((reference, paired, pair))
}

fn dense_selection(retained: [bool; 3]) -> DMatrix<f64> {
    let rows: Vec<usize> = (0..3).filter(|&i| retained[i]).collect();
    DMatrix::from_fn(rows.len(), 3, |r, c| if rows[r] == c { 1.0 } else { 0.0 })
}

fn dense_mean(points: &[Point3<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(3);
    for p in points {
        m += DVector::from_column_slice(p.coords.as_slice());
    }
    m / points.len() as f64
}

fn truncation_oracles() -> Outcome {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut checked = 0;
    // residual, network projection, delta, orthonormality, diagonalization
    let mut worst = [0.0f64; 5];
    let mut seed = 1;
    while checked < 1000 {
        let (reference, paired, frames) = forest_pairs(seed).map_err(|e| e.to_string())?;
        seed += 1;
        for pair in &paired.pairs {
            if checked == 1000 {
                break;
            }
            let (ref_cell, ref_idx) = reference.voxels.cell(pair.id).unwrap();
            let (_, new_idx) = paired.voxels.cell(pair.id).unwrap();
            let ref_pts: Vec<Point3<f64>> = ref_idx.iter().map(|&i| frames.reference.cloud.points[i]).collect();
            let new_pts: Vec<Point3<f64>> = new_idx.iter().map(|&i| paired.transformed.points[i]).collect();

            // covariance and eigen-decomposition on dynamic matrices
            let mu = dense_mean(&ref_pts);
            let mut cov = DMatrix::zeros(3, 3);
            for p in &ref_pts {
                let d = DVector::from_column_slice(p.coords.as_slice()) - &mu;
                cov += &d * d.transpose();
            }
            cov /= (ref_pts.len() - 1) as f64;
            let eig = SymmetricEigen::new(cov.clone());
            let mut lambdas: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let scale = cov.norm().max(1.0);

            let u = DMatrix::from_column_slice(3, 3, pair.basis.u.as_slice());
            let orth = (u.transpose() * &u - DMatrix::identity(3, 3)).norm();
            let diag = (u.transpose() * &cov * &u - DMatrix::from_diagonal(&DVector::from_vec(lambdas.clone()))).norm();
            let bounds = cfg.grid.bounds(pair.id);
            for i in 0..3 {
                let axis: Vector3<f64> = pair.basis.u.column(i).into();
                let keep = !(2.0 * lambdas[i].max(0.0).sqrt() > cfg.extension_fraction * bounds.chord(&ref_cell.mean, &axis));
                if keep != pair.basis.retained[i] {
                    return Err(format!("voxel {}: axis {i} retention differs from the oracle", pair.id));
                }
            }

            let l = dense_selection(pair.basis.retained);
            let d = dense_mean(&ref_pts) - dense_mean(&new_pts);
            let oracle = &l * u.transpose() * &d;
            let lib = d2d::reduced_residual(pair);
            let res_err = if lib.len() == oracle.len() {
                (&lib - &oracle).amax()
            } else {
                return Err(format!("voxel {}: residual length {} vs {}", pair.id, lib.len(), oracle.len()));
            };

            let raw = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            let (x_dnn, delta) = filter::monitor_delta(&lib, &raw, &pair.basis).map_err(|e| e.to_string())?;
            let dnn_oracle = &l * u.transpose() * DVector::from_column_slice(raw.as_slice());
            let dnn_err = (&x_dnn - &dnn_oracle).amax();
            let delta_err = match delta {
                Some(dx) => (dx - (&oracle - &dnn_oracle).norm()).abs(),
                None if l.nrows() == 0 => 0.0,
                None => return Err(format!("voxel {}: no delta with k = {}", pair.id, l.nrows())),
            };
            for (w, e) in worst.iter_mut().zip([res_err, dnn_err, delta_err, orth, diag / scale]) {
                *w = w.max(e);
            }
            checked += 1;
        }
    }
    // the basis checks are bounded by eigen-solver accuracy, not by 1e-12
    check(
        worst[..3].iter().all(|&w| w <= 1e-12) && worst[3..].iter().all(|&w| w <= 1e-10),
        format!(
            "{checked} voxel pairs; worst deviation: residual {:.1e}, network projection {:.1e}, delta {:.1e}, U orthonormal {:.1e}, U diagonalizes {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// 5. gradients and permutation invariance

fn live_params(seed: u64) -> NetParams {
    let mut p = NetParams::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let last = p.head.last_mut().unwrap();
    last.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.2..0.2));
    last.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.05..0.05));
    p
}

fn random_sample(rng: &mut ChaCha8Rng, n: usize) -> VoxelSample {
    let mut cloud = || -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.3..0.3)))
            .collect()
    };
    let (r, m) = (cloud(), cloud());
    let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    let u: Matrix3<f64> = Rotation3::from_scaled_axis(axis * 3.0).into_inner();
    let basis = scanfilter::cloud::TruncationBasis::with_retained(u, [true, rng.random_bool(0.7), rng.random_bool(0.7)]);
    let truth = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    VoxelSample::centered(&r, &m, truth, basis)
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let h = 1e-4;
    let loss_at = |p: &NetParams, s: &VoxelSample| net::projected_loss(&net::forward(p, s).unwrap(), &s.truth, &s.basis);
    let (mut probes, mut worst) = (0, 0.0f64);
    for trial in 0..8 {
        let p = live_params(trial);
        // few points keep max-pool winners apart so the step never flips one
        let s = random_sample(&mut rng, 6);
        let (_, grads) = net::backward(&p, &s).map_err(|e| e.to_string())?;
        let flat: Vec<f64> = grads.values().copied().collect();
        let mut done = 0;
        for _ in 0..4000 {
            if done == 16 {
                break;
            }
            let idx = rng.random_range(0..flat.len());
            let g = flat[idx];
            if g.abs() < 1e-6 {
                continue;
            }
            let mut plus = p.clone();
            *plus.values_mut().nth(idx).unwrap() += h;
            let mut minus = p.clone();
            *minus.values_mut().nth(idx).unwrap() -= h;
            let fd = (loss_at(&plus, &s) - loss_at(&minus, &s)) / (2.0 * h);
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()));
            done += 1;
            probes += 1;
        }
    }
    let p = live_params(99);
    let mut identical = true;
    for _ in 0..20 {
        let s = random_sample(&mut rng, net::SAMPLE_POINTS);
        let mut shuffled = s.clone();
        shuffled.reference.shuffle(&mut rng);
        shuffled.new.shuffle(&mut rng);
        let a = net::forward(&p, &s).map_err(|e| e.to_string())?;
        let b = net::forward(&p, &shuffled).map_err(|e| e.to_string())?;
        identical &= a == b;
    }
    check(
        probes >= 100 && worst < 1e-4 && identical,
        format!("{probes} probes, worst relative error {worst:.2e}, permuted forward bit-identical: {identical}"),
    )
}

// 6. training efficacy

fn training_efficacy() -> Outcome {
    let start = Instant::now();
    let cfg = DatasetConfig {
        source: DataSource::Objects,
        samples: 1000,
        ..DatasetConfig::default()
    };
    let set = build_dataset(&cfg, 606).map_err(|e| e.to_string())?;
    let again = build_dataset(&cfg, 606).map_err(|e| e.to_string())?;
    let same_data = dataset::encode_dataset(&set) == dataset::encode_dataset(&again);
    let tc = TrainConfig {
        seed: 6,
        ..TrainConfig::default()
    };
    let out = net::train(&set.samples, &tc).map_err(|e| e.to_string())?;
    let short = net::train(&set.samples, &TrainConfig { epochs: 3, ..tc.clone() }).map_err(|e| e.to_string())?;
    let same_run = short.history[..] == out.history[..4];
    let zero = net::zero_predictor_rms(&set.samples, &out.validation_indices);
    let val = out.history.last().unwrap().validation_rms();
    within(
        Duration::from_secs(600),
        start,
        check(
            val <= 0.5 * zero && same_data && same_run,
            format!(
                "{} epochs: validation RMS {val:.4} m vs zero predictor {zero:.4} m (ratio {:.2}); dataset repeatable {same_data}, training repeatable {same_run}",
                tc.epochs,
                val / zero
            ),
        ),
    )
}

// network shared by criteria 7 and 8

fn odometry_network() -> scanfilter::Result<NetParams> {
    let cfg = DatasetConfig {
        source: DataSource::Objects,
        samples: 6000,
        ..DatasetConfig::default()
    };
    let set = build_dataset(&cfg, 707)?;
    let tc = TrainConfig {
        epochs: 40,
        seed: 7,
        ..TrainConfig::default()
    };
    Ok(net::train(&set.samples, &tc)?.params)
}

// 7. per-voxel accuracy on object trials

fn object_trials(params: &NetParams) -> Outcome {
    let cfg = PervoxelConfig::default();
    let rows = pervoxel_trials(&cfg, params, 77).map_err(|e| e.to_string())?;
    let get = |t: ObjectTrial| rows.iter().find(|(s, _)| s.trial == t).map(|(s, _)| s.clone()).unwrap();
    let (u, l) = (get(ObjectTrial::Uniform), get(ObjectTrial::SimulatedLidar));
    let d2d_ratio = l.d2d_rms / u.d2d_rms;
    let net_ratio = l.network_rms / u.network_rms;
    check(
        d2d_ratio >= 2.0 && net_ratio <= 1.5,
        format!(
            "D2D {:.2} / {:.2} cm (x{d2d_ratio:.2}), network {:.2} / {:.2} cm (x{net_ratio:.2})",
            l.d2d_rms * 100.0,
            u.d2d_rms * 100.0,
            l.network_rms * 100.0,
            u.network_rms * 100.0
        ),
    )
}

// 8. filtered odometry ordering

const ODOMETRY_SEEDS: [u64; 3] = [1, 2, 3];

fn pooled_errors(family: SceneFamily, params: &NetParams) -> scanfilter::Result<[f64; 3]> {
    let cfg = OdometryConfig::default();
    let mut errs: [Vec<f64>; 3] = Default::default();
    for seed in ODOMETRY_SEEDS {
        let opts = FamilyOptions {
            frames: 8,
            speed: 10.0,
            ..FamilyOptions::default()
        };
        let (clouds, poses) = dataset::simulate_sequence(&family.build(seed, &opts), &ScanPattern::default())?;
        for (k, r) in Rejection::ALL.iter().enumerate() {
            let report = run_odometry(&clouds, &poses, *r, Some(params), &cfg)?;
            errs[k].extend(report.frames.iter().map(|f| f.forward_error));
        }
    }
    Ok([rms(errs[0].clone()), rms(errs[1].clone()), rms(errs[2].clone())])
}

fn odometry_ordering(params: &NetParams) -> Outcome {
    let [fn_, f2, fnet] = pooled_errors(SceneFamily::Forest, params).map_err(|e| e.to_string())?;
    let [cn, c2, cnet] = pooled_errors(SceneFamily::City, params).map_err(|e| e.to_string())?;
    let gain = 1.0 - fnet / f2;
    let city = cnet / c2 - 1.0;
    let mm = 1000.0;
    check(
        fn_ > f2 && f2 > fnet && gain >= 0.02 && city <= 0.05,
        format!(
            "forest none {:.2} > 2sigma {:.2} > 2sigma+net {:.2} mm (gain {:.1}%); city none {:.2}, 2sigma {:.3}, 2sigma+net {:.3} mm ({:+.1}%)",
            fn_ * mm,
            f2 * mm,
            fnet * mm,
            gain * 100.0,
            cn * mm,
            c2 * mm,
            cnet * mm,
            city * 100.0
        ),
    )
}

// 9. covariance monotonicity under exclusion

fn covariance_monotonicity() -> Outcome {
    let (_, paired, _) = forest_pairs(9).map_err(|e| e.to_string())?;
    let pairs = paired.pairs;
    let full = solution_covariance(&pairs).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut singular = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let fraction = rng.random_range(0.01..0.6);
        let kept: Vec<VoxelPair> = pairs.iter().filter(|_| !rng.random_bool(fraction)).cloned().collect();
        match solution_covariance(&kept) {
            Ok(c) => {
                for i in 0..6 {
                    worst = worst.min((c[(i, i)] - full[(i, i)]) / full[(i, i)]);
                }
            }
            Err(Error::RankDeficient { .. }) => singular += 1,
            Err(e) => return Err(e.to_string()),
        }
    }
    check(
        worst >= -1e-9,
        format!(
            "{} voxels, 100 exclusion sets ({singular} unconstrained), smallest relative diagonal change {worst:.3e}",
            pairs.len()
        ),
    )
}

// 10. file formats

fn no_panic<T>(f: impl FnOnce() -> scanfilter::Result<T>) -> Result<Option<T>, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(Some(v)),
        Ok(Err(_)) => Ok(None),
        Err(_) => Err("decoder panicked".into()),
    }
}

fn format_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    // KITTI point records
    let floats: Vec<f32> = (0..4 * 500).map(|_| rng.random_range(-80.0f32..80.0)).collect();
    let bytes: Vec<u8> = floats.iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin = dir.path().join("000000.bin");
    std::fs::write(&bin, &bytes).map_err(|e| e.to_string())?;
    let cloud = formats::load_kitti_bin(&bin).map_err(|e| e.to_string())?;
    let kitti_ok = formats::encode_kitti_bin(&cloud) == bytes && cloud.len() == 500;
    for cut in 1..16 {
        if no_panic(|| formats::decode_kitti_bin(&bytes[..bytes.len() - cut]))?.is_some() {
            return Err(format!("ragged KITTI file ({cut} bytes short) accepted"));
        }
    }

    // pose text
    let poses: Vec<RigidTransform> = (0..50)
        .map(|_| {
            RigidTransform::from_euler(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.1..3.1),
                Vector3::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(-20.0..20.0)),
            )
        })
        .collect();
    let pose_path = dir.path().join("poses.txt");
    formats::save_pose_file(&poses, &pose_path).map_err(|e| e.to_string())?;
    let back = formats::load_pose_file(&pose_path).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&pose_path).map_err(|e| e.to_string())?;
    let poses_ok = back.len() == poses.len()
        && back.iter().zip(&poses).all(|(a, b)| a.matrix3x4() == b.matrix3x4())
        && formats::format_poses(&back) == text;
    let bad_pose_texts = [
        "1 0 0 0 0 1 0 0 0 0 1\n".to_string(),
        "1 0 0 0 0 1 0 0 0 0 1 0 7\n".to_string(),
        "1 0 0 0 0 1 0 x 0 0 1 0\n".to_string(),
        "1 0 0 nan 0 1 0 0 0 0 1 0\n".to_string(),
        "3 0 0 0 0 1 0 0 0 0 1 0\n".to_string(),
        text.replacen(' ', "", 7),
    ];
    for t in &bad_pose_texts {
        if no_panic(|| formats::parse_pose_file(t, Path::new("poses.txt")))?.is_some() {
            return Err(format!("corrupted pose text accepted: {t:?}"));
        }
    }

    // network weights
    let params = live_params(3);
    let w = dir.path().join("weights.bin");
    net::save_params(&params, &w).map_err(|e| e.to_string())?;
    let encoded = std::fs::read(&w).map_err(|e| e.to_string())?;
    let weights_ok = net::load_params(&w).map_err(|e| e.to_string())? == params && net::encode_params(&params) == encoded;
    let mut rejected = 0;
    let mut cuts: Vec<usize> = (0..64).collect();
    cuts.extend((0..200).map(|_| rng.random_range(0..encoded.len())));
    for cut in cuts {
        if no_panic(|| net::decode_params(&encoded[..cut]))?.is_some() {
            return Err(format!("weights truncated to {cut} bytes accepted"));
        }
        rejected += 1;
    }
    let mut padded = encoded.clone();
    padded.push(0);
    if no_panic(|| net::decode_params(&padded))?.is_some() {
        return Err("weights with trailing bytes accepted".into());
    }
    for _ in 0..500 {
        let mut flipped = encoded.clone();
        let i = rng.random_range(0..flipped.len());
        flipped[i] ^= 1 << rng.random_range(0..8);
        no_panic(|| net::decode_params(&flipped))?;
    }
    for i in 0..40 {
        let mut flipped = encoded.clone();
        flipped[i] ^= 0xff;
        no_panic(|| net::decode_params(&flipped))?;
    }

    check(
        kitti_ok && poses_ok && weights_ok,
        format!(
            "KITTI bit-exact {kitti_ok}, poses bit-exact {poses_ok}, weights bit-exact {weights_ok}; {rejected} truncations and {} corrupted pose texts rejected, 540 bit flips without panic",
            bad_pose_texts.len()
        ),
    )
}

fn main() {
    // criterion numbers given on the command line select a subset
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let (mut failures, mut run) = (0, 0);
    let mut report = |name: &str, start: Instant, out: Outcome| {
        let took = start.elapsed();
        run += 1;
        match out {
            Ok(d) => println!("PASS  {name}: {d} [{took:.1?}]"),
            Err(d) => {
                failures += 1;
                println!("FAIL  {name}: {d} [{took:.1?}]");
            }
        }
    };

    let simple: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "monitor statistic is chi-square(3)", monitor_distribution),
        (2, "missed detection vs Monte Carlo", detection_tradeoff),
        (3, "D2D exact recovery on three walls", d2d_exactness),
        (4, "truncation vs dense oracles", truncation_oracles),
        (5, "gradient check and permutation invariance", gradient_check),
        (6, "training efficacy", training_efficacy),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            let t = Instant::now();
            report(&format!("{n} {name}"), t, f());
        }
    }

    if wanted(7) || wanted(8) {
        let t = Instant::now();
        let network = odometry_network();
        let trained = t.elapsed();
        println!("      trained the trial/odometry network in {trained:.1?}");
        match &network {
            Ok(params) => {
                if wanted(7) {
                    let t = Instant::now();
                    report("7 object trials: D2D vs network ratios", t, object_trials(params));
                }
                if wanted(8) {
                    let t = Instant::now();
                    let out = match odometry_ordering(params) {
                        Ok(d) if t.elapsed() + trained > Duration::from_secs(900) => {
                            Err(format!("{d}; took {:.1?} with training, limit 15 min", t.elapsed() + trained))
                        }
                        other => other,
                    };
                    report("8 filtered odometry ordering", t, out);
                }
            }
            Err(e) => {
                for (n, name) in [(7, "7 object trials: D2D vs network ratios"), (8, "8 filtered odometry ordering")] {
                    if wanted(n) {
                        report(name, t, Err(format!("training failed: {e}")));
                    }
                }
            }
        }
    }

    if wanted(9) {
        let t = Instant::now();
        report("9 covariance never shrinks under exclusion", t, covariance_monotonicity());
    }
    if wanted(10) {
        let t = Instant::now();
        report("10 format round trips and corrupt inputs", t, format_round_trips());
    }

    println!("{} of {run} acceptance criteria passed", run - failures);
    // failures are reported but only fail the build when asked to
    if failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
