use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scanfilter::cloud::TruncationBasis;
use scanfilter::net::{self, NetParams, VoxelSample};

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| Point3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.3..0.3)))
        .collect()
}

fn random_basis(rng: &mut ChaCha8Rng) -> TruncationBasis {
    let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    let u = Rotation3::from_scaled_axis(axis * 3.0).into_inner();
    let retained = [rng.random_bool(0.8), rng.random_bool(0.8), rng.random_bool(0.8)];
    TruncationBasis::with_retained(u, retained)
}

fn random_sample(rng: &mut ChaCha8Rng, n: usize) -> VoxelSample {
    let r = random_cloud(rng, n);
    let m = random_cloud(rng, n);
    let truth = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    VoxelSample::centered(&r, &m, truth, random_basis(rng))
}

/// Params with a non-zero output layer so every parameter receives gradient.
fn live_params(seed: u64) -> NetParams {
    let mut p = NetParams::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let last = p.head.last_mut().unwrap();
    last.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.2..0.2));
    last.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.05..0.05));
    p
}

/// Straight loops over every layer, no shared code with the library kernels.
fn oracle_forward(p: &NetParams, s: &VoxelSample) -> Vector3<f64> {
    let encode = |pts: &[Point3<f64>]| -> Vec<f64> {
        let feat = p.encoder.last().unwrap().rows;
        let mut pooled = vec![f64::NEG_INFINITY; feat];
        for pt in pts {
            let mut x = vec![pt.x, pt.y, pt.z];
            for l in &p.encoder {
                let mut y = vec![0.0; l.rows];
                for r in 0..l.rows {
                    let mut acc = l.bias[r];
                    for c in 0..l.cols {
                        acc += l.weights[r * l.cols + c] * x[c];
                    }
                    y[r] = acc.tanh();
                }
                x = y;
            }
            for (m, v) in pooled.iter_mut().zip(&x) {
                *m = m.max(*v);
            }
        }
        pooled
    };
    let mut x = encode(&s.reference);
    x.extend(encode(&s.new));
    for (i, l) in p.head.iter().enumerate() {
        let mut y = vec![0.0; l.rows];
        for r in 0..l.rows {
            let mut acc = l.bias[r];
            for c in 0..l.cols {
                acc += l.weights[r * l.cols + c] * x[c];
            }
            y[r] = if i + 1 < p.head.len() { acc.tanh() } else { acc };
        }
        x = y;
    }
    Vector3::new(x[0], x[1], x[2])
}

#[test]
fn forward_matches_layer_by_layer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = live_params(7);
    for _ in 0..5 {
        let s = random_sample(&mut rng, net::SAMPLE_POINTS);
        let a = net::forward(&p, &s).unwrap();
        let b = oracle_forward(&p, &s);
        assert!((a - b).norm() < 1e-6, "{a} vs {b}");
    }
    let batch: Vec<VoxelSample> = (0..70).map(|_| random_sample(&mut rng, 40)).collect();
    let out = net::forward_batch(&p, &batch).unwrap();
    for (s, o) in batch.iter().zip(&out) {
        assert!((o - oracle_forward(&p, s)).norm() < 1e-6);
    }
}

fn loss_at(p: &NetParams, s: &VoxelSample) -> f64 {
    net::projected_loss(&net::forward(p, s).unwrap(), &s.truth, &s.basis)
}

fn param_mut(p: &mut NetParams, flat: usize) -> &mut f64 {
    p.values_mut().nth(flat).unwrap()
}

#[test]
fn gradients_match_central_differences() {
    // few points per cloud so max-pool winners are well separated and the
    // finite-difference step never flips an argmax
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let h = 1e-4;
    let mut probes = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..8 {
        let p = live_params(trial);
        let s = random_sample(&mut rng, 6);
        let (loss, grads) = net::backward(&p, &s).unwrap();
        assert!((loss - loss_at(&p, &s)).abs() < 1e-12);
        let flat_grads: Vec<f64> = grads.values().copied().collect();
        let n = flat_grads.len();
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 16 && attempts < 2000 {
            attempts += 1;
            let idx = rng.random_range(0..n);
            let g = flat_grads[idx];
            if g.abs() < 1e-6 {
                continue;
            }
            let mut plus = p.clone();
            *param_mut(&mut plus, idx) += h;
            let mut minus = p.clone();
            *param_mut(&mut minus, idx) -= h;
            let fd = (loss_at(&plus, &s) - loss_at(&minus, &s)) / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs());
            worst = worst.max(rel);
            assert!(rel < 1e-4, "trial {trial} param {idx}: analytic {g:e} fd {fd:e} rel {rel:e}");
            checked += 1;
            probes += 1;
        }
    }
    assert!(probes >= 100, "only {probes} probes");
    eprintln!("{probes} probes, worst relative error {worst:e}");
}

#[test]
fn batch_gradient_is_sum_of_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let p = live_params(3);
    let samples: Vec<VoxelSample> = (0..5).map(|_| random_sample(&mut rng, 20)).collect();
    let refs: Vec<&VoxelSample> = samples.iter().collect();
    let (loss, g) = net::batch_gradient(&p, &refs).unwrap();
    let mut sum = p.zeros_like();
    let mut loss_sum = 0.0;
    for s in &samples {
        let (l, gi) = net::backward(&p, s).unwrap();
        loss_sum += l;
        for (a, b) in sum.values_mut().zip(gi.values()) {
            *a += b;
        }
    }
    assert!((loss - loss_sum).abs() < 1e-10);
    for (a, b) in g.values().zip(sum.values()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn loss_matches_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..200 {
        let basis = random_basis(&mut rng);
        let a: Vector3<f64> = Vector3::new(rng.random(), rng.random(), rng.random());
        let b: Vector3<f64> = Vector3::new(rng.random(), rng.random(), rng.random());
        let d = a - b;
        // L U^T d, squared, computed with the full 3x3 selection
        let mut sel = Matrix3::zeros();
        for i in 0..3 {
            if basis.retained[i] {
                sel[(i, i)] = 1.0;
            }
        }
        let direct = (d.transpose() * basis.u * sel * basis.u.transpose() * d)[(0, 0)];
        assert!((net::projected_loss(&a, &b, &basis) - direct).abs() < 1e-10);
    }
}

#[test]
fn shifting_inputs_and_truth_keeps_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let p = live_params(9);
    let r = random_cloud(&mut rng, 30);
    let m = random_cloud(&mut rng, 30);
    let basis = random_basis(&mut rng);
    let truth = Vector3::new(0.02, -0.01, 0.03);
    let a = VoxelSample::centered(&r, &m, truth, basis.clone());
    let shift = Vector3::new(4.0, -7.0, 1.5);
    let rs: Vec<_> = r.iter().map(|q| q + shift).collect();
    let ms: Vec<_> = m.iter().map(|q| q + shift).collect();
    let b = VoxelSample::centered(&rs, &ms, truth, basis);
    let la = loss_at(&p, &a);
    let lb = loss_at(&p, &b);
    assert!((la - lb).abs() < 1e-9 * la.max(1.0));
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let data: Vec<VoxelSample> = (0..40)
        .map(|_| {
            let mut s = random_sample(&mut rng, 20);
            s.truth = s.mean_difference() * 0.5;
            s
        })
        .collect();
    for optimizer in [net::Optimizer::Sgd, net::Optimizer::Adam] {
        let cfg = net::TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 5,
            optimizer,
            ..Default::default()
        };
        let a = net::train(&data, &cfg).unwrap();
        let b = net::train(&data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.len(), 4);
    }
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let data: Vec<VoxelSample> = (0..16)
        .map(|_| {
            let mut s = random_sample(&mut rng, 10);
            s.truth = Vector3::new(1e3, -1e3, 1e3);
            s
        })
        .collect();
    let cfg = net::TrainConfig {
        learning_rate: 1e200,
        epochs: 5,
        batch_size: 4,
        optimizer: net::Optimizer::Sgd,
        ..Default::default()
    };
    match net::train(&data, &cfg) {
        Err(scanfilter::Error::TrainingDiverged { epoch }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}", other = other.map(|o| o.history)),
    }
}

#[test]
fn save_load_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let p = live_params(4);
    net::save_params(&p, &path).unwrap();
    let q = net::load_params(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    assert!(matches!(net::load_params(&dir.path().join("missing")), Err(scanfilter::Error::Io(_))));
}
