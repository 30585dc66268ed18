use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scanfilter::cloud::TruncationBasis;
use scanfilter::filter::{self, ErrorModel, MonitorStatistic};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

fn normal3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * sigma
}

/// Closed-form CDF of the norm of a unit-variance 3-D normal with mean norm m.
fn noncentral_chi3_cdf_closed(r: f64, m: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    n.cdf(r - m) - n.cdf(-r - m) - (phi(r - m) - phi(r + m)) / m
}

#[test]
fn cdf_matches_statrs() {
    let chi = ChiSquared::new(3.0).unwrap();
    for x in [0.01, 0.3, 1.0, 2.5, 7.8, 15.0, 30.0] {
        assert!((filter::chi3_cdf(x) - chi.cdf(x)).abs() < 1e-12, "{x}");
    }
}

#[test]
fn threshold_matches_quantile_oracle() {
    let sigma = 0.013;
    let model = ErrorModel::new(sigma, sigma, Vector3::zeros()).unwrap();
    let t = filter::threshold_from_false_alarm(&model, 0.05).unwrap();
    let q = ChiSquared::new(3.0).unwrap().inverse_cdf(0.95);
    assert!((q - 7.815).abs() < 1e-3);
    let oracle = (q * 2.0 * sigma * sigma).sqrt();
    assert!((t - oracle).abs() < 1e-8 * oracle, "{t} vs {oracle}");
    assert!((t / sigma - 3.953).abs() < 1e-3);
}

#[test]
fn false_alarm_rate_monte_carlo() {
    let model = ErrorModel::new(0.02, 0.01, Vector3::zeros()).unwrap();
    let t = filter::threshold_from_false_alarm(&model, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| {
            let d = normal3(&mut rng, model.sigma_d2d);
            let e = normal3(&mut rng, model.sigma_dnn);
            MonitorStatistic::new(&d, &e).magnitude > t
        })
        .count();
    let rate = hits as f64 / n as f64;
    assert!((rate - 0.05).abs() < 0.004, "{rate}");
}

#[test]
fn missed_detection_matches_closed_form_and_monte_carlo() {
    for (s, b) in [(0.01, 0.05), (0.02, 0.05), (0.005, 0.01), (0.03, 0.001)] {
        let model = ErrorModel::new(s, s, Vector3::new(b, 0.0, 0.0)).unwrap();
        let t = filter::threshold_from_false_alarm(&model, 0.05).unwrap();
        let md = filter::missed_detection_rate(&model, t);
        let cs = model.combined_sigma();
        let closed = noncentral_chi3_cdf_closed(t / cs, b / cs);
        assert!((md - closed).abs() < 1e-9, "{md} vs {closed}");
    }
    let model = ErrorModel::new(0.015, 0.015, Vector3::new(0.05, 0.0, 0.0)).unwrap();
    let t = filter::threshold_from_false_alarm(&model, 0.05).unwrap();
    let md = filter::missed_detection_rate(&model, t);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let missed = (0..n)
        .filter(|_| (normal3(&mut rng, model.combined_sigma()) + model.bias).norm() <= t)
        .count();
    let mc = missed as f64 / n as f64;
    assert!((md - mc).abs() < 0.005, "analytic {md} mc {mc}");
}

#[test]
fn normalized_statistic_is_chi_square_three() {
    let (sd, sn) = (0.02, 0.035);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chi = ChiSquared::new(3.0).unwrap();
    let bins = 20;
    let edges: Vec<f64> = (1..bins).map(|i| chi.inverse_cdf(i as f64 / bins as f64)).collect();
    let mut counts = vec![0usize; bins];
    let n = 10_000;
    for _ in 0..n {
        let x = normal3(&mut rng, sd);
        let y = normal3(&mut rng, sn);
        let q = MonitorStatistic::new(&x, &y).magnitude.powi(2) / (sd * sd + sn * sn);
        counts[edges.partition_point(|&e| e <= q)] += 1;
    }
    let expected = n as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "Pearson {stat} >= {critical}");
}

#[test]
fn monitor_delta_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let axis = Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()) * 4.0;
        let u: Matrix3<f64> = Rotation3::from_scaled_axis(axis).into_inner();
        let retained = [rng.random_bool(0.6), rng.random_bool(0.6), rng.random_bool(0.6)];
        let basis = TruncationBasis::with_retained(u, retained);
        let k = basis.k();
        let x_d2d = DVector::from_fn(k, |_, _| rng.random_range(-0.1..0.1));
        let raw = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let (red, d) = filter::monitor_delta(&x_d2d, &raw, &basis).unwrap();
        // L as an explicit k x 3 0/1 matrix
        let rows: Vec<usize> = (0..3).filter(|&i| retained[i]).collect();
        let l = DMatrix::from_fn(k, 3, |r, c| if rows[r] == c { 1.0 } else { 0.0 });
        let ut = DMatrix::from_fn(3, 3, |r, c| u[(c, r)]);
        let a = DVector::from_column_slice(raw.as_slice());
        let oracle = &l * &ut * &a;
        assert!((&red - &oracle).norm() < 1e-12);
        match d {
            Some(d) => assert!((d - (&oracle - &x_d2d).norm()).abs() < 1e-12),
            None => assert_eq!(k, 0),
        }
    }
}
