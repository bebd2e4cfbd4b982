mod common;

use common::{ks_critical_01, ks_statistic};
use dpsc::data::{draw_features, split_indices, synth_generate, train_test_split, SynthSpec};
use dpsc::noise::{sample_noise, NoiseSpec};
use ndarray::Array2;
use statrs::distribution::{ChiSquared, ContinuousCDF, Gamma};

#[test]
fn noise_norm_follows_gamma_law() {
    let spec = NoiseSpec::new(5.0, 10, 2024).unwrap();
    let mut rng = spec.stream();
    let mut norms: Vec<f64> = (0..100_000)
        .map(|_| {
            let b = sample_noise(&spec, &mut rng).unwrap();
            b.dot(&b).sqrt()
        })
        .collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    assert!((mean / 2.0 - 1.0).abs() < 0.02, "mean norm {mean}");
    // statrs parameterizes by rate; scale 1/5 is rate 5
    let law = Gamma::new(10.0, 5.0).unwrap();
    let n = norms.len();
    let d = ks_statistic(&mut norms, |x| law.cdf(x));
    assert!(d < ks_critical_01(n), "KS statistic {d}");
}

#[test]
fn noise_direction_is_uniform_in_the_plane() {
    let spec = NoiseSpec::new(1.0, 2, 7).unwrap();
    let mut rng = spec.stream();
    let bins = 36;
    let draws = 36_000;
    let mut counts = vec![0usize; bins];
    for _ in 0..draws {
        let b = sample_noise(&spec, &mut rng).unwrap();
        let angle = b[1].atan2(b[0]) + std::f64::consts::PI;
        let slot = ((angle / (2.0 * std::f64::consts::PI)) * bins as f64) as usize;
        counts[slot.min(bins - 1)] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let critical = ChiSquared::new((bins - 1) as f64)
        .unwrap()
        .inverse_cdf(0.99);
    assert!(chi2 < critical, "chi-square {chi2} vs {critical}");
}

fn sample_cov(x: &Array2<f64>, a: usize, b: usize) -> f64 {
    let n = x.nrows() as f64;
    let ma = x.column(a).sum() / n;
    let mb = x.column(b).sum() / n;
    x.column(a)
        .iter()
        .zip(x.column(b))
        .map(|(u, v)| (u - ma) * (v - mb))
        .sum::<f64>()
        / (n - 1.0)
}

#[test]
fn independent_design_has_identity_covariance() {
    let n = 100_000;
    let x = draw_features(n, 5, 0.0, 3).unwrap();
    let band = 3.0 / (n as f64).sqrt();
    for a in 0..5 {
        assert!((sample_cov(&x, a, a) - 1.0).abs() < 3.0 * 2f64.sqrt() / (n as f64).sqrt());
        for b in (a + 1)..5 {
            assert!(sample_cov(&x, a, b).abs() < band, "cov({a},{b})");
        }
    }
}

#[test]
fn ar1_design_has_geometric_covariance() {
    let n = 100_000;
    let x = draw_features(n, 5, 0.5, 4).unwrap();
    // Var of a product of unit normals with correlation r is 1 + r^2
    let band = 3.0 * (1.0f64 + 0.25 * 0.25).sqrt() / (n as f64).sqrt();
    assert!(
        (sample_cov(&x, 0, 2) - 0.25).abs() < band,
        "{}",
        sample_cov(&x, 0, 2)
    );
    let band1 = 3.0 * (1.0f64 + 0.25).sqrt() / (n as f64).sqrt();
    assert!((sample_cov(&x, 1, 2) - 0.5).abs() < band1);
}

#[test]
fn synthetic_labels_are_balanced() {
    let spec = SynthSpec {
        n: 10_000,
        seed: 77,
        ..SynthSpec::default()
    };
    let (data, _) = synth_generate(&spec).unwrap();
    let positive = data.labels().iter().filter(|&&y| y > 0.0).count() as f64 / data.n() as f64;
    assert!((0.4..=0.6).contains(&positive), "{positive}");
    assert!(data
        .features()
        .rows()
        .into_iter()
        .all(|r| r.dot(&r).sqrt() <= 1.0 + 1e-12));
}

#[test]
fn default_split_sizes() {
    let spec = SynthSpec {
        seed: 1,
        ..SynthSpec::default()
    };
    let (data, _) = synth_generate(&spec).unwrap();
    assert_eq!((data.n(), data.p()), (11_000, 100));
    let (train, test) = train_test_split(&data, 1000, 9).unwrap();
    assert_eq!((train.n(), test.n()), (10_000, 1000));
    let (a, b) = split_indices(11_000, 1000, 9).unwrap();
    let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..11_000).collect::<Vec<_>>());
    assert_eq!(split_indices(11_000, 1000, 9).unwrap(), (a, b));
}
