use cpt_smp::empirical::{build_ecdf, ks_two_sample, ks_uniformity, pit_transform, SampleSet};
use cpt_smp::functional::{choquet_order_stat, choquet_plugin};
use cpt_smp::preference::{DistortionFn, UtilityFn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use statrs::distribution::{ContinuousCDF, Normal};

fn lognormal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = LogNormal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

fn ks_threshold(n: usize) -> f64 {
    1.63 / (n as f64).sqrt() + 1.0 / n as f64
}

#[test]
fn two_point_oracle() {
    // {1, 4} with √x and g(p) = p²: 1·(1 − 1/4) + 2·(1/4) = 1.25
    let s = SampleSet::new(vec![4.0, 1.0]).unwrap();
    let util = UtilityFn::monomial(0.5).unwrap();
    let square = DistortionFn::lopes(1.0, 1.0, 0.0).unwrap();
    let os = choquet_order_stat(&s, &util, &square).unwrap();
    let pi = choquet_plugin(&s, &util, &square).unwrap();
    assert!((os.value - 1.25).abs() < 1e-12, "{}", os.value);
    assert!((pi.value - 1.25).abs() < 1e-12, "{}", pi.value);
}

#[test]
fn estimators_agree_on_lognormal_populations() {
    let util = UtilityFn::power(0.5).unwrap();
    let dist = DistortionFn::lopes(0.3, 1.0, 0.5).unwrap();
    for (n, seed) in [(1_000, 1), (10_000, 2), (100_000, 3)] {
        let s = SampleSet::new(lognormal(n, seed)).unwrap();
        let os = choquet_order_stat(&s, &util, &dist).unwrap();
        let pi = choquet_plugin(&s, &util, &dist).unwrap();
        let se = (os.std_error.powi(2) + pi.std_error.powi(2)).sqrt();
        assert!((os.value - pi.value).abs() <= 3.0 * se, "n={n}: {} vs {} (se {se})", os.value, pi.value);
    }
}

#[test]
fn identity_distortion_is_the_sample_mean() {
    let xs = lognormal(5_000, 11);
    let util = UtilityFn::power(0.3).unwrap();
    let mean = xs.iter().map(|x| util.value(*x).unwrap()).sum::<f64>() / xs.len() as f64;
    let s = SampleSet::new(xs).unwrap();
    let os = choquet_order_stat(&s, &util, &DistortionFn::Identity).unwrap();
    let pi = choquet_plugin(&s, &util, &DistortionFn::Identity).unwrap();
    assert!((os.value - mean).abs() <= 1e-12 * mean);
    assert!((pi.value - mean).abs() <= 1e-12 * mean);
}

#[test]
fn pit_uniformity_rates() {
    let law = Normal::new(0.0, 1.0).unwrap();
    for (n, seed) in [(1_000, 5), (10_000, 6), (100_000, 7)] {
        let xs = lognormal(n, seed);
        let s = SampleSet::new(xs.clone()).unwrap();
        let own = ks_uniformity(&pit_transform(&build_ecdf(&s), &s)).unwrap();
        assert!(own <= ks_threshold(n), "n={n}: self-PIT KS {own}");
        let true_pit: Vec<f64> = xs.iter().map(|x| law.cdf(x.ln())).collect();
        let ks = ks_uniformity(&true_pit).unwrap();
        assert!(ks <= ks_threshold(n), "n={n}: law PIT KS {ks}");
    }
}

#[test]
fn lognormal_pit_below_spec_example_bound() {
    let xs = lognormal(100_000, 21);
    let law = Normal::new(0.0, 1.0).unwrap();
    let pit: Vec<f64> = xs.iter().map(|x| law.cdf(x.ln())).collect();
    assert!(ks_uniformity(&pit).unwrap() < 0.006);
}

#[test]
fn ecdf_of_one_sample_transports_to_another() {
    // F̂ built on one population, evaluated on an independent draw: the two-sample
    // KS scale is √2 larger than the one-sample one
    let a = SampleSet::new(lognormal(20_000, 31)).unwrap();
    let b = SampleSet::new(lognormal(20_000, 32)).unwrap();
    let pit = pit_transform(&build_ecdf(&a), &b);
    let ks = ks_uniformity(&pit).unwrap();
    assert!(ks <= 2f64.sqrt() * ks_threshold(20_000), "{ks}");
    let direct = ks_two_sample(a.values(), b.values()).unwrap();
    assert!((ks - direct).abs() <= 1.0 / 20_000.0 + 1e-12, "{ks} vs {direct}");
}
