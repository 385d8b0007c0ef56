//! Statistical oracles for normalized-gamma partitioning.

mod common;

use common::ks_p_value;
use proptest::prelude::*;
use prunefl::data::{generate_synthetic, Dataset};
use prunefl::partition::{
    partition_label, partition_mixed, partition_quantity, sample_gamma, sample_gamma_proportions,
    GammaSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn dataset(per_class: usize, classes: usize) -> Dataset {
    generate_synthetic(classes, 2, &vec![per_class; classes], 1.0, 11).unwrap()
}

fn cv(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

#[test]
fn near_iid_means_are_uniform() {
    let mut mean = [0.0; 10];
    for seed in 0..100 {
        let theta = sample_gamma_proportions(&GammaSpec::new(1e6, seed), 10).unwrap();
        for (m, t) in mean.iter_mut().zip(&theta) {
            *m += t / 100.0;
        }
    }
    for m in mean {
        assert!((m - 0.1).abs() <= 0.01, "{m}");
    }
}

#[test]
fn alpha_ten_is_more_dispersed_on_every_seed() {
    for seed in 0..100 {
        let skewed = sample_gamma_proportions(&GammaSpec::new(10.0, seed), 10).unwrap();
        let iid = sample_gamma_proportions(&GammaSpec::new(1e6, seed), 10).unwrap();
        assert!(cv(&skewed) > cv(&iid), "seed {seed}");
    }
}

#[test]
fn sampler_matches_reference_gamma() {
    for (i, &alpha) in [0.3, 1.0, 2.5, 10.0].iter().enumerate() {
        let mut ours_rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mut ref_rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
        let reference = Gamma::new(alpha, 2.0).unwrap();
        let ours: Vec<f64> = (0..10_000)
            .map(|_| sample_gamma(&mut ours_rng, alpha, 2.0))
            .collect();
        let theirs: Vec<f64> = (0..10_000)
            .map(|_| reference.sample(&mut ref_rng))
            .collect();
        let p = ks_p_value(ours, theirs);
        assert!(p > 0.01, "alpha {alpha}: KS p = {p}");
    }
    // the test has power: a shifted shape is rejected
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..10_000)
        .map(|_| sample_gamma(&mut rng, 2.0, 1.0))
        .collect();
    let b: Vec<f64> = (0..10_000)
        .map(|_| sample_gamma(&mut rng, 2.2, 1.0))
        .collect();
    assert!(ks_p_value(a, b) < 0.01);
}

#[test]
fn near_iid_mixed_is_indistinguishable_from_quantity() {
    let ds = dataset(500, 10);
    let clients = 8;
    let q = partition_quantity(&ds, clients, &GammaSpec::new(1e6, 4)).unwrap();
    let m = partition_mixed(
        &ds,
        clients,
        &GammaSpec::new(1e6, 4),
        &GammaSpec::new(1e6, 5),
    )
    .unwrap();
    // homogeneity test on the 2 x (clients*classes) contingency table
    let a: Vec<f64> = q.counts.iter().flatten().map(|&c| c as f64).collect();
    let b: Vec<f64> = m.counts.iter().flatten().map(|&c| c as f64).collect();
    let (ta, tb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let total = ta + tb;
    let mut stat = 0.0;
    let mut cells = 0;
    for (x, y) in a.iter().zip(&b) {
        let col = x + y;
        if col == 0.0 {
            continue;
        }
        cells += 1;
        for (obs, row) in [(x, ta), (y, tb)] {
            let exp = row * col / total;
            stat += (obs - exp).powi(2) / exp;
        }
    }
    let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square p = {p}");
}

#[test]
fn plans_are_deterministic() {
    let ds = dataset(100, 4);
    let spec = GammaSpec::new(0.5, 77);
    assert_eq!(
        partition_label(&ds, 6, &spec).unwrap(),
        partition_label(&ds, 6, &spec).unwrap()
    );
    let a = partition_mixed(&ds, 6, &spec, &GammaSpec::new(2.0, 78)).unwrap();
    let b = partition_mixed(&ds, 6, &spec, &GammaSpec::new(2.0, 78)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn assignments_are_disjoint_and_conserving(
        clients in 1usize..12,
        log_alpha in -2.0f64..6.0,
        seed in any::<u64>(),
        mode in 0u8..3,
    ) {
        let ds = dataset(40, 4);
        let spec = GammaSpec::new(10f64.powf(log_alpha), seed);
        let plan = match mode {
            0 => partition_quantity(&ds, clients, &spec).unwrap(),
            1 => partition_label(&ds, clients, &spec).unwrap(),
            _ => partition_mixed(&ds, clients, &spec, &GammaSpec::new(1.0, seed ^ 1)).unwrap(),
        };
        let mut seen = vec![false; ds.len()];
        for idx in &plan.assignments {
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for &i in idx {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        let assigned = seen.iter().filter(|s| **s).count();
        prop_assert_eq!(assigned + plan.subsampled, ds.len());
        if mode < 2 {
            prop_assert_eq!(plan.subsampled, 0);
        }
        for (k, row) in plan.counts.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), plan.assignments[k].len());
        }
    }
}
