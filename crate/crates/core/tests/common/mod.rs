#![allow(dead_code)]

use prunefl::data::{generate_synthetic, split, Dataset, SplitSpec};
use prunefl::nn::{Architecture, LayerSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FEATURES: usize = 16;
pub const CLASSES: usize = 10;

/// Small conv net used for desk-scale federated runs.
pub fn desk_arch() -> Architecture {
    Architecture::two_conv(FEATURES, CLASSES, 4, 8, 32)
}

/// Synthetic 10-class data split 80/20 (stratified).
pub fn desk_data(per_class: usize, separation: f64, seed: u64) -> (Dataset, Dataset) {
    let ds =
        generate_synthetic(CLASSES, FEATURES, &[per_class; CLASSES], separation, seed).unwrap();
    split(
        &ds,
        &SplitSpec {
            train_fraction: 0.8,
            seed: seed ^ 0x5eed,
            stratified: true,
        },
    )
    .unwrap()
}

/// Small random conv/pool/dense stack (1-2 convs, optional padding and pooling).
pub fn random_arch(rng: &mut ChaCha8Rng) -> Architecture {
    loop {
        let input_len = rng.random_range(5..=9);
        let mut layers = Vec::new();
        let mut channels = 1;
        let mut len = input_len as i64;
        for depth in 0..rng.random_range(1..=2) {
            let out = rng.random_range(1..=3);
            let k = rng.random_range(1..=3);
            let padding = rng.random_range(0..=1);
            layers.push(LayerSpec::Conv1d {
                in_channels: channels,
                out_channels: out,
                kernel_size: k,
                padding,
            });
            len = len + 2 * padding as i64 - k as i64 + 1;
            channels = out;
            layers.push(LayerSpec::Relu);
            if depth == 0 && rng.random_bool(0.5) && len >= 4 {
                layers.push(LayerSpec::MaxPool1d { size: 2 });
                len /= 2;
            }
        }
        if len < 1 {
            continue;
        }
        let flat = channels * len as usize;
        let hidden = rng.random_range(3..=5);
        let classes = rng.random_range(2..=4);
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::dense(flat, hidden),
            LayerSpec::Relu,
            LayerSpec::dense(hidden, classes),
        ]);
        let arch = Architecture { input_len, layers };
        if arch.validate().is_ok() {
            return arch;
        }
    }
}

/// Two-sample Kolmogorov-Smirnov p-value (asymptotic distribution).
pub fn ks_p_value(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}
