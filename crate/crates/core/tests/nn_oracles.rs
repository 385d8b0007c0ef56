//! Independent oracles for the network engine: finite differences, a
//! loop-based forward pass, and a scalar Adam.

mod common;

use common::random_arch;
use prunefl::nn::{
    build_model, forward, loss_and_grads, AdamConfig, AdamState, Architecture, LayerSpec,
    ModelParams, ParamTensors, Prox,
};
use prunefl::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomize(model: &mut ModelParams, rng: &mut ChaCha8Rng, scale: f64) {
    for t in model.params_mut().iter_mut() {
        for v in t.as_mut_slice() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    classes: usize,
) -> (Tensor, Vec<usize>) {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (Tensor::new(vec![rows, cols], data).unwrap(), labels)
}

#[test]
fn prox_term_is_exact_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let arch = random_arch(&mut rng);
        let mut model = ModelParams::zeros(&arch).unwrap();
        randomize(&mut model, &mut rng, 0.5);
        let mut anchor = model.clone();
        randomize(&mut anchor, &mut rng, 0.5);
        let (x, y) = random_batch(&mut rng, 4, arch.input_len, arch.num_classes().unwrap());
        let mu = 0.7;
        let (plain, g0) = loss_and_grads(&model, &x, &y, None).unwrap();
        let (with, g1) = loss_and_grads(
            &model,
            &x,
            &y,
            Some(Prox {
                mu,
                anchor: &anchor,
            }),
        )
        .unwrap();
        let sq = model.params().sum_sq_diff(anchor.params());
        assert!(((with - plain) - mu / 2.0 * sq).abs() <= 1e-12 * with.abs().max(1.0));
        let diffs = g1
            .iter()
            .zip(g0.iter())
            .zip(model.params().iter().zip(anchor.params().iter()));
        for ((a, b), (w, an)) in diffs {
            for i in 0..a.len() {
                let want = mu * (w.as_slice()[i] - an.as_slice()[i]);
                let got = a.as_slice()[i] - b.as_slice()[i];
                assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            }
        }
    }
}

/// Straightforward per-layer loops over `Vec<Vec<f64>>` channels.
fn naive_forward(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    let arch = model.arch();
    let mut seq: Vec<Vec<f64>> = vec![x.to_vec()];
    let mut flat: Option<Vec<f64>> = None;
    let mut p = 0;
    for layer in &arch.layers {
        match *layer {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                padding,
            } => {
                let w = model.params().weights[p].as_slice();
                let b = model.params().biases[p].as_slice();
                let len_in = seq[0].len();
                let mut padded = vec![vec![0.0; len_in + 2 * padding]; in_channels];
                for c in 0..in_channels {
                    for t in 0..len_in {
                        padded[c][t + padding] = seq[c][t];
                    }
                }
                let len_out = len_in + 2 * padding + 1 - kernel_size;
                let mut out = vec![vec![0.0; len_out]; out_channels];
                for o in 0..out_channels {
                    for t in 0..len_out {
                        let mut s = b[o];
                        for c in 0..in_channels {
                            for k in 0..kernel_size {
                                s += w[(o * in_channels + c) * kernel_size + k] * padded[c][t + k];
                            }
                        }
                        out[o][t] = s;
                    }
                }
                seq = out;
                p += 1;
            }
            LayerSpec::MaxPool1d { size } => {
                seq = seq
                    .iter()
                    .map(|ch| {
                        ch.chunks_exact(size)
                            .map(|w| w.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                            .collect()
                    })
                    .collect();
            }
            LayerSpec::Relu => match flat.as_mut() {
                Some(v) => v.iter_mut().for_each(|a| *a = a.max(0.0)),
                None => seq.iter_mut().flatten().for_each(|a| *a = a.max(0.0)),
            },
            LayerSpec::Flatten => flat = Some(seq.concat()),
            LayerSpec::Dense { n_in, n_out } => {
                let w = model.params().weights[p].as_slice();
                let b = model.params().biases[p].as_slice();
                let v = flat.take().unwrap();
                let out = (0..n_out)
                    .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * v[i]).sum::<f64>())
                    .collect();
                flat = Some(out);
                p += 1;
            }
        }
    }
    flat.unwrap()
}

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut archs = vec![Architecture::reference(20, 5), Architecture::pooled(42, 10)];
    archs.extend((0..10).map(|_| random_arch(&mut rng)));
    for arch in archs {
        let mut model = build_model(&arch, 42).unwrap();
        for b in model.params_mut().biases.iter_mut() {
            b.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let (x, _) = random_batch(&mut rng, 3, arch.input_len, 2);
        let logits = forward(&model, &x).unwrap();
        for r in 0..3 {
            let want = naive_forward(&model, x.row(r));
            for (a, b) in logits.row(r).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn adam_matches_scalar_reimplementation() {
    // f(w) = w^2 on every parameter of a 1-in/2-out dense model, w0 = 1
    let arch = Architecture {
        input_len: 1,
        layers: vec![LayerSpec::Flatten, LayerSpec::dense(1, 2)],
    };
    let mut model = ModelParams::zeros(&arch).unwrap();
    for t in model.params_mut().iter_mut() {
        t.fill(1.0);
    }
    let cfg = AdamConfig::with_lr(0.1);
    let mut state = AdamState::new(&model, cfg).unwrap();

    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for step in 1..=10 {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(step));
        let v_hat = v / (1.0 - b2.powi(step));
        w -= lr * m_hat / (v_hat.sqrt() + eps);

        let mut grads = ParamTensors::zeros_like(model.params());
        for (g, p) in grads.iter_mut().zip(model.params().iter()) {
            for (gi, pi) in g.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *gi = 2.0 * pi;
            }
        }
        state.step(&mut model, &grads).unwrap();
        for t in model.params().iter() {
            for &got in t.as_slice() {
                assert!((got - w).abs() <= 1e-12, "step {step}: {got} vs {w}");
            }
        }
    }
    assert_eq!(state.t, 10);
}
