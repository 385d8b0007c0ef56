//! Brute-force and sorting oracles for importance scores and mask building.

use proptest::prelude::*;
use prunefl::data::Dataset;
use prunefl::nn::{Architecture, LayerSpec, ModelParams, WeightLayout};
use prunefl::pruning::{
    build_mask, importance_exact, importance_l1, pruned_count, ImportanceMethod, ImportanceVector,
};
use prunefl::tensor::Tensor;

fn dense_arch(n_in: usize, n_out: usize) -> Architecture {
    Architecture {
        input_len: n_in,
        layers: vec![LayerSpec::Flatten, LayerSpec::dense(n_in, n_out)],
    }
}

fn mean_ce(w: [f64; 2], xs: &[f64], ys: &[usize]) -> f64 {
    let mut total = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let z = [w[0] * x, w[1] * x];
        let lse = (z[0].exp() + z[1].exp()).ln();
        total += lse - z[y];
    }
    total / xs.len() as f64
}

#[test]
fn exact_importance_on_two_weight_linear_model() {
    let xs = [0.5, -1.0, 2.0, 1.5];
    let ys = [0, 1, 1, 0];
    let data = Dataset::new(
        Tensor::new(vec![4, 1], xs.to_vec()).unwrap(),
        ys.to_vec(),
        vec!["a".into(), "b".into()],
    )
    .unwrap();
    let w = [0.8, -0.3];
    let mut model = ModelParams::zeros(&dense_arch(1, 2)).unwrap();
    model.set_weight(0, w[0]);
    model.set_weight(1, w[1]);
    let before = model.clone();
    let imp = importance_exact(&model, &data).unwrap();
    assert_eq!(model, before);
    let base = mean_ce(w, &xs, &ys);
    let want = [
        (base - mean_ce([0.0, w[1]], &xs, &ys)).powi(2),
        (base - mean_ce([w[0], 0.0], &xs, &ys)).powi(2),
    ];
    for (got, want) in imp.scores.iter().zip(want) {
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn exact_and_magnitude_rankings_agree_on_diagonal_toy() {
    // One-hot unit inputs, each feature seen once with each label, and only
    // the class-0 weight of every feature nonzero: zeroing w changes the loss
    // by ln cosh(w / 2) / features, monotone in |w|.
    let features = 8;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..features {
        for y in 0..2 {
            let mut x = vec![0.0; features];
            x[i] = 1.0;
            rows.extend(x);
            labels.push(y);
        }
    }
    let data = Dataset::new(
        Tensor::new(vec![2 * features, features], rows).unwrap(),
        labels,
        vec!["0".into(), "1".into()],
    )
    .unwrap();
    let mut model = ModelParams::zeros(&dense_arch(features, 2)).unwrap();
    let mags = [0.9, -0.15, 0.4, -1.3, 0.05, 0.7, -0.55, 0.25];
    for (i, m) in mags.iter().enumerate() {
        model.set_weight(i, *m); // weight row 0: class-0 logit
    }
    let exact = importance_exact(&model, &data).unwrap();
    let l1 = importance_l1(&model);
    for step in 0..20 {
        let rho = step as f64 / 20.0;
        let a = build_mask(&exact, rho).unwrap();
        let b = build_mask(&l1, rho).unwrap();
        assert_eq!(a.bits(), b.bits(), "rho {rho}");
    }
}

/// Independent oracle: sort indices by (score ascending, index descending)
/// and prune the first `floor(rho * NP)`.
fn oracle_bits(scores: &[f64], rho: f64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(b.cmp(&a)));
    let mut bits = vec![true; scores.len()];
    for &j in idx.iter().take(pruned_count(scores.len(), rho)) {
        bits[j] = false;
    }
    bits
}

fn vector(scores: Vec<f64>, layout: WeightLayout) -> ImportanceVector {
    ImportanceVector {
        scores,
        method: ImportanceMethod::L1,
        layout,
    }
}

#[test]
fn documented_examples() {
    let layout = WeightLayout::for_arch(&dense_arch(2, 2));
    let m = build_mask(&vector(vec![0.5, 0.2, 0.1, 0.9], layout), 0.5).unwrap();
    assert_eq!(m.bits(), &[true, false, false, true]);
    let layout = WeightLayout::for_arch(&dense_arch(4, 2));
    let m = build_mask(&vector(vec![1.0; 8], layout), 0.25).unwrap();
    assert_eq!(
        m.bits(),
        &[true, true, true, true, true, true, false, false]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mask_matches_sort_oracle(
        raw in prop::collection::vec(0u8..6, 12),
        rho_step in 0usize..100,
    ) {
        // coarse scores force many ties
        let scores: Vec<f64> = raw.iter().map(|&s| s as f64 * 0.25).collect();
        let rho = rho_step as f64 / 100.0;
        let layout = WeightLayout::for_arch(&dense_arch(3, 4));
        let mask = build_mask(&vector(scores.clone(), layout), rho).unwrap();
        let want = oracle_bits(&scores, rho);
        prop_assert_eq!(mask.bits(), want.as_slice());
        prop_assert_eq!(mask.kept_count(), 12 - pruned_count(12, rho));
    }

    #[test]
    fn l1_order_matches_magnitude_sort(ws in prop::collection::vec(-2.0f64..2.0, 12)) {
        let arch = dense_arch(3, 4);
        let mut model = ModelParams::zeros(&arch).unwrap();
        for (j, w) in ws.iter().enumerate() {
            model.set_weight(j, *w);
        }
        let l1 = importance_l1(&model);
        let mut by_score: Vec<usize> = (0..12).collect();
        by_score.sort_by(|&a, &b| l1.scores[a].total_cmp(&l1.scores[b]).then(a.cmp(&b)));
        let mut by_abs: Vec<usize> = (0..12).collect();
        by_abs.sort_by(|&a, &b| ws[a].abs().partial_cmp(&ws[b].abs()).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(by_score, by_abs);
    }

    #[test]
    fn ranking_ignores_layer_boundaries(
        scores in prop::collection::vec(0.0f64..1.0, 24),
        rho_step in 0usize..100,
    ) {
        // same 24 global indices split as [12, 12] and as [6 conv, 18 dense]
        let two_dense = Architecture {
            input_len: 4,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::dense(4, 3),
                LayerSpec::dense(3, 4),
            ],
        };
        let conv_dense = Architecture {
            input_len: 4,
            layers: vec![
                LayerSpec::conv(1, 2, 3),
                LayerSpec::Flatten,
                LayerSpec::dense(4, 2),
                LayerSpec::dense(2, 5),
            ],
        };
        let a_layout = WeightLayout::for_arch(&two_dense);
        let b_layout = WeightLayout::for_arch(&conv_dense);
        prop_assert_eq!(a_layout.total(), 24);
        prop_assert_eq!(b_layout.total(), 24);
        let rho = rho_step as f64 / 100.0;
        let a = build_mask(&vector(scores.clone(), a_layout), rho).unwrap();
        let b = build_mask(&vector(scores, b_layout), rho).unwrap();
        prop_assert_eq!(a.bits(), b.bits());
    }
}
