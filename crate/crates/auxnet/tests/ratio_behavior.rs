//! Supervision-ratio probe: exactness at the top layer, agreement with an
//! independently hand-derived chain product, side-effect freedom, and the
//! locality property of per-head gradient flow.

use auxnet::model::{build_model, ActivationOrdering, Mode, Model, ModelConfig};
use auxnet::ratio::supervision_ratio;
use auxnet::tensor::Tensor;
use auxnet::train::Strategy;

fn config(depth: usize, heads: Vec<usize>, seed: u64) -> ModelConfig {
    ModelConfig {
        depth,
        stage_channels: vec![3, 5],
        stage_blocks: None,
        lambda: 1.0,
        head_positions: heads,
        nu: 2.0,
        num_classes: 2,
        in_channels: 1,
        activation_ordering: ActivationOrdering::Post,
        identity_activation: false,
        min_head_position: 1,
        seed,
    }
}

fn probe_batch(b: usize, hw: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let data: Vec<f64> = (0..b * hw * hw)
        .map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0) - 1.0)
        .collect();
    (
        Tensor::from_vec(vec![b, 1, hw, hw], data).unwrap(),
        (0..b).map(|i| i % 2).collect(),
    )
}

#[test]
fn plain_ratio_is_exactly_one_at_the_top() {
    let model: Model<f64> = build_model(&config(6, vec![6], 1)).unwrap();
    let (batch, labels) = probe_batch(4, 5, 3);
    let trace = supervision_ratio(&model, &batch, &labels, Strategy::Plain, 1).unwrap();
    assert_eq!(trace.entries.len(), 6);
    let (l, rho) = *trace.entries.last().unwrap();
    assert_eq!(l, 6);
    assert_eq!(rho, 1.0);
    assert!(trace.entries.iter().all(|&(_, r)| r > 0.0));
}

/// Independent oracle: a depth-2, single-channel, 1x1-spatial, batch-2 chain
/// with lambda=0 and identity activation, differentiated entirely by hand.
#[test]
fn ratio_matches_hand_computed_chain_product() {
    let mut cfg = config(2, vec![2], 7);
    cfg.lambda = 0.0;
    cfg.identity_activation = true;
    cfg.stage_channels = vec![1];
    let model: Model<f64> = build_model(&cfg).unwrap();

    let x0 = [0.3f64, -0.7];
    let labels = vec![0usize, 1];
    let batch = Tensor::from_vec(vec![2, 1, 1, 1], x0.to_vec()).unwrap();

    // forward by hand (eps matches the batchnorm default)
    let eps = 1e-5;
    let bn = |t: [f64; 2], gamma: f64, beta: f64| -> ([f64; 2], [f64; 2], f64) {
        let mu = (t[0] + t[1]) / 2.0;
        let var = ((t[0] - mu).powi(2) + (t[1] - mu).powi(2)) / 2.0;
        let inv = 1.0 / (var + eps).sqrt();
        let xh = [(t[0] - mu) * inv, (t[1] - mu) * inv];
        ([gamma * xh[0] + beta, gamma * xh[1] + beta], xh, inv)
    };
    let step = |x: [f64; 2], block: usize| -> ([f64; 2], [f64; 2], f64, f64, f64) {
        // 3x3 kernel over a padded 1x1 input: only the center tap matters
        let w = model.blocks[block].conv.weights.data()[4];
        let b = model.blocks[block].conv.bias.data()[0];
        let gamma = model.blocks[block].bn.gamma.data()[0];
        let beta = model.blocks[block].bn.beta.data()[0];
        let t = [w * x[0] + b, w * x[1] + b];
        let (u, xh, inv) = bn(t, gamma, beta);
        (u, xh, inv, w, gamma)
    };
    let (x1, _, _, _, _) = step(x0, 0);
    let (x2, xh2, inv2, w2, gamma2) = step(x1, 1);

    // head gradient at x2
    let wfc: Vec<f64> = model.heads[0].fc.weights.data().to_vec(); // [2 classes x 1]
    let bfc: Vec<f64> = model.heads[0].fc.bias.data().to_vec();
    let mut g = [0.0f64; 2];
    for i in 0..2 {
        let logits = [wfc[0] * x2[i] + bfc[0], wfc[1] * x2[i] + bfc[1]];
        let m = logits[0].max(logits[1]);
        let z = (logits[0] - m).exp() + (logits[1] - m).exp();
        let p = [(logits[0] - m).exp() / z, (logits[1] - m).exp() / z];
        for c in 0..2 {
            let delta = p[c] - if labels[i] == c { 1.0 } else { 0.0 };
            g[i] += 0.5 * delta * wfc[c];
        }
    }

    // chain through block 2: dx1_j = sum_i g_i * gamma2*inv2*(d_ij - 1/2 - xh_i*xh_j/2) * w2
    let mut d1 = [0.0f64; 2];
    for j in 0..2 {
        for i in 0..2 {
            let kron = if i == j { 1.0 } else { 0.0 };
            d1[j] += g[i] * gamma2 * inv2 * (kron - 0.5 - xh2[i] * xh2[j] / 2.0) * w2;
        }
    }

    let num = (g[0].abs() + g[1].abs()) / 2.0;
    let den1 = (d1[0].abs() + d1[1].abs()) / 2.0;
    let expect_rho1 = num / den1;

    let trace = supervision_ratio(&model, &batch, &labels, Strategy::Plain, 1).unwrap();
    assert_eq!(trace.entries.len(), 2);
    let rho1 = trace.entries[0].1;
    let rho2 = trace.entries[1].1;
    assert_eq!(rho2, 1.0);
    let rel = (rho1 - expect_rho1).abs() / expect_rho1;
    assert!(rel < 1e-9, "rho_1 {rho1} vs hand {expect_rho1}");
}

#[test]
fn measurement_leaves_model_bitwise_untouched() {
    let mut model: Model<f64> = build_model(&config(8, vec![4, 8], 2)).unwrap();
    let (batch, labels) = probe_batch(4, 5, 5);
    // make running stats nontrivial first
    model.forward(&batch, &labels, Mode::Train).unwrap();
    let snapshot = model.clone();
    for strategy in Strategy::ALL {
        supervision_ratio(&model, &batch, &labels, strategy, 1).unwrap();
    }
    assert_eq!(model, snapshot);
}

#[test]
fn ratios_are_deterministic_for_fixed_batch() {
    let model: Model<f64> = build_model(&config(8, vec![4, 8], 3)).unwrap();
    let (batch, labels) = probe_batch(4, 5, 7);
    let a = supervision_ratio(&model, &batch, &labels, Strategy::Multipath, 1).unwrap();
    let b = supervision_ratio(&model, &batch, &labels, Strategy::Multipath, 1).unwrap();
    assert_eq!(a.entries, b.entries);
}

#[test]
fn multipath_ratio_depends_only_on_layers_below_the_head() {
    let mut model: Model<f64> = build_model(&config(8, vec![4, 8], 4)).unwrap();
    let (batch, labels) = probe_batch(4, 5, 9);
    let before = supervision_ratio(&model, &batch, &labels, Strategy::Multipath, 1).unwrap();

    // wreck every block above the first head
    for block in model.blocks[4..].iter_mut() {
        for v in block.conv.weights.data_mut() {
            *v *= 1e6;
        }
    }
    let after = supervision_ratio(&model, &batch, &labels, Strategy::Multipath, 1).unwrap();
    for l in 0..4 {
        assert_eq!(before.entries[l], after.entries[l], "layer {}", l + 1);
    }
    // sanity: layers above the head did change
    assert_ne!(before.entries[5], after.entries[5]);
}

#[test]
fn pairwise_measurement_equals_multipath_measurement() {
    // without inner updates, pairwise fresh forwards see the same features
    let model: Model<f64> = build_model(&config(8, vec![4, 8], 5)).unwrap();
    let (batch, labels) = probe_batch(4, 5, 11);
    let mp = supervision_ratio(&model, &batch, &labels, Strategy::Multipath, 1).unwrap();
    let pw = supervision_ratio(&model, &batch, &labels, Strategy::Pairwise, 1).unwrap();
    assert_eq!(mp.entries, pw.entries);
}

#[test]
fn zero_gradient_layers_are_flagged_not_reported() {
    let mut cfg = config(4, vec![4], 6);
    cfg.lambda = 0.0;
    let mut model: Model<f64> = build_model(&cfg).unwrap();
    // zero fc weights: the head injects an exactly zero gradient everywhere
    for head in &mut model.heads {
        for v in head.fc.weights.data_mut() {
            *v = 0.0;
        }
    }
    let (batch, labels) = probe_batch(4, 5, 13);
    let trace = supervision_ratio(&model, &batch, &labels, Strategy::Plain, 1).unwrap();
    assert!(trace.entries.is_empty());
    assert_eq!(trace.skipped, vec![1, 2, 3, 4]);
}
