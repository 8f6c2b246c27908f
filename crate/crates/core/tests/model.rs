mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparseagg::architecture::{analyze, plan_network, presets, ArchError, Family, NetworkSpec};
use sparseagg::model::{ModelError, Network};
use sparseagg::tensor::{Mode, Tape, Tensor};
use sparseagg::topology::{predecessors, TopologyKind};
use sparseagg::train::Sgd;

fn batch(n: usize, side: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn(
        &[n, 3, side, side],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn small_input(mut spec: NetworkSpec, side: usize) -> NetworkSpec {
    spec.input.height = side;
    spec.input.width = side;
    spec
}

/// Largest number of outputs that are already computed and still awaited by
/// a later consumer, over every point of a single-scope forward pass.
fn oracle_peak_live(kind: TopologyKind, layers: usize) -> usize {
    let consumers: Vec<Vec<usize>> = (1..=layers + 1)
        .map(|d| predecessors(kind, d).unwrap())
        .collect();
    (0..=layers)
        .map(|l| {
            (0..=l)
                .filter(|&j| consumers[l..].iter().any(|srcs| srcs.contains(&j)))
                .count()
        })
        .max()
        .unwrap()
}

fn peak_live(spec: &NetworkSpec, n: usize) -> Vec<usize> {
    let net = Network::<f32>::compile(spec, 0).unwrap();
    let tape = Tape::new();
    let vars = net.bind(&tape, false);
    let side = spec.input.height;
    let pass = net
        .forward_vars(&vars, tape.constant(batch(n, side, 3)), Mode::Eval)
        .unwrap();
    pass.stats.peak_live
}

#[test]
fn parameter_count_matches_analysis() {
    let specs = [
        presets::cifar_concat(TopologyKind::Sparse(2), &[4; 3], &[8; 3], true),
        presets::cifar_concat(TopologyKind::Dense, &[6; 3], &[12; 3], false),
        presets::cifar_sum(TopologyKind::Sparse(2), &[3; 3], &[16, 32, 64]),
        presets::cifar_sum(TopologyKind::Dense, &[3; 3], &[16, 32, 64]),
        presets::imagenet_concat(TopologyKind::Sparse(2), &[2, 2, 2, 2], 8),
    ];
    for spec in specs {
        let net = Network::<f32>::compile(&spec, 0).unwrap();
        let report = analyze(&plan_network(&spec).unwrap()).unwrap();
        assert_eq!(net.param_count(), report.total_params);
    }
}

#[test]
fn resnet_style_sum_network_runs() {
    let spec = small_input(presets::cifar_sum(TopologyKind::Dense, &[3, 3], &[8, 8]), 8);
    assert_eq!(spec.family, Family::Sum);
    let mut net = Network::<f32>::compile(&spec, 1).unwrap();
    let logits = net.forward(&batch(4, 8, 0), Mode::Train).unwrap();
    assert_eq!(logits.shape(), &[4, 10]);
    assert!(logits.is_finite());
}

#[test]
fn fractal_is_rejected() {
    let spec = presets::cifar_concat(TopologyKind::Fractal(2), &[4], &[8], false);
    assert!(matches!(
        Network::<f32>::compile(&spec, 0),
        Err(ModelError::Arch(ArchError::UnsupportedTopology(_)))
    ));
}

#[test]
fn cifar_logits_shape() {
    let spec = presets::cifar_concat(TopologyKind::Sparse(2), &[2; 3], &[4; 3], true);
    let mut net = Network::<f32>::compile(&spec, 0).unwrap();
    assert_eq!(
        net.forward(&batch(8, 32, 0), Mode::Train).unwrap().shape(),
        &[8, 10]
    );
}

#[test]
fn dense_width_schedule_in_compiled_weights() {
    let spec = presets::cifar_concat(TopologyKind::Dense, &[12], &[12], false);
    let net = Network::<f32>::compile(&spec, 0).unwrap();
    for l in 1..=12 {
        let gamma = net.param(&format!("block1.layer{l}.bn0.gamma")).unwrap();
        assert_eq!(gamma.shape(), &[16 + 12 * (l - 1)]);
        let w = net.param(&format!("block1.layer{l}.conv0.weight")).unwrap();
        assert_eq!(w.shape(), &[12, 16 + 12 * (l - 1), 3, 3]);
    }
}

#[test]
fn full_network_gradients_match_finite_differences() {
    for seed in 0..3 {
        let report = common::model_gradcheck(seed, 12);
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn zero_step_leaves_parameters_unchanged() {
    let spec = presets::cifar_concat(TopologyKind::Sparse(2), &[2, 2], &[4, 4], true);
    let mut net = Network::<f32>::compile(&spec, 4).unwrap();
    let before = net.params().clone();
    let out = net
        .compute_gradients(&batch(4, 32, 1), &[1, 2, 3, 4])
        .unwrap();
    let mut sgd = Sgd::new(0.9, true, 0.0, true);
    sgd.step(&mut net, &out.grads, 0.0);
    assert_eq!(net.params(), &before);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let spec = presets::cifar_concat(TopologyKind::Sparse(2), &[2, 2], &[4, 4], true);
    let mut net = Network::<f32>::compile(&spec, 9).unwrap();
    // move running statistics away from their initial values
    net.forward(&batch(6, 32, 2), Mode::Train).unwrap();
    net.epoch = 7;
    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path()).unwrap();
    let loaded = Network::<f32>::load(dir.path(), &spec).unwrap();
    let x = batch(5, 32, 3);
    assert_eq!(loaded.predict(&x).unwrap(), net.predict(&x).unwrap());
    assert_eq!(loaded.epoch, 7);
    assert_eq!(loaded.bn_stats(), net.bn_stats());

    let other = presets::cifar_concat(TopologyKind::Dense, &[2, 2], &[4, 4], true);
    assert!(matches!(
        Network::<f32>::load(dir.path(), &other),
        Err(ModelError::HashMismatch { .. })
    ));
}

#[test]
fn gradients_reach_the_earliest_layer() {
    for kind in [TopologyKind::Sparse(2), TopologyKind::Dense] {
        let spec = presets::cifar_concat(kind, &[16], &[4], false);
        let mut net = Network::<f32>::compile(&spec, 5).unwrap();
        let labels: Vec<usize> = (0..8).collect();
        let out = net.compute_gradients(&batch(8, 32, 4), &labels).unwrap();
        for (name, g) in out
            .grads
            .iter()
            .filter(|(n, _)| n.starts_with("block1.layer1."))
        {
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{kind}: {name} has zero gradient"
            );
        }
    }
}

#[test]
fn cached_outputs_match_future_references() {
    for kind in [
        TopologyKind::Sparse(2),
        TopologyKind::Sparse(3),
        TopologyKind::Dense,
        TopologyKind::Plain,
    ] {
        for layers in [1usize, 5, 16, 33] {
            let spec = small_input(presets::cifar_concat(kind, &[layers], &[1], false), 4);
            assert_eq!(
                peak_live(&spec, 1),
                vec![oracle_peak_live(kind, layers)],
                "{kind} L={layers}"
            );
        }
    }
}

#[test]
fn cache_peaks_for_sparse_and_dense() {
    // Sparse(2): every output up to the midpoint still has a reader ahead,
    // so the peak is L/2 + 2; Dense holds all L + 1 outputs for the exit
    for l in [16usize, 32, 64, 128] {
        let peak = |kind| {
            peak_live(
                &small_input(presets::cifar_concat(kind, &[l], &[1], false), 4),
                1,
            )[0]
        };
        assert_eq!(peak(TopologyKind::Sparse(2)), l / 2 + 2, "L={l}");
        assert_eq!(peak(TopologyKind::Dense), l + 1, "L={l}");
    }
}

#[test]
fn sum_network_cache_spans_blocks() {
    let spec = small_input(
        presets::cifar_sum(TopologyKind::Sparse(2), &[3, 3], &[4, 8]),
        8,
    );
    assert_eq!(
        peak_live(&spec, 2),
        vec![oracle_peak_live(TopologyKind::Sparse(2), 6)]
    );
}

#[test]
fn eval_is_pure() {
    let spec = presets::cifar_concat(TopologyKind::Sparse(2), &[2, 2], &[4, 4], false);
    let net = Network::<f32>::compile(&spec, 3).unwrap();
    let stats = net.bn_stats().clone();
    let x = batch(3, 32, 8);
    let a = net.predict(&x).unwrap();
    assert_eq!(a, net.predict(&x).unwrap());
    assert_eq!(net.bn_stats(), &stats);
    // a per-image function: batch composition does not matter in eval mode
    let first = Tensor::new(vec![1, 3, 32, 32], x.data()[..3 * 32 * 32].to_vec()).unwrap();
    let single = net.predict(&first).unwrap();
    for (p, q) in single.data().iter().zip(&a.data()[..10]) {
        assert!((p - q).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn large_base_sparse_equals_plain(
        layers in prop::collection::vec(1usize..5, 1..3),
        extra in 2usize..6,
        seed in any::<u64>(),
    ) {
        let depth = *layers.iter().max().unwrap();
        let growth = vec![4; layers.len()];
        let build = |kind| small_input(presets::cifar_concat(kind, &layers, &growth, false), 8);
        let sparse = Network::<f32>::compile(&build(TopologyKind::Sparse(depth + extra)), seed).unwrap();
        let plain = Network::<f32>::compile(&build(TopologyKind::Plain), seed).unwrap();
        let x = batch(2, 8, seed);
        prop_assert_eq!(sparse.predict(&x).unwrap(), plain.predict(&x).unwrap());
    }
}
