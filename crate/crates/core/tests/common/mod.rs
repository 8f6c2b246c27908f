#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseagg::architecture::{presets, NetworkSpec};
use sparseagg::model::Network;
use sparseagg::tensor::{
    aggregate, aggregate_tensors, check_gradients, check_gradients_with, conv2d, AggregateOp,
    GradCheckConfig, GradCheckReport, Mode, RunningStats, Tensor, TensorError,
};
use sparseagg::topology::TopologyKind;
use sparseagg::train::{
    CIFAR_CLASSES, CIFAR_FILE_BYTES, CIFAR_RECORD, CIFAR_RECORDS_PER_FILE, CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
};

/// Deterministic 32x32 RGB image for `class`: a class-specific colour and
/// horizontal or vertical stripes plus pixel noise. Both cues survive a
/// horizontal flip.
pub fn synthetic_image(class: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * 32 * 32);
    let (s, c) = if class % 2 == 0 {
        (0.0, 1.0)
    } else {
        (1.0, 0.0)
    };
    let freq = 0.35 + 0.05 * (class % 3) as f64;
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for ch in 0..3 {
        let base = 60.0 + 40.0 * (((class + ch * 3) % 5) as f64);
        for y in 0..32 {
            for x in 0..32 {
                let t = (x as f64 * c + y as f64 * s) * freq + phase;
                let noise: f64 = rng.random_range(-40.0..40.0);
                let v = base + 50.0 * t.sin() + noise;
                out.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Bytes of one CIFAR-10 batch file with labels cycling through the classes.
pub fn synthetic_batch_file(seed: u64, records: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(records * CIFAR_RECORD);
    for r in 0..records {
        let class = (r * 7 + seed as usize) % CIFAR_CLASSES;
        bytes.push(class as u8);
        bytes.extend(synthetic_image(class, &mut rng));
    }
    bytes
}

/// Writes a complete synthetic CIFAR-10 binary directory.
pub fn write_synthetic_cifar(dir: &Path) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    for (i, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let bytes = synthetic_batch_file(i as u64 + 1, CIFAR_RECORDS_PER_FILE);
        assert_eq!(bytes.len(), CIFAR_FILE_BYTES);
        fs::write(dir.join(name), bytes).unwrap();
    }
    fs::write(
        dir.join(CIFAR_TEST_FILE),
        synthetic_batch_file(99, CIFAR_RECORDS_PER_FILE),
    )
    .unwrap();
    dir.to_path_buf()
}

/// Two blocks of two concat layers, growth 4, on 8x8 inputs.
pub fn tiny_gradcheck_spec() -> NetworkSpec {
    let mut spec = presets::cifar_concat(TopologyKind::Sparse(2), &[2, 2], &[4, 4], false);
    spec.input.height = 8;
    spec.input.width = 8;
    spec
}

/// Finite-difference check of every parameter of the tiny network, in 64-bit,
/// with batch-norm affine parameters and inputs drawn from `seed`. The step is
/// below the default so that differences rarely straddle a ReLU kink.
pub fn model_gradcheck(seed: u64, per_tensor: usize) -> GradCheckReport {
    let spec = tiny_gradcheck_spec();
    let mut net = Network::<f64>::compile(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = net.params().keys().cloned().collect();
    for name in &names {
        let shape = net.param(name).unwrap().shape().to_vec();
        if name.ends_with(".gamma") {
            net.set_param(name, Tensor::uniform(&shape, 0.5, 1.5, &mut rng))
                .unwrap();
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            net.set_param(name, Tensor::randn(&shape, 0.2, &mut rng))
                .unwrap();
        }
    }
    let batch = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..10)).collect();
    let params: Vec<Tensor<f64>> = net.params().values().cloned().collect();
    let config = GradCheckConfig {
        tolerance: 1e-4,
        step: 1e-6,
        max_per_input: Some(per_tensor),
        seed,
        ..GradCheckConfig::new(1e-4)
    };
    check_gradients_with(
        |tape, vars| {
            let bound = net.bind_vars(vars);
            let pass = net
                .forward_vars(&bound, tape.constant(batch.clone()), Mode::Train)
                .map_err(|e| TensorError::InvalidArgument {
                    op: "forward",
                    message: e.to_string(),
                })?;
            pass.logits.softmax_cross_entropy(&labels)
        },
        &params,
        &config,
    )
    .unwrap()
}

/// Finite-difference checks of every differentiable tensor op on shapes
/// drawn from `seed`. Each op is reduced to a scalar through a random
/// projection so that every output coordinate contributes.
pub fn op_gradchecks(seed: u64, tolerance: f64) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, report: Result<GradCheckReport, TensorError>| {
        out.push((name, report.unwrap()));
    };

    let (n, c, o) = (
        r.random_range(1..3),
        r.random_range(1..4),
        r.random_range(1..4),
    );
    let k = [1usize, 2, 3][r.random_range(0..3)];
    let stride = r.random_range(1..3);
    let padding = r.random_range(0..=k / 2);
    let side = r.random_range(k.max(3)..7);
    let x = Tensor::randn(&[n, c, side, side], 1.0, &mut r);
    let w = Tensor::randn(&[o, c, k, k], 1.0, &mut r);
    let y = conv2d(&x, &w, stride, padding).unwrap();
    let p = Tensor::randn(y.shape(), 1.0, &mut r);
    check(
        "conv2d",
        check_gradients(
            |_, v| v[0].conv2d(v[1], stride, padding)?.weighted_sum(&p),
            &[x, w],
            tolerance,
        ),
    );

    let (n, c, h) = (
        r.random_range(2..4),
        r.random_range(1..4),
        r.random_range(2..5),
    );
    let x = Tensor::randn(&[n, c, h, h], 1.0, &mut r);
    let gamma = Tensor::uniform(&[c], 0.5, 1.5, &mut r);
    let beta = Tensor::randn(&[c], 1.0, &mut r);
    let p = Tensor::randn(&[n, c, h, h], 1.0, &mut r);
    let mut stats = RunningStats::<f64>::new(c);
    stats.mean = Tensor::randn(&[c], 0.5, &mut r);
    stats.var = Tensor::uniform(&[c], 0.5, 2.0, &mut r);
    stats.updates = 1;
    for (name, mode) in [
        ("batch_norm (train)", Mode::Train),
        ("batch_norm (eval)", Mode::Eval),
    ] {
        check(
            name,
            check_gradients(
                |_, v| {
                    v[0].batch_norm(v[1], v[2], &stats, mode)?
                        .0
                        .weighted_sum(&p)
                },
                &[x.clone(), gamma.clone(), beta.clone()],
                tolerance,
            ),
        );
    }

    let (n, c) = (r.random_range(1..3), r.random_range(1..4));
    let side = 2 * r.random_range(2..4);
    let x = Tensor::randn(&[n, c, side, side], 1.0, &mut r);
    let p = Tensor::randn(x.shape(), 1.0, &mut r);
    check(
        "relu",
        check_gradients(|_, v| v[0].relu().weighted_sum(&p), &[x.clone()], tolerance),
    );
    let p = Tensor::randn(&[n, c, side / 2, side / 2], 1.0, &mut r);
    check(
        "avg_pool2d",
        check_gradients(
            |_, v| v[0].avg_pool2d(2, 2)?.weighted_sum(&p),
            &[x.clone()],
            tolerance,
        ),
    );
    let pooled = (side + 2 - 3) / 2 + 1;
    let p = Tensor::randn(&[n, c, pooled, pooled], 1.0, &mut r);
    check(
        "max_pool2d",
        check_gradients(
            |_, v| v[0].max_pool2d(3, 2, 1)?.weighted_sum(&p),
            &[x.clone()],
            tolerance,
        ),
    );
    let p = Tensor::randn(&[n, c], 1.0, &mut r);
    check(
        "global_avg_pool",
        check_gradients(
            |_, v| v[0].global_avg_pool()?.weighted_sum(&p),
            &[x.clone()],
            tolerance,
        ),
    );
    let y = Tensor::randn(x.shape(), 1.0, &mut r);
    check(
        "mul, scale and sum",
        check_gradients(
            |_, v| Ok(v[0].mul(v[1])?.scale(0.7).sum()),
            &[x, y],
            tolerance,
        ),
    );

    let (n, i, o) = (
        r.random_range(1..5),
        r.random_range(1..6),
        r.random_range(2..6),
    );
    let x = Tensor::randn(&[n, i], 1.0, &mut r);
    let w = Tensor::randn(&[o, i], 1.0, &mut r);
    let b = Tensor::randn(&[o], 1.0, &mut r);
    let p = Tensor::randn(&[n, o], 1.0, &mut r);
    check(
        "linear",
        check_gradients(
            |_, v| v[0].linear(v[1], Some(v[2]))?.weighted_sum(&p),
            &[x.clone(), w.clone(), b],
            tolerance,
        ),
    );
    check(
        "linear (no bias)",
        check_gradients(
            |_, v| v[0].linear(v[1], None)?.weighted_sum(&p),
            &[x, w],
            tolerance,
        ),
    );
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..o)).collect();
    let logits = Tensor::randn(&[n, o], 2.0, &mut r);
    check(
        "softmax_cross_entropy",
        check_gradients(
            |_, v| v[0].softmax_cross_entropy(&labels),
            &[logits],
            tolerance,
        ),
    );

    let (n, h) = (r.random_range(1..3), r.random_range(1..4));
    let count = r.random_range(1..4);
    for (name, op) in [
        ("aggregate (sum)", AggregateOp::Sum),
        ("aggregate (average)", AggregateOp::Average),
        ("aggregate (concat)", AggregateOp::Concat),
    ] {
        let inputs: Vec<Tensor<f64>> = (0..count)
            .map(|_| {
                let c = if op == AggregateOp::Concat {
                    r.random_range(1..4)
                } else {
                    2
                };
                Tensor::randn(&[n, c, h, h], 1.0, &mut r)
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        let joined = aggregate_tensors(op, &refs).unwrap();
        let p = Tensor::randn(joined.shape(), 1.0, &mut r);
        check(
            name,
            check_gradients(
                |_, v| aggregate(op, v)?.weighted_sum(&p),
                &inputs,
                tolerance,
            ),
        );
    }
    out
}

/// Moves whole input-channel slices of `kernel` into the order `perm`.
pub fn permute_slices(kernel: &Tensor<f64>, widths: &[usize], perm: &[usize]) -> Tensor<f64> {
    let (o, c, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let starts: Vec<usize> = widths
        .iter()
        .scan(0, |acc, &w| {
            let s = *acc;
            *acc += w;
            Some(s)
        })
        .collect();
    let taps = kh * kw;
    let mut data = Vec::with_capacity(kernel.len());
    for oi in 0..o {
        for &src in perm {
            let base = (oi * c + starts[src]) * taps;
            data.extend_from_slice(&kernel.data()[base..base + widths[src] * taps]);
        }
    }
    Tensor::new(kernel.shape().to_vec(), data).unwrap()
}
