//! Kernel and step benchmarks comparing the data-parallel path against a
//! single-thread baseline.
//!
//! With the default `parallel` feature the "parallel" groups run over the
//! global rayon pool and the "single-thread" groups pin a one-thread pool;
//! building with `--no-default-features` benches the sequential fallback in
//! both groups.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use auxnet::model::{build_model, Mode, ModelConfig};
use auxnet::ops::{conv2d_backward, conv2d_forward, Conv2dParams};
use auxnet::tensor::Tensor;
use auxnet::train::{step_multipath, step_plain, HeadOrder, Optimizer, OptimizerConfig};

fn conv_setup() -> (Tensor<f32>, Conv2dParams<f32>) {
    let input = Tensor::filled(vec![64, 8, 8, 8], 0.5f32);
    let params = Conv2dParams {
        weights: Tensor::filled(vec![8, 8, 3, 3], 0.01f32),
        bias: Tensor::zeros(vec![8]),
        stride: 1,
        padding: 1,
    };
    (input, params)
}

fn run_in_pool<R>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    match threads {
        None => f(),
        Some(n) => {
            #[cfg(feature = "parallel")]
            {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("pool")
                    .install(f)
            }
            #[cfg(not(feature = "parallel"))]
            {
                let _ = n;
                f()
            }
        }
    }
}

fn bench_conv(c: &mut Criterion) {
    let (input, params) = conv_setup();
    let out = conv2d_forward(&input, &params).unwrap();
    let mut group = c.benchmark_group("conv2d_forward");
    group.bench_function("parallel", |b| {
        b.iter(|| run_in_pool(None, || conv2d_forward(&input, &params).unwrap()))
    });
    group.bench_function("single-thread", |b| {
        b.iter(|| run_in_pool(Some(1), || conv2d_forward(&input, &params).unwrap()))
    });
    group.finish();

    let mut group = c.benchmark_group("conv2d_backward");
    group.bench_function("parallel", |b| {
        b.iter(|| run_in_pool(None, || conv2d_backward(&input, &params, &out).unwrap()))
    });
    group.bench_function("single-thread", |b| {
        b.iter(|| run_in_pool(Some(1), || conv2d_backward(&input, &params, &out).unwrap()))
    });
    group.finish();
}

fn desk_model() -> (auxnet::Model<f32>, Tensor<f32>, Vec<usize>) {
    let config = ModelConfig {
        depth: 20,
        stage_channels: vec![4, 8],
        stage_blocks: None,
        lambda: 1.0,
        head_positions: vec![13, 17, 20],
        nu: 2.0,
        num_classes: 2,
        in_channels: 1,
        activation_ordering: Default::default(),
        identity_activation: false,
        min_head_position: 10,
        seed: 7,
    };
    let model = build_model::<f32>(&config).unwrap();
    let batch = Tensor::filled(vec![64, 1, 8, 8], 0.25f32);
    let labels = (0..64).map(|i| i % 2).collect();
    (model, batch, labels)
}

fn bench_steps(c: &mut Criterion) {
    let (model, batch, labels) = desk_model();
    {
        let mut m = model.clone();
        m.forward(&batch, &labels, Mode::Train).unwrap();
    }

    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    group.bench_function("plain", |b| {
        b.iter_batched(
            || {
                let m = model.clone();
                let opt = Optimizer::new(&m, OptimizerConfig::default()).unwrap();
                (m, opt)
            },
            |(mut m, mut opt)| step_plain(&mut m, &mut opt, &batch, &labels, 0.01).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("multipath", |b| {
        b.iter_batched(
            || {
                let m = model.clone();
                let opt = Optimizer::new(&m, OptimizerConfig::default()).unwrap();
                (m, opt)
            },
            |(mut m, mut opt)| {
                step_multipath(
                    &mut m,
                    &mut opt,
                    &batch,
                    &labels,
                    0.01,
                    HeadOrder::ShallowFirst,
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_steps);
criterion_main!(benches);
