use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use idd_core::config::TrainConfig;
use idd_core::nn::{Conv3x3, Tensor};
use idd_core::train::{Dataset, Trainer};
use idd_core::{guided_filter, synth, Generator, GuidedFilterParams, ModelConfig};

fn bench_guided_filter(c: &mut Criterion) {
    let img = synth::content_image(256, 256, 1).unwrap();
    let params = GuidedFilterParams::new(4, 1e-2).unwrap();
    c.bench_function("guided_filter_256", |b| {
        b.iter(|| guided_filter(black_box(&img), black_box(&img), &params).unwrap())
    });
}

fn bench_conv(c: &mut Criterion) {
    let conv = Conv3x3 { cin: 32, cout: 32 };
    let input = Tensor {
        c: 32,
        h: 96,
        w: 96,
        data: (0..32 * 96 * 96).map(|i| (i % 17) as f64 / 17.0).collect(),
    };
    let w: Vec<f64> = (0..conv.weight_len())
        .map(|i| ((i % 7) as f64 - 3.0) * 0.01)
        .collect();
    let bias = vec![0.0; 32];
    c.bench_function("conv3x3_32x32_96", |b| {
        b.iter(|| conv.forward(black_box(&input), &w, &bias).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let g = Generator::init(ModelConfig::default(), 0).unwrap();
    let img = synth::content_image(96, 96, 2).unwrap();
    c.bench_function("generator_forward_dual_96", |b| {
        b.iter(|| g.forward_dual(black_box(&img)).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let images = (0..4)
        .map(|i| synth::content_image(96, 96, i).unwrap())
        .collect();
    let config = TrainConfig {
        style_image: "unused.png".into(),
        content_dir: "unused".into(),
        image_size: 96,
        ..TrainConfig::default()
    };
    let style = synth::style_image(192, 192, 0).unwrap();
    let trainer =
        Trainer::with_data(config, Dataset::from_images(images, 96).unwrap(), &style).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("modeling_batch4_96", |b| {
        b.iter_batched(
            || trainer.initial_state().unwrap(),
            |mut s| {
                let batch = trainer.batch(0).unwrap();
                trainer.train_step(&mut s, &batch).unwrap()
            },
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_guided_filter,
    bench_conv,
    bench_forward,
    bench_train_step
);
criterion_main!(benches);
