use criterion::{criterion_group, criterion_main, Criterion};
use emra_core::data::{gen_synthetic, image_to_tensor, SyntheticSpec};
use emra_core::model::{InferOptions, Model, ModelConfig, Variant};
use std::hint::black_box;

fn passes(c: &mut Criterion) {
    let sample = gen_synthetic(&SyntheticSpec { count: 1, image_size: 32, ..SyntheticSpec::default() })
        .unwrap()
        .pop()
        .unwrap();
    let image = image_to_tensor::<f32>(&sample.image);
    for variant in Variant::ALL {
        let model = Model::<f32>::new(ModelConfig::new(ModelConfig::tiny().encoder, variant), 0).unwrap();
        c.bench_function(&format!("forward+backward {variant}"), |bench| {
            bench.iter(|| model.loss_and_grads(black_box(&image), &sample.labels).unwrap())
        });
    }
}

fn sliding_window(c: &mut Criterion) {
    let sample = gen_synthetic(&SyntheticSpec { count: 1, image_size: 96, ..SyntheticSpec::default() })
        .unwrap()
        .pop()
        .unwrap();
    let image = image_to_tensor::<f32>(&sample.image);
    let model = Model::<f32>::new(ModelConfig::tiny(), 0).unwrap();
    let mut group = c.benchmark_group("infer 96x96");
    group.sample_size(10);
    group.bench_function("single scale", |bench| bench.iter(|| model.infer(black_box(&image), &InferOptions::default()).unwrap()));
    let multi = InferOptions { scales: vec![0.75, 1.0, 1.25], flip: true, ..InferOptions::default() };
    group.bench_function("three scales + flip", |bench| bench.iter(|| model.infer(black_box(&image), &multi).unwrap()));
    group.finish();
}

criterion_group!(benches, passes, sliding_window);
criterion_main!(benches);
