use std::hint::black_box;

use adaptnet::data::DatasetId;
use adaptnet::harness::{ExperimentConfig, Preset};
use adaptnet::model::{build_cae_from_cnn, init_params, loss_and_grad, Batch};
use adaptnet::optim::OptimState;
use adaptnet::tensor::{self, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};

fn wave(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| (i as f64 * 0.37 + phase).sin() * 0.5 + 0.5)
}

fn kernels(c: &mut Criterion) {
    let image = wave(&[1, 28, 28], 0.0);
    let filters = wave(&[32, 1, 5, 5], 1.0);
    c.bench_function("conv2d_valid 1x28x28 * 32x5x5", |b| {
        b.iter(|| tensor::conv2d_valid(black_box(&image), black_box(&filters), None).unwrap())
    });
    let maps = tensor::conv2d_valid(&image, &filters, None).unwrap();
    c.bench_function("conv2d_full 32x24x24 * 1x5x5", |b| {
        let flipped = tensor::swap_kernel_io(&tensor::flip2(&filters).unwrap()).unwrap();
        b.iter(|| tensor::conv2d_full(black_box(&maps), black_box(&flipped), None).unwrap())
    });
    c.bench_function("maxpool2d 32x24x24 by 2x2", |b| {
        b.iter(|| tensor::maxpool2d(black_box(&maps), (2, 2)).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let config = ExperimentConfig::preset(DatasetId::Mnist, Preset::Desk);
    let cnn = config.classifier_spec(&[1, 28, 28], 5).unwrap();
    let cae = build_cae_from_cnn(&cnn).unwrap();
    let inputs: Vec<Tensor> = (0..config.batch_size)
        .map(|i| wave(&[1, 28, 28], i as f64))
        .collect();
    let labels: Vec<usize> = (0..inputs.len()).map(|i| i % 5).collect();
    for (name, spec) in [("CL", &cnn), ("AE", &cae)] {
        let params = init_params(spec, 1).unwrap();
        let batch = Batch::new(inputs.iter().collect(), labels.clone()).unwrap();
        c.bench_function(
            &format!("desk MNIST {name} step, batch {}", inputs.len()),
            |b| {
                let mut theta = params.clone();
                let mut state = OptimState::new(config.hyper(), &theta);
                let mut rng = rand::rngs::mock::StepRng::new(1, 0x9e37_79b9_7f4a_7c15);
                b.iter(|| {
                    let (_, grads) = loss_and_grad(spec, &theta, &batch, None, &mut rng).unwrap();
                    state.step(&mut theta, &grads).unwrap();
                })
            },
        );
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels, training_step
}
criterion_main!(benches);
