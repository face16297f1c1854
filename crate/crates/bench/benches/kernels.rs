use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use vat_core::autodiff::Padding;
use vat_core::bvtd::{heskes_decompose, DistributionVector, MeanPredictor};
use vat_core::data::{gen_shapes_task, SubsetCounts, SyntheticTaskSpec};
use vat_core::rng::{self, Stream};
use vat_core::trainer::{sample_auxiliary, train_step, AuxSample, TrainState, VatModel};
use vat_core::{Method, Tape, Tensor, VatConfig};

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5)
            .collect(),
    )
    .unwrap()
}

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for &(n, c_in, f, side) in &[(32, 1, 8, 16), (32, 8, 16, 8), (32, 16, 32, 4)] {
        let x = ramp(&[n, c_in, side, side]);
        let w = ramp(&[f, c_in, 3, 3]);
        let id = format!("{n}x{c_in}x{side}x{side}->{f}");
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let wv = tape.leaf(w.clone());
                black_box(tape.conv2d(xv, wv, Padding::Same).unwrap())
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let wv = tape.leaf(w.clone());
                let y = tape.conv2d(xv, wv, Padding::Same).unwrap();
                let s = tape.sum(y);
                black_box(tape.backward(s).unwrap())
            })
        });
    }
    group.finish();
}

fn step(c: &mut Criterion) {
    let split = gen_shapes_task(&SyntheticTaskSpec {
        counts: SubsetCounts {
            train: 32,
            val: 8,
            pre: 64,
            test: 8,
        },
        ..SyntheticTaskSpec::default()
    })
    .unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for method in [Method::Baseline, Method::VatEarly, Method::VatLate] {
        let config = VatConfig {
            method,
            lambda: if method.is_vat() { 0.1 } else { 0.0 },
            ..VatConfig::default()
        };
        let model = VatModel::new(config.model.clone(), config.task, method).unwrap();
        let mut state = TrainState::new(model.init_params(0).unwrap(), &config);
        let mut rng = rng::stream(0, Stream::AuxSampling);
        let aux: Vec<AuxSample> = if method.is_vat() {
            (0..split.train.len())
                .map(|i| sample_auxiliary(i, &split.train, &split.pre, &mut rng).unwrap())
                .collect()
        } else {
            Vec::new()
        };
        group.bench_function(method.name(), |b| {
            b.iter(|| {
                black_box(train_step(&model, &mut state, &split.train, &aux, &config).unwrap())
            })
        });
    }
    group.finish();
}

fn heskes(c: &mut Criterion) {
    let ensemble: Vec<DistributionVector> = (0..16)
        .map(|j| {
            DistributionVector::from_weights(
                (0..8)
                    .map(|i| 1.0 + ((i * 7 + j * 3) % 11) as f64)
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let q = DistributionVector::from_weights((1..=8).map(f64::from).collect()).unwrap();
    c.bench_function("heskes_decompose/16x8", |b| {
        b.iter(|| black_box(heskes_decompose(&q, &ensemble, MeanPredictor::Geometric).unwrap()))
    });
}

criterion_group!(benches, conv2d, step, heskes);
criterion_main!(benches);
