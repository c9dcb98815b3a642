use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hsic_bench::{inputs, labels, network};
use hsic_core::losses::{joint_loss_from_trace, RunningCenters};
use hsic_core::Mode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

const BANDS: usize = 103;
const CLASSES: usize = 9;

fn forward_backward(c: &mut Criterion) {
    let net = network(BANDS, CLASSES);
    let mut group = c.benchmark_group("network");
    for batch in [64, 512] {
        let x = inputs(batch, BANDS, 1);
        let y = labels(batch, CLASSES);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trace = net.forward(x.view(), Mode::Train(&mut rng)).unwrap();
        let mut centers = RunningCenters::new(CLASSES, 32, 0.5).unwrap();
        centers.initialize_missing(trace.features().view(), &y).unwrap();
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(BenchmarkId::new("forward", batch), &x, |b, x| {
            b.iter(|| net.forward(black_box(x.view()), Mode::Train(&mut rng)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", batch), &x, |b, x| {
            b.iter(|| {
                let trace = net.forward(black_box(x.view()), Mode::Train(&mut rng)).unwrap();
                let loss = joint_loss_from_trace(&trace, &y, &centers, 0.01).unwrap();
                net.backward(&trace, loss.d_logits.view(), loss.d_features.view())
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
