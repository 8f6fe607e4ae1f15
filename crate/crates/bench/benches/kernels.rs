use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switchdit::matching::{assignment_cost, hungarian};
use switchdit::network::params::Binder;
use switchdit::network::{ForwardOptions, ModelConfig, Network};
use switchdit::prior::{BinaryMap, PriorMask};
use switchdit::trainer::{TrainConfig, Trainer};
use switchdit::{Graph, Tensor};

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prior = PriorMask::build(12, 3, 2, 250, 4.0).unwrap();
    let bits: Vec<Vec<u8>> = (0..250).map(|_| (0..36).map(|_| rng.gen_range(0..2)).collect()).collect();
    let gate = BinaryMap::from_rows(&bits).unwrap();
    c.bench_function("assignment_cost 250x36", |b| {
        b.iter(|| assignment_cost(black_box(&gate), prior.map()).unwrap())
    });
    let cost = assignment_cost(&gate, prior.map()).unwrap();
    c.bench_function("hungarian 36x36", |b| b.iter(|| hungarian(black_box(&cost)).unwrap()));
}

fn forward(c: &mut Criterion) {
    let net = Network::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = net.init_params(&mut rng);
    let batch = 32;
    let x = Tensor::new(vec![batch, 256], (0..batch * 256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let t: Vec<usize> = (0..batch).map(|i| 1 + i * 3).collect();
    c.bench_function("forward 4x64 batch 32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store, false);
            let xv = g.constant(x.clone());
            let out = net.forward(&mut g, &mut binder, xv, &t, None, ForwardOptions::default()).unwrap();
            black_box(g.value(out.eps).data()[0])
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    let base = Trainer::new(TrainConfig::default()).unwrap();
    group.bench_function("default config", |b| {
        b.iter_batched(|| base.clone(), |mut tr| tr.train_step().unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, matching, forward, train_step);
criterion_main!(benches);
