use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use fedlatent::aggregation::{self, ServerStrategyState};
use fedlatent::nn::{self, Activation, Batch};
use fedlatent::normalization::AggregationWeights;
use fedlatent::{ClientUpdate, MeanLatent, ModelSpec, ParameterVector, StrategyConfig, StrategyKind};

fn bench_loss_and_grad(c: &mut Criterion) {
    let spec = ModelSpec::new(vec![32, 128, 10], Activation::Relu).unwrap();
    let params = nn::init_model(&spec, 1);
    let inputs = Array2::from_shape_fn((64, 32), |(i, j)| ((i * 7 + j * 13) % 23) as f64 / 23.0 - 0.5);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let batch = Batch::new(inputs.view(), &labels).unwrap();
    c.bench_function("loss_and_grad/32-128-10/batch64", |b| {
        b.iter(|| nn::loss_and_grad(black_box(&params), black_box(&batch), None).unwrap())
    });
    c.bench_function("mean_latent/32-128-10/rows64", |b| {
        b.iter(|| nn::mean_latent(black_box(&params), inputs.view()).unwrap())
    });
}

fn bench_aggregate(c: &mut Criterion) {
    let spec = ModelSpec::new(vec![32, 128, 10], Activation::Relu).unwrap();
    let global = nn::init_model(&spec, 1);
    let updates: Vec<ClientUpdate> = (0..10)
        .map(|id| ClientUpdate {
            client_id: id,
            weights: ParameterVector::from_values(
                spec.clone(),
                global.values().iter().map(|w| w + id as f64 * 1e-3).collect(),
            )
            .unwrap(),
            latent: MeanLatent::new(id, vec![1.0; 128]).unwrap(),
            samples: 400,
            local_steps: 14,
            cv_delta: None,
        })
        .collect();
    let u = AggregationWeights::new(vec![0.1; 10]).unwrap();
    for kind in [StrategyKind::FedAvg, StrategyKind::Sgdm, StrategyKind::FedNova] {
        let cfg = StrategyConfig::new(kind);
        let mut state = ServerStrategyState::new(&cfg, &global, 10).unwrap();
        c.bench_function(&format!("aggregate/{kind}/10-clients"), |b| {
            b.iter(|| aggregation::aggregate(black_box(&global), &updates, &u, &cfg, &mut state).unwrap())
        });
    }
}

criterion_group!(benches, bench_loss_and_grad, bench_aggregate);
criterion_main!(benches);
