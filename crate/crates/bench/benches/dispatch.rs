use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ridepool::assign::{solve, AssignmentInstance, SolveOptions};
use ridepool::demand::DelayLimits;
use ridepool::feasibility::{assignable_by_vehicle, generate_feasible_set, prune_candidates, GenerationMode};
use ridepool::roadnet::{train_embeddings, EmbeddingConfig, LocationId, RoadNetwork};
use ridepool::sim::{Dispatcher, Policy, Purpose, RunConfig};
use ridepool::valuefn::{FeatureScales, NetShape, StateFeatures, StopFeature, ValueNetParams};
use ridepool::verify::random_assignment_instance;
use ridepool::{VehicleId, VehicleState};
use ridepool_bench::{requests, warmed_epoch};

fn shortest_paths(c: &mut Criterion) {
    let mut g = c.benchmark_group("all-pairs");
    for side in [10usize, 20] {
        g.bench_function(format!("grid {side}x{side}"), |b| {
            b.iter(|| RoadNetwork::grid(black_box(side), side, 60.0).unwrap())
        });
    }
    g.finish();
}

fn feasibility(c: &mut Criterion) {
    let net = RoadNetwork::grid(10, 10, 60.0).unwrap();
    let limits = DelayLimits::with_default_detour(300.0);
    let reqs = requests(&net, 8, 0, limits, 1);
    let refs: Vec<_> = reqs.iter().collect();
    let idle = VehicleState::idle(VehicleId(0), 4, LocationId(44), 0.0);
    c.bench_function("feasible set: idle vehicle, 8 requests", |b| {
        b.iter(|| generate_feasible_set(black_box(&idle), &refs, &net, 150, GenerationMode::Insertion))
    });

    let (sc, vehicles, batch) = warmed_epoch(RunConfig::default(), 60);
    c.bench_function("feasible sets: desk fleet at peak", |b| {
        b.iter(|| {
            let cands = prune_candidates(&batch.requests, &vehicles, &sc.net, 30);
            let by_vehicle = assignable_by_vehicle(&batch.requests, &cands);
            vehicles
                .iter()
                .map(|v| {
                    let reqs = by_vehicle.get(&v.id).map(Vec::as_slice).unwrap_or(&[]);
                    generate_feasible_set(v, reqs, &sc.net, 150, GenerationMode::Insertion).0.len()
                })
                .sum::<usize>()
        })
    });
}

fn assignment(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let small: Vec<AssignmentInstance> = (0..50).map(|_| random_assignment_instance(&mut rng, 5, 6, 8)).collect();
    c.bench_function("solve: 50 random 5x6 instances", |b| {
        b.iter(|| small.iter().map(|i| solve(i, &SolveOptions::default()).unwrap().objective).sum::<f64>())
    });

    let (sc, vehicles, batch) = warmed_epoch(RunConfig::default(), 60);
    let cands = prune_candidates(&batch.requests, &vehicles, &sc.net, 30);
    let by_vehicle = assignable_by_vehicle(&batch.requests, &cands);
    let sets: Vec<_> = vehicles
        .iter()
        .map(|v| {
            let reqs = by_vehicle.get(&v.id).map(Vec::as_slice).unwrap_or(&[]);
            generate_feasible_set(v, reqs, &sc.net, 150, GenerationMode::Insertion).0
        })
        .collect();
    let scores: Vec<Vec<f64>> = sets
        .iter()
        .map(|s| s.actions.iter().map(|a| a.immediate_reward).collect())
        .collect();
    let inst = AssignmentInstance::from_sets(&sets, &scores).unwrap();
    c.bench_function("solve: desk fleet at peak", |b| {
        b.iter(|| solve(black_box(&inst), &SolveOptions::default()).unwrap())
    });
}

fn value(c: &mut Criterion) {
    let net = RoadNetwork::grid(10, 10, 60.0).unwrap();
    let (emb, _) = train_embeddings(
        &net,
        &EmbeddingConfig {
            steps: 10,
            ..Default::default()
        },
    )
    .unwrap();
    let params = ValueNetParams::random(NetShape::default(), FeatureScales::default(), Arc::new(emb), 5).unwrap();
    let feats = StateFeatures {
        stops: (0..8)
            .map(|k| StopFeature {
                location: LocationId(k * 11),
                remaining_delay: 60.0 * k as f64,
            })
            .collect(),
        current: LocationId(0),
        epoch_scalar: 0.5,
        nearby_vehicles: 4,
        batch_requests: 6,
    };
    c.bench_function("value: 8-stop route, default network", |b| {
        b.iter(|| params.value(black_box(&feats)).unwrap())
    });
}

fn epoch(c: &mut Criterion) {
    let (sc, vehicles, batch) = warmed_epoch(RunConfig::default(), 60);
    c.bench_function("epoch: myopic dispatch at peak", |b| {
        b.iter_batched(
            || Dispatcher::new(&sc, Purpose::Evaluation, 0).unwrap(),
            |mut d| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                d.run_epoch(&vehicles, &batch, Policy::Myopic, &mut rng, false).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, shortest_paths, feasibility, assignment, value, epoch);
criterion_main!(benches);
