//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ridepool::demand::{DelayLimits, EpochBatch, Request, RequestId};
use ridepool::roadnet::{LocationId, RoadNetwork};
use ridepool::sim::{Dispatcher, Policy, Purpose, RunConfig, Scenario};
use ridepool::VehicleState;

/// `n` requests with distinct random endpoints, all arriving in `epoch`.
pub fn requests(net: &RoadNetwork, n: usize, epoch: u32, limits: DelayLimits, seed: u64) -> Vec<Request> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = net.len() as u32;
    (0..n)
        .map(|k| {
            let o = rng.gen_range(0..len);
            let d = (o + rng.gen_range(1..len)) % len;
            Request::new(RequestId(k as u64), LocationId(o), LocationId(d), epoch, net, 60.0, limits)
                .expect("distinct endpoints")
        })
        .collect()
}

/// The default desk city after `epochs` epochs of myopic dispatch, with the
/// next epoch's batch. Vehicles carry realistic committed routes.
pub fn warmed_epoch(cfg: RunConfig, epochs: u32) -> (Scenario, Vec<VehicleState>, EpochBatch) {
    let scenario = Scenario::new(cfg).expect("valid config");
    let stream = scenario.stream(Purpose::Evaluation, 0).expect("demand");
    let mut vehicles = scenario.placement(Purpose::Evaluation, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    {
        let mut d = Dispatcher::new(&scenario, Purpose::Evaluation, 0).expect("dispatcher");
        for e in 0..epochs {
            let out = d
                .run_epoch(&vehicles, &stream.batch(e), Policy::Myopic, &mut rng, false)
                .expect("epoch runs");
            vehicles = out.vehicles;
        }
    }
    let batch = stream.batch(epochs);
    (scenario, vehicles, batch)
}
