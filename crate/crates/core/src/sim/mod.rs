//! Epoch loop and the training / evaluation drivers.
//!
//! One epoch: take the batch, prune candidate vehicles per request, build
//! each vehicle's feasible set, score every action, solve the assignment,
//! apply it, send idle vehicles toward sampled past demand, and advance the
//! clock by one epoch. Requests nobody takes are dropped.

mod config;
mod run;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    DemandConfig, DemandKind, DispatchConfig, EvaluationConfig, FleetConfig, Mode, NetworkConfig, NetworkKind,
    RunConfig, Seeds, TimingConfig, TrainingConfig, ValueConfig,
};
pub use run::{
    evaluate, initial_trainer, run_episode, train, zero_trainer, EpisodeLog, EpisodeResult, RunSummary, SeedRow, TrainOutcome,
};

use crate::assign::{solve, AssignmentInstance, LimitPolicy, SolveOptions};
use crate::demand::{generate_demand, ingest_trips, DelayLimits, DemandStream, EpochBatch, RateProfile, RateRange, SpatialWeights};
use crate::error::{Error, Result};
use crate::feasibility::{assignable_by_vehicle, generate_feasible_set, prune_candidates, FeasibilityCounters, FeasibleSet, GenerationMode};
use crate::fleet::{advance_time, apply_action, place_vehicles, write_snapshot, StopKind, VehicleState};
use crate::rebalance::{sample_demand, solve_rebalance, RebalanceInstance};
use crate::replay::Experience;
use crate::roadnet::{LocationId, RoadNetwork};
use crate::valuefn::{action_values, epoch_scalar, featurize_actions, nearby_counts, FeatureContext, StateFeatures, TrainerState, ValueNetParams};

/// What a demand stream or placement is drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Training,
    Validation,
    Evaluation,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Training => 1,
            Purpose::Validation => 2,
            Purpose::Evaluation => 3,
        }
    }
}

/// splitmix64 over `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Network, demand model and settings shared by every episode of a run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: RunConfig,
    pub net: Arc<RoadNetwork>,
    profile: RateProfile,
    spatial: SpatialWeights,
    trips: Option<DemandStream>,
}

impl Scenario {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let net = match cfg.network.kind {
            NetworkKind::Grid => RoadNetwork::grid(cfg.network.rows, cfg.network.cols, cfg.network.edge_seconds)?,
            NetworkKind::File => RoadNetwork::from_edge_file(Path::new(&cfg.network.path))?,
        };
        Self::with_network(cfg, net)
    }

    pub fn with_network(cfg: RunConfig, net: RoadNetwork) -> Result<Self> {
        let cfg = cfg.resolved();
        let d = &cfg.demand;
        let horizon = cfg.timing.horizon;
        let mut ranges = Vec::new();
        let peak_start = d.peak_start.min(horizon);
        let peak_end = d.peak_end.min(horizon);
        if peak_start > 0 {
            ranges.push(RateRange { start: 0, end: peak_start, rate: d.base_rate });
        }
        if peak_end > peak_start {
            ranges.push(RateRange { start: peak_start, end: peak_end, rate: d.peak_rate });
        }
        if horizon > peak_end {
            ranges.push(RateRange { start: peak_end, end: horizon, rate: d.base_rate });
        }
        let profile = RateProfile { ranges };
        let spatial = if d.hotspots.is_empty() {
            SpatialWeights::uniform(net.len())
        } else {
            let centers = d.hotspots.iter().map(|&h| net.lookup(h)).collect::<Result<Vec<_>>>()?;
            SpatialWeights::hotspots(&net, &centers, d.hotspot_spread, d.hotspot_floor, d.destination_uniform)
        };
        let trips = match d.kind {
            DemandKind::Synthetic => None,
            DemandKind::Trips => {
                let report = ingest_trips(Path::new(&d.path), &net, cfg.timing.epoch_seconds, cfg.limits())?;
                if report.malformed + report.degenerate > 0 {
                    log::warn!(
                        "{}: skipped {} malformed and {} degenerate trips",
                        d.path,
                        report.malformed,
                        report.degenerate
                    );
                }
                Some(report.stream)
            }
        };
        Ok(Self {
            cfg,
            net: Arc::new(net),
            profile,
            spatial,
            trips,
        })
    }

    pub fn limits(&self) -> DelayLimits {
        self.cfg.limits()
    }

    /// Mean requests per epoch over the horizon, at least 1.
    pub fn mean_batch(&self) -> f64 {
        let m = match &self.trips {
            Some(s) => s.total_requests() as f64 / self.cfg.timing.horizon as f64,
            None => self.profile.mean_rate(self.cfg.timing.horizon),
        };
        m.max(1.0)
    }

    /// Demand sample path `index` for `purpose`. Trip-file demand is the same
    /// for every index.
    pub fn stream(&self, purpose: Purpose, index: u64) -> Result<DemandStream> {
        if let Some(s) = &self.trips {
            let mut s = s.clone();
            s.batches.truncate(self.cfg.timing.horizon as usize);
            return Ok(s);
        }
        generate_demand(
            &self.net,
            self.cfg.timing.horizon,
            &self.profile,
            &self.spatial,
            self.cfg.timing.epoch_seconds,
            self.limits(),
            derive_seed(self.cfg.seeds.demand, purpose.tag(), index),
        )
    }

    pub fn placement(&self, purpose: Purpose, index: u64) -> Vec<VehicleState> {
        place_vehicles(
            &self.net,
            self.cfg.fleet.vehicles,
            self.cfg.fleet.capacity,
            0.0,
            derive_seed(self.cfg.seeds.placement, purpose.tag(), index),
        )
    }

    /// Generator for rebalancing samples; part of the environment, so it is
    /// tied to the placement seed and identical across policies.
    pub fn rebalance_rng(&self, purpose: Purpose, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seeds.placement, 16 + purpose.tag(), index))
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            node_limit: self.cfg.dispatch.node_limit,
            on_limit: if self.cfg.dispatch.greedy_fallback {
                LimitPolicy::GreedyFallback
            } else {
                LimitPolicy::Error
            },
        }
    }
}

/// How actions are scored.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    /// Immediate reward only: the number of requests an action adds.
    Myopic,
    /// Immediate reward plus learned value; `explore` adds training noise.
    Learned {
        params: &'a ValueNetParams,
        explore: Option<&'a TrainerState>,
    },
}

/// Per-epoch record. Everything here is deterministic given the inputs;
/// wall-clock timings are kept separately in [`EpochTimings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub day: u64,
    pub epoch: u32,
    pub requests_seen: usize,
    pub requests_served: usize,
    pub requests_dropped: usize,
    pub cumulative_seen: usize,
    pub cumulative_served: usize,
    /// Cumulative served over cumulative seen.
    pub service_rate: f64,
    pub objective: f64,
    pub solver_nodes: u64,
    pub solver_fallback: bool,
    pub actions: usize,
    pub feasibility_evaluations: usize,
    pub infeasible_by_budget: usize,
    pub rebalanced: usize,
    pub rebalance_cost: f64,
    pub dropoffs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochTimings {
    pub day: u64,
    pub epoch: u32,
    pub feasibility_ms: f64,
    pub scoring_ms: f64,
    pub solve_ms: f64,
    pub rebalance_ms: f64,
    pub advance_ms: f64,
}

impl EpochTimings {
    /// Time spent on dispatch proper: feasibility, scoring and the solve.
    pub fn dispatch_ms(&self) -> f64 {
        self.feasibility_ms + self.scoring_ms + self.solve_ms
    }
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    /// Pre-decision vehicles for the next epoch.
    pub vehicles: Vec<VehicleState>,
    pub metrics: EpochMetrics,
    pub timings: EpochTimings,
    /// Chosen action index per vehicle.
    pub choice: Vec<usize>,
    pub experience: Option<Experience>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs epochs of one simulated day and keeps the per-day state that spans
/// epochs: the demand history for rebalancing and cumulative counts.
pub struct Dispatcher<'a> {
    scenario: &'a Scenario,
    day: u64,
    history: Vec<LocationId>,
    rebalance_rng: ChaCha8Rng,
    seen: usize,
    served: usize,
    pool: Option<rayon::ThreadPool>,
    snapshot_dir: Option<std::path::PathBuf>,
    /// Post-decision features of each vehicle's chosen action last epoch.
    previous: Option<Vec<StateFeatures>>,
}

impl<'a> Dispatcher<'a> {
    pub fn new(scenario: &'a Scenario, purpose: Purpose, day: u64) -> Result<Self> {
        let workers = scenario.cfg.dispatch.workers;
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Contract(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            scenario,
            day,
            history: Vec::new(),
            rebalance_rng: scenario.rebalance_rng(purpose, day),
            seen: 0,
            served: 0,
            pool,
            snapshot_dir: None,
            previous: None,
        })
    }

    /// Where to dump the vehicle states if an epoch fails.
    pub fn with_snapshot_dir(mut self, dir: Option<&Path>) -> Self {
        self.snapshot_dir = dir.map(Path::to_path_buf);
        self
    }

    pub fn totals(&self) -> (usize, usize) {
        (self.seen, self.served)
    }

    fn feasible_sets(&self, vehicles: &[VehicleState], batch: &EpochBatch) -> Vec<(FeasibleSet, FeasibilityCounters)> {
        let net = &*self.scenario.net;
        let d = &self.scenario.cfg.dispatch;
        let candidates = prune_candidates(&batch.requests, vehicles, net, d.candidates);
        let assignable = assignable_by_vehicle(&batch.requests, &candidates);
        let build = |v: &VehicleState| {
            let reqs = assignable.get(&v.id).map(Vec::as_slice).unwrap_or(&[]);
            generate_feasible_set(v, reqs, net, d.eval_cap, GenerationMode::Insertion)
        };
        match &self.pool {
            Some(pool) => pool.install(|| vehicles.par_iter().map(build).collect()),
            None => vehicles.iter().map(build).collect(),
        }
    }

    /// One decision epoch. `rng` supplies exploration noise when the policy
    /// asks for it; `collect` stores the epoch as a training experience.
    pub fn run_epoch(
        &mut self,
        vehicles: &[VehicleState],
        batch: &EpochBatch,
        policy: Policy<'_>,
        rng: &mut ChaCha8Rng,
        collect: bool,
    ) -> Result<EpochOutcome> {
        let result = self.epoch_inner(vehicles, batch, policy, rng, collect);
        if let (Err(e), Some(dir)) = (&result, &self.snapshot_dir) {
            let path = dir.join(format!("failed-day{}-epoch{}.jsonl", self.day, batch.epoch));
            match std::fs::File::create(&path).map_err(Error::from).and_then(|f| write_snapshot(vehicles, f)) {
                Ok(()) => log::error!("epoch {} failed ({e}); vehicle snapshot in {}", batch.epoch, path.display()),
                Err(w) => log::error!("epoch {} failed ({e}); snapshot not written: {w}", batch.epoch),
            }
        }
        result
    }

    fn epoch_inner(
        &mut self,
        vehicles: &[VehicleState],
        batch: &EpochBatch,
        policy: Policy<'_>,
        rng: &mut ChaCha8Rng,
        collect: bool,
    ) -> Result<EpochOutcome> {
        let sc = self.scenario;
        let net = &*sc.net;
        let cfg = &sc.cfg;
        let mut timings = EpochTimings {
            day: self.day,
            epoch: batch.epoch,
            ..Default::default()
        };
        self.history.extend(batch.requests.iter().map(|r| r.origin));

        let t0 = Instant::now();
        let generated = self.feasible_sets(vehicles, batch);
        let mut counters = FeasibilityCounters::default();
        let mut sets = Vec::with_capacity(generated.len());
        for (s, c) in generated {
            counters += c;
            sets.push(s);
        }
        timings.feasibility_ms = ms(t0);

        let t0 = Instant::now();
        let mut features: Vec<Vec<StateFeatures>> = Vec::new();
        let mut nearby = Vec::new();
        let scores: Vec<Vec<f64>> = match policy {
            Policy::Myopic => sets
                .iter()
                .map(|s| s.actions.iter().map(|a| a.immediate_reward).collect())
                .collect(),
            Policy::Learned { params, explore } => {
                nearby = nearby_counts(vehicles, net, cfg.timing.tau);
                let scalar = epoch_scalar(batch.epoch, cfg.timing.horizon);
                let mut out = Vec::with_capacity(sets.len());
                for ((v, set), &near) in vehicles.iter().zip(&sets).zip(&nearby) {
                    let ctx = FeatureContext {
                        nearby_vehicles: near,
                        batch_requests: batch.requests.len() as u32,
                        epoch_scalar: scalar,
                    };
                    let feats = featurize_actions(v, set, &ctx, &params.embedding, net)?;
                    let mut values = action_values(params, &feats)?;
                    if let Some(t) = explore {
                        t.explore_noise(&mut values, rng);
                    }
                    out.push(set.actions.iter().zip(values).map(|(a, val)| a.immediate_reward + val).collect());
                    features.push(feats);
                }
                out
            }
        };
        timings.scoring_ms = ms(t0);

        let t0 = Instant::now();
        let inst = AssignmentInstance::from_sets(&sets, &scores)?;
        let assignment = solve(&inst, &sc.solve_options())?;
        timings.solve_ms = ms(t0);

        let mut next = Vec::with_capacity(vehicles.len());
        let mut served = 0;
        for ((v, set), &a) in vehicles.iter().zip(&sets).zip(&assignment.choice) {
            let action = &set.actions[a];
            served += action.request_ids.len();
            next.push(apply_action(v, action)?);
        }
        let seen = batch.requests.len();
        if served > seen {
            return Err(Error::Integrity(format!("served {served} of {seen} requests")));
        }

        let t0 = Instant::now();
        let idle: Vec<usize> = (0..next.len())
            .filter(|&i| assignment.choice[i] == 0 && next[i].is_idle())
            .collect();
        let (mut rebalanced, mut rebalance_cost) = (0, 0.0);
        if cfg.dispatch.rebalance && !idle.is_empty() {
            let points = sample_demand(&self.history, cfg.dispatch.rebalance_sample, idle.len(), &mut self.rebalance_rng);
            if !points.is_empty() {
                let positions: Vec<LocationId> = idle.iter().map(|&i| next[i].route_start().0).collect();
                let rb = RebalanceInstance::new(&positions, points, net);
                let plan = solve_rebalance(&rb)?;
                for (&i, &j) in idle.iter().zip(&plan.targets) {
                    next[i].rebalance_target = Some(rb.points[j]);
                }
                rebalanced = idle.len();
                rebalance_cost = plan.total_cost;
            }
        }
        timings.rebalance_ms = ms(t0);

        let t0 = Instant::now();
        let (advanced, events) = advance_time(&next, cfg.timing.epoch_seconds, net)?;
        timings.advance_ms = ms(t0);

        self.seen += seen;
        self.served += served;
        let metrics = EpochMetrics {
            day: self.day,
            epoch: batch.epoch,
            requests_seen: seen,
            requests_served: served,
            requests_dropped: seen - served,
            cumulative_seen: self.seen,
            cumulative_served: self.served,
            service_rate: if self.seen == 0 { 0.0 } else { self.served as f64 / self.seen as f64 },
            objective: assignment.objective,
            solver_nodes: assignment.nodes,
            solver_fallback: assignment.fallback,
            actions: sets.iter().map(FeasibleSet::len).sum(),
            feasibility_evaluations: counters.evaluations,
            infeasible_by_budget: counters.infeasible_by_budget,
            rebalanced,
            rebalance_cost,
            dropoffs: events.iter().filter(|e| e.kind == StopKind::Dropoff).count(),
        };
        // An epoch's decision supplies the target for the state the previous
        // decision produced, so the first collected epoch yields nothing.
        let mut experience = None;
        if collect && !features.is_empty() {
            let chosen: Vec<StateFeatures> =
                features.iter().zip(&assignment.choice).map(|(f, &a)| f[a].clone()).collect();
            if let Some(previous) = self.previous.replace(chosen) {
                experience = Some(Experience {
                    epoch: batch.epoch,
                    vehicles: vehicles.to_vec(),
                    feasible: sets,
                    batch_requests: seen as u32,
                    nearby,
                    features,
                    previous,
                });
            }
        }
        Ok(EpochOutcome {
            vehicles: advanced,
            metrics,
            timings,
            choice: assignment.choice,
            experience,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{Request, RequestId};

    fn scenario(vehicles: usize) -> Scenario {
        let mut cfg = RunConfig::default();
        cfg.network.rows = 3;
        cfg.network.cols = 3;
        cfg.fleet.vehicles = vehicles;
        cfg.timing.horizon = 10;
        Scenario::new(cfg).unwrap()
    }

    #[test]
    fn empty_epoch_advances_clock() {
        let sc = scenario(2);
        let vs = sc.placement(Purpose::Evaluation, 0);
        let mut d = Dispatcher::new(&sc, Purpose::Evaluation, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = d
            .run_epoch(&vs, &EpochBatch { epoch: 0, requests: vec![] }, Policy::Myopic, &mut rng, false)
            .unwrap();
        assert_eq!(out.choice, vec![0, 0]);
        assert!(out.vehicles.iter().all(|v| v.clock == 60.0));
        assert_eq!(out.metrics.rebalanced, 0);
    }

    #[test]
    fn single_feasible_request_is_served() {
        let sc = scenario(1);
        let vs = sc.placement(Purpose::Evaluation, 0);
        let at = vs[0].route_start().0;
        let dest = LocationId((at.0 + 1) % 9);
        let r = Request::new(RequestId(0), at, dest, 0, &sc.net, 60.0, sc.limits()).unwrap();
        let mut d = Dispatcher::new(&sc, Purpose::Evaluation, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = d
            .run_epoch(&vs, &EpochBatch { epoch: 0, requests: vec![r] }, Policy::Myopic, &mut rng, false)
            .unwrap();
        assert_eq!(out.metrics.requests_served, 1);
        assert_eq!(out.metrics.service_rate, 1.0);
    }

    #[test]
    fn seeds_are_derived_independently() {
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 2, 0));
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 1, 1));
        assert_eq!(derive_seed(7, 3, 9), derive_seed(7, 3, 9));
    }
}
