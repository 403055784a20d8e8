//! Per-vehicle value function over post-decision vehicle states.
//!
//! The joint value of a post-decision state is the sum of per-vehicle
//! values, each conditioned on the vehicle's own remaining stops and on two
//! aggregate counts describing everyone else. That decomposition lets every
//! feasible action be scored independently and handed to the assignment
//! solver as a linear objective coefficient.

mod checkpoint;
mod net;
mod trainer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use net::{FeatureScales, NetShape, ValueNetParams};
pub use trainer::{
    bellman_targets, mean_squared_loss, NoiseSchedule, StepOutcome, TrainerConfig, TrainerState,
};

use crate::error::{Error, Result};
use crate::feasibility::{route_arrivals, FeasibleSet};
use crate::fleet::{apply_action, VehicleState};
use crate::roadnet::{LocationEmbedding, LocationId, RoadNetwork};
use crate::TIME_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopFeature {
    pub location: LocationId,
    /// Deadline minus earliest arrival along the route, seconds.
    pub remaining_delay: f64,
}

/// Network input for one vehicle. Locations are kept as ids and looked up in
/// the frozen embedding table at evaluation time, which keeps stored
/// experiences small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    pub stops: Vec<StopFeature>,
    pub current: LocationId,
    pub epoch_scalar: f64,
    pub nearby_vehicles: u32,
    pub batch_requests: u32,
}

/// Per-vehicle context shared by all of that vehicle's actions in an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureContext {
    pub nearby_vehicles: u32,
    pub batch_requests: u32,
    pub epoch_scalar: f64,
}

/// Time of day in `[0, 1]`.
pub fn epoch_scalar(epoch: u32, horizon: u32) -> f64 {
    if horizon == 0 {
        0.0
    } else {
        (epoch as f64 / horizon as f64).min(1.0)
    }
}

/// For each vehicle, how many other vehicles can reach its position within
/// `radius` seconds.
pub fn nearby_counts(vehicles: &[VehicleState], net: &RoadNetwork, radius: f64) -> Vec<u32> {
    let anchors: Vec<LocationId> = vehicles.iter().map(|v| v.route_start().0).collect();
    anchors
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            anchors
                .iter()
                .enumerate()
                .filter(|&(j, &b)| j != i && net.time(b, a) <= radius + TIME_EPS)
                .count() as u32
        })
        .collect()
}

pub fn featurize(
    v: &VehicleState,
    ctx: &FeatureContext,
    emb: &LocationEmbedding,
    net: &RoadNetwork,
) -> Result<StateFeatures> {
    let start = v.route_start();
    emb.row(start.0)?;
    let arrivals = route_arrivals(net, start, &v.trajectory);
    let mut stops = Vec::with_capacity(v.trajectory.len());
    for (s, at) in v.trajectory.iter().zip(arrivals) {
        emb.row(s.location)?;
        let remaining_delay = s.deadline - at;
        if !remaining_delay.is_finite() {
            return Err(Error::Numeric(format!(
                "vehicle {} stop for request {} has remaining delay {remaining_delay}",
                v.id.0, s.request.0
            )));
        }
        stops.push(StopFeature {
            location: s.location,
            remaining_delay,
        });
    }
    if !ctx.epoch_scalar.is_finite() {
        return Err(Error::Numeric("epoch scalar is not finite".into()));
    }
    Ok(StateFeatures {
        stops,
        current: start.0,
        epoch_scalar: ctx.epoch_scalar,
        nearby_vehicles: ctx.nearby_vehicles,
        batch_requests: ctx.batch_requests,
    })
}

/// Features of the post-decision state reached by each action, in set order.
pub fn featurize_actions(
    v: &VehicleState,
    set: &FeasibleSet,
    ctx: &FeatureContext,
    emb: &LocationEmbedding,
    net: &RoadNetwork,
) -> Result<Vec<StateFeatures>> {
    set.actions
        .iter()
        .map(|a| featurize(&apply_action(v, a)?, ctx, emb, net))
        .collect()
}

pub fn action_values(params: &ValueNetParams, feats: &[StateFeatures]) -> Result<Vec<f64>> {
    feats.iter().map(|f| params.value(f)).collect()
}

/// Immediate reward plus value of the resulting post-decision state, per
/// action. These are the assignment objective coefficients.
pub fn score_actions(
    params: &ValueNetParams,
    v: &VehicleState,
    set: &FeasibleSet,
    ctx: &FeatureContext,
    net: &RoadNetwork,
) -> Result<Vec<f64>> {
    let feats = featurize_actions(v, set, ctx, &params.embedding, net)?;
    let values = action_values(params, &feats)?;
    Ok(set
        .actions
        .iter()
        .zip(values)
        .map(|(a, val)| a.immediate_reward + val)
        .collect())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::demand::{DelayLimits, Request, RequestId};
    use crate::feasibility::{generate_feasible_set, GenerationMode};
    use crate::fleet::{Stop, StopKind, VehicleId};
    use crate::roadnet::{train_embeddings, EmbeddingConfig};

    fn setup() -> (RoadNetwork, Arc<LocationEmbedding>) {
        let net = RoadNetwork::grid(3, 3, 60.0).unwrap();
        let cfg = EmbeddingConfig {
            dim: 4,
            steps: 50,
            ..Default::default()
        };
        let (emb, _) = train_embeddings(&net, &cfg).unwrap();
        (net, Arc::new(emb))
    }

    fn ctx() -> FeatureContext {
        FeatureContext {
            nearby_vehicles: 2,
            batch_requests: 5,
            epoch_scalar: 0.25,
        }
    }

    #[test]
    fn idle_vehicle_has_empty_sequence() {
        let (net, emb) = setup();
        let v = VehicleState::idle(VehicleId(0), 2, LocationId(4), 0.0);
        let f = featurize(&v, &ctx(), &emb, &net).unwrap();
        assert!(f.stops.is_empty());
        assert_eq!((f.nearby_vehicles, f.batch_requests, f.current), (2, 5, LocationId(4)));
        assert_eq!(f, featurize(&v, &ctx(), &emb, &net).unwrap());
    }

    #[test]
    fn remaining_delay_is_deadline_minus_arrival() {
        let (net, emb) = setup();
        let mut v = VehicleState::idle(VehicleId(0), 2, LocationId(0), 0.0);
        v.trajectory.push(Stop {
            location: LocationId(2),
            kind: StopKind::Pickup,
            request: RequestId(1),
            deadline: 300.0,
        });
        let f = featurize(&v, &ctx(), &emb, &net).unwrap();
        assert_eq!(f.stops[0].remaining_delay, 180.0);
    }

    #[test]
    fn missing_location_is_an_error() {
        let (net, emb) = setup();
        let mut small = (*emb).clone();
        small.table.truncate(small.dim * 3);
        let v = VehicleState::idle(VehicleId(0), 2, LocationId(5), 0.0);
        assert!(featurize(&v, &ctx(), &small, &net).is_err());
    }

    #[test]
    fn nearby_counts_use_travel_time_radius() {
        let net = RoadNetwork::grid(1, 4, 60.0).unwrap();
        let vs: Vec<VehicleState> = [0u32, 1, 3]
            .iter()
            .enumerate()
            .map(|(i, &l)| VehicleState::idle(VehicleId(i as u32), 1, LocationId(l), 0.0))
            .collect();
        assert_eq!(nearby_counts(&vs, &net, 60.0), vec![1, 1, 0]);
        assert_eq!(nearby_counts(&vs, &net, 180.0), vec![2, 2, 2]);
    }

    #[test]
    fn batched_scores_match_single_evaluations() {
        let (net, emb) = setup();
        let params = ValueNetParams::random(
            NetShape {
                emb_dim: 4,
                hidden: 5,
                head1: 4,
                head2: 3,
            },
            FeatureScales::default(),
            emb.clone(),
            4,
        )
        .unwrap();
        let limits = DelayLimits::with_default_detour(300.0);
        let reqs: Vec<Request> = [(1u32, 8u32), (3, 5)]
            .iter()
            .enumerate()
            .map(|(k, &(o, d))| Request::new(RequestId(k as u64), LocationId(o), LocationId(d), 0, &net, 60.0, limits).unwrap())
            .collect();
        let v = VehicleState::idle(VehicleId(0), 2, LocationId(0), 0.0);
        let refs: Vec<&Request> = reqs.iter().collect();
        let (set, _) = generate_feasible_set(&v, &refs, &net, 150, GenerationMode::Insertion);
        assert!(set.len() >= 3);
        let scores = score_actions(&params, &v, &set, &ctx(), &net).unwrap();
        for (a, s) in set.actions.iter().zip(&scores) {
            let post = apply_action(&v, a).unwrap();
            let single = params.value(&featurize(&post, &ctx(), &emb, &net).unwrap()).unwrap();
            assert_eq!(*s, a.immediate_reward + single);
        }
        // Null action scores the unchanged trajectory.
        let null = params.value(&featurize(&v, &ctx(), &emb, &net).unwrap()).unwrap();
        assert_eq!(scores[0], null);
    }

    #[test]
    fn zero_network_scores_are_group_sizes() {
        let (net, emb) = setup();
        let params = ValueNetParams::zeros(
            NetShape {
                emb_dim: 4,
                ..Default::default()
            },
            FeatureScales::default(),
            emb,
        )
        .unwrap();
        let limits = DelayLimits::with_default_detour(300.0);
        let r = Request::new(RequestId(0), LocationId(1), LocationId(7), 0, &net, 60.0, limits).unwrap();
        let v = VehicleState::idle(VehicleId(0), 2, LocationId(0), 0.0);
        let (set, _) = generate_feasible_set(&v, &[&r], &net, 150, GenerationMode::Insertion);
        let scores = score_actions(&params, &v, &set, &ctx(), &net).unwrap();
        let sizes: Vec<f64> = set.actions.iter().map(|a| a.request_ids.len() as f64).collect();
        assert_eq!(scores, sizes);
    }
}
