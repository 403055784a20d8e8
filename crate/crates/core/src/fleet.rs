//! Vehicle state and the two deterministic transitions: applying an action
//! (post-decision state) and driving the fleet forward in time.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::fmt;
use std::hash::Hasher;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demand::{EpochBatch, RequestId};
use crate::error::{Error, Result};
use crate::feasibility::FeasibleAction;
use crate::roadnet::{LocationId, RoadNetwork};
use crate::{Seconds, TIME_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StopKind {
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub location: LocationId,
    pub kind: StopKind,
    pub request: RequestId,
    /// Latest time the stop may be visited.
    pub deadline: Seconds,
}

/// Where a vehicle is between decisions. A vehicle on an edge finishes that
/// edge before any rerouting takes effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Position {
    At(LocationId),
    Edge {
        from: LocationId,
        to: LocationId,
        remaining: Seconds,
    },
}

impl Position {
    /// First node the vehicle can route from, and the delay before it gets there.
    pub fn anchor(&self) -> (LocationId, Seconds) {
        match *self {
            Position::At(node) => (node, 0.0),
            Position::Edge { to, remaining, .. } => (to, remaining),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub capacity: u32,
    pub position: Position,
    pub clock: Seconds,
    /// Remaining stops in visiting order.
    pub trajectory: Vec<Stop>,
    /// Requests currently in the vehicle.
    pub onboard: BTreeSet<RequestId>,
    /// Advisory idle-time destination; cleared on any real assignment.
    pub rebalance_target: Option<LocationId>,
}

impl VehicleState {
    pub fn idle(id: VehicleId, capacity: u32, at: LocationId, clock: Seconds) -> Self {
        Self {
            id,
            capacity,
            position: Position::At(at),
            clock,
            trajectory: Vec::new(),
            onboard: BTreeSet::new(),
            rebalance_target: None,
        }
    }

    /// Node the next route starts from and the time the vehicle reaches it.
    pub fn route_start(&self) -> (LocationId, Seconds) {
        let (node, delay) = self.position.anchor();
        (node, self.clock + delay)
    }

    /// Requests accepted but not yet picked up.
    pub fn pending_pickups(&self) -> usize {
        self.trajectory
            .iter()
            .filter(|s| s.kind == StopKind::Pickup)
            .count()
    }

    /// Requests this vehicle is committed to: onboard plus awaiting pickup.
    pub fn committed(&self) -> usize {
        self.onboard.len() + self.pending_pickups()
    }

    pub fn is_idle(&self) -> bool {
        self.trajectory.is_empty()
    }
}

/// Pre-decision system state `(r_t, u_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub epoch: u32,
    pub vehicles: Vec<VehicleState>,
    pub pending: EpochBatch,
}

/// Vehicles right after the assignment; the demand component is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostDecisionState {
    pub epoch: u32,
    pub vehicles: Vec<VehicleState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopEvent {
    pub vehicle: VehicleId,
    pub request: RequestId,
    pub kind: StopKind,
    pub time: Seconds,
    pub deadline: Seconds,
}

/// Post-decision transition for one vehicle. The action's route must keep
/// every stop already in the trajectory, in order. Pure: the input is not
/// modified.
pub fn apply_action(v: &VehicleState, f: &FeasibleAction) -> Result<VehicleState> {
    if f.vehicle_id != v.id {
        return Err(Error::Contract(format!(
            "action for {} applied to {}",
            f.vehicle_id, v.id
        )));
    }
    if f.is_null() {
        return Ok(v.clone());
    }
    let mut existing = v.trajectory.iter().peekable();
    for stop in &f.route {
        if existing.peek().is_some_and(|s| *s == stop) {
            existing.next();
        } else if !f.request_ids.contains(&stop.request) {
            return Err(Error::Contract(format!(
                "route of {} visits {} which is neither committed nor new",
                v.id, stop.request
            )));
        }
    }
    if existing.next().is_some() {
        return Err(Error::Contract(format!(
            "route of {} drops or reorders committed stops",
            v.id
        )));
    }
    let mut next = v.clone();
    next.trajectory = f.route.clone();
    next.rebalance_target = None;
    Ok(next)
}

/// Drives one vehicle along its trajectory (or toward its rebalance target)
/// for `delta` seconds, consuming the stops it reaches.
pub fn advance_vehicle(
    v: &VehicleState,
    delta: Seconds,
    net: &RoadNetwork,
) -> Result<(VehicleState, Vec<StopEvent>)> {
    if !(delta > 0.0) {
        return Err(Error::Contract(format!("time step must be positive, got {delta}")));
    }
    let mut v = v.clone();
    let mut events = Vec::new();
    let end = v.clock + delta;
    loop {
        match v.position {
            Position::Edge { from, to, remaining } => {
                let avail = end - v.clock;
                if remaining <= avail + TIME_EPS {
                    v.clock += remaining;
                    v.position = Position::At(to);
                } else {
                    v.position = Position::Edge {
                        from,
                        to,
                        remaining: remaining - avail,
                    };
                    break;
                }
            }
            Position::At(node) => {
                if let Some(stop) = v.trajectory.first().copied().filter(|s| s.location == node) {
                    if v.clock > stop.deadline + TIME_EPS {
                        return Err(Error::Integrity(format!(
                            "{} reached {:?} of {} at {:.3}s, deadline {:.3}s",
                            v.id, stop.kind, stop.request, v.clock, stop.deadline
                        )));
                    }
                    match stop.kind {
                        StopKind::Pickup => {
                            if v.onboard.len() as u32 >= v.capacity {
                                return Err(Error::Integrity(format!(
                                    "{} over capacity picking up {}",
                                    v.id, stop.request
                                )));
                            }
                            v.onboard.insert(stop.request);
                        }
                        StopKind::Dropoff => {
                            if !v.onboard.remove(&stop.request) {
                                return Err(Error::Integrity(format!(
                                    "{} dropping off {} which is not onboard",
                                    v.id, stop.request
                                )));
                            }
                        }
                    }
                    events.push(StopEvent {
                        vehicle: v.id,
                        request: stop.request,
                        kind: stop.kind,
                        time: v.clock,
                        deadline: stop.deadline,
                    });
                    v.trajectory.remove(0);
                    continue;
                }
                if v.trajectory.is_empty() && v.rebalance_target == Some(node) {
                    v.rebalance_target = None;
                }
                let target = v
                    .trajectory
                    .first()
                    .map(|s| s.location)
                    .or(v.rebalance_target);
                let Some(target) = target else { break };
                if end - v.clock <= TIME_EPS {
                    break;
                }
                let hop = net.next_hop(node, target);
                v.position = Position::Edge {
                    from: node,
                    to: hop,
                    remaining: net.time(node, hop),
                };
            }
        }
    }
    v.clock = end;
    Ok((v, events))
}

/// Advances every vehicle by `delta`; events are returned in vehicle order.
pub fn advance_time(
    vehicles: &[VehicleState],
    delta: Seconds,
    net: &RoadNetwork,
) -> Result<(Vec<VehicleState>, Vec<StopEvent>)> {
    let mut out = Vec::with_capacity(vehicles.len());
    let mut events = Vec::new();
    for v in vehicles {
        let (next, ev) = advance_vehicle(v, delta, net)?;
        out.push(next);
        events.extend(ev);
    }
    Ok((out, events))
}

/// Uniformly random initial placement of idle vehicles.
pub fn place_vehicles(
    net: &RoadNetwork,
    count: usize,
    capacity: u32,
    clock: Seconds,
    seed: u64,
) -> Vec<VehicleState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let at = LocationId(rng.gen_range(0..net.len() as u32));
            VehicleState::idle(VehicleId(i as u32), capacity, at, clock)
        })
        .collect()
}

/// Stable 64-bit fingerprint of any serialisable value. Floats serialise
/// with round-trip precision, so equal fingerprints imply bit-equal state.
pub fn fingerprint<T: Serialize>(value: &T) -> u64 {
    let text = serde_json::to_string(value).expect("state serialises");
    let mut h = DefaultHasher::new();
    h.write(text.as_bytes());
    h.finish()
}

/// One JSON object per vehicle per line.
pub fn write_snapshot<W: Write>(vehicles: &[VehicleState], mut out: W) -> Result<()> {
    for v in vehicles {
        serde_json::to_writer(&mut out, v)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_snapshot(text: &str) -> Result<Vec<VehicleState>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{DelayLimits, Request};

    /// 0 -40s- 1 -60s- 2, both directions.
    fn path() -> RoadNetwork {
        RoadNetwork::build(
            &[0, 1, 2],
            &[(0, 1, 40.0), (1, 0, 40.0), (1, 2, 60.0), (2, 1, 60.0)],
        )
        .unwrap()
    }

    fn stop(loc: u32, kind: StopKind, r: u64, deadline: f64) -> Stop {
        Stop {
            location: LocationId(loc),
            kind,
            request: RequestId(r),
            deadline,
        }
    }

    #[test]
    fn idle_vehicle_holds_position() {
        let net = path();
        let v = VehicleState::idle(VehicleId(0), 2, LocationId(1), 0.0);
        let (next, ev) = advance_vehicle(&v, 60.0, &net).unwrap();
        assert_eq!(next.position, Position::At(LocationId(1)));
        assert_eq!(next.clock, 60.0);
        assert!(ev.is_empty());
    }

    #[test]
    fn partial_leg_leaves_vehicle_mid_edge() {
        let net = RoadNetwork::build(&[0, 1], &[(0, 1, 90.0), (1, 0, 90.0)]).unwrap();
        let mut v = VehicleState::idle(VehicleId(0), 1, LocationId(0), 0.0);
        v.rebalance_target = Some(LocationId(1));
        let (next, _) = advance_vehicle(&v, 60.0, &net).unwrap();
        assert_eq!(
            next.position,
            Position::Edge { from: LocationId(0), to: LocationId(1), remaining: 30.0 }
        );
        let (done, _) = advance_vehicle(&next, 60.0, &net).unwrap();
        assert_eq!(done.position, Position::At(LocationId(1)));
        assert_eq!(done.rebalance_target, None);
    }

    #[test]
    fn pickup_then_partial_progress_toward_dropoff() {
        let net = path();
        let mut v = VehicleState::idle(VehicleId(0), 2, LocationId(0), 0.0);
        v.trajectory = vec![
            stop(1, StopKind::Pickup, 7, 300.0),
            stop(2, StopKind::Dropoff, 7, 900.0),
        ];
        let (next, ev) = advance_vehicle(&v, 60.0, &net).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].time, 40.0);
        assert_eq!(ev[0].kind, StopKind::Pickup);
        assert!(next.onboard.contains(&RequestId(7)));
        // 20s into the 60s edge toward the dropoff.
        assert_eq!(
            next.position,
            Position::Edge { from: LocationId(1), to: LocationId(2), remaining: 40.0 }
        );
        let (fin, ev) = advance_vehicle(&next, 60.0, &net).unwrap();
        assert_eq!(ev[0].time, 100.0);
        assert!(fin.onboard.is_empty() && fin.trajectory.is_empty());
    }

    #[test]
    fn late_stop_is_an_integrity_error() {
        let net = path();
        let mut v = VehicleState::idle(VehicleId(0), 1, LocationId(0), 0.0);
        v.trajectory = vec![stop(2, StopKind::Pickup, 1, 50.0), stop(0, StopKind::Dropoff, 1, 500.0)];
        assert!(matches!(advance_vehicle(&v, 120.0, &net), Err(Error::Integrity(_))));
    }

    #[test]
    fn null_action_is_identity_and_single_request_route() {
        let net = path();
        let v = VehicleState::idle(VehicleId(3), 2, LocationId(0), 0.0);
        let null = FeasibleAction::null(&v);
        assert_eq!(apply_action(&v, &null).unwrap(), v);

        let limits = DelayLimits::with_default_detour(300.0);
        let r = Request::new(RequestId(1), LocationId(1), LocationId(2), 0, &net, 60.0, limits).unwrap();
        let f = FeasibleAction {
            vehicle_id: v.id,
            request_ids: vec![r.id],
            route: vec![
                stop(1, StopKind::Pickup, 1, r.pickup_deadline),
                stop(2, StopKind::Dropoff, 1, r.dropoff_deadline),
            ],
            immediate_reward: 1.0,
        };
        let out = apply_action(&v, &f).unwrap();
        assert_eq!(out.trajectory[0].deadline, 300.0);
        assert_eq!(out.trajectory[1].deadline, 300.0 + 60.0 + 600.0);
        let again = apply_action(&v, &f).unwrap();
        assert_eq!(fingerprint(&out), fingerprint(&again));
        // Input untouched.
        assert!(v.trajectory.is_empty());
    }

    #[test]
    fn apply_rejects_foreign_or_reordering_routes() {
        let mut v = VehicleState::idle(VehicleId(0), 2, LocationId(0), 0.0);
        v.trajectory = vec![stop(1, StopKind::Pickup, 1, 100.0), stop(2, StopKind::Dropoff, 1, 200.0)];
        let swapped = FeasibleAction {
            vehicle_id: v.id,
            request_ids: vec![RequestId(2)],
            route: vec![v.trajectory[1], v.trajectory[0]],
            immediate_reward: 1.0,
        };
        assert!(apply_action(&v, &swapped).is_err());
        let other = FeasibleAction { vehicle_id: VehicleId(5), ..FeasibleAction::null(&v) };
        assert!(apply_action(&v, &other).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let net = path();
        let fleet = place_vehicles(&net, 4, 3, 0.0, 1);
        let mut buf = Vec::new();
        write_snapshot(&fleet, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(read_snapshot(&text).unwrap(), fleet);
    }
}
