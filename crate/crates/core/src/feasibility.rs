//! Per-vehicle feasible actions: which groups of new requests a vehicle can
//! absorb into its current route without breaking any deadline or its
//! capacity, and the route that realises each group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::demand::{Request, RequestId};
use crate::fleet::{Stop, StopKind, VehicleId, VehicleState};
use crate::roadnet::{LocationId, RoadNetwork};
use crate::{Seconds, TIME_EPS};

/// Default number of closest vehicles kept per request.
pub const DEFAULT_CANDIDATES: usize = 30;
/// Default per-vehicle budget of route checks per epoch.
pub const DEFAULT_EVAL_CAP: usize = 150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleAction {
    pub vehicle_id: VehicleId,
    /// Newly added requests, sorted by id. Empty for the null action.
    pub request_ids: Vec<RequestId>,
    /// Full stop sequence: committed stops plus the new ones.
    pub route: Vec<Stop>,
    /// Number of new requests served.
    pub immediate_reward: f64,
}

impl FeasibleAction {
    /// Keep driving the current trajectory, accept nobody.
    pub fn null(v: &VehicleState) -> Self {
        Self {
            vehicle_id: v.id,
            request_ids: Vec::new(),
            route: v.trajectory.clone(),
            immediate_reward: 0.0,
        }
    }

    pub fn is_null(&self) -> bool {
        self.request_ids.is_empty()
    }
}

/// Always starts with the null action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub vehicle_id: VehicleId,
    pub actions: Vec<FeasibleAction>,
}

impl FeasibleSet {
    pub fn null_only(v: &VehicleState) -> Self {
        Self {
            vehicle_id: v.id,
            actions: vec![FeasibleAction::null(v)],
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityCounters {
    pub evaluations: usize,
    pub infeasible_by_budget: usize,
    pub infeasible_by_constraints: usize,
}

impl std::ops::AddAssign for FeasibilityCounters {
    fn add_assign(&mut self, o: Self) {
        self.evaluations += o.evaluations;
        self.infeasible_by_budget += o.infeasible_by_budget;
        self.infeasible_by_constraints += o.infeasible_by_constraints;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalBudget {
    pub cap: usize,
    pub used: usize,
}

impl EvalBudget {
    pub fn new(cap: usize) -> Self {
        Self { cap, used: 0 }
    }

    pub fn unlimited() -> Self {
        Self::new(usize::MAX)
    }

    pub fn exhausted(&self) -> bool {
        self.used >= self.cap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    /// Insert each request into the route of the smaller group.
    #[default]
    Insertion,
    /// Test-only: every subset, every order-preserving interleaving.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Insertion {
    Feasible { route: Vec<Stop>, end_time: Seconds },
    Infeasible,
    OutOfBudget,
}

/// Replays `stops` from `start` and returns the time the last stop is
/// reached, or `None` if a deadline or the capacity is violated.
pub fn route_end_time(
    net: &RoadNetwork,
    start: (LocationId, Seconds),
    onboard: usize,
    capacity: u32,
    stops: &[Stop],
) -> Option<Seconds> {
    let (mut at, mut now) = start;
    let mut load = onboard as i64;
    for s in stops {
        now += net.time(at, s.location);
        at = s.location;
        if now > s.deadline + TIME_EPS {
            return None;
        }
        match s.kind {
            StopKind::Pickup => {
                load += 1;
                if load > capacity as i64 {
                    return None;
                }
            }
            StopKind::Dropoff => load -= 1,
        }
    }
    Some(now)
}

/// Arrival time at each stop along `stops` from `start`.
pub fn route_arrivals(net: &RoadNetwork, start: (LocationId, Seconds), stops: &[Stop]) -> Vec<Seconds> {
    let (mut at, mut now) = start;
    stops
        .iter()
        .map(|s| {
            now += net.time(at, s.location);
            at = s.location;
            now
        })
        .collect()
}

pub fn pickup_stop(r: &Request) -> Stop {
    Stop {
        location: r.origin,
        kind: StopKind::Pickup,
        request: r.id,
        deadline: r.pickup_deadline,
    }
}

pub fn dropoff_stop(r: &Request) -> Stop {
    Stop {
        location: r.destination,
        kind: StopKind::Dropoff,
        request: r.id,
        deadline: r.dropoff_deadline,
    }
}

/// For each request, up to `k` vehicles that can reach its origin by the
/// pickup deadline, closest first (ties by vehicle id). The bound is inclusive.
pub fn prune_candidates(
    requests: &[Request],
    vehicles: &[VehicleState],
    net: &RoadNetwork,
    k: usize,
) -> BTreeMap<RequestId, Vec<VehicleId>> {
    requests
        .iter()
        .map(|r| {
            let mut reach: Vec<(Seconds, VehicleId)> = vehicles
                .iter()
                .filter_map(|v| {
                    let (node, t0) = v.route_start();
                    let arrive = t0 + net.time(node, r.origin);
                    (arrive <= r.pickup_deadline + TIME_EPS).then_some((arrive, v.id))
                })
                .collect();
            reach.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            reach.truncate(k);
            (r.id, reach.into_iter().map(|(_, id)| id).collect())
        })
        .collect()
}

/// Inverts the candidate map: requests each vehicle may be offered, by id.
pub fn assignable_by_vehicle<'a>(
    requests: &'a [Request],
    candidates: &BTreeMap<RequestId, Vec<VehicleId>>,
) -> BTreeMap<VehicleId, Vec<&'a Request>> {
    let mut out: BTreeMap<VehicleId, Vec<&Request>> = BTreeMap::new();
    for r in requests {
        for &vid in candidates.get(&r.id).map(Vec::as_slice).unwrap_or(&[]) {
            out.entry(vid).or_default().push(r);
        }
    }
    for list in out.values_mut() {
        list.sort_by_key(|r| r.id);
    }
    out
}

/// Inserts `r` into `base` without reordering it. Each `(pickup, dropoff)`
/// position pair checked consumes one unit of `budget`. Returns the feasible
/// insertion with the earliest route end, ties to the lowest position pair.
pub fn insert_into(
    v: &VehicleState,
    base: &[Stop],
    r: &Request,
    net: &RoadNetwork,
    budget: &mut EvalBudget,
) -> Insertion {
    let start = v.route_start();
    if start.1 + net.time(start.0, r.origin) > r.pickup_deadline + TIME_EPS {
        return Insertion::Infeasible;
    }
    let k = base.len();
    let (p, d) = (pickup_stop(r), dropoff_stop(r));
    let mut best: Option<(Vec<Stop>, Seconds)> = None;
    let mut candidate = Vec::with_capacity(k + 2);
    for i in 0..=k {
        for j in i..=k {
            if budget.exhausted() {
                return match best {
                    Some((route, end_time)) => Insertion::Feasible { route, end_time },
                    None => Insertion::OutOfBudget,
                };
            }
            budget.used += 1;
            candidate.clear();
            candidate.extend_from_slice(&base[..i]);
            candidate.push(p);
            candidate.extend_from_slice(&base[i..j]);
            candidate.push(d);
            candidate.extend_from_slice(&base[j..]);
            if let Some(end) = route_end_time(net, start, v.onboard.len(), v.capacity, &candidate) {
                if best.as_ref().is_none_or(|(_, b)| end < *b) {
                    best = Some((candidate.clone(), end));
                }
            }
        }
    }
    match best {
        Some((route, end_time)) => Insertion::Feasible { route, end_time },
        None => Insertion::Infeasible,
    }
}

/// Insertion of `r` into the vehicle's current trajectory.
pub fn try_insert(v: &VehicleState, r: &Request, net: &RoadNetwork, budget: &mut EvalBudget) -> Insertion {
    insert_into(v, &v.trajectory, r, net, budget)
}

/// Largest new group a vehicle may take on: seats not already committed.
pub fn max_group_size(v: &VehicleState) -> usize {
    (v.capacity as usize).saturating_sub(v.committed())
}

/// Builds the feasible action set of one vehicle. In insertion mode groups
/// grow level by level from feasible singletons; a group is only tried when
/// all of its one-smaller subgroups were feasible, and it is validated by
/// inserting its largest request into the route of the group without it.
/// Growth stops once `eval_cap` route checks have been spent.
pub fn generate_feasible_set(
    v: &VehicleState,
    assignable: &[&Request],
    net: &RoadNetwork,
    eval_cap: usize,
    mode: GenerationMode,
) -> (FeasibleSet, FeasibilityCounters) {
    let mut reqs: Vec<&Request> = assignable.to_vec();
    reqs.sort_by_key(|r| r.id);
    reqs.dedup_by_key(|r| r.id);
    match mode {
        GenerationMode::Insertion => insertion_set(v, &reqs, net, eval_cap),
        GenerationMode::Exhaustive => exhaustive_set(v, &reqs, net),
    }
}

fn make_action(v: &VehicleState, reqs: &[&Request], group: &[usize], route: Vec<Stop>) -> FeasibleAction {
    FeasibleAction {
        vehicle_id: v.id,
        request_ids: group.iter().map(|&i| reqs[i].id).collect(),
        route,
        immediate_reward: group.len() as f64,
    }
}

fn insertion_set(
    v: &VehicleState,
    reqs: &[&Request],
    net: &RoadNetwork,
    eval_cap: usize,
) -> (FeasibleSet, FeasibilityCounters) {
    let mut set = FeasibleSet::null_only(v);
    let mut counters = FeasibilityCounters::default();
    let max_group = max_group_size(v);
    let mut budget = EvalBudget::new(eval_cap);
    if max_group == 0 || reqs.is_empty() || budget.exhausted() {
        return (set, counters);
    }

    let mut level: BTreeMap<Vec<usize>, Vec<Stop>> = BTreeMap::new();
    'singletons: for (i, r) in reqs.iter().enumerate() {
        if budget.exhausted() {
            counters.infeasible_by_budget += reqs.len() - i;
            break 'singletons;
        }
        match try_insert(v, r, net, &mut budget) {
            Insertion::Feasible { route, .. } => {
                level.insert(vec![i], route);
            }
            Insertion::Infeasible => counters.infeasible_by_constraints += 1,
            Insertion::OutOfBudget => counters.infeasible_by_budget += 1,
        }
    }
    let singles: Vec<usize> = level.keys().map(|g| g[0]).collect();
    for (g, route) in &level {
        set.actions.push(make_action(v, reqs, g, route.clone()));
    }

    let mut size = 1;
    while size < max_group && !level.is_empty() && !budget.exhausted() {
        let mut next: BTreeMap<Vec<usize>, Vec<Stop>> = BTreeMap::new();
        'groups: for (g, route) in &level {
            let last = *g.last().expect("groups are nonempty");
            for &s in singles.iter().filter(|&&s| s > last) {
                // Every subgroup one smaller must itself be feasible.
                let all_subsets_feasible = (0..g.len()).all(|drop| {
                    let mut sub: Vec<usize> = g
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != drop)
                        .map(|(_, &x)| x)
                        .collect();
                    sub.push(s);
                    level.contains_key(&sub)
                });
                if !all_subsets_feasible {
                    continue;
                }
                if budget.exhausted() {
                    counters.infeasible_by_budget += 1;
                    break 'groups;
                }
                match insert_into(v, route, reqs[s], net, &mut budget) {
                    Insertion::Feasible { route, .. } => {
                        let mut grown = g.clone();
                        grown.push(s);
                        next.insert(grown, route);
                    }
                    Insertion::Infeasible => counters.infeasible_by_constraints += 1,
                    Insertion::OutOfBudget => counters.infeasible_by_budget += 1,
                }
            }
        }
        for (g, route) in &next {
            set.actions.push(make_action(v, reqs, g, route.clone()));
        }
        level = next;
        size += 1;
    }
    counters.evaluations = budget.used;
    (set, counters)
}

fn exhaustive_set(v: &VehicleState, reqs: &[&Request], net: &RoadNetwork) -> (FeasibleSet, FeasibilityCounters) {
    let mut set = FeasibleSet::null_only(v);
    let mut counters = FeasibilityCounters::default();
    let max_group = max_group_size(v).min(reqs.len());
    for size in 1..=max_group {
        for group in combinations(reqs.len(), size) {
            let members: Vec<&Request> = group.iter().map(|&i| reqs[i]).collect();
            let mut search = Interleave {
                v,
                net,
                members: &members,
                route: Vec::new(),
                best: None,
                evaluations: 0,
            };
            search.run(0, 0, 0);
            counters.evaluations += search.evaluations;
            match search.best {
                Some((route, _)) => set.actions.push(make_action(v, reqs, &group, route)),
                None => counters.infeasible_by_constraints += 1,
            }
        }
    }
    (set, counters)
}

/// All `size`-subsets of `0..n` in lexicographic order.
pub(crate) fn combinations(n: usize, size: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, size, &mut Vec::with_capacity(size), &mut out);
    out
}

/// Depth-first enumeration of every interleaving of the committed stops
/// (kept in order) with the members' pickups and dropoffs (pickup first).
struct Interleave<'a> {
    v: &'a VehicleState,
    net: &'a RoadNetwork,
    members: &'a [&'a Request],
    route: Vec<Stop>,
    best: Option<(Vec<Stop>, Seconds)>,
    evaluations: usize,
}

impl Interleave<'_> {
    fn run(&mut self, next_existing: usize, picked: u32, dropped: u32) {
        let m = self.members.len();
        let full = (1u32 << m) - 1;
        if next_existing == self.v.trajectory.len() && dropped == full {
            self.evaluations += 1;
            let start = self.v.route_start();
            if let Some(end) = route_end_time(self.net, start, self.v.onboard.len(), self.v.capacity, &self.route) {
                if self.best.as_ref().is_none_or(|(_, b)| end < *b) {
                    self.best = Some((self.route.clone(), end));
                }
            }
            return;
        }
        if next_existing < self.v.trajectory.len() {
            self.route.push(self.v.trajectory[next_existing]);
            self.run(next_existing + 1, picked, dropped);
            self.route.pop();
        }
        for k in 0..m {
            let bit = 1u32 << k;
            if picked & bit == 0 {
                self.route.push(pickup_stop(self.members[k]));
                self.run(next_existing, picked | bit, dropped);
                self.route.pop();
            }
        }
        for k in 0..m {
            let bit = 1u32 << k;
            if picked & bit != 0 && dropped & bit == 0 {
                self.route.push(dropoff_stop(self.members[k]));
                self.run(next_existing, picked, dropped | bit);
                self.route.pop();
            }
        }
    }
}
