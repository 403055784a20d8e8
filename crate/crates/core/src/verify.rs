//! Brute-force oracles and the seeded suites that compare the production
//! algorithms against them. Used by the test suites and by the `verify`
//! command.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assign::{solve, ActionEntry, AssignmentInstance, SolveOptions, VehicleChoices};
use crate::demand::{DelayLimits, Request, RequestId};
use crate::feasibility::{generate_feasible_set, max_group_size, FeasibleAction, GenerationMode};
use crate::fleet::{advance_vehicle, apply_action, StopKind, VehicleId, VehicleState};
use crate::rebalance::{compute_allotments, solve_rebalance, RebalanceInstance};
use crate::sim::{run_episode, Policy, Purpose, RunConfig, Scenario};
use crate::replay::{Experience, ReplayConfig, ReplayMemory, SampleIndex};
use crate::roadnet::{LocationEmbedding, LocationId, ProxyWeights, RoadNetwork};
use crate::valuefn::{FeatureScales, NetShape, StateFeatures, StopFeature, ValueNetParams};
use crate::TIME_EPS;

/// Outcome of one oracle suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: Vec<String>,
    /// Suite-specific headline number (max error, ratio, ...).
    pub statistic: f64,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            failures: Vec::new(),
            statistic: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

// ---------------------------------------------------------------- assignment

/// Exhaustive joint enumeration. Returns the best objective (summed in
/// vehicle order) and the lexicographically smallest choice achieving it.
pub fn brute_force_assignment(inst: &AssignmentInstance) -> (f64, Vec<usize>) {
    fn rec(
        inst: &AssignmentInstance,
        k: usize,
        used: &mut HashSet<RequestId>,
        cur: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if k == inst.vehicles.len() {
            let obj = inst.objective(cur);
            let better = match best {
                None => true,
                Some((b, _)) => obj > *b,
            };
            if better {
                *best = Some((obj, cur.clone()));
            }
            return;
        }
        for (a, act) in inst.vehicles[k].actions.iter().enumerate() {
            if act.requests.iter().any(|r| used.contains(r)) {
                continue;
            }
            used.extend(act.requests.iter().copied());
            cur.push(a);
            rec(inst, k + 1, used, cur, best);
            cur.pop();
            for r in &act.requests {
                used.remove(r);
            }
        }
    }
    let mut best = None;
    rec(inst, 0, &mut HashSet::new(), &mut Vec::new(), &mut best);
    best.unwrap_or((0.0, Vec::new()))
}

/// Random instance whose scores are multiples of 1/8, so exact ties occur.
pub fn random_assignment_instance<R: Rng>(rng: &mut R, max_vehicles: usize, max_requests: usize, max_actions: usize) -> AssignmentInstance {
    let nv = rng.gen_range(1..=max_vehicles);
    let nr = rng.gen_range(1..=max_requests) as u64;
    let vehicles = (0..nv)
        .map(|i| {
            let mut seen = BTreeSet::new();
            let mut actions = vec![ActionEntry {
                requests: vec![],
                score: rng.gen_range(-4..=4) as f64 / 8.0,
            }];
            let extra = rng.gen_range(0..max_actions);
            for _ in 0..extra {
                let size = rng.gen_range(1..=3.min(nr as usize));
                let mut g: Vec<RequestId> = (0..size).map(|_| RequestId(rng.gen_range(0..nr))).collect();
                g.sort();
                g.dedup();
                if !seen.insert(g.clone()) {
                    continue;
                }
                let score = g.len() as f64 + rng.gen_range(-8..=8) as f64 / 8.0;
                actions.push(ActionEntry { requests: g, score });
            }
            VehicleChoices {
                vehicle: VehicleId(i as u32),
                actions,
            }
        })
        .collect();
    AssignmentInstance { vehicles }
}

pub fn ilp_suite(instances: usize, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("ilp-exactness");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let inst = random_assignment_instance(&mut rng, 5, 6, 8);
        rep.cases += 1;
        let (bf_obj, bf_choice) = brute_force_assignment(&inst);
        match solve(&inst, &SolveOptions::default()) {
            Ok(a) => {
                if a.objective != bf_obj || a.choice != bf_choice {
                    rep.failures.push(format!(
                        "case {case}: solver {:?} = {} vs brute force {:?} = {}",
                        a.choice, a.objective, bf_choice, bf_obj
                    ));
                }
                if inst.check_choice(&a.choice).is_err() {
                    rep.failures.push(format!("case {case}: solver choice violates a constraint"));
                }
                rep.statistic = rep.statistic.max((a.objective - bf_obj).abs());
            }
            Err(e) => rep.failures.push(format!("case {case}: {e}")),
        }
    }
    rep
}

// --------------------------------------------------------------- feasibility

/// Independent replay of `action` for vehicle `v`. Checks stop bookkeeping,
/// committed-order preservation, deadlines and occupancy.
pub fn replay_route(
    net: &RoadNetwork,
    v: &VehicleState,
    action: &FeasibleAction,
    new: &[&Request],
) -> std::result::Result<(), String> {
    let route = &action.route;
    // Committed stops must survive, in order.
    let mut it = route.iter();
    for c in &v.trajectory {
        if !it.any(|s| s == c) {
            return Err(format!("committed stop for {} lost or reordered", c.request));
        }
    }
    let mut ids: Vec<RequestId> = new.iter().map(|r| r.id).collect();
    ids.sort();
    if ids != action.request_ids {
        return Err("request ids do not match the group".into());
    }
    if action.immediate_reward != new.len() as f64 {
        return Err("immediate reward is not the group size".into());
    }
    let extra = route.len() - v.trajectory.len();
    if extra != 2 * new.len() {
        return Err(format!("{extra} extra stops for {} new requests", new.len()));
    }
    for r in new {
        let p = route.iter().position(|s| s.request == r.id && s.kind == StopKind::Pickup);
        let d = route.iter().position(|s| s.request == r.id && s.kind == StopKind::Dropoff);
        match (p, d) {
            (Some(p), Some(d)) if p < d => {
                if route[p].deadline != r.pickup_deadline || route[d].deadline != r.dropoff_deadline {
                    return Err(format!("{} carries the wrong deadlines", r.id));
                }
                if route[p].location != r.origin || route[d].location != r.destination {
                    return Err(format!("{} stops are at the wrong places", r.id));
                }
            }
            _ => return Err(format!("{} lacks an ordered pickup/dropoff pair", r.id)),
        }
    }
    let (mut at, mut now) = v.route_start();
    let mut aboard: HashSet<RequestId> = v.onboard.iter().copied().collect();
    for s in route {
        now += net.travel_time(at, s.location).map_err(|e| e.to_string())?;
        at = s.location;
        if now > s.deadline + TIME_EPS {
            return Err(format!("{} {:?} at {now:.3}s misses {:.3}s", s.request, s.kind, s.deadline));
        }
        match s.kind {
            StopKind::Pickup => {
                if !aboard.insert(s.request) {
                    return Err(format!("{} picked up twice", s.request));
                }
                if aboard.len() > v.capacity as usize {
                    return Err(format!("capacity exceeded picking up {}", s.request));
                }
            }
            StopKind::Dropoff => {
                if !aboard.remove(&s.request) {
                    return Err(format!("{} dropped off while not aboard", s.request));
                }
            }
        }
    }
    if !aboard.is_empty() {
        return Err("route ends with passengers aboard".into());
    }
    Ok(())
}

/// Every group of `reqs` (up to the vehicle's free commitment slots) for
/// which some ordering of old and new stops passes `replay_route`.
pub fn brute_force_feasible_groups(v: &VehicleState, reqs: &[&Request], net: &RoadNetwork) -> BTreeSet<Vec<RequestId>> {
    let mut out = BTreeSet::new();
    let limit = max_group_size(v).min(reqs.len());
    for mask in 1u32..(1 << reqs.len()) {
        let group: Vec<&Request> = (0..reqs.len()).filter(|&i| mask >> i & 1 == 1).map(|i| reqs[i]).collect();
        if group.len() > limit {
            continue;
        }
        let mut stops: Vec<crate::fleet::Stop> = v.trajectory.clone();
        for r in &group {
            stops.push(crate::feasibility::pickup_stop(r));
            stops.push(crate::feasibility::dropoff_stop(r));
        }
        let mut ids: Vec<RequestId> = group.iter().map(|r| r.id).collect();
        ids.sort();
        let template = FeasibleAction {
            vehicle_id: v.id,
            request_ids: ids.clone(),
            route: Vec::new(),
            immediate_reward: group.len() as f64,
        };
        if permutations_any(&stops, &mut |order| {
            let mut a = template.clone();
            a.route = order.to_vec();
            replay_route(net, v, &a, &group).is_ok()
        }) {
            out.insert(ids);
        }
    }
    out
}

/// Tries every ordering of `items` until `accept` returns true.
fn permutations_any<T: Clone>(items: &[T], accept: &mut dyn FnMut(&[T]) -> bool) -> bool {
    fn rec<T: Clone>(rest: &mut Vec<T>, cur: &mut Vec<T>, accept: &mut dyn FnMut(&[T]) -> bool) -> bool {
        if rest.is_empty() {
            return accept(cur);
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            cur.push(x);
            if rec(rest, cur, accept) {
                return true;
            }
            let x = cur.pop().expect("pushed above");
            rest.insert(i, x);
        }
        false
    }
    rec(&mut items.to_vec(), &mut Vec::with_capacity(items.len()), accept)
}

/// Small strongly connected network: a directed ring plus random chords,
/// integer weights.
pub fn random_network<R: Rng>(rng: &mut R, max_nodes: usize) -> RoadNetwork {
    let n = rng.gen_range(3..=max_nodes) as u64;
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push((i, (i + 1) % n, rng.gen_range(2..=12) as f64 * 10.0));
    }
    for _ in 0..n {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            edges.push((a, b, rng.gen_range(2..=12) as f64 * 10.0));
        }
    }
    let ids: Vec<u64> = (0..n).collect();
    RoadNetwork::build(&ids, &edges).expect("ring networks are strongly connected")
}

fn random_request<R: Rng>(rng: &mut R, id: u64, epoch: u32, net: &RoadNetwork, limits: DelayLimits) -> Request {
    let n = net.len() as u32;
    let o = rng.gen_range(0..n);
    let mut d = rng.gen_range(0..n - 1);
    if d >= o {
        d += 1;
    }
    Request::new(RequestId(id), LocationId(o), LocationId(d), epoch, net, 60.0, limits).expect("distinct endpoints")
}

/// A vehicle with up to two committed requests, some possibly aboard, plus
/// up to three new requests in the following epoch.
pub fn random_micro_instance<R: Rng>(rng: &mut R) -> (RoadNetwork, VehicleState, Vec<Request>) {
    let net = random_network(rng, 10);
    let tau = rng.gen_range(6..=30) as f64 * 10.0;
    let limits = DelayLimits {
        tau,
        lambda: rng.gen_range(0..=3) as f64 * tau / 2.0,
    };
    let capacity = rng.gen_range(1..=3);
    let start = LocationId(rng.gen_range(0..net.len() as u32));
    let mut v = VehicleState::idle(VehicleId(0), capacity, start, 0.0);
    let prior = rng.gen_range(0..=2);
    for k in 0..prior {
        let r = random_request(rng, 100 + k, 0, &net, limits);
        let (set, _) = generate_feasible_set(&v, &[&r], &net, usize::MAX, GenerationMode::Exhaustive);
        if let Some(a) = set.actions.iter().find(|a| !a.is_null()) {
            v = apply_action(&v, a).expect("generated action applies");
        }
    }
    let wait = rng.gen_range(1..=3) as f64 * 30.0;
    v = advance_vehicle(&v, wait, &net).expect("committed routes are feasible").0;
    let epoch = (v.clock / 60.0).ceil() as u32;
    let count = rng.gen_range(0..=3);
    let reqs = (0..count).map(|k| random_request(rng, k, epoch, &net, limits)).collect();
    (net, v, reqs)
}

pub fn feasibility_suite(instances: usize, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("feasibility-soundness-completeness");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let (net, v, reqs) = random_micro_instance(&mut rng);
        let refs: Vec<&Request> = reqs.iter().collect();
        rep.cases += 1;
        for mode in [GenerationMode::Insertion, GenerationMode::Exhaustive] {
            let (set, _) = generate_feasible_set(&v, &refs, &net, 150, mode);
            if set.actions.first().is_none_or(|a| !a.is_null()) {
                rep.failures.push(format!("case {case} {mode:?}: null action missing"));
            }
            for a in set.actions.iter().skip(1) {
                let group: Vec<&Request> = refs.iter().copied().filter(|r| a.request_ids.contains(&r.id)).collect();
                if let Err(e) = replay_route(&net, &v, a, &group) {
                    rep.failures.push(format!("case {case} {mode:?} {:?}: {e}", a.request_ids));
                }
            }
            if mode == GenerationMode::Exhaustive {
                let got: BTreeSet<Vec<RequestId>> = set.actions.iter().skip(1).map(|a| a.request_ids.clone()).collect();
                let want = brute_force_feasible_groups(&v, &refs, &net);
                if got != want || got.len() + 1 != set.actions.len() {
                    rep.failures.push(format!("case {case}: exhaustive {got:?} vs brute force {want:?}"));
                }
            }
        }
    }
    rep
}

// ------------------------------------------------------------------ gradient

fn toy_embedding<R: Rng>(rng: &mut R, dim: usize, rows: usize) -> Arc<LocationEmbedding> {
    Arc::new(LocationEmbedding {
        dim,
        table: (0..dim * rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        proxy: ProxyWeights {
            hidden: 0,
            w1: vec![],
            b1: vec![],
            w2: vec![],
            b2: 0.0,
        },
        time_scale: 1.0,
    })
}

/// Largest relative disagreement between the analytic gradient and central
/// differences. Entries where both are below `floor` in magnitude count as
/// agreeing.
pub fn gradient_check(params: &ValueNetParams, f: &StateFeatures, step: f64, floor: f64) -> crate::Result<f64> {
    let (_, grad) = params.value_and_grad(f)?;
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for i in 0..params.len() {
        let x = p.theta[i];
        p.theta[i] = x + step;
        let up = p.value(f)?;
        p.theta[i] = x - step;
        let down = p.value(f)?;
        p.theta[i] = x;
        let fd = (up - down) / (2.0 * step);
        let scale = fd.abs().max(grad[i].abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    Ok(worst)
}

pub fn gradient_suite(networks: usize, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("gradient-check");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..networks {
        let shape = NetShape {
            emb_dim: rng.gen_range(1..=3),
            hidden: rng.gen_range(1..=4),
            head1: rng.gen_range(1..=4),
            head2: rng.gen_range(1..=3),
        };
        let emb = toy_embedding(&mut rng, shape.emb_dim, 6);
        let scales = FeatureScales {
            seconds: 300.0,
            vehicles: 5.0,
            requests: 8.0,
        };
        let mut params = ValueNetParams::random(shape, scales, emb, rng.gen()).expect("matching dims");
        // Perturb every entry so biases and the initial state carry signal.
        for x in &mut params.theta {
            *x += rng.gen_range(-0.3..0.3);
        }
        let steps = rng.gen_range(0..=5);
        let f = StateFeatures {
            stops: (0..steps)
                .map(|_| StopFeature {
                    location: LocationId(rng.gen_range(0..6)),
                    remaining_delay: rng.gen_range(0.0..600.0),
                })
                .collect(),
            current: LocationId(rng.gen_range(0..6)),
            epoch_scalar: rng.gen_range(0.0..1.0),
            nearby_vehicles: rng.gen_range(0..6),
            batch_requests: rng.gen_range(0..10),
        };
        rep.cases += 1;
        match gradient_check(&params, &f, 1e-5, 1e-7) {
            Ok(err) => {
                rep.statistic = rep.statistic.max(err);
                if err >= 1e-4 {
                    rep.failures.push(format!("network {case} ({shape:?}, {steps} stops): max relative error {err:.3e}"));
                }
            }
            Err(e) => rep.failures.push(format!("network {case}: {e}")),
        }
    }
    rep
}

// ---------------------------------------------------------------- rebalance

/// Cheapest assignment of vehicles to points respecting allotments, by
/// enumerating every vehicle-to-point map. Cost summed in vehicle order.
pub fn brute_force_rebalance(inst: &RebalanceInstance) -> Option<f64> {
    fn rec(inst: &RebalanceInstance, i: usize, load: &mut [usize], cur: f64, best: &mut Option<f64>) {
        if i == inst.cost.len() {
            if best.is_none_or(|b| cur < b) {
                *best = Some(cur);
            }
            return;
        }
        for j in 0..inst.points.len() {
            if load[j] < inst.allotments[j] {
                load[j] += 1;
                rec(inst, i + 1, load, cur + inst.cost[i][j], best);
                load[j] -= 1;
            }
        }
    }
    let mut best = None;
    rec(inst, 0, &mut vec![0; inst.points.len()], 0.0, &mut best);
    best
}

pub fn rebalance_suite(instances: usize, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("rebalance-optimality");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let net = random_network(&mut rng, 12);
        let nv = rng.gen_range(1..=6);
        let np = rng.gen_range(1..=6usize).min(nv);
        let n = net.len() as u32;
        let pos: Vec<LocationId> = (0..nv).map(|_| LocationId(rng.gen_range(0..n))).collect();
        let pts: Vec<LocationId> = (0..np).map(|_| LocationId(rng.gen_range(0..n))).collect();
        let inst = RebalanceInstance::new(&pos, pts, &net);
        debug_assert_eq!(inst.allotments, compute_allotments(nv, np));
        rep.cases += 1;
        let want = brute_force_rebalance(&inst);
        match solve_rebalance(&inst) {
            Ok(plan) => {
                let mut load = vec![0usize; np];
                for &t in &plan.targets {
                    load[t] += 1;
                }
                if load.iter().zip(&inst.allotments).any(|(l, a)| l > a) {
                    rep.failures.push(format!("case {case}: allotment exceeded"));
                }
                let integral = plan.matrix(np).iter().all(|row| row.iter().map(|&m| m as usize).sum::<usize>() == 1);
                if !integral {
                    rep.failures.push(format!("case {case}: plan is not a 0/1 assignment"));
                }
                if Some(plan.total_cost) != want {
                    rep.failures.push(format!("case {case}: cost {} vs brute force {want:?}", plan.total_cost));
                }
            }
            Err(e) => rep.failures.push(format!("case {case}: {e}")),
        }
    }
    rep
}

// ------------------------------------------------------------------- replay

/// Draws from a two-entry memory with priorities 1 and 3 at alpha 1 and
/// checks the share of the heavier entry against a 3-sigma binomial band.
pub fn replay_ratio_suite(draws: usize, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("replay-ratio");
    let mut mem = ReplayMemory::new(ReplayConfig {
        capacity: 2,
        alpha: 1.0,
        epsilon: 1e-2,
        ..Default::default()
    })
    .expect("valid config");
    let empty = |epoch| Experience {
        epoch,
        vehicles: vec![],
        feasible: vec![],
        batch_requests: 0,
        nearby: vec![],
        features: vec![],
        previous: vec![],
    };
    mem.push(empty(0));
    mem.push(empty(1));
    let eps = mem.config().epsilon;
    mem.update_priorities(
        &[SampleIndex { slot: 0, serial: 0 }, SampleIndex { slot: 1, serial: 1 }],
        &[1.0 - eps, 3.0 - eps],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heavy = 0usize;
    let mut done = 0usize;
    while done < draws {
        let k = (draws - done).min(mem.len());
        match mem.sample(k, 1.0, &mut rng) {
            Ok(s) => heavy += s.indices.iter().filter(|i| i.slot == 1).count(),
            Err(e) => {
                rep.failures.push(e.to_string());
                return rep;
            }
        }
        done += k;
    }
    rep.cases = draws;
    let p = mem.probability(1);
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    let dev = (heavy as f64 - draws as f64 * p).abs();
    rep.statistic = heavy as f64 / (draws - heavy).max(1) as f64;
    if (p - 0.75).abs() > 1e-12 {
        rep.failures.push(format!("heavier entry has probability {p}, expected 0.75"));
    }
    if dev > 3.0 * sd {
        rep.failures.push(format!("{heavy} of {draws} draws hit the heavier entry; band is ±{:.1}", 3.0 * sd));
    }
    rep
}

// ------------------------------------------------------------- zero network

/// Plays `epochs` epochs of one evaluation day under the myopic policy and
/// under a value network whose weights are all zero, and requires the chosen
/// action of every vehicle in every epoch to agree.
pub fn zero_network_suite(cfg: &RunConfig, epochs: u32) -> crate::Result<SuiteReport> {
    let mut rep = SuiteReport::new("zero-network");
    let mut cfg = cfg.clone();
    cfg.timing.horizon = epochs;
    let scenario = Scenario::new(cfg)?;
    let v = &scenario.cfg.value;
    let emb = Arc::new(LocationEmbedding {
        dim: v.emb_dim,
        table: vec![0.0; v.emb_dim * scenario.net.len()],
        proxy: ProxyWeights {
            hidden: 0,
            w1: vec![],
            b1: vec![],
            w2: vec![],
            b2: 0.0,
        },
        time_scale: 1.0,
    });
    let zero = ValueNetParams::zeros(v.shape(), FeatureScales::default(), emb)?;
    let day = scenario.cfg.evaluation.first_day;
    let stream = scenario.stream(Purpose::Evaluation, day)?;
    let placement = scenario.placement(Purpose::Evaluation, day);
    let base = run_episode(&scenario, Purpose::Evaluation, day, &stream, placement.clone(), Policy::Myopic)?;
    let learned = run_episode(
        &scenario,
        Purpose::Evaluation,
        day,
        &stream,
        placement,
        Policy::Learned {
            params: &zero,
            explore: None,
        },
    )?;
    rep.cases = base.choices.len();
    for (epoch, (a, b)) in base.choices.iter().zip(&learned.choices).enumerate() {
        if a != b {
            rep.failures.push(format!("epoch {epoch}: myopic chose {a:?}, zero network chose {b:?}"));
        }
    }
    if base.served != learned.served {
        rep.failures
            .push(format!("served {} under myopic but {} under the zero network", base.served, learned.served));
    }
    rep.statistic = base.served as f64;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_assignment_small() {
        let inst = AssignmentInstance {
            vehicles: vec![
                VehicleChoices {
                    vehicle: VehicleId(0),
                    actions: vec![
                        ActionEntry { requests: vec![], score: 0.0 },
                        ActionEntry { requests: vec![RequestId(1)], score: 1.0 },
                    ],
                },
                VehicleChoices {
                    vehicle: VehicleId(1),
                    actions: vec![
                        ActionEntry { requests: vec![], score: 0.0 },
                        ActionEntry { requests: vec![RequestId(1)], score: 2.0 },
                    ],
                },
            ],
        };
        assert_eq!(brute_force_assignment(&inst), (2.0, vec![0, 1]));
    }

    #[test]
    fn suites_pass_on_small_runs() {
        for rep in [
            ilp_suite(20, 1),
            feasibility_suite(20, 2),
            gradient_suite(3, 3),
            rebalance_suite(20, 4),
            replay_ratio_suite(10_000, 5),
        ] {
            assert!(rep.passed(), "{}: {:?}", rep.name, rep.failures);
        }
    }

    #[test]
    fn zero_network_matches_myopic_on_a_small_city() {
        let mut cfg = RunConfig::default();
        cfg.network.rows = 5;
        cfg.network.cols = 5;
        cfg.fleet.vehicles = 6;
        cfg.demand.hotspots = vec![6];
        let rep = zero_network_suite(&cfg, 40).unwrap();
        assert_eq!(rep.cases, 40);
        assert!(rep.passed(), "{:?}", rep.failures);
        assert!(rep.statistic > 0.0);
    }

    #[test]
    fn brute_force_rebalance_diagonal() {
        let inst = RebalanceInstance {
            cost: vec![vec![1.0, 10.0], vec![10.0, 1.0]],
            points: vec![LocationId(0), LocationId(1)],
            allotments: vec![1, 1],
        };
        assert_eq!(brute_force_rebalance(&inst), Some(2.0));
    }
}
