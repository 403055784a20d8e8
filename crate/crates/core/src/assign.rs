//! Exact assignment of one action per vehicle, each request used at most
//! once, maximising the summed action scores.
//!
//! The search is a depth-first branch-and-bound. Vehicles are branched in
//! descending order of `best score - null score`, actions in descending score
//! order. A node is bounded by the score of its fixed prefix plus, for every
//! open vehicle, its best action compatible with the requests already taken
//! (see [`relaxation_bound`]). Once the optimum is known, the lexicographically
//! smallest optimal action-index vector is recovered by fixing vehicles in
//! index order and re-solving with the optimum as the target.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::demand::RequestId;
use crate::error::{Error, Result};
use crate::feasibility::FeasibleSet;
use crate::fleet::VehicleId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEntry {
    pub requests: Vec<RequestId>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleChoices {
    pub vehicle: VehicleId,
    pub actions: Vec<ActionEntry>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssignmentInstance {
    pub vehicles: Vec<VehicleChoices>,
}

impl AssignmentInstance {
    /// Pairs every feasible set with its per-action scores.
    pub fn from_sets(sets: &[FeasibleSet], scores: &[Vec<f64>]) -> Result<Self> {
        if sets.len() != scores.len() {
            return Err(Error::Contract(format!(
                "{} feasible sets but {} score vectors",
                sets.len(),
                scores.len()
            )));
        }
        let vehicles = sets
            .iter()
            .zip(scores)
            .map(|(set, sc)| {
                if set.actions.len() != sc.len() {
                    return Err(Error::Contract(format!(
                        "{}: {} actions but {} scores",
                        set.vehicle_id,
                        set.actions.len(),
                        sc.len()
                    )));
                }
                Ok(VehicleChoices {
                    vehicle: set.vehicle_id,
                    actions: set
                        .actions
                        .iter()
                        .zip(sc)
                        .map(|(a, &score)| ActionEntry {
                            requests: a.request_ids.clone(),
                            score,
                        })
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { vehicles })
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.vehicles {
            if !v.actions.iter().any(|a| a.requests.is_empty()) {
                return Err(Error::Contract(format!("{} has no null action", v.vehicle)));
            }
            if let Some(a) = v.actions.iter().find(|a| !a.score.is_finite()) {
                return Err(Error::Contract(format!(
                    "{} has non-finite score {}",
                    v.vehicle, a.score
                )));
            }
        }
        Ok(())
    }

    /// Objective of a full choice vector, summed in vehicle order.
    pub fn objective(&self, choice: &[usize]) -> f64 {
        self.vehicles
            .iter()
            .zip(choice)
            .map(|(v, &a)| v.actions[a].score)
            .sum()
    }

    /// Checks one action per vehicle and each request at most once.
    pub fn check_choice(&self, choice: &[usize]) -> Result<()> {
        if choice.len() != self.vehicles.len() {
            return Err(Error::Contract("choice vector has the wrong length".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (v, &a) in self.vehicles.iter().zip(choice) {
            let action = v
                .actions
                .get(a)
                .ok_or_else(|| Error::Contract(format!("{}: no action {a}", v.vehicle)))?;
            for r in &action.requests {
                if !seen.insert(*r) {
                    return Err(Error::Contract(format!("{r} assigned twice")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Chosen action index per vehicle, in instance order.
    pub choice: Vec<usize>,
    pub objective: f64,
    /// Search nodes expanded.
    pub nodes: u64,
    /// True when the node limit was hit and the greedy fallback was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitPolicy {
    Error,
    GreedyFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub node_limit: u64,
    pub on_limit: LimitPolicy,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            node_limit: 5_000_000,
            on_limit: LimitPolicy::Error,
        }
    }
}

/// Request sets as bitsets over the instance's request universe.
struct Compiled {
    words: usize,
    /// `masks[v][a]`
    masks: Vec<Vec<Vec<u64>>>,
    scores: Vec<Vec<f64>>,
    /// Per vehicle, action indices by descending score (ties by index).
    by_score: Vec<Vec<usize>>,
    /// Vehicles by descending best-minus-null gap (ties by index).
    order: Vec<usize>,
    /// Nonnegative request prices for the Lagrangian bound.
    price: Vec<f64>,
    /// `action_price[v][a]`: summed price of the action's requests.
    action_price: Vec<Vec<f64>>,
    /// Per vehicle, action indices by descending score minus price.
    by_reduced: Vec<Vec<usize>>,
}

/// Request prices from a short subgradient descent on the Lagrangian dual
/// of the one-use-per-request constraints. Any nonnegative prices give a
/// valid bound, so the schedule only affects speed.
fn dual_prices(scores: &[Vec<f64>], bits: &[Vec<Vec<usize>>], requests: usize) -> Vec<f64> {
    let mut p = vec![0.0; requests];
    if requests == 0 {
        return p;
    }
    let spread = scores
        .iter()
        .map(|s| {
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .fold(0.0, f64::max);
    let mut step = 0.5 * spread;
    let mut best = (f64::INFINITY, p.clone());
    for _ in 0..80 {
        let mut dual: f64 = p.iter().sum();
        let mut g = vec![1.0; requests];
        for (s, b) in scores.iter().zip(bits) {
            let (a, val) = s
                .iter()
                .enumerate()
                .map(|(a, &x)| (a, x - b[a].iter().map(|&r| p[r]).sum::<f64>()))
                .fold((0, f64::NEG_INFINITY), |m, c| if c.1 > m.1 { c } else { m });
            dual += val;
            for &r in &b[a] {
                g[r] -= 1.0;
            }
        }
        if dual < best.0 {
            best = (dual, p.clone());
        }
        let mut moved = false;
        for (pr, gr) in p.iter_mut().zip(&g) {
            let next = (*pr - step * gr).max(0.0);
            moved |= next != *pr;
            *pr = next;
        }
        if !moved {
            break;
        }
        step *= 0.93;
    }
    best.1
}

impl Compiled {
    fn new(inst: &AssignmentInstance) -> Self {
        let mut ids: HashMap<RequestId, usize> = HashMap::new();
        for v in &inst.vehicles {
            for a in &v.actions {
                for r in &a.requests {
                    let next = ids.len();
                    ids.entry(*r).or_insert(next);
                }
            }
        }
        let words = ids.len().div_ceil(64).max(1);
        let bits: Vec<Vec<Vec<usize>>> = inst
            .vehicles
            .iter()
            .map(|v| v.actions.iter().map(|a| a.requests.iter().map(|r| ids[r]).collect()).collect())
            .collect();
        let masks = inst
            .vehicles
            .iter()
            .map(|v| {
                v.actions
                    .iter()
                    .map(|a| {
                        let mut m = vec![0u64; words];
                        for r in &a.requests {
                            let b = ids[r];
                            m[b / 64] |= 1 << (b % 64);
                        }
                        m
                    })
                    .collect()
            })
            .collect();
        let scores: Vec<Vec<f64>> = inst
            .vehicles
            .iter()
            .map(|v| v.actions.iter().map(|a| a.score).collect())
            .collect();
        let by_score = scores
            .iter()
            .map(|s| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                idx
            })
            .collect();
        let gap = |v: usize| {
            let null = inst.vehicles[v]
                .actions
                .iter()
                .find(|a| a.requests.is_empty())
                .map_or(0.0, |a| a.score);
            scores[v].iter().copied().fold(f64::NEG_INFINITY, f64::max) - null
        };
        let mut order: Vec<usize> = (0..inst.vehicles.len()).collect();
        order.sort_by(|&a, &b| gap(b).total_cmp(&gap(a)).then(a.cmp(&b)));
        let price = dual_prices(&scores, &bits, ids.len());
        let action_price: Vec<Vec<f64>> = bits
            .iter()
            .map(|b| b.iter().map(|rs| rs.iter().map(|&r| price[r]).sum()).collect())
            .collect();
        let by_reduced = scores
            .iter()
            .zip(&action_price)
            .map(|(s, ap)| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.sort_by(|&a, &b| (s[b] - ap[b]).total_cmp(&(s[a] - ap[a])).then(a.cmp(&b)));
                idx
            })
            .collect();
        Self {
            words,
            masks,
            scores,
            by_score,
            order,
            price,
            action_price,
            by_reduced,
        }
    }

    fn best_reduced(&self, used: &[u64], v: usize) -> f64 {
        self.by_reduced[v]
            .iter()
            .find(|&&a| !self.conflicts(used, v, a))
            .map_or(f64::NEG_INFINITY, |&a| self.scores[v][a] - self.action_price[v][a])
    }

    fn conflicts(&self, used: &[u64], v: usize, a: usize) -> bool {
        self.masks[v][a].iter().zip(used).any(|(m, u)| m & u != 0)
    }

    fn best_compatible(&self, used: &[u64], v: usize) -> f64 {
        self.by_score[v]
            .iter()
            .find(|&&a| !self.conflicts(used, v, a))
            .map_or(f64::NEG_INFINITY, |&a| self.scores[v][a])
    }
}

/// Upper bound on any completion of `prefix` (pairs of vehicle index and
/// action index): the prefix's score plus each open vehicle's best action
/// that does not reuse a request taken by the prefix.
pub fn relaxation_bound(inst: &AssignmentInstance, prefix: &[(usize, usize)]) -> f64 {
    let c = Compiled::new(inst);
    let mut used = vec![0u64; c.words];
    let mut fixed = vec![false; inst.vehicles.len()];
    let mut total = 0.0;
    for &(v, a) in prefix {
        total += c.scores[v][a];
        for (u, m) in used.iter_mut().zip(&c.masks[v][a]) {
            *u |= m;
        }
        fixed[v] = true;
    }
    for v in 0..inst.vehicles.len() {
        if !fixed[v] {
            total += c.best_compatible(&used, v);
        }
    }
    total
}

fn tolerance(x: f64) -> f64 {
    1e-12 * (1.0 + x.abs())
}

enum Goal {
    /// Find the maximum.
    Maximise,
    /// Find any completion whose vehicle-order objective is at least this.
    Reach(f64),
}

struct Search<'a> {
    inst: &'a AssignmentInstance,
    c: &'a Compiled,
    goal: Goal,
    /// Vehicles to branch on, in branching order.
    open: Vec<usize>,
    choice: Vec<usize>,
    best: Option<(Vec<usize>, f64)>,
    nodes: u64,
    node_limit: u64,
    hit_limit: bool,
}

impl Search<'_> {
    /// The smaller of two valid bounds: each open vehicle's best compatible
    /// action, and the same with request prices charged plus the price of
    /// every request still free.
    fn bound(&self, depth: usize, used: &[u64], partial: f64, free_price: f64) -> f64 {
        let mut plain = 0.0;
        let mut priced = free_price;
        for &v in &self.open[depth..] {
            plain += self.c.best_compatible(used, v);
            priced += self.c.best_reduced(used, v);
        }
        partial + plain.min(priced)
    }

    fn should_prune(&self, bound: f64) -> bool {
        match (&self.goal, &self.best) {
            (Goal::Maximise, Some((_, best))) => bound <= best + tolerance(*best),
            (Goal::Maximise, None) => false,
            (Goal::Reach(target), _) => bound < target - tolerance(*target),
        }
    }

    fn done(&self) -> bool {
        self.hit_limit || (matches!(self.goal, Goal::Reach(_)) && self.best.is_some())
    }

    fn dfs(&mut self, depth: usize, used: &mut Vec<u64>, partial: f64, free_price: f64) {
        if self.done() {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.node_limit {
            self.hit_limit = true;
            return;
        }
        if depth == self.open.len() {
            let obj = self.inst.objective(&self.choice);
            let accept = match (&self.goal, &self.best) {
                (Goal::Maximise, Some((_, best))) => obj > *best,
                (Goal::Maximise, None) => true,
                (Goal::Reach(target), _) => obj >= *target,
            };
            if accept {
                self.best = Some((self.choice.clone(), obj));
            }
            return;
        }
        if self.should_prune(self.bound(depth, used, partial, free_price)) {
            return;
        }
        let v = self.open[depth];
        for k in 0..self.c.by_score[v].len() {
            let a = self.c.by_score[v][k];
            if self.c.conflicts(used, v, a) {
                continue;
            }
            // Compatible masks are disjoint from `used`, so clearing undoes the union.
            for (u, m) in used.iter_mut().zip(&self.c.masks[v][a]) {
                *u |= m;
            }
            self.choice[v] = a;
            self.dfs(
                depth + 1,
                used,
                partial + self.c.scores[v][a],
                free_price - self.c.action_price[v][a],
            );
            for (u, m) in used.iter_mut().zip(&self.c.masks[v][a]) {
                *u &= !m;
            }
            if self.done() {
                return;
            }
        }
    }
}

/// Runs one search with `fixed` vehicles pinned to the given actions.
fn search(
    inst: &AssignmentInstance,
    c: &Compiled,
    fixed: &[Option<usize>],
    goal: Goal,
    node_limit: u64,
) -> (Option<(Vec<usize>, f64)>, u64, bool) {
    let mut used = vec![0u64; c.words];
    let mut choice = vec![0usize; inst.vehicles.len()];
    let mut partial = 0.0;
    let mut free_price: f64 = c.price.iter().sum();
    for (v, f) in fixed.iter().enumerate() {
        if let Some(a) = *f {
            if c.conflicts(&used, v, a) {
                return (None, 0, false);
            }
            free_price -= c.action_price[v][a];
            for (u, m) in used.iter_mut().zip(&c.masks[v][a]) {
                *u |= m;
            }
            choice[v] = a;
            partial += c.scores[v][a];
        }
    }
    let open = c.order.iter().copied().filter(|&v| fixed[v].is_none()).collect();
    let mut s = Search {
        inst,
        c,
        goal,
        open,
        choice,
        best: None,
        nodes: 0,
        node_limit,
        hit_limit: false,
    };
    s.dfs(0, &mut used, partial, free_price);
    (s.best, s.nodes, s.hit_limit)
}

/// Vehicles in branching order take their best action not yet conflicting.
pub fn greedy(inst: &AssignmentInstance) -> Vec<usize> {
    let c = Compiled::new(inst);
    let mut used = vec![0u64; c.words];
    let mut choice = vec![0usize; inst.vehicles.len()];
    for &v in &c.order {
        let a = *c.by_score[v]
            .iter()
            .find(|&&a| !c.conflicts(&used, v, a))
            .expect("null action never conflicts");
        for (u, m) in used.iter_mut().zip(&c.masks[v][a]) {
            *u |= m;
        }
        choice[v] = a;
    }
    choice
}

/// Groups vehicles that can reach each other through shared requests. Each
/// group is returned in ascending vehicle order, groups ordered by their
/// first vehicle.
pub fn conflict_components(inst: &AssignmentInstance) -> Vec<Vec<usize>> {
    let n = inst.vehicles.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut owner: HashMap<RequestId, usize> = HashMap::new();
    for (v, vc) in inst.vehicles.iter().enumerate() {
        for r in vc.actions.iter().flat_map(|a| &a.requests) {
            match owner.get(r) {
                Some(&u) => {
                    let (a, b) = (find(&mut parent, u), find(&mut parent, v));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
                None => {
                    owner.insert(*r, v);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for v in 0..n {
        let root = find(&mut parent, v);
        let k = *slot.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[k].push(v);
    }
    groups
}

/// Exact optimum; among optimal choice vectors, the lexicographically smallest.
///
/// Vehicles that share no request, directly or through other vehicles, are
/// independent, so each conflict component is solved on its own. The set of
/// optimal joint choices is the product of the per-component optimal sets,
/// which makes the combination of per-component lexicographic minima the
/// global lexicographic minimum.
pub fn solve(inst: &AssignmentInstance, opts: &SolveOptions) -> Result<Assignment> {
    inst.validate()?;
    let n = inst.vehicles.len();
    let mut choice = vec![0usize; n];
    let mut nodes = 0u64;
    let mut fallback = false;
    for group in conflict_components(inst) {
        let sub = AssignmentInstance {
            vehicles: group.iter().map(|&v| inst.vehicles[v].clone()).collect(),
        };
        let budget = SolveOptions {
            node_limit: opts.node_limit.saturating_sub(nodes),
            ..*opts
        };
        let part = solve_connected(&sub, &budget)?;
        nodes += part.nodes;
        fallback |= part.fallback;
        for (&v, a) in group.iter().zip(part.choice) {
            choice[v] = a;
        }
    }
    Ok(Assignment {
        objective: inst.objective(&choice),
        choice,
        nodes,
        fallback,
    })
}

/// Solves an instance whose vehicles form one conflict component.
fn solve_connected(inst: &AssignmentInstance, opts: &SolveOptions) -> Result<Assignment> {
    let n = inst.vehicles.len();
    if n == 0 {
        return Ok(Assignment {
            choice: Vec::new(),
            objective: 0.0,
            nodes: 0,
            fallback: false,
        });
    }
    let c = Compiled::new(inst);
    let mut nodes = 0u64;
    let limit_hit = |nodes: u64| -> Result<Assignment> {
        match opts.on_limit {
            LimitPolicy::Error => Err(Error::Solver(format!(
                "node limit {} exceeded",
                opts.node_limit
            ))),
            LimitPolicy::GreedyFallback => {
                warn!("assignment node limit {} hit; using greedy fallback", opts.node_limit);
                let choice = greedy(inst);
                Ok(Assignment {
                    objective: inst.objective(&choice),
                    choice,
                    nodes,
                    fallback: true,
                })
            }
        }
    };

    let (best, used_nodes, hit) = search(inst, &c, &vec![None; n], Goal::Maximise, opts.node_limit);
    nodes += used_nodes;
    if hit {
        return limit_hit(nodes);
    }
    let (mut incumbent, target) = best.expect("the all-null assignment is always feasible");

    // Lexicographic tie-break: pin vehicles in index order to the smallest
    // action index that still admits a completion reaching the optimum.
    let mut fixed: Vec<Option<usize>> = vec![None; n];
    for v in 0..n {
        for a in 0..incumbent[v] {
            fixed[v] = Some(a);
            let (found, used_nodes, hit) =
                search(inst, &c, &fixed, Goal::Reach(target), opts.node_limit.saturating_sub(nodes));
            nodes += used_nodes;
            if hit {
                return limit_hit(nodes);
            }
            if let Some((choice, _)) = found {
                incumbent = choice;
                break;
            }
        }
        fixed[v] = Some(incumbent[v]);
    }
    let objective = inst.objective(&incumbent);
    Ok(Assignment {
        choice: incumbent,
        objective,
        nodes,
        fallback: false,
    })
}
