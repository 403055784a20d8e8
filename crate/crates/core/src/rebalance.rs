//! Rebalancing of vehicles left without work: sample past request origins,
//! give each sampled point an allotment, and send every idle vehicle to a
//! point by a minimum total travel time transportation plan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadnet::{LocationId, RoadNetwork};

/// Default cap on sampled demand points per epoch.
pub const DEFAULT_SAMPLE: usize = 500;

/// Uniform draw with replacement of `min(count, unassigned)` origins from
/// `history`. Empty history gives an empty sample.
pub fn sample_demand<R: Rng + ?Sized>(
    history: &[LocationId],
    count: usize,
    unassigned: usize,
    rng: &mut R,
) -> Vec<LocationId> {
    if history.is_empty() {
        return Vec::new();
    }
    let k = count.min(unassigned);
    (0..k).map(|_| history[rng.gen_range(0..history.len())]).collect()
}

/// Floor or ceiling of `vehicles / points` per point, ceilings first.
pub fn compute_allotments(vehicles: usize, points: usize) -> Vec<usize> {
    if points == 0 {
        return Vec::new();
    }
    let base = vehicles / points;
    let extra = vehicles % points;
    (0..points).map(|j| base + usize::from(j < extra)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceInstance {
    /// Cost row per vehicle: travel seconds to each demand point.
    pub cost: Vec<Vec<f64>>,
    pub points: Vec<LocationId>,
    pub allotments: Vec<usize>,
}

impl RebalanceInstance {
    pub fn new(positions: &[LocationId], points: Vec<LocationId>, net: &RoadNetwork) -> Self {
        let cost = positions
            .iter()
            .map(|&p| points.iter().map(|&o| net.time(p, o)).collect())
            .collect();
        let allotments = compute_allotments(positions.len(), points.len());
        Self {
            cost,
            points,
            allotments,
        }
    }

    pub fn vehicles(&self) -> usize {
        self.cost.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalancePlan {
    /// Demand-point index per vehicle.
    pub targets: Vec<usize>,
    pub total_cost: f64,
}

impl RebalancePlan {
    /// 0/1 assignment matrix, vehicles by points.
    pub fn matrix(&self, points: usize) -> Vec<Vec<u8>> {
        self.targets
            .iter()
            .map(|&t| (0..points).map(|j| u8::from(j == t)).collect())
            .collect()
    }
}

#[derive(Debug, Clone)]
struct FlowArc {
    to: usize,
    cap: i64,
    cost: f64,
    rev: usize,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

fn add_arc(g: &mut [Vec<FlowArc>], a: usize, b: usize, cap: i64, cost: f64) {
    let (ra, rb) = (g[b].len(), g[a].len());
    g[a].push(FlowArc { to: b, cap, cost, rev: ra });
    g[b].push(FlowArc { to: a, cap: 0, cost: -cost, rev: rb });
}

/// Successive shortest paths with Johnson potentials. Every augmentation
/// carries one unit from a vehicle, so the flow stays integral.
pub fn solve_rebalance(inst: &RebalanceInstance) -> Result<RebalancePlan> {
    let n = inst.vehicles();
    let p = inst.points.len();
    if inst.allotments.len() != p {
        return Err(Error::Contract("one allotment per demand point required".into()));
    }
    let supply: usize = inst.allotments.iter().sum();
    if supply != n {
        return Err(Error::Contract(format!(
            "allotments sum to {supply} but {n} vehicles need targets"
        )));
    }
    if inst.cost.iter().any(|row| row.len() != p || row.iter().any(|c| !c.is_finite())) {
        return Err(Error::Contract("cost matrix must be finite and vehicles x points".into()));
    }
    if n == 0 {
        return Ok(RebalancePlan {
            targets: vec![],
            total_cost: 0.0,
        });
    }
    let (src, sink) = (n + p, n + p + 1);
    let nodes = n + p + 2;
    let mut g: Vec<Vec<FlowArc>> = vec![Vec::new(); nodes];
    for i in 0..n {
        add_arc(&mut g, src, i, 1, 0.0);
        for j in 0..p {
            add_arc(&mut g, i, n + j, 1, inst.cost[i][j]);
        }
    }
    for (j, &a) in inst.allotments.iter().enumerate() {
        if a > 0 {
            add_arc(&mut g, n + j, sink, a as i64, 0.0);
        }
    }
    // Costs are non-negative travel times, so zero potentials are valid.
    let mut pot = vec![0.0; nodes];
    let mut dist = vec![f64::INFINITY; nodes];
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
    for _ in 0..n {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|q| *q = None);
        dist[src] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Entry(0.0, src));
        while let Some(Entry(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (k, e) in g[u].iter().enumerate() {
                if e.cap <= 0 {
                    continue;
                }
                let reduced = (e.cost + pot[u] - pot[e.to]).max(0.0);
                let nd = d + reduced;
                if nd < dist[e.to] {
                    dist[e.to] = nd;
                    prev[e.to] = Some((u, k));
                    heap.push(Entry(nd, e.to));
                }
            }
        }
        if !dist[sink].is_finite() {
            return Err(Error::Solver("transportation problem has no feasible plan".into()));
        }
        for v in 0..nodes {
            if dist[v].is_finite() {
                pot[v] += dist[v];
            }
        }
        let mut v = sink;
        while let Some((u, k)) = prev[v] {
            g[u][k].cap -= 1;
            let r = g[u][k].rev;
            g[v][r].cap += 1;
            v = u;
        }
    }
    let mut targets = vec![usize::MAX; n];
    for (i, t) in targets.iter_mut().enumerate() {
        for e in &g[i] {
            if e.to >= n && e.to < n + p && e.cap == 0 {
                *t = e.to - n;
            }
        }
        if *t == usize::MAX {
            return Err(Error::Solver(format!("vehicle {i} left without a target")));
        }
    }
    let total_cost = targets.iter().enumerate().map(|(i, &j)| inst.cost[i][j]).sum();
    Ok(RebalancePlan { targets, total_cost })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn inst(cost: Vec<Vec<f64>>, allotments: Vec<usize>) -> RebalanceInstance {
        let p = allotments.len();
        RebalanceInstance {
            cost,
            points: (0..p as u32).map(LocationId).collect(),
            allotments,
        }
    }

    #[test]
    fn allotments() {
        assert_eq!(compute_allotments(500, 500), vec![1; 500]);
        assert_eq!(compute_allotments(7, 3), vec![3, 2, 2]);
        assert_eq!(compute_allotments(2, 5), vec![1, 1, 0, 0, 0]);
    }

    #[test]
    fn sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_demand(&[], 500, 3, &mut rng).is_empty());
        let h = [LocationId(4), LocationId(9)];
        assert_eq!(sample_demand(&h, 500, 3, &mut rng).len(), 3);
        let a = sample_demand(&h, 10, 10, &mut ChaCha8Rng::seed_from_u64(2));
        let b = sample_demand(&h, 10, 10, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn single_vehicle() {
        let plan = solve_rebalance(&inst(vec![vec![42.0]], vec![1])).unwrap();
        assert_eq!(plan.targets, vec![0]);
        assert_eq!(plan.total_cost, 42.0);
    }

    #[test]
    fn diagonal_assignment() {
        let plan = solve_rebalance(&inst(vec![vec![1.0, 10.0], vec![10.0, 1.0]], vec![1, 1])).unwrap();
        assert_eq!(plan.targets, vec![0, 1]);
        assert_eq!(plan.total_cost, 2.0);
    }

    #[test]
    fn needs_rerouting() {
        // Greedy would give vehicle 0 point 0; optimum swaps.
        let plan = solve_rebalance(&inst(vec![vec![1.0, 2.0], vec![1.0, 100.0]], vec![1, 1])).unwrap();
        assert_eq!(plan.targets, vec![1, 0]);
        assert_eq!(plan.total_cost, 3.0);
    }

    #[test]
    fn capacities_are_respected() {
        let plan = solve_rebalance(&inst(vec![vec![1.0, 5.0]; 3], vec![2, 1])).unwrap();
        assert_eq!(plan.targets.iter().filter(|&&t| t == 0).count(), 2);
        assert_eq!(plan.total_cost, 7.0);
    }

    #[test]
    fn allotment_mismatch_is_contract_error() {
        assert!(matches!(
            solve_rebalance(&inst(vec![vec![1.0, 2.0]], vec![1, 1])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn instance_from_network() {
        let net = RoadNetwork::grid(1, 3, 30.0).unwrap();
        let i = RebalanceInstance::new(&[LocationId(0), LocationId(2)], vec![LocationId(2), LocationId(0)], &net);
        let plan = solve_rebalance(&i).unwrap();
        assert_eq!(plan.targets, vec![1, 0]);
        assert_eq!(plan.total_cost, 0.0);
        assert_eq!(plan.matrix(2), vec![vec![0, 1], vec![1, 0]]);
    }
}
