//! Road network: a strongly connected directed graph of intersections with
//! cached shortest travel times and first-hop routing tables.

mod embedding;

pub use embedding::{train_embeddings, EmbeddingConfig, EmbeddingReport, LocationEmbedding, ProxyWeights};

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use petgraph::algo::kosaraju_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Seconds;

/// Dense index of a location inside a [`RoadNetwork`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocationId(pub u32);

impl LocationId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NetworkOptions {
    /// Networks with at most this many nodes get every shortest-path row
    /// computed at construction; larger ones fill rows on first use.
    pub dense_threshold: usize,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        Self {
            dense_threshold: 5000,
        }
    }
}

#[derive(Debug)]
struct Row {
    time: Vec<Seconds>,
    hop: Vec<u32>,
}

/// Immutable after construction; rows computed lazily are guarded by
/// `OnceLock`, so the network can be shared freely between threads.
#[derive(Debug)]
pub struct RoadNetwork {
    external: Vec<u64>,
    index: HashMap<u64, LocationId>,
    /// Nodes dropped by the SCC reduction, mapped to the nearest kept node.
    snapped: HashMap<u64, LocationId>,
    adjacency: Vec<Vec<(u32, Seconds)>>,
    rows: Vec<OnceLock<Row>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry(Seconds, u32);

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl RoadNetwork {
    /// Builds the network restricted to its largest strongly connected
    /// component. Ties between equally large components go to the one holding
    /// the smallest node id.
    pub fn build(locations: &[u64], edges: &[(u64, u64, Seconds)]) -> Result<Self> {
        Self::build_with(locations, edges, NetworkOptions::default())
    }

    pub fn build_with(
        locations: &[u64],
        edges: &[(u64, u64, Seconds)],
        opts: NetworkOptions,
    ) -> Result<Self> {
        let mut graph = DiGraph::<u64, Seconds>::new();
        let mut node_of = HashMap::new();
        let mut ids: Vec<u64> = locations.to_vec();
        ids.sort_unstable();
        ids.dedup();
        for &id in &ids {
            node_of.insert(id, graph.add_node(id));
        }
        for &(a, b, w) in edges {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Network(format!(
                    "edge {a}->{b} has non-positive weight {w}"
                )));
            }
            let (Some(&na), Some(&nb)) = (node_of.get(&a), node_of.get(&b)) else {
                return Err(Error::Network(format!(
                    "edge {a}->{b} references an undeclared location"
                )));
            };
            if a != b {
                graph.add_edge(na, nb, w);
            }
        }

        let best = kosaraju_scc(&graph)
            .into_iter()
            .map(|comp| {
                let min_id = comp.iter().map(|&n| graph[n]).min().unwrap_or(u64::MAX);
                (comp, min_id)
            })
            .max_by(|(a, ida), (b, idb)| a.len().cmp(&b.len()).then(idb.cmp(ida)));
        let Some((component, _)) = best else {
            return Err(Error::Network("graph is empty".into()));
        };

        let mut kept: Vec<u64> = component.iter().map(|&n| graph[n]).collect();
        kept.sort_unstable();
        let index: HashMap<u64, LocationId> = kept
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, LocationId(i as u32)))
            .collect();

        let mut adjacency: Vec<Vec<(u32, Seconds)>> = vec![Vec::new(); kept.len()];
        for &(a, b, w) in edges {
            if a == b {
                continue;
            }
            if let (Some(&la), Some(&lb)) = (index.get(&a), index.get(&b)) {
                let list = &mut adjacency[la.index()];
                match list.iter_mut().find(|(to, _)| *to == lb.0) {
                    Some(entry) => entry.1 = entry.1.min(w),
                    None => list.push((lb.0, w)),
                }
            }
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(to, _)| to);
        }

        let snapped = snap_removed(&ids, edges, &index);
        let n = kept.len();
        let net = Self {
            external: kept,
            index,
            snapped,
            adjacency,
            rows: (0..n).map(|_| OnceLock::new()).collect(),
        };
        if n <= opts.dense_threshold {
            for a in 0..n {
                net.row(LocationId(a as u32));
            }
        }
        Ok(net)
    }

    /// A `rows x cols` grid with two-way edges between 4-neighbours. Node id
    /// of cell `(r, c)` is `r * cols + c`.
    pub fn grid(rows: usize, cols: usize, edge_seconds: Seconds) -> Result<Self> {
        let (locations, edges) = grid_edges(rows, cols, edge_seconds);
        Self::build(&locations, &edges)
    }

    pub fn from_edge_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let (locations, edges) = parse_edge_list(&text, &path.display().to_string())?;
        Self::build(&locations, &edges)
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn locations(&self) -> impl ExactSizeIterator<Item = LocationId> {
        (0..self.external.len() as u32).map(LocationId)
    }

    pub fn external_id(&self, loc: LocationId) -> u64 {
        self.external[loc.index()]
    }

    /// Looks up a node id that survived the SCC reduction.
    pub fn lookup(&self, external: u64) -> Result<LocationId> {
        self.index
            .get(&external)
            .copied()
            .ok_or(Error::UnknownLocation(external))
    }

    /// Like [`lookup`](Self::lookup), but nodes removed by the SCC reduction
    /// map to the nearest kept node of the original graph.
    pub fn nearest(&self, external: u64) -> Option<LocationId> {
        self.index
            .get(&external)
            .or_else(|| self.snapped.get(&external))
            .copied()
    }

    /// Outgoing arcs with their travel times.
    pub fn neighbours(&self, loc: LocationId) -> impl Iterator<Item = (LocationId, Seconds)> + '_ {
        self.adjacency[loc.index()]
            .iter()
            .map(|&(to, w)| (LocationId(to), w))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Shortest travel time, checked.
    pub fn travel_time(&self, a: LocationId, b: LocationId) -> Result<Seconds> {
        let n = self.len();
        if a.index() >= n {
            return Err(Error::UnknownLocation(a.0 as u64));
        }
        if b.index() >= n {
            return Err(Error::UnknownLocation(b.0 as u64));
        }
        Ok(self.time(a, b))
    }

    /// Shortest travel time. Panics on ids not belonging to this network.
    #[inline]
    pub fn time(&self, a: LocationId, b: LocationId) -> Seconds {
        self.row(a).time[b.index()]
    }

    /// The node after `a` on the cached shortest path from `a` to `b`
    /// (`b` itself when adjacent, `a` when `a == b`).
    #[inline]
    pub fn next_hop(&self, a: LocationId, b: LocationId) -> LocationId {
        LocationId(self.row(a).hop[b.index()])
    }

    /// Largest shortest travel time between any two locations.
    pub fn diameter(&self) -> Seconds {
        self.locations()
            .map(|a| self.row(a).time.iter().copied().fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    fn row(&self, a: LocationId) -> &Row {
        self.rows[a.index()].get_or_init(|| self.dijkstra(a.0))
    }

    fn dijkstra(&self, src: u32) -> Row {
        let n = self.len();
        let mut time = vec![f64::INFINITY; n];
        let mut hop = vec![u32::MAX; n];
        let mut heap = BinaryHeap::new();
        time[src as usize] = 0.0;
        hop[src as usize] = src;
        heap.push(HeapEntry(0.0, src));
        while let Some(HeapEntry(d, u)) = heap.pop() {
            if d > time[u as usize] {
                continue;
            }
            for &(v, w) in &self.adjacency[u as usize] {
                let nd = d + w;
                if nd < time[v as usize] {
                    time[v as usize] = nd;
                    hop[v as usize] = if u == src { v } else { hop[u as usize] };
                    heap.push(HeapEntry(nd, v));
                }
            }
        }
        Row { time, hop }
    }
}

/// Multi-source Dijkstra over the undirected original graph, seeded from
/// every kept node, so removed nodes inherit their closest kept neighbour.
fn snap_removed(
    ids: &[u64],
    edges: &[(u64, u64, Seconds)],
    kept: &HashMap<u64, LocationId>,
) -> HashMap<u64, LocationId> {
    let pos: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut adj: Vec<Vec<(usize, Seconds)>> = vec![Vec::new(); ids.len()];
    for &(a, b, w) in edges {
        let (ia, ib) = (pos[&a], pos[&b]);
        adj[ia].push((ib, w));
        adj[ib].push((ia, w));
    }
    let mut dist = vec![f64::INFINITY; ids.len()];
    let mut owner: Vec<Option<LocationId>> = vec![None; ids.len()];
    let mut heap = BinaryHeap::new();
    for (i, id) in ids.iter().enumerate() {
        if let Some(&loc) = kept.get(id) {
            dist[i] = 0.0;
            owner[i] = Some(loc);
            heap.push(HeapEntry(0.0, i as u32));
        }
    }
    while let Some(HeapEntry(d, u)) = heap.pop() {
        let u = u as usize;
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            if d + w < dist[v] {
                dist[v] = d + w;
                owner[v] = owner[u];
                heap.push(HeapEntry(d + w, v as u32));
            }
        }
    }
    ids.iter()
        .zip(owner)
        .filter(|(id, _)| !kept.contains_key(id))
        .filter_map(|(&id, o)| o.map(|loc| (id, loc)))
        .collect()
}

pub fn grid_edges(rows: usize, cols: usize, edge_seconds: Seconds) -> (Vec<u64>, Vec<(u64, u64, Seconds)>) {
    let id = |r: usize, c: usize| (r * cols + c) as u64;
    let locations = (0..rows * cols).map(|i| i as u64).collect();
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((id(r, c), id(r, c + 1), edge_seconds));
                edges.push((id(r, c + 1), id(r, c), edge_seconds));
            }
            if r + 1 < rows {
                edges.push((id(r, c), id(r + 1, c), edge_seconds));
                edges.push((id(r + 1, c), id(r, c), edge_seconds));
            }
        }
    }
    (locations, edges)
}

/// Parses `src dst weight_seconds` lines. Blank lines and `#` comments are
/// ignored. The location set is every node id mentioned.
pub fn parse_edge_list(text: &str, source: &str) -> Result<(Vec<u64>, Vec<(u64, u64, Seconds)>)> {
    let mut edges = Vec::new();
    let mut locations = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let src: u64 = fields[0].parse().map_err(|e| err(format!("bad source id: {e}")))?;
        let dst: u64 = fields[1].parse().map_err(|e| err(format!("bad target id: {e}")))?;
        let w: f64 = fields[2].parse().map_err(|e| err(format!("bad weight: {e}")))?;
        if !(w.is_finite() && w > 0.0) {
            return Err(err(format!("weight must be positive, got {w}")));
        }
        locations.push(src);
        locations.push(dst);
        edges.push((src, dst, w));
    }
    locations.sort_unstable();
    locations.dedup();
    Ok((locations, edges))
}

pub fn format_edge_list(edges: &[(u64, u64, Seconds)]) -> String {
    let mut out = String::new();
    for (a, b, w) in edges {
        out.push_str(&format!("{a} {b} {w}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Floyd-Warshall over the raw edge list.
    fn floyd(n: usize, edges: &[(u64, u64, f64)]) -> Vec<Vec<f64>> {
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for &(a, b, w) in edges {
            let (a, b) = (a as usize, b as usize);
            d[a][b] = d[a][b].min(w);
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn single_node_has_zero_table() {
        let net = RoadNetwork::build(&[7], &[]).unwrap();
        assert_eq!(net.len(), 1);
        assert_eq!(net.time(LocationId(0), LocationId(0)), 0.0);
    }

    #[test]
    fn three_cycle_matches_floyd() {
        let edges = [(0, 1, 10.0), (1, 2, 20.0), (2, 0, 30.0)];
        let net = RoadNetwork::build(&[0, 1, 2], &edges).unwrap();
        let oracle = floyd(3, &edges);
        assert_eq!(oracle[0][2], 30.0);
        for a in 0..3u32 {
            for b in 0..3u32 {
                assert_eq!(net.time(LocationId(a), LocationId(b)), oracle[a as usize][b as usize]);
            }
        }
    }

    #[test]
    fn dead_end_node_is_removed_and_snapped() {
        // 0..3 form a two-way ring; 4 only has an incoming edge from 3.
        let mut edges = vec![];
        for i in 0..4u64 {
            edges.push((i, (i + 1) % 4, 5.0));
            edges.push(((i + 1) % 4, i, 5.0));
        }
        edges.push((3, 4, 2.0));
        let net = RoadNetwork::build(&[0, 1, 2, 3, 4], &edges).unwrap();
        assert_eq!(net.len(), 4);
        assert!(net.lookup(4).is_err());
        assert_eq!(net.nearest(4), Some(net.lookup(3).unwrap()));
    }

    #[test]
    fn single_arc_and_unknown_location() {
        let edges = [(0, 1, 42.0), (1, 0, 1.0)];
        let net = RoadNetwork::build(&[0, 1], &edges).unwrap();
        let (a, b) = (net.lookup(0).unwrap(), net.lookup(1).unwrap());
        assert_eq!(net.travel_time(a, b).unwrap(), 42.0);
        assert_eq!(net.travel_time(a, a).unwrap(), 0.0);
        assert!(matches!(
            net.travel_time(a, LocationId(9)),
            Err(Error::UnknownLocation(9))
        ));
    }

    #[test]
    fn grid_corner_to_corner_matches_bfs() {
        let net = RoadNetwork::grid(10, 10, 1.0).unwrap();
        // BFS oracle over the same 4-neighbourhood.
        let mut dist = [[usize::MAX; 10]; 10];
        let mut queue = std::collections::VecDeque::from([(0usize, 0usize)]);
        dist[0][0] = 0;
        while let Some((r, c)) = queue.pop_front() {
            let nbrs = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (nr, nc) in nbrs {
                if nr < 10 && nc < 10 && dist[nr][nc] == usize::MAX {
                    dist[nr][nc] = dist[r][c] + 1;
                    queue.push_back((nr, nc));
                }
            }
        }
        assert_eq!(dist[9][9], 18);
        let t = net.time(net.lookup(0).unwrap(), net.lookup(99).unwrap());
        assert_eq!(t, dist[9][9] as f64);
    }

    #[test]
    fn next_hop_walks_a_shortest_path() {
        let net = RoadNetwork::grid(4, 5, 3.0).unwrap();
        let (a, b) = (net.lookup(0).unwrap(), net.lookup(19).unwrap());
        let mut at = a;
        let mut elapsed = 0.0;
        while at != b {
            let next = net.next_hop(at, b);
            elapsed += net.time(at, next);
            at = next;
        }
        assert_eq!(elapsed, net.time(a, b));
    }

    #[test]
    fn lazy_rows_agree_with_eager() {
        let (locs, edges) = grid_edges(6, 6, 2.0);
        let eager = RoadNetwork::build(&locs, &edges).unwrap();
        let lazy =
            RoadNetwork::build_with(&locs, &edges, NetworkOptions { dense_threshold: 0 }).unwrap();
        for a in eager.locations() {
            for b in eager.locations() {
                assert_eq!(eager.time(a, b), lazy.time(a, b));
            }
        }
    }

    #[test]
    fn rejects_bad_weights_and_empty_graphs() {
        assert!(RoadNetwork::build(&[0, 1], &[(0, 1, 0.0)]).is_err());
        assert!(RoadNetwork::build(&[0, 1], &[(0, 1, -3.0)]).is_err());
        assert!(RoadNetwork::build(&[], &[]).is_err());
    }

    #[test]
    fn edge_list_parse_errors_carry_line_numbers() {
        let text = "# header\n0 1 5\n1 0 x\n";
        match parse_edge_list(text, "net.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let (locs, edges) = parse_edge_list("0 1 5\n1 0 7 # back\n", "net.txt").unwrap();
        assert_eq!(locs, vec![0, 1]);
        assert_eq!(edges, vec![(0, 1, 5.0), (1, 0, 7.0)]);
    }
}
