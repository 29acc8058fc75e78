//! Procedurally generated navigation worlds and their geodesic oracle.
//!
//! A world is an undirected graph of navigable nodes placed in a flat 3-D box.
//! Each node carries an appearance vector (a smooth random field over the
//! floor plan, so nearby nodes look alike) and a handful of objects. Edge
//! weights are never stored: they are always the Euclidean distance between
//! the endpoint positions.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{node_lookup, MbaError, Result};
use crate::json;
use crate::seed;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Unique across the whole world, hence also within the host node.
    pub object_id: usize,
    #[serde(with = "json::vec17")]
    pub feature: Vec<f64>,
    pub host_node: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    #[serde(with = "json::arr3_17")]
    pub position: [f64; 3],
    #[serde(with = "json::vec17")]
    pub appearance: Vec<f64>,
    pub objects: Vec<ObjectSpec>,
}

/// Knobs for [`generate_world`]. The defaults give sparse, Matterport-like
/// graphs: a 20 m box, a 3 m connection radius and a ±0.5 m height jitter.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldParams {
    pub nodes: usize,
    pub k_views: usize,
    pub max_objects: usize,
    pub feature_dim: usize,
    pub object_dim: usize,
    pub radius: f64,
    pub box_size: f64,
    pub z_jitter: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            nodes: 30,
            k_views: 12,
            max_objects: 4,
            feature_dim: 64,
            object_dim: 16,
            radius: 3.0,
            box_size: 20.0,
            z_jitter: 0.5,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 1 {
            return Err(MbaError::Parameter("node count must be at least 1".into()));
        }
        if self.k_views < 4 {
            return Err(MbaError::Parameter(format!("k_views must be at least 4, got {}", self.k_views)));
        }
        if self.feature_dim < 8 {
            return Err(MbaError::Parameter(format!("feature dim must be at least 8, got {}", self.feature_dim)));
        }
        if self.max_objects < 1 || self.object_dim < 1 {
            return Err(MbaError::Parameter("every node needs at least one object of positive dimension".into()));
        }
        if !(self.radius > 0.0 && self.box_size > 0.0 && self.z_jitter >= 0.0) {
            return Err(MbaError::Parameter("radius, box size and z jitter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    k_views: usize,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldFile", into = "WorldFile")]
pub struct WorldGraph {
    nodes: Vec<Node>,
    /// Sorted, each pair stored once with `u < v`.
    edges: Vec<(NodeId, NodeId)>,
    k_views: usize,
    seed: u64,
    adjacency: Vec<Vec<(NodeId, f64)>>,
}

impl From<WorldGraph> for WorldFile {
    fn from(g: WorldGraph) -> Self {
        WorldFile { nodes: g.nodes, edges: g.edges, k_views: g.k_views, seed: g.seed }
    }
}

impl TryFrom<WorldFile> for WorldGraph {
    type Error = MbaError;

    fn try_from(f: WorldFile) -> Result<Self> {
        WorldGraph::new(f.nodes, f.edges, f.k_views, f.seed)
    }
}

pub fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

impl WorldGraph {
    /// Builds and validates a world. Node ids must be dense, the graph
    /// connected and every appearance entry in `[0, 1]`.
    pub fn new(nodes: Vec<Node>, edges: Vec<(NodeId, NodeId)>, k_views: usize, seed: u64) -> Result<Self> {
        let g = Self::build(nodes, edges, k_views, seed)?;
        if !g.is_connected() {
            return Err(MbaError::Consistency("world graph is not connected".into()));
        }
        Ok(g)
    }

    fn build(nodes: Vec<Node>, edges: Vec<(NodeId, NodeId)>, k_views: usize, seed: u64) -> Result<Self> {
        if nodes.is_empty() {
            return Err(MbaError::Consistency("world has no nodes".into()));
        }
        if k_views < 4 {
            return Err(MbaError::Consistency(format!("k_views {k_views} < 4")));
        }
        let k = nodes.len();
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(MbaError::Consistency(format!("node ids must be dense, found {} at index {i}", n.id)));
            }
            if n.appearance.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(MbaError::Consistency(format!("appearance of node {i} leaves [0, 1]")));
            }
            for o in &n.objects {
                if o.host_node != i || o.feature.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(MbaError::Consistency(format!("bad object {} on node {i}", o.object_id)));
                }
            }
        }
        let mut canon: Vec<(NodeId, NodeId)> = Vec::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= k || b >= k || a == b {
                return Err(MbaError::Consistency(format!("invalid edge ({a}, {b})")));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        let before = canon.len();
        canon.dedup();
        if canon.len() != before {
            return Err(MbaError::Consistency("duplicate edge".into()));
        }
        let mut adjacency = vec![Vec::new(); k];
        for &(a, b) in &canon {
            let w = euclidean(&nodes[a].position, &nodes[b].position);
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|&(n, _)| n);
        }
        Ok(Self { nodes, edges: canon, k_views, seed, adjacency })
    }

    fn is_connected(&self) -> bool {
        reachable_from(&self.adjacency, 0).iter().all(|&r| r)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, n: NodeId) -> Result<&Node> {
        self.nodes.get(n).ok_or_else(|| node_lookup(n))
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn k_views(&self) -> usize {
        self.k_views
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes[0].appearance.len()
    }

    pub fn object_dim(&self) -> usize {
        self.nodes.iter().flat_map(|n| n.objects.first()).map(|o| o.feature.len()).next().unwrap_or(0)
    }

    pub fn position(&self, n: NodeId) -> Result<[f64; 3]> {
        Ok(self.node(n)?.position)
    }

    /// Neighbors with edge lengths, ascending by id.
    pub fn neighbors(&self, n: NodeId) -> Result<&[(NodeId, f64)]> {
        self.adjacency.get(n).map(Vec::as_slice).ok_or_else(|| node_lookup(n))
    }

    pub fn adjacency(&self) -> &[Vec<(NodeId, f64)>] {
        &self.adjacency
    }

    pub fn is_adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.adjacency.get(a).is_some_and(|adj| adj.binary_search_by_key(&b, |&(n, _)| n).is_ok())
    }

    /// Euclidean length of an existing edge.
    pub fn edge_length(&self, a: NodeId, b: NodeId) -> Result<f64> {
        let adj = self.neighbors(a)?;
        adj.binary_search_by_key(&b, |&(n, _)| n)
            .map(|i| adj[i].1)
            .map_err(|_| MbaError::InvalidTrajectory(format!("nodes {a} and {b} are not adjacent")))
    }

    /// The local action candidates at `n`: its adjacency list, ascending.
    pub fn candidates(&self, n: NodeId) -> Result<Vec<NodeId>> {
        Ok(self.neighbors(n)?.iter().map(|&(m, _)| m).collect())
    }

    /// Minimum-weight path from `u` to `v`; among equal-length paths the
    /// lexicographically smallest node sequence wins.
    pub fn shortest_path(&self, u: NodeId, v: NodeId) -> Result<(Vec<NodeId>, f64)> {
        self.node(u)?;
        self.node(v)?;
        shortest_path_in(&self.adjacency, u, v)
            .ok_or_else(|| MbaError::Consistency(format!("node {v} unreachable from {u}")))
    }

    /// Geodesic distances from `source` to every node.
    pub fn distances_from(&self, source: NodeId) -> Result<Vec<f64>> {
        self.node(source)?;
        Ok(dijkstra(&self.adjacency, source))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn reachable_from(adjacency: &[Vec<(NodeId, f64)>], start: NodeId) -> Vec<bool> {
    let mut seen = vec![false; adjacency.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(n) = queue.pop_front() {
        for &(m, _) in &adjacency[n] {
            if !seen[m] {
                seen[m] = true;
                queue.push_back(m);
            }
        }
    }
    seen
}

#[derive(PartialEq)]
struct HeapEntry(f64, NodeId);

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

/// Single-source Dijkstra over an adjacency list; unreachable nodes get +inf.
pub fn dijkstra(adjacency: &[Vec<(NodeId, f64)>], source: NodeId) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adjacency.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry(0.0, source));
    while let Some(HeapEntry(d, n)) = heap.pop() {
        if d > dist[n] {
            continue;
        }
        for &(m, w) in &adjacency[n] {
            let nd = d + w;
            if nd < dist[m] {
                dist[m] = nd;
                heap.push(HeapEntry(nd, m));
            }
        }
    }
    dist
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Shortest path over an arbitrary adjacency list (ascending neighbor ids),
/// with lexicographic tie-breaking. The returned length is the in-order sum
/// of the path's edge weights.
pub fn shortest_path_in(adjacency: &[Vec<(NodeId, f64)>], u: NodeId, v: NodeId) -> Option<(Vec<NodeId>, f64)> {
    let to_target = dijkstra(adjacency, v);
    if !to_target[u].is_finite() {
        return None;
    }
    let mut path = vec![u];
    let mut length = 0.0;
    let mut cur = u;
    while cur != v {
        let &(next, w) = adjacency[cur]
            .iter()
            .find(|&&(m, w)| to_target[m].is_finite() && to_target[m] < to_target[cur] && near(w + to_target[m], to_target[cur]))?;
        length += w;
        path.push(next);
        cur = next;
    }
    Some((path, length))
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Generates a connected world. Nodes within `radius` are joined (shortest
/// pairs first, degree capped at `k_views` so every neighbor can own a view
/// slot); remaining components are then stitched together with the shortest
/// available cross-component edges.
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<WorldGraph> {
    params.validate()?;
    let k = params.nodes;
    let mut rng = seed::rng(seed, "world", &[]);

    let positions: Vec<[f64; 3]> = (0..k)
        .map(|_| {
            [
                rng.random::<f64>() * params.box_size,
                rng.random::<f64>() * params.box_size,
                (rng.random::<f64>() * 2.0 - 1.0) * params.z_jitter,
            ]
        })
        .collect();

    // One plane wave per appearance channel, wavelengths of 8-24 m.
    let waves: Vec<(f64, f64, f64)> = (0..params.feature_dim)
        .map(|_| {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let wavelength = 8.0 + 16.0 * rng.random::<f64>();
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let freq = std::f64::consts::TAU / wavelength;
            (freq * angle.cos(), freq * angle.sin(), phase)
        })
        .collect();

    let mut next_object = 0;
    let mut nodes = Vec::with_capacity(k);
    for (id, &position) in positions.iter().enumerate() {
        let appearance = waves
            .iter()
            .map(|&(kx, ky, phase)| {
                let wave = (kx * position[0] + ky * position[1] + phase).sin();
                let jitter = rng.random::<f64>() * 2.0 - 1.0;
                (0.5 + 0.35 * wave + 0.15 * jitter).clamp(0.0, 1.0)
            })
            .collect();
        let m = rng.random_range(1..=params.max_objects);
        let objects = (0..m)
            .map(|_| {
                let object_id = next_object;
                next_object += 1;
                ObjectSpec { object_id, feature: (0..params.object_dim).map(|_| rng.random::<f64>()).collect(), host_node: id }
            })
            .collect();
        nodes.push(Node { id, position, appearance, objects });
    }

    let mut pairs: Vec<(f64, NodeId, NodeId)> = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            pairs.push((euclidean(&positions[a], &positions[b]), a, b));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));

    let max_degree = params.k_views;
    let mut degree = vec![0usize; k];
    let mut uf = UnionFind((0..k).collect());
    let mut edges = Vec::new();
    let mut components = k;
    for &(d, a, b) in &pairs {
        if d > params.radius {
            break;
        }
        if degree[a] < max_degree && degree[b] < max_degree {
            edges.push((a, b));
            degree[a] += 1;
            degree[b] += 1;
            if uf.union(a, b) {
                components -= 1;
            }
        }
    }
    for &(_, a, b) in &pairs {
        if components == 1 {
            break;
        }
        if degree[a] < max_degree && degree[b] < max_degree && uf.union(a, b) {
            edges.push((a, b));
            degree[a] += 1;
            degree[b] += 1;
            components -= 1;
        }
    }
    if components > 1 {
        return Err(MbaError::Generation("could not connect the world under the degree cap".into()));
    }
    WorldGraph::new(nodes, edges, params.k_views, seed)
}

/// Settings for [`make_episode`].
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeParams {
    pub instruction_dim: usize,
    pub noise_std: f64,
    pub min_hops: usize,
    pub min_distance: f64,
    pub max_steps: usize,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self { instruction_dim: 64, noise_std: 0.1, min_hops: 3, min_distance: 6.0, max_steps: 15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: u64,
    pub start: NodeId,
    pub goal: NodeId,
    pub goal_object: usize,
    pub gt_path: Vec<NodeId>,
    #[serde(with = "json::vec17")]
    pub instruction: Vec<f64>,
    pub seed: u64,
    pub max_steps: usize,
}

impl Episode {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Length of the ground-truth path in meters.
    pub fn gt_distance(&self, g: &WorldGraph) -> Result<f64> {
        path_length(g, &self.gt_path)
    }
}

/// In-order sum of edge lengths along a walk.
pub fn path_length(g: &WorldGraph, path: &[NodeId]) -> Result<f64> {
    let mut total = 0.0;
    for w in path.windows(2) {
        total += g.edge_length(w[0], w[1])?;
    }
    Ok(total)
}

/// Fixed random projection from goal descriptors to instruction space. It is
/// keyed only by its shape, so every world shares the same "language".
pub fn instruction_projection(out_dim: usize, in_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(0x1A57_2C71_0000_0001, "instruction-projection", &[out_dim as u64, in_dim as u64]);
    let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("positive std");
    (0..out_dim).map(|_| (0..in_dim).map(|_| normal.sample(&mut rng)).collect()).collect()
}

/// Noise-free instruction for a goal node and object.
pub fn goal_descriptor(g: &WorldGraph, goal: NodeId, object: &ObjectSpec, instruction_dim: usize) -> Result<Vec<f64>> {
    let pano = crate::features::original_features(g, goal, g.seed())?;
    let mut input = pano.mean_view();
    input.extend_from_slice(&object.feature);
    let proj = instruction_projection(instruction_dim, input.len());
    Ok(proj.iter().map(|row| row.iter().zip(&input).map(|(a, b)| a * b).sum()).collect())
}

/// All ordered (start, goal) pairs meeting the minimum hop count and metric
/// separation, ascending.
pub fn valid_episode_pairs(g: &WorldGraph, params: &EpisodeParams) -> Vec<(NodeId, NodeId, Vec<NodeId>, f64)> {
    let mut out = Vec::new();
    for s in 0..g.len() {
        for t in 0..g.len() {
            if s == t {
                continue;
            }
            if let Ok((path, d)) = g.shortest_path(s, t) {
                if path.len() > params.min_hops && d >= params.min_distance {
                    out.push((s, t, path, d));
                }
            }
        }
    }
    out
}

/// Samples an episode uniformly over valid (start, goal) pairs. The
/// instruction is the projected goal descriptor plus Gaussian noise.
pub fn make_episode(g: &WorldGraph, seed: u64, params: &EpisodeParams) -> Result<Episode> {
    let pairs = valid_episode_pairs(g, params);
    make_episode_from_pairs(g, &pairs, seed, params)
}

pub fn make_episode_from_pairs(
    g: &WorldGraph,
    pairs: &[(NodeId, NodeId, Vec<NodeId>, f64)],
    seed: u64,
    params: &EpisodeParams,
) -> Result<Episode> {
    if params.instruction_dim == 0 {
        return Err(MbaError::Parameter("instruction dim must be positive".into()));
    }
    if !(params.noise_std >= 0.0) {
        return Err(MbaError::Parameter("noise std must be non-negative".into()));
    }
    if pairs.is_empty() {
        return Err(MbaError::Generation(format!(
            "no start/goal pair is {} hops and {} m apart",
            params.min_hops, params.min_distance
        )));
    }
    let mut rng = seed::rng(g.seed(), "episode", &[seed]);
    let (start, goal, gt_path, _) = pairs[rng.random_range(0..pairs.len())].clone();
    let objects = &g.node(goal)?.objects;
    let object = &objects[rng.random_range(0..objects.len())];
    let mut instruction = goal_descriptor(g, goal, object, params.instruction_dim)?;
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std).map_err(|e| MbaError::Parameter(e.to_string()))?;
        for x in &mut instruction {
            *x += normal.sample(&mut rng);
        }
    }
    let hops = gt_path.len() - 1;
    Ok(Episode {
        episode_id: seed,
        start,
        goal,
        goal_object: object.object_id,
        gt_path,
        instruction,
        seed,
        max_steps: params.max_steps.max(hops + 5),
    })
}
