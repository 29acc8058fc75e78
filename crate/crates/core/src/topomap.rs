//! The agent's topological map: visited nodes with their full panoramas,
//! ghost nodes (seen but not visited) with the views that looked at them, and
//! the connectivity discovered so far.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{MbaError, Result};
use crate::features::{mean_of, PanoramaFeatures};
use crate::world::{dijkstra, shortest_path_in, NodeId, WorldGraph};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopoMap {
    visited: BTreeMap<NodeId, Vec<Vec<f64>>>,
    ghosts: BTreeMap<NodeId, Vec<Vec<f64>>>,
    map_edges: BTreeSet<(NodeId, NodeId)>,
    step: usize,
    current: Option<NodeId>,
}

impl TopoMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the panorama observed at `current`. A first visit promotes the
    /// node out of the ghost set, stores the panorama, appends the view toward
    /// each unvisited neighbor to that ghost's observations and adds the
    /// connecting edges. Revisits only move the current node and the step.
    pub fn update(&mut self, current: NodeId, pano: &PanoramaFeatures, g: &WorldGraph) -> Result<()> {
        if pano.node != current {
            return Err(MbaError::Consistency(format!("panorama of node {} used at node {current}", pano.node)));
        }
        let neighbors = g.candidates(current)?;
        let mut faced: Vec<NodeId> = pano.view_to_neighbor.values().copied().collect();
        faced.sort_unstable();
        if faced != neighbors {
            return Err(MbaError::Consistency(format!("panorama does not match the neighbors of node {current}")));
        }
        self.step += 1;
        self.current = Some(current);
        if self.visited.contains_key(&current) {
            return Ok(());
        }
        self.ghosts.remove(&current);
        self.visited.insert(current, pano.views.clone());
        for (&view, &n) in &pano.view_to_neighbor {
            self.map_edges.insert((current.min(n), current.max(n)));
            if !self.visited.contains_key(&n) {
                self.ghosts.entry(n).or_default().push(pano.views[view].clone());
            }
        }
        Ok(())
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn current(&self) -> Option<NodeId> {
        self.current
    }

    pub fn is_empty(&self) -> bool {
        self.visited.is_empty()
    }

    pub fn visited(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.visited.keys().copied()
    }

    pub fn ghosts(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ghosts.keys().copied()
    }

    pub fn is_visited(&self, n: NodeId) -> bool {
        self.visited.contains_key(&n)
    }

    pub fn is_ghost(&self, n: NodeId) -> bool {
        self.ghosts.contains_key(&n)
    }

    pub fn map_edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.map_edges
    }

    pub fn ghost_observations(&self, n: NodeId) -> Option<&[Vec<f64>]> {
        self.ghosts.get(&n).map(Vec::as_slice)
    }

    /// Global action nodes: every ghost plus every visited node other than
    /// the current one, ascending.
    pub fn action_nodes(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self.ghosts.keys().chain(self.visited.keys()).copied().filter(|&n| Some(n) != self.current).collect();
        out.sort_unstable();
        out
    }

    /// Mean of the views that observed ghost `n`.
    pub fn ghost_embedding(&self, n: NodeId) -> Result<Vec<f64>> {
        self.ghosts.get(&n).map(|obs| mean_of(obs)).ok_or(MbaError::Lookup { kind: "ghost node", id: n })
    }

    /// Mean over the full panorama stored for visited node `n`.
    pub fn visited_embedding(&self, n: NodeId) -> Result<Vec<f64>> {
        self.visited.get(&n).map(|views| mean_of(views)).ok_or(MbaError::Lookup { kind: "visited node", id: n })
    }

    pub fn embedding(&self, n: NodeId) -> Result<Vec<f64>> {
        if self.visited.contains_key(&n) {
            self.visited_embedding(n)
        } else {
            self.ghost_embedding(n)
        }
    }

    /// World adjacency restricted to discovered edges.
    pub fn adjacency(&self, g: &WorldGraph) -> Result<Vec<Vec<(NodeId, f64)>>> {
        let mut adjacency = vec![Vec::new(); g.len()];
        for &(a, b) in &self.map_edges {
            let w = g.edge_length(a, b)?;
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|&(n, _)| n);
        }
        Ok(adjacency)
    }

    /// Shortest path between two map nodes using discovered edges only.
    pub fn path(&self, from: NodeId, to: NodeId, g: &WorldGraph) -> Result<(Vec<NodeId>, f64)> {
        g.node(from)?;
        g.node(to)?;
        shortest_path_in(&self.adjacency(g)?, from, to)
            .ok_or_else(|| MbaError::State(format!("node {to} is not reachable from {from} on the map")))
    }

    /// Map distances from `from` to every node (infinite when undiscovered).
    pub fn distances_from(&self, from: NodeId, g: &WorldGraph) -> Result<Vec<f64>> {
        g.node(from)?;
        Ok(dijkstra(&self.adjacency(g)?, from))
    }
}

/// One line of a trajectory dump. `action` is `null` for stop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub episode_id: u64,
    pub step: usize,
    pub current: NodeId,
    pub visited: Vec<NodeId>,
    pub ghosts: Vec<NodeId>,
    pub action: Option<NodeId>,
}
