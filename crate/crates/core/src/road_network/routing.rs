use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{EdgeIdx, NodeIdx, RoadGraph, SpeedOverlay};
use crate::scalar::{cmp_scalar, Scalar};

/// Which speeds a travel-time query uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeedMode {
    /// Free-flow speeds only; the overlay is ignored.
    Freeflow,
    /// Effective speeds from the live overlay.
    Live,
}

/// Point-to-point travel time queries.
pub trait TravelTime<S: Scalar> {
    /// Shortest travel time in seconds, `None` when unreachable.
    fn travel_time(&self, from: NodeIdx, to: NodeIdx) -> Option<S>;
}

impl<S: Scalar, T: TravelTime<S> + ?Sized> TravelTime<S> for &T {
    fn travel_time(&self, from: NodeIdx, to: NodeIdx) -> Option<S> {
        (**self).travel_time(from, to)
    }
}

#[derive(Debug)]
struct Tree<S> {
    dist: Vec<S>,
    pred: Vec<Option<EdgeIdx>>,
}

#[derive(PartialEq)]
struct Entry<S> {
    cost: S,
    node: NodeIdx,
}

impl<S: Scalar> Eq for Entry<S> {}

impl<S: Scalar> Ord for Entry<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, node)
        cmp_scalar(other.cost, self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl<S: Scalar> PartialOrd for Entry<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source Dijkstra where each edge costs `length / speed[edge]`.
/// Edges with speed 0 are skipped.
fn shortest_path_tree<S: Scalar>(graph: &RoadGraph<S>, speeds: &[S], source: NodeIdx) -> Tree<S> {
    let n = graph.node_count();
    let mut dist = vec![S::infinity(); n];
    let mut pred = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source.index()] = S::zero();
    heap.push(Entry { cost: S::zero(), node: source });
    while let Some(Entry { cost, node }) = heap.pop() {
        if done[node.index()] {
            continue;
        }
        done[node.index()] = true;
        for &e in graph.out_edges(node) {
            let speed = speeds[e.index()];
            if speed <= S::zero() {
                continue;
            }
            let edge = graph.edge(e);
            let next = cost + edge.length_m / speed;
            if next < dist[edge.to.index()] {
                dist[edge.to.index()] = next;
                pred[edge.to.index()] = Some(e);
                heap.push(Entry { cost: next, node: edge.to });
            }
        }
    }
    Tree { dist, pred }
}

/// Shortest-path travel times and paths over a fixed speed assignment.
///
/// Trees are computed lazily per source node and cached; the cache is dropped
/// whenever [`Router::sync_overlay`] observes a new overlay version. Queries
/// take `&self` and may run concurrently.
#[derive(Debug)]
pub struct Router<S = f64> {
    graph: Arc<RoadGraph<S>>,
    mode: SpeedMode,
    speeds: Vec<S>,
    overlay_version: Option<u64>,
    cache: RwLock<HashMap<NodeIdx, Arc<Tree<S>>>>,
}

impl<S: Scalar> Clone for Router<S> {
    fn clone(&self) -> Self {
        Self {
            graph: Arc::clone(&self.graph),
            mode: self.mode,
            speeds: self.speeds.clone(),
            overlay_version: self.overlay_version,
            cache: RwLock::new(self.cache.read().expect("router cache poisoned").clone()),
        }
    }
}

impl<S: Scalar> Router<S> {
    pub fn freeflow(graph: Arc<RoadGraph<S>>) -> Self {
        let speeds = graph.edges().iter().map(|e| e.freeflow_mps).collect();
        Self { graph, mode: SpeedMode::Freeflow, speeds, overlay_version: None, cache: RwLock::default() }
    }

    pub fn live(graph: Arc<RoadGraph<S>>, overlay: &SpeedOverlay<S>) -> Self {
        let speeds = overlay.speeds(&graph);
        Self {
            graph,
            mode: SpeedMode::Live,
            speeds,
            overlay_version: Some(overlay.version()),
            cache: RwLock::default(),
        }
    }

    pub fn new(graph: Arc<RoadGraph<S>>, overlay: &SpeedOverlay<S>, mode: SpeedMode) -> Self {
        match mode {
            SpeedMode::Freeflow => Self::freeflow(graph),
            SpeedMode::Live => Self::live(graph, overlay),
        }
    }

    pub fn mode(&self) -> SpeedMode {
        self.mode
    }

    pub fn graph(&self) -> &Arc<RoadGraph<S>> {
        &self.graph
    }

    pub fn edge_speed(&self, edge: EdgeIdx) -> S {
        self.speeds[edge.index()]
    }

    /// Re-reads live speeds when the overlay changed. Free-flow routers are
    /// unaffected. Returns whether the cache was invalidated.
    pub fn sync_overlay(&mut self, overlay: &SpeedOverlay<S>) -> bool {
        if self.mode == SpeedMode::Freeflow || self.overlay_version == Some(overlay.version()) {
            return false;
        }
        self.speeds = overlay.speeds(&self.graph);
        self.overlay_version = Some(overlay.version());
        self.cache.get_mut().expect("router cache poisoned").clear();
        true
    }

    fn tree(&self, source: NodeIdx) -> Arc<Tree<S>> {
        if let Some(t) = self.cache.read().expect("router cache poisoned").get(&source) {
            return Arc::clone(t);
        }
        let tree = Arc::new(shortest_path_tree(&self.graph, &self.speeds, source));
        self.cache.write().expect("router cache poisoned").entry(source).or_insert(tree).clone()
    }

    /// Edge sequence of a shortest path, empty when `from == to`.
    pub fn path(&self, from: NodeIdx, to: NodeIdx) -> Option<Vec<EdgeIdx>> {
        let tree = self.tree(from);
        if !tree.dist[to.index()].is_finite() {
            return None;
        }
        let mut edges = Vec::new();
        let mut at = to;
        while at != from {
            let e = tree.pred[at.index()].expect("finite distance implies predecessor");
            edges.push(e);
            at = self.graph.edge(e).from;
        }
        edges.reverse();
        Some(edges)
    }
}

impl<S: Scalar> TravelTime<S> for Router<S> {
    fn travel_time(&self, from: NodeIdx, to: NodeIdx) -> Option<S> {
        let d = self.tree(from).dist[to.index()];
        d.is_finite().then_some(d)
    }
}

/// One-shot travel time query without caching.
pub fn travel_time<S: Scalar>(
    graph: &RoadGraph<S>,
    overlay: &SpeedOverlay<S>,
    mode: SpeedMode,
    from: NodeIdx,
    to: NodeIdx,
) -> Option<S> {
    let speeds: Vec<S> = match mode {
        SpeedMode::Freeflow => graph.edges().iter().map(|e| e.freeflow_mps).collect(),
        SpeedMode::Live => overlay.speeds(graph),
    };
    let d = shortest_path_tree(graph, &speeds, from).dist[to.index()];
    d.is_finite().then_some(d)
}
