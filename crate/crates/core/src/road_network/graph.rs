use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NetworkError;
use crate::geo::{haversine, LatLon};
use crate::scalar::{cmp_scalar, Scalar};

/// Dense index of a node inside a [`RoadGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeIdx(pub u32);

/// Dense index of a directed edge inside a [`RoadGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeIdx(pub u32);

impl NodeIdx {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl EdgeIdx {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<S = f64> {
    pub id: String,
    pub pos: LatLon<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge<S = f64> {
    pub id: String,
    pub from: NodeIdx,
    pub to: NodeIdx,
    pub length_m: S,
    pub freeflow_mps: S,
}

impl<S: Scalar> Edge<S> {
    pub fn freeflow_time(&self) -> S {
        self.length_m / self.freeflow_mps
    }
}

/// On-disk node record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

/// On-disk edge record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub speed_mps: f64,
}

/// The graph file document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

/// Directed, strongly connected road network with free-flow speeds.
///
/// Out-edges are stored in CSR form ordered by edge index, which keeps every
/// search over the graph deterministic.
#[derive(Debug, Clone)]
pub struct RoadGraph<S = f64> {
    nodes: Vec<Node<S>>,
    edges: Vec<Edge<S>>,
    node_ids: HashMap<String, NodeIdx>,
    edge_ids: HashMap<String, EdgeIdx>,
    out_start: Vec<usize>,
    out_edges: Vec<EdgeIdx>,
}

impl<S: Scalar> RoadGraph<S> {
    /// Builds and validates a graph from file records.
    pub fn from_records(file: &GraphFile) -> Result<Self, NetworkError> {
        if file.nodes.is_empty() {
            return Err(NetworkError::Empty);
        }
        let mut node_ids = HashMap::with_capacity(file.nodes.len());
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for (i, rec) in file.nodes.iter().enumerate() {
            if !rec.lat.is_finite() || rec.lat.abs() > 90.0 {
                return Err(NetworkError::invalid(format!("nodes[{i}].lat"), "latitude out of range"));
            }
            if !rec.lon.is_finite() || rec.lon.abs() > 180.0 {
                return Err(NetworkError::invalid(format!("nodes[{i}].lon"), "longitude out of range"));
            }
            let idx = NodeIdx(i as u32);
            if node_ids.insert(rec.id.clone(), idx).is_some() {
                return Err(NetworkError::DuplicateNode(rec.id.clone()));
            }
            nodes.push(Node { id: rec.id.clone(), pos: LatLon::new(S::of(rec.lat), S::of(rec.lon)) });
        }

        let mut edge_ids = HashMap::with_capacity(file.edges.len());
        let mut edges = Vec::with_capacity(file.edges.len());
        for (i, rec) in file.edges.iter().enumerate() {
            let from = *node_ids
                .get(&rec.from)
                .ok_or_else(|| NetworkError::MissingNode { edge: rec.id.clone(), node: rec.from.clone() })?;
            let to = *node_ids
                .get(&rec.to)
                .ok_or_else(|| NetworkError::MissingNode { edge: rec.id.clone(), node: rec.to.clone() })?;
            if !(rec.length_m.is_finite() && rec.length_m > 0.0) {
                return Err(NetworkError::invalid(format!("edges[{i}].length_m"), "must be > 0"));
            }
            if !(rec.speed_mps.is_finite() && rec.speed_mps > 0.0) {
                return Err(NetworkError::invalid(format!("edges[{i}].speed_mps"), "must be > 0"));
            }
            let idx = EdgeIdx(i as u32);
            if edge_ids.insert(rec.id.clone(), idx).is_some() {
                return Err(NetworkError::DuplicateEdge(rec.id.clone()));
            }
            edges.push(Edge {
                id: rec.id.clone(),
                from,
                to,
                length_m: S::of(rec.length_m),
                freeflow_mps: S::of(rec.speed_mps),
            });
        }

        let graph = Self::assemble(nodes, edges, node_ids, edge_ids);
        graph.check_strongly_connected()?;
        Ok(graph)
    }

    fn assemble(
        nodes: Vec<Node<S>>,
        edges: Vec<Edge<S>>,
        node_ids: HashMap<String, NodeIdx>,
        edge_ids: HashMap<String, EdgeIdx>,
    ) -> Self {
        let mut out_start = vec![0usize; nodes.len() + 1];
        for e in &edges {
            out_start[e.from.index() + 1] += 1;
        }
        for i in 0..nodes.len() {
            out_start[i + 1] += out_start[i];
        }
        let mut fill = out_start.clone();
        let mut out_edges = vec![EdgeIdx(0); edges.len()];
        for (i, e) in edges.iter().enumerate() {
            out_edges[fill[e.from.index()]] = EdgeIdx(i as u32);
            fill[e.from.index()] += 1;
        }
        Self { nodes, edges, node_ids, edge_ids, out_start, out_edges }
    }

    fn check_strongly_connected(&self) -> Result<(), NetworkError> {
        let n = self.nodes.len();
        let mut reverse: Vec<Vec<NodeIdx>> = vec![Vec::new(); n];
        for e in &self.edges {
            reverse[e.to.index()].push(e.from);
        }
        let forward = |v: NodeIdx| self.out_edges(v).iter().map(|&e| self.edges[e.index()].to).collect::<Vec<_>>();
        let backward = |v: NodeIdx| reverse[v.index()].clone();
        for (direction, succ) in [
            ("from", &forward as &dyn Fn(NodeIdx) -> Vec<NodeIdx>),
            ("to", &backward as &dyn Fn(NodeIdx) -> Vec<NodeIdx>),
        ] {
            let mut seen = vec![false; n];
            let mut stack = vec![NodeIdx(0)];
            seen[0] = true;
            while let Some(v) = stack.pop() {
                for w in succ(v) {
                    if !seen[w.index()] {
                        seen[w.index()] = true;
                        stack.push(w);
                    }
                }
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                let (a, b) = if direction == "from" {
                    (self.nodes[0].id.clone(), self.nodes[missing].id.clone())
                } else {
                    (self.nodes[missing].id.clone(), self.nodes[0].id.clone())
                };
                return Err(NetworkError::NotStronglyConnected {
                    node: self.nodes[missing].id.clone(),
                    from: a,
                    to: b,
                });
            }
        }
        Ok(())
    }

    pub fn to_records(&self) -> GraphFile {
        GraphFile {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord { id: n.id.clone(), lat: n.pos.lat.as_f64(), lon: n.pos.lon.as_f64() })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    id: e.id.clone(),
                    from: self.nodes[e.from.index()].id.clone(),
                    to: self.nodes[e.to.index()].id.clone(),
                    length_m: e.length_m.as_f64(),
                    speed_mps: e.freeflow_mps.as_f64(),
                })
                .collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[Node<S>] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge<S>] {
        &self.edges
    }

    pub fn node(&self, idx: NodeIdx) -> &Node<S> {
        &self.nodes[idx.index()]
    }

    pub fn edge(&self, idx: EdgeIdx) -> &Edge<S> {
        &self.edges[idx.index()]
    }

    pub fn node_idx(&self, id: &str) -> Option<NodeIdx> {
        self.node_ids.get(id).copied()
    }

    pub fn edge_idx(&self, id: &str) -> Option<EdgeIdx> {
        self.edge_ids.get(id).copied()
    }

    pub fn out_edges(&self, node: NodeIdx) -> &[EdgeIdx] {
        &self.out_edges[self.out_start[node.index()]..self.out_start[node.index() + 1]]
    }

    /// First edge (lowest index) from `from` to `to`, if the two are adjacent.
    pub fn edge_between(&self, from: NodeIdx, to: NodeIdx) -> Option<EdgeIdx> {
        self.out_edges(from).iter().copied().find(|&e| self.edges[e.index()].to == to)
    }
}

/// Node nearest to `pos` by haversine distance; ties go to the smallest node id.
pub fn nearest_node<S: Scalar>(graph: &RoadGraph<S>, pos: LatLon<S>) -> NodeIdx {
    let mut best = NodeIdx(0);
    let mut best_d = S::infinity();
    for (i, node) in graph.nodes.iter().enumerate() {
        let d = haversine(node.pos, pos);
        let better = match cmp_scalar(d, best_d) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Equal => node.id < graph.nodes[best.index()].id,
            std::cmp::Ordering::Greater => false,
        };
        if better {
            best = NodeIdx(i as u32);
            best_d = d;
        }
    }
    best
}

/// Reads and validates a graph document.
pub fn load_graph<S: Scalar>(path: impl AsRef<Path>) -> Result<RoadGraph<S>, NetworkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| NetworkError::Io { path: path.display().to_string(), source })?;
    parse_graph(&text).map_err(|e| match e {
        NetworkError::Parse { line, column, message, .. } => {
            NetworkError::Parse { path: path.display().to_string(), line, column, message }
        }
        other => other,
    })
}

/// Parses and validates a graph document from text.
pub fn parse_graph<S: Scalar>(text: &str) -> Result<RoadGraph<S>, NetworkError> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| NetworkError::Parse {
        path: String::from("<input>"),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    RoadGraph::from_records(&file)
}

pub fn save_graph<S: Scalar>(graph: &RoadGraph<S>, path: impl AsRef<Path>) -> Result<(), NetworkError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&graph.to_records()).expect("graph records serialize");
    std::fs::write(path, text + "\n").map_err(|source| NetworkError::Io { path: path.display().to_string(), source })
}
