//! Road network: graph, live speed overlay and travel-time queries.

mod graph;
pub mod grid;
mod overlay;
mod routing;
pub mod traffic;

use thiserror::Error;

pub use graph::{
    load_graph, nearest_node, parse_graph, save_graph, Edge, EdgeIdx, EdgeRecord, GraphFile, Node, NodeIdx, NodeRecord,
    RoadGraph,
};
pub use grid::{generate_grid_graph, Corridor, GridLayout};
pub use overlay::{SpeedOverlay, TrafficEvent, DEFAULT_PLAUSIBILITY_FACTOR};
pub use routing::{travel_time, Router, SpeedMode, TravelTime};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("graph has no nodes")]
    Empty,
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("duplicate edge id {0}")]
    DuplicateEdge(String),
    #[error("edge {edge} references missing node {node}")]
    MissingNode { edge: String, node: String },
    #[error("graph is not strongly connected: node {node} is unreachable (no path from {from} to {to})")]
    NotStronglyConnected { node: String, from: String, to: String },
    #[error("degenerate bounding box: north-east corner must lie strictly north-east of south-west corner")]
    DegenerateBbox,
    #[error("unknown edge id {0}")]
    UnknownEdge(String),
    #[error("rejected traffic event on {edge}: {reason}")]
    InvalidEvent { edge: String, reason: String },
    #[error("traffic trace record {record}: {message}")]
    Trace { record: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl NetworkError {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid { field: field.into(), message: message.into() }
    }
}
