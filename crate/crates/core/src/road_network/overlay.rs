use serde::{Deserialize, Serialize};

use super::{EdgeIdx, NetworkError, RoadGraph};
use crate::scalar::{cmp_scalar, Scalar};

/// Default plausibility guard: observations above this multiple of the
/// free-flow speed are rejected.
pub const DEFAULT_PLAUSIBILITY_FACTOR: f64 = 2.0;

/// A speed observation for one edge. Speed 0 means the edge is blocked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficEvent<S = f64> {
    pub timestamp_s: S,
    pub edge_id: String,
    pub speed_mps: S,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
struct Observation<S> {
    timestamp_s: S,
    source: String,
    speed_mps: S,
}

/// Per-edge effective speeds: the latest accepted observation, else free flow.
///
/// Observations are ordered by `(timestamp, source, speed)`; the greatest one
/// is retained. An event older than the retained one is accepted but has no
/// effect, so replaying a log in any interleaving yields the same overlay.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedOverlay<S = f64> {
    observations: Vec<Option<Observation<S>>>,
    plausibility_factor: S,
    version: u64,
}

impl<S: Scalar> SpeedOverlay<S> {
    pub fn new(graph: &RoadGraph<S>) -> Self {
        Self::with_plausibility(graph, S::of(DEFAULT_PLAUSIBILITY_FACTOR))
    }

    pub fn with_plausibility(graph: &RoadGraph<S>, factor: S) -> Self {
        Self { observations: vec![None; graph.edge_count()], plausibility_factor: factor, version: 0 }
    }

    /// Incremented every time an effective speed changes.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn effective_speed(&self, graph: &RoadGraph<S>, edge: EdgeIdx) -> S {
        match &self.observations[edge.index()] {
            Some(obs) => obs.speed_mps,
            None => graph.edge(edge).freeflow_mps,
        }
    }

    /// Effective speed of every edge, indexed by [`EdgeIdx`].
    pub fn speeds(&self, graph: &RoadGraph<S>) -> Vec<S> {
        (0..graph.edge_count()).map(|i| self.effective_speed(graph, EdgeIdx(i as u32))).collect()
    }

    /// Validates an event against the graph without applying it.
    pub fn check(&self, graph: &RoadGraph<S>, event: &TrafficEvent<S>) -> Result<EdgeIdx, NetworkError> {
        let edge = graph.edge_idx(&event.edge_id).ok_or_else(|| NetworkError::UnknownEdge(event.edge_id.clone()))?;
        if !(event.timestamp_s >= S::zero()) {
            return Err(NetworkError::InvalidEvent {
                edge: event.edge_id.clone(),
                reason: format!("timestamp {} is negative", event.timestamp_s),
            });
        }
        let limit = graph.edge(edge).freeflow_mps * self.plausibility_factor;
        if !(event.speed_mps >= S::zero()) || event.speed_mps > limit {
            return Err(NetworkError::InvalidEvent {
                edge: event.edge_id.clone(),
                reason: format!("speed {} outside [0, {}]", event.speed_mps, limit),
            });
        }
        Ok(edge)
    }

    /// Applies an observation. Returns whether the effective speed changed.
    pub fn apply(&mut self, graph: &RoadGraph<S>, event: &TrafficEvent<S>) -> Result<bool, NetworkError> {
        let edge = self.check(graph, event)?;
        let incoming =
            Observation { timestamp_s: event.timestamp_s, source: event.source.clone(), speed_mps: event.speed_mps };
        let slot = &mut self.observations[edge.index()];
        let supersedes = match slot {
            None => true,
            Some(current) => cmp_scalar(incoming.timestamp_s, current.timestamp_s)
                .then_with(|| incoming.source.cmp(&current.source))
                .then_with(|| cmp_scalar(incoming.speed_mps, current.speed_mps))
                .is_gt(),
        };
        if !supersedes {
            return Ok(false);
        }
        let before = slot.as_ref().map_or(graph.edge(edge).freeflow_mps, |o| o.speed_mps);
        let changed = before != incoming.speed_mps;
        *slot = Some(incoming);
        if changed {
            self.version += 1;
        }
        Ok(changed)
    }

    /// Whether any edge currently deviates from its free-flow speed.
    pub fn is_freeflow(&self, graph: &RoadGraph<S>) -> bool {
        self.observations
            .iter()
            .enumerate()
            .all(|(i, o)| o.as_ref().map_or(true, |o| o.speed_mps == graph.edge(EdgeIdx(i as u32)).freeflow_mps))
    }
}
