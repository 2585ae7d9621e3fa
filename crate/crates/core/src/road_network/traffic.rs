//! Traffic traces: reading, writing and synthesizing camera streams.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkError, RoadGraph, TrafficEvent};
use crate::scalar::Scalar;

/// A camera reporting the speed of a set of edges once per period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub id: String,
    pub edges: Vec<String>,
}

/// Speeds reported inside `[start_s, end_s)` are scaled by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionWindow {
    pub start_s: f64,
    pub end_s: f64,
    pub factor: f64,
}

impl CongestionWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_s && t < self.end_s
    }
}

/// Sorts events by `(timestamp, edge, source)`, the canonical replay order.
pub fn sort_events<S: Scalar>(events: &mut [TrafficEvent<S>]) {
    events.sort_by(|a, b| {
        crate::scalar::cmp_scalar(a.timestamp_s, b.timestamp_s)
            .then_with(|| a.edge_id.cmp(&b.edge_id))
            .then_with(|| a.source.cmp(&b.source))
    });
}

/// One event per camera edge per period over `[0, horizon_s)`; edges named by
/// several cameras are reported by each.
pub fn generate_camera_events<S: Scalar>(
    graph: &RoadGraph<S>,
    cameras: &[CameraSpec],
    horizon_s: f64,
    period_s: f64,
    congestion: Option<CongestionWindow>,
) -> Result<Vec<TrafficEvent<f64>>, NetworkError> {
    if !(period_s > 0.0) {
        return Err(NetworkError::invalid("period", "must be > 0"));
    }
    if let Some(w) = congestion {
        if !(w.factor >= 0.0 && w.start_s <= w.end_s) {
            return Err(NetworkError::invalid("congestion", "needs factor >= 0 and start <= end"));
        }
    }
    let mut events = Vec::new();
    let intervals = (horizon_s / period_s).ceil() as usize;
    for k in 0..intervals {
        let t = k as f64 * period_s;
        for cam in cameras {
            for edge_id in &cam.edges {
                let edge = graph.edge_idx(edge_id).ok_or_else(|| NetworkError::UnknownEdge(edge_id.clone()))?;
                let freeflow = graph.edge(edge).freeflow_mps.as_f64();
                let speed = match congestion {
                    Some(w) if w.contains(t) => freeflow * w.factor,
                    _ => freeflow,
                };
                events.push(TrafficEvent {
                    timestamp_s: t,
                    edge_id: edge_id.clone(),
                    speed_mps: speed,
                    source: cam.id.clone(),
                });
            }
        }
    }
    sort_events(&mut events);
    Ok(events)
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    timestamp_s: f64,
    edge_id: String,
    speed_mps: f64,
    source: String,
}

pub fn write_traffic_trace<W: Write>(writer: W, events: &[TrafficEvent<f64>]) -> Result<(), NetworkError> {
    let mut w = csv::Writer::from_writer(writer);
    for e in events {
        w.serialize(TraceRow {
            timestamp_s: e.timestamp_s,
            edge_id: e.edge_id.clone(),
            speed_mps: e.speed_mps,
            source: e.source.clone(),
        })
        .map_err(|err| NetworkError::Trace { record: 0, message: err.to_string() })?;
    }
    w.flush().map_err(|err| NetworkError::Trace { record: 0, message: err.to_string() })?;
    Ok(())
}

/// Reads a traffic trace and returns its events in replay order.
pub fn read_traffic_trace<R: Read>(reader: R) -> Result<Vec<TrafficEvent<f64>>, NetworkError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let mut events = Vec::new();
    for (i, row) in r.deserialize::<TraceRow>().enumerate() {
        let row = row.map_err(|err| NetworkError::Trace { record: i + 1, message: err.to_string() })?;
        events.push(TrafficEvent {
            timestamp_s: row.timestamp_s,
            edge_id: row.edge_id,
            speed_mps: row.speed_mps,
            source: row.source,
        });
    }
    sort_events(&mut events);
    Ok(events)
}

pub fn save_traffic_trace(path: impl AsRef<Path>, events: &[TrafficEvent<f64>]) -> Result<(), NetworkError> {
    let path = path.as_ref();
    let file =
        std::fs::File::create(path).map_err(|source| NetworkError::Io { path: path.display().to_string(), source })?;
    write_traffic_trace(std::io::BufWriter::new(file), events)
}

pub fn load_traffic_trace(path: impl AsRef<Path>) -> Result<Vec<TrafficEvent<f64>>, NetworkError> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|source| NetworkError::Io { path: path.display().to_string(), source })?;
    read_traffic_trace(std::io::BufReader::new(file))
}
