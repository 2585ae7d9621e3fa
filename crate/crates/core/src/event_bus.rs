//! In-process publish/subscribe bus with per-topic ordered logs, plus the
//! gateway that bridges vehicle-side and context-side traffic topics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::darp_routes::StopKind;
use crate::demand::TripRequest;
use crate::ids::{RequestId, VehicleId};
use crate::road_network::TrafficEvent;

/// Variants are declared in name order so that `Ord` sorts by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Topic {
    #[serde(rename = "context.traffic")]
    ContextTraffic,
    #[serde(rename = "gateway.in")]
    GatewayIn,
    #[serde(rename = "gateway.out")]
    GatewayOut,
    #[serde(rename = "requests")]
    Requests,
    #[serde(rename = "vehicle.commands")]
    VehicleCommands,
    #[serde(rename = "vehicle.telemetry")]
    VehicleTelemetry,
}

impl Topic {
    pub const ALL: [Topic; 6] = [
        Topic::ContextTraffic,
        Topic::GatewayIn,
        Topic::GatewayOut,
        Topic::Requests,
        Topic::VehicleCommands,
        Topic::VehicleTelemetry,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topic::ContextTraffic => "context.traffic",
            Topic::GatewayIn => "gateway.in",
            Topic::GatewayOut => "gateway.out",
            Topic::Requests => "requests",
            Topic::VehicleCommands => "vehicle.commands",
            Topic::VehicleTelemetry => "vehicle.telemetry",
        }
    }

    fn accepts(self, payload: &Payload) -> bool {
        matches!(
            (self, payload),
            (Topic::Requests, Payload::Request(_))
                | (Topic::VehicleTelemetry | Topic::GatewayIn, Payload::Telemetry(_))
                | (Topic::VehicleCommands, Payload::Command(_))
                | (Topic::ContextTraffic | Topic::GatewayOut, Payload::Traffic(_))
        )
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a vehicle is: on an edge at some fraction of its length, or parked
/// at a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Node { node: String },
    Edge { edge: String, fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopConfirmation {
    pub kind: StopKind,
    pub request: RequestId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleTelemetry {
    pub vehicle: VehicleId,
    pub position: Position,
    pub onboard: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmation: Option<StopConfirmation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detected: Option<TrafficEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandStop {
    pub kind: StopKind,
    pub request: RequestId,
    pub node: String,
    pub planned_arrival_s: f64,
}

/// A new route for one vehicle after it won `request`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleCommand {
    pub vehicle: VehicleId,
    pub request: RequestId,
    pub rebalanced: bool,
    pub stops: Vec<CommandStop>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum Payload {
    Request(TripRequest),
    Telemetry(VehicleTelemetry),
    Command(VehicleCommand),
    Traffic(TrafficEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub timestamp_s: f64,
    pub topic: Topic,
    pub seq: u64,
    pub payload: Payload,
}

#[derive(Debug, Error)]
pub enum BusError {
    #[error("payload does not belong on topic {0}")]
    PayloadMismatch(Topic),
    #[error("timestamp {timestamp_s} on {topic} is earlier than the previous message ({last_s})")]
    OutOfOrder { topic: Topic, timestamp_s: f64, last_s: f64 },
    #[error("log record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Subscriber = Box<dyn FnMut(&BusMessage) + Send>;

/// Synchronous bus: `publish` appends to the topic log and runs every
/// subscriber of that topic before returning.
#[derive(Default)]
pub struct EventBus {
    logs: BTreeMap<Topic, Vec<BusMessage>>,
    subscribers: Vec<(Topic, Subscriber)>,
    latency_s: BTreeMap<Topic, f64>,
}

impl fmt::Debug for EventBus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventBus").field("messages", &self.len()).field("subscribers", &self.subscribers.len()).finish()
    }
}

impl EventBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fixed delivery delay added to the timestamp of every message on `topic`.
    pub fn set_latency(&mut self, topic: Topic, latency_s: f64) {
        self.latency_s.insert(topic, latency_s);
    }

    pub fn subscribe(&mut self, topic: Topic, f: impl FnMut(&BusMessage) + Send + 'static) {
        self.subscribers.push((topic, Box::new(f)));
    }

    pub fn publish(&mut self, topic: Topic, timestamp_s: f64, payload: Payload) -> Result<u64, BusError> {
        if !topic.accepts(&payload) {
            return Err(BusError::PayloadMismatch(topic));
        }
        let timestamp_s = timestamp_s + self.latency_s.get(&topic).copied().unwrap_or(0.0);
        let log = self.logs.entry(topic).or_default();
        if let Some(last) = log.last() {
            if timestamp_s < last.timestamp_s {
                return Err(BusError::OutOfOrder { topic, timestamp_s, last_s: last.timestamp_s });
            }
        }
        let seq = log.len() as u64;
        log.push(BusMessage { timestamp_s, topic, seq, payload });
        let msg = log.last().expect("just pushed");
        for (t, f) in self.subscribers.iter_mut() {
            if *t == topic {
                f(msg);
            }
        }
        Ok(seq)
    }

    pub fn topic_log(&self, topic: Topic) -> &[BusMessage] {
        self.logs.get(&topic).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.logs.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All messages in `(timestamp, topic, seq)` order.
    pub fn merged(&self) -> Vec<&BusMessage> {
        let mut all: Vec<&BusMessage> = self.logs.values().flatten().collect();
        all.sort_by(|a, b| merge_order(a, b));
        all
    }

    /// Writes the merged log as one JSON object per line.
    pub fn write_log(&self, mut w: impl Write) -> std::io::Result<()> {
        for m in self.merged() {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_log(&self, path: impl AsRef<Path>) -> Result<(), BusError> {
        let path = path.as_ref();
        let io = |source| BusError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_log(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }
}

fn merge_order(a: &BusMessage, b: &BusMessage) -> std::cmp::Ordering {
    a.timestamp_s.total_cmp(&b.timestamp_s).then(a.topic.cmp(&b.topic)).then(a.seq.cmp(&b.seq))
}

/// Parses a log written by [`EventBus::write_log`]; records are numbered from
/// 1 and blank lines are skipped. The result is in merge order.
pub fn read_log(r: impl Read) -> Result<Vec<BusMessage>, BusError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let record = i + 1;
        let line = line.map_err(|e| BusError::Parse { record, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let msg: BusMessage =
            serde_json::from_str(&line).map_err(|e| BusError::Parse { record, message: e.to_string() })?;
        if !msg.topic.accepts(&msg.payload) {
            return Err(BusError::Parse { record, message: format!("payload does not belong on {}", msg.topic) });
        }
        out.push(msg);
    }
    out.sort_by(merge_order);
    Ok(out)
}

pub fn replay_log(path: impl AsRef<Path>) -> Result<Vec<BusMessage>, BusError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|source| BusError::Io { path: path.to_path_buf(), source })?;
    read_log(f)
}

/// Traffic events in a log that came from outside the fleet: everything on
/// `context.traffic` except what the gateway forwarded from vehicles.
pub fn external_traffic(messages: &[BusMessage]) -> Vec<TrafficEvent> {
    let detected: HashSet<(u64, String, String)> = messages
        .iter()
        .filter(|m| m.topic == Topic::GatewayIn)
        .filter_map(|m| match &m.payload {
            Payload::Telemetry(t) => {
                t.detected.as_ref().map(|e| (e.timestamp_s.to_bits(), e.edge_id.clone(), t.vehicle.to_string()))
            }
            _ => None,
        })
        .collect();
    messages
        .iter()
        .filter(|m| m.topic == Topic::ContextTraffic)
        .filter_map(|m| match &m.payload {
            Payload::Traffic(e)
                if !detected.contains(&(e.timestamp_s.to_bits(), e.edge_id.clone(), e.source.clone())) =>
            {
                Some(e.clone())
            }
            _ => None,
        })
        .collect()
}

/// Bridges the vehicle platform and the context platform.
///
/// Detected events arriving on `gateway.in` are re-published on
/// `context.traffic` tagged with the reporting vehicle. Context events on an
/// edge some vehicle plans to use are re-published on `gateway.out`. Each
/// `(topic, seq)` is handled at most once.
#[derive(Debug, Default)]
pub struct Gateway {
    relevant_edges: HashSet<String>,
    handled: HashSet<(Topic, u64)>,
    own: HashSet<u64>,
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the set of edges that lie on committed plans.
    pub fn set_relevant_edges(&mut self, edges: impl IntoIterator<Item = String>) {
        self.relevant_edges = edges.into_iter().collect();
    }

    pub fn is_relevant(&self, edge_id: &str) -> bool {
        self.relevant_edges.contains(edge_id)
    }

    pub fn forward(&mut self, bus: &mut EventBus, msg: &BusMessage) -> Result<Vec<BusMessage>, BusError> {
        if !self.handled.insert((msg.topic, msg.seq)) {
            return Ok(Vec::new());
        }
        let (topic, event) = match (&msg.topic, &msg.payload) {
            (Topic::GatewayIn, Payload::Telemetry(t)) => match &t.detected {
                Some(e) => (Topic::ContextTraffic, TrafficEvent { source: t.vehicle.to_string(), ..e.clone() }),
                None => return Ok(Vec::new()),
            },
            (Topic::ContextTraffic, Payload::Traffic(e))
                if !self.own.contains(&msg.seq) && self.is_relevant(&e.edge_id) =>
            {
                (Topic::GatewayOut, e.clone())
            }
            _ => return Ok(Vec::new()),
        };
        let seq = bus.publish(topic, msg.timestamp_s, Payload::Traffic(event))?;
        if topic == Topic::ContextTraffic {
            self.own.insert(seq);
            self.handled.insert((topic, seq));
        }
        Ok(vec![bus.topic_log(topic)[seq as usize].clone()])
    }
}

#[cfg(test)]
mod tests {
    use std::sync::{Arc, Mutex};

    use super::*;
    use crate::geo::LatLon;

    fn traffic(ts: f64, edge: &str, source: &str) -> Payload {
        Payload::Traffic(TrafficEvent { timestamp_s: ts, edge_id: edge.into(), speed_mps: 5.0, source: source.into() })
    }

    fn request(id: u64, ts: f64) -> Payload {
        let p = LatLon::new(51.44, 5.47);
        Payload::Request(TripRequest {
            id,
            origin: p,
            destination: p,
            submission_s: ts,
            pickup_deadline_s: ts + 420.0,
            party_size: 1,
        })
    }

    fn detected(vehicle: u32, ts: f64, edge: &str) -> Payload {
        Payload::Telemetry(VehicleTelemetry {
            vehicle: VehicleId(vehicle),
            position: Position::Edge { edge: edge.into(), fraction: 0.5 },
            onboard: 0,
            confirmation: None,
            detected: Some(TrafficEvent {
                timestamp_s: ts,
                edge_id: edge.into(),
                speed_mps: 0.0,
                source: "hazard".into(),
            }),
        })
    }

    #[test]
    fn sequence_numbers_and_delivery_order() {
        let mut bus = EventBus::new();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&seen);
        bus.subscribe(Topic::Requests, move |m| sink.lock().unwrap().push(m.seq));
        assert_eq!(bus.publish(Topic::Requests, 0.0, request(1, 0.0)).unwrap(), 0);
        assert_eq!(bus.publish(Topic::Requests, 1.0, request(2, 1.0)).unwrap(), 1);
        assert_eq!(bus.publish(Topic::ContextTraffic, 1.0, traffic(1.0, "a", "cam")).unwrap(), 0);
        assert_eq!(*seen.lock().unwrap(), vec![0, 1]);
    }

    #[test]
    fn schema_and_order_guards() {
        let mut bus = EventBus::new();
        assert!(matches!(
            bus.publish(Topic::Requests, 0.0, traffic(0.0, "a", "cam")),
            Err(BusError::PayloadMismatch(_))
        ));
        bus.publish(Topic::ContextTraffic, 5.0, traffic(5.0, "a", "cam")).unwrap();
        assert!(matches!(
            bus.publish(Topic::ContextTraffic, 4.0, traffic(4.0, "a", "cam")),
            Err(BusError::OutOfOrder { .. })
        ));
        assert!(!bus.is_empty() && bus.len() == 1);
    }

    #[test]
    fn latency_shifts_timestamps() {
        let mut bus = EventBus::new();
        bus.set_latency(Topic::Requests, 0.5);
        bus.publish(Topic::Requests, 2.0, request(1, 2.0)).unwrap();
        assert_eq!(bus.topic_log(Topic::Requests)[0].timestamp_s, 2.5);
    }

    #[test]
    fn log_round_trip_and_merge_order() {
        let mut bus = EventBus::new();
        bus.publish(Topic::Requests, 1.0, request(1, 1.0)).unwrap();
        bus.publish(Topic::ContextTraffic, 1.0, traffic(1.0, "a", "cam")).unwrap();
        bus.publish(Topic::ContextTraffic, 1.0, traffic(1.0, "b", "cam")).unwrap();
        bus.publish(Topic::Requests, 3.0, request(2, 3.0)).unwrap();
        let mut buf = Vec::new();
        bus.write_log(&mut buf).unwrap();
        let back = read_log(buf.as_slice()).unwrap();
        let order: Vec<(f64, &str, u64)> = back.iter().map(|m| (m.timestamp_s, m.topic.name(), m.seq)).collect();
        assert_eq!(
            order,
            vec![(1.0, "context.traffic", 0), (1.0, "context.traffic", 1), (1.0, "requests", 0), (3.0, "requests", 1)]
        );
        let expected: Vec<BusMessage> = bus.merged().into_iter().cloned().collect();
        assert_eq!(back, expected);
        assert!(read_log(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn parse_errors_carry_record_number() {
        let text = "{\"timestamp_s\":1.0,\"topic\":\"requests\",\"seq\":0,\"payload\":{\"type\":\"traffic\",\"data\":{\"timestamp_s\":1.0,\"edge_id\":\"a\",\"speed_mps\":1.0,\"source\":\"x\"}}}\n";
        assert!(matches!(read_log(text.as_bytes()), Err(BusError::Parse { record: 1, .. })));
        let text = "\nnot json\n";
        assert!(matches!(read_log(text.as_bytes()), Err(BusError::Parse { record: 2, .. })));
    }

    #[test]
    fn gateway_tags_detected_events_with_vehicle() {
        let mut bus = EventBus::new();
        let mut gw = Gateway::new();
        gw.set_relevant_edges(["e1".to_string()]);
        bus.publish(Topic::GatewayIn, 4.0, detected(3, 4.0, "e1")).unwrap();
        let msg = bus.topic_log(Topic::GatewayIn)[0].clone();
        let out = gw.forward(&mut bus, &msg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].topic, Topic::ContextTraffic);
        match &out[0].payload {
            Payload::Traffic(e) => assert_eq!(e.source, "veh-0003"),
            other => panic!("{other:?}"),
        }
        // a forwarded vehicle event is not bounced back to the vehicle side
        let fwd = out[0].clone();
        assert!(gw.forward(&mut bus, &fwd).unwrap().is_empty());
        // and forwarding is idempotent
        assert!(gw.forward(&mut bus, &msg).unwrap().is_empty());
        assert_eq!(bus.topic_log(Topic::ContextTraffic).len(), 1);
        assert!(bus.topic_log(Topic::GatewayOut).is_empty());
    }

    #[test]
    fn gateway_forwards_only_plan_edges() {
        let mut bus = EventBus::new();
        let mut gw = Gateway::new();
        gw.set_relevant_edges(["e1".to_string(), "e2".to_string()]);
        let got = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&got);
        bus.subscribe(Topic::GatewayOut, move |m| {
            if let Payload::Traffic(e) = &m.payload {
                sink.lock().unwrap().push(e.edge_id.clone());
            }
        });
        for (i, edge) in ["e9", "e2", "e1", "e7"].iter().enumerate() {
            bus.publish(Topic::ContextTraffic, i as f64, traffic(i as f64, edge, "cam")).unwrap();
            let msg = bus.topic_log(Topic::ContextTraffic)[i].clone();
            gw.forward(&mut bus, &msg).unwrap();
            gw.forward(&mut bus, &msg).unwrap();
        }
        assert_eq!(*got.lock().unwrap(), vec!["e2".to_string(), "e1".to_string()]);
    }

    #[test]
    fn external_traffic_excludes_vehicle_reports() {
        let mut bus = EventBus::new();
        let mut gw = Gateway::new();
        bus.publish(Topic::ContextTraffic, 1.0, traffic(1.0, "a", "cam-1")).unwrap();
        bus.publish(Topic::GatewayIn, 2.0, detected(1, 2.0, "b")).unwrap();
        let msg = bus.topic_log(Topic::GatewayIn)[0].clone();
        gw.forward(&mut bus, &msg).unwrap();
        let all: Vec<BusMessage> = bus.merged().into_iter().cloned().collect();
        let ext = external_traffic(&all);
        assert_eq!(ext.len(), 1);
        assert_eq!(ext[0].edge_id, "a");
    }
}
