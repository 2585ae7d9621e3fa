//! Fixed-step fleet simulation.
//!
//! Each tick of length `tick_s` starting at `now`:
//!
//! 1. traffic events with timestamp `< now + tick_s` are published on
//!    `context.traffic` and applied to the live overlay;
//! 2. every vehicle moves for `tick_s` seconds at live speeds, carrying
//!    leftover time across edges and firing stops as it reaches them;
//! 3. the clock advances, and on a batch boundary the requests submitted
//!    before it are injected and the dispatcher runs;
//! 4. on a sampling boundary a KPI sample is recorded.
//!
//! Vehicles follow the shortest paths the scheduler planned in its own speed
//! mode at commitment time. A vehicle that is about to enter a blocked edge
//! re-routes with live speeds.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::darp_routes::{RoutePlan, StopKind, VehicleAnchor};
use crate::demand::{self, RequestTrace, TripRequest};
use crate::dispatcher::{collect_batch, dispatch_batch, Commitment, DispatchConfig, FleetVehicle, PendingRequest};
use crate::event_bus::{
    BusError, BusMessage, CommandStop, EventBus, Gateway, Payload, Position, StopConfirmation, Topic, VehicleCommand,
    VehicleTelemetry,
};
use crate::ids::{RequestId, VehicleId};
use crate::metrics_report::{self, DetourRecord, KpiSample};
use crate::road_network::traffic::{sort_events, CameraSpec};
use crate::road_network::{
    nearest_node, EdgeIdx, NetworkError, NodeIdx, RoadGraph, Router, SpeedMode, SpeedOverlay, TrafficEvent, TravelTime,
};
use crate::scenario::{IotMode, ScenarioConfig, ScenarioError};

const MAX_RECORDED_VIOLATIONS: usize = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("request trace: {0}")]
    Trace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestStatus {
    Waiting,
    Assigned,
    Onboard,
    Served,
}

/// Lifecycle of one injected request.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub request: TripRequest,
    pub origin: NodeIdx,
    pub destination: NodeIdx,
    /// Submission plus the direct travel time under the detour baseline.
    pub preferred_arrival_s: f64,
    pub status: RequestStatus,
    pub vehicle: Option<VehicleId>,
    pub assigned_s: Option<f64>,
    pub pickup_s: Option<f64>,
    pub dropoff_s: Option<f64>,
    pub rebalanced: bool,
}

impl RequestRecord {
    pub fn id(&self) -> RequestId {
        RequestId(self.request.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehicleStatus {
    Idle,
    Driving,
    AtStop,
}

#[derive(Debug, Clone, PartialEq)]
struct Leg {
    edges: VecDeque<EdgeIdx>,
    routed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub capacity: u32,
    /// Last node reached; the tail of `current` while on an edge.
    pub node: NodeIdx,
    /// Edge being traversed and meters covered on it.
    pub current: Option<(EdgeIdx, f64)>,
    pub onboard: Vec<RequestId>,
    pub plan: RoutePlan,
    legs: VecDeque<Leg>,
    pub odometer_m: f64,
}

impl VehicleState {
    fn new(id: VehicleId, capacity: u32, node: NodeIdx) -> Self {
        Self {
            id,
            capacity,
            node,
            current: None,
            onboard: Vec::new(),
            plan: RoutePlan::empty(0),
            legs: VecDeque::new(),
            odometer_m: 0.0,
        }
    }

    pub fn status(&self) -> VehicleStatus {
        if self.current.is_some() {
            VehicleStatus::Driving
        } else if self.plan.is_empty() && self.onboard.is_empty() {
            VehicleStatus::Idle
        } else {
            VehicleStatus::AtStop
        }
    }

    /// Node from which new legs start: the head of the current edge, or the
    /// node the vehicle stands on.
    pub fn anchor_node(&self, graph: &RoadGraph) -> NodeIdx {
        self.current.map_or(self.node, |(e, _)| graph.edge(e).to)
    }

    pub fn position(&self, graph: &RoadGraph) -> Position {
        match self.current {
            Some((e, progress)) => {
                let edge = graph.edge(e);
                Position::Edge { edge: edge.id.clone(), fraction: (progress / edge.length_m).clamp(0.0, 1.0) }
            }
            None => Position::Node { node: graph.node(self.node).id.clone() },
        }
    }

    /// Edges still to be driven, including the current one.
    pub fn planned_edges(&self) -> impl Iterator<Item = EdgeIdx> + '_ {
        self.current.map(|c| c.0).into_iter().chain(self.legs.iter().flat_map(|l| l.edges.iter().copied()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    pub now_s: f64,
    pub tick_s: f64,
    pub horizon_s: f64,
    pub batch_s: f64,
    ticks: u64,
}

impl SimClock {
    pub fn ticks(&self) -> u64 {
        self.ticks
    }
}

/// Per-tick safety checks over a whole run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MotionAudit {
    pub ticks: u64,
    pub vehicle_ticks: u64,
    pub samples: u64,
    pub max_distance_error_m: f64,
    pub violation_count: u64,
    pub violations: Vec<String>,
}

impl MotionAudit {
    fn violation(&mut self, message: String) {
        self.violation_count += 1;
        if self.violations.len() < MAX_RECORDED_VIOLATIONS {
            self.violations.push(message);
        }
    }

    pub fn is_clean(&self) -> bool {
        self.violation_count == 0
    }
}

/// A request accepted by a vehicle, in commitment order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommitmentRecord {
    pub time_s: f64,
    pub vehicle: VehicleId,
    pub request: RequestId,
    pub rebalanced: bool,
}

pub struct World {
    pub config: ScenarioConfig,
    pub graph: Arc<RoadGraph>,
    pub overlay: SpeedOverlay,
    pub clock: SimClock,
    pub vehicles: Vec<VehicleState>,
    pub requests: Vec<RequestRecord>,
    request_index: HashMap<RequestId, usize>,
    trace: Vec<TripRequest>,
    next_request: usize,
    traffic: Vec<TrafficEvent>,
    next_traffic: usize,
    waiting: Vec<PendingRequest>,
    scheduler: Router,
    live: Router,
    baseline: Router,
    dispatch: DispatchConfig,
    pub bus: EventBus,
    pub gateway: Gateway,
    pub samples: Vec<KpiSample>,
    pub detours: Vec<DetourRecord>,
    pub commitments: Vec<CommitmentRecord>,
    pub audit: MotionAudit,
    pub dispatch_time: Duration,
    tick_counts: (u64, u64, u64),
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("clock", &self.clock)
            .field("vehicles", &self.vehicles.len())
            .field("requests", &self.requests.len())
            .finish_non_exhaustive()
    }
}

/// Telemetry produced while moving, published after all vehicles moved so
/// that topic timestamps stay ordered.
struct Report {
    time_s: f64,
    vehicle: VehicleId,
    topic: Topic,
    telemetry: VehicleTelemetry,
}

impl World {
    /// Builds a world with vehicles at the given nodes.
    pub fn new(
        config: ScenarioConfig,
        graph: Arc<RoadGraph>,
        start_nodes: &[NodeIdx],
        trace: &RequestTrace,
        mut traffic: Vec<TrafficEvent>,
    ) -> Result<Self, SimError> {
        config.validate()?;
        if start_nodes.len() != config.fleet {
            return Err(ScenarioError::Invalid {
                field: "fleet",
                message: "one start node per vehicle required".into(),
            }
            .into());
        }
        let overlay = SpeedOverlay::new(&graph);
        for e in &traffic {
            overlay.check(&graph, e)?;
        }
        sort_events(&mut traffic);
        let mut requests = trace.requests.clone();
        requests.sort_by(|a, b| a.submission_s.total_cmp(&b.submission_s).then(a.id.cmp(&b.id)));
        let mut ids = BTreeSet::new();
        if let Some(r) = requests.iter().find(|r| !ids.insert(r.id)) {
            return Err(SimError::Trace(format!("duplicate request id {}", r.id)));
        }
        let vehicles = start_nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| VehicleState::new(VehicleId(i as u32), config.capacity, n))
            .collect();
        let scheduler = Router::new(Arc::clone(&graph), &overlay, config.mode.speed_mode());
        let live = Router::live(Arc::clone(&graph), &overlay);
        let baseline = Router::new(Arc::clone(&graph), &overlay, config.detour_baseline);
        let tick_counts = config.tick_counts();
        let clock = SimClock {
            now_s: 0.0,
            tick_s: config.tick_s,
            horizon_s: config.horizon_s,
            batch_s: config.batch_s,
            ticks: 0,
        };
        Ok(Self {
            dispatch: config.dispatch(),
            config,
            graph,
            overlay,
            clock,
            vehicles,
            requests: Vec::new(),
            request_index: HashMap::new(),
            trace: requests,
            next_request: 0,
            traffic,
            next_traffic: 0,
            waiting: Vec::new(),
            scheduler,
            live,
            baseline,
            bus: EventBus::new(),
            gateway: Gateway::new(),
            samples: Vec::new(),
            detours: Vec::new(),
            commitments: Vec::new(),
            audit: MotionAudit::default(),
            dispatch_time: Duration::ZERO,
            tick_counts,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.clock.ticks >= self.tick_counts.2
    }

    pub fn request(&self, id: RequestId) -> Option<&RequestRecord> {
        self.request_index.get(&id).map(|&i| &self.requests[i])
    }

    pub fn waiting_pool(&self) -> &[PendingRequest] {
        &self.waiting
    }

    /// Advances the world by one tick.
    pub fn step(&mut self) -> Result<(), SimError> {
        let now = self.clock.now_s;
        let end = (self.clock.ticks + 1) as f64 * self.clock.tick_s;
        self.apply_traffic(end)?;
        self.move_vehicles(now, end)?;
        self.clock.ticks += 1;
        self.clock.now_s = end;
        self.audit.ticks += 1;

        let (batch, sample, _) = self.tick_counts;
        if self.clock.ticks % batch == 0 {
            self.dispatch_round(end)?;
        }
        if self.clock.ticks % sample == 0 {
            self.record_sample(end);
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    fn publish_traffic(&mut self, timestamp_s: f64, event: TrafficEvent) -> Result<(), SimError> {
        let seq = self.bus.publish(Topic::ContextTraffic, timestamp_s, Payload::Traffic(event.clone()))?;
        self.overlay.apply(&self.graph, &event)?;
        let msg = self.bus.topic_log(Topic::ContextTraffic)[seq as usize].clone();
        self.gateway.forward(&mut self.bus, &msg)?;
        Ok(())
    }

    fn apply_traffic(&mut self, until: f64) -> Result<(), SimError> {
        while self.next_traffic < self.traffic.len() && self.traffic[self.next_traffic].timestamp_s < until {
            let event = self.traffic[self.next_traffic].clone();
            self.next_traffic += 1;
            self.publish_traffic(event.timestamp_s.max(0.0), event)?;
        }
        Ok(())
    }

    fn move_vehicles(&mut self, now: f64, end: f64) -> Result<(), SimError> {
        let mut reports = Vec::new();
        for v in 0..self.vehicles.len() {
            self.move_vehicle(v, now, end - now, &mut reports);
            self.audit.vehicle_ticks += 1;
            let vs = &self.vehicles[v];
            if vs.onboard.len() as u32 > vs.capacity {
                let msg = format!("t={end}: {} carries {} > {}", vs.id, vs.onboard.len(), vs.capacity);
                self.audit.violation(msg);
            }
        }
        reports.sort_by(|a, b| a.time_s.total_cmp(&b.time_s).then(a.vehicle.cmp(&b.vehicle)));
        let mut detections = Vec::new();
        for r in reports {
            let seq = self.bus.publish(r.topic, r.time_s, Payload::Telemetry(r.telemetry))?;
            if r.topic == Topic::GatewayIn {
                detections.push(self.bus.topic_log(Topic::GatewayIn)[seq as usize].clone());
            }
        }
        // Vehicle reports reach the context platform at the end of the tick.
        for msg in detections {
            let forwarded = self.gateway.forward(&mut self.bus, &msg)?;
            for f in forwarded {
                if let Payload::Traffic(event) = &f.payload {
                    self.overlay.apply(&self.graph, event)?;
                }
                let more = self.gateway.forward(&mut self.bus, &f)?;
                debug_assert!(more.is_empty());
            }
        }
        Ok(())
    }

    fn move_vehicle(&mut self, v: usize, now: f64, tick: f64, reports: &mut Vec<Report>) {
        let graph = Arc::clone(&self.graph);
        let mut budget = tick;
        let before = self.vehicles[v].current;
        let mut kinematic_m = 0.0;
        let mut geometric_m = 0.0;
        loop {
            if let Some((e, progress)) = self.vehicles[v].current {
                let edge = graph.edge(e);
                let speed = self.overlay.effective_speed(&graph, e);
                if speed <= 0.0 || budget <= 0.0 {
                    break;
                }
                let remaining = edge.length_m - progress;
                let needed = remaining / speed;
                if needed <= budget {
                    budget -= needed;
                    kinematic_m += speed * needed;
                    geometric_m += remaining;
                    let vs = &mut self.vehicles[v];
                    vs.current = None;
                    vs.node = edge.to;
                    vs.odometer_m += remaining;
                } else {
                    let d = speed * budget;
                    kinematic_m += d;
                    geometric_m += d;
                    let vs = &mut self.vehicles[v];
                    vs.current = Some((e, progress + d));
                    vs.odometer_m += d;
                    break;
                }
            }

            let t = now + (tick - budget);
            self.fire_ready_stops(v, t, reports);
            if budget <= 0.0 || self.vehicles[v].legs.is_empty() {
                break;
            }
            let Some(e) = self.next_edge(v) else { break };
            let at = self.vehicles[v].node;
            if graph.edge(e).from != at {
                let msg =
                    format!("t={t}: {} enters {} from {}", self.vehicles[v].id, graph.edge(e).id, graph.node(at).id);
                self.audit.violation(msg);
            }
            self.vehicles[v].current = Some((e, 0.0));
            if self.config.vehicle_reports {
                let live = self.overlay.effective_speed(&graph, e);
                let free = graph.edge(e).freeflow_mps;
                if live < self.config.report_threshold * free {
                    let vs = &self.vehicles[v];
                    let event = TrafficEvent {
                        timestamp_s: t,
                        edge_id: graph.edge(e).id.clone(),
                        speed_mps: live,
                        source: vs.id.to_string(),
                    };
                    reports.push(Report {
                        time_s: t,
                        vehicle: vs.id,
                        topic: Topic::GatewayIn,
                        telemetry: VehicleTelemetry {
                            vehicle: vs.id,
                            position: vs.position(&graph),
                            onboard: vs.onboard.len() as u32,
                            confirmation: None,
                            detected: Some(event),
                        },
                    });
                }
            }
        }

        // Independent check of the distance covered this tick.
        let after = self.vehicles[v].current;
        let err = (kinematic_m - geometric_m).abs();
        if err > self.audit.max_distance_error_m {
            self.audit.max_distance_error_m = err;
        }
        if err > 1e-6 {
            self.audit.violation(format!("t={}: {} distance mismatch {err} m", now + tick, self.vehicles[v].id));
        }
        if let (Some((e0, p0)), Some((e1, p1))) = (before, after) {
            if e0 == e1 && p1 < p0 {
                self.audit.violation(format!(
                    "t={}: {} moved backwards on {}",
                    now + tick,
                    self.vehicles[v].id,
                    graph.edge(e0).id
                ));
            }
        }
    }

    /// The next edge of the current leg, re-routing with live speeds when it
    /// is blocked or the leg has no path yet. `None` leaves the vehicle
    /// waiting at its node.
    fn next_edge(&mut self, v: usize) -> Option<EdgeIdx> {
        let graph = Arc::clone(&self.graph);
        let at = self.vehicles[v].node;
        let target = self.vehicles[v].plan.stops()[0].node;
        let leg = &self.vehicles[v].legs[0];
        let blocked = leg.edges.front().map_or(true, |&e| self.overlay.effective_speed(&graph, e) <= 0.0);
        if !leg.routed || blocked {
            self.live.sync_overlay(&self.overlay);
            let path = self.live.path(at, target)?;
            let leg = &mut self.vehicles[v].legs[0];
            leg.edges = path.into();
            leg.routed = true;
        }
        self.vehicles[v].legs[0].edges.pop_front()
    }

    fn fire_ready_stops(&mut self, v: usize, t: f64, reports: &mut Vec<Report>) {
        loop {
            let vs = &self.vehicles[v];
            let ready = vs.legs.front().is_some_and(|l| l.routed && l.edges.is_empty()) && vs.current.is_none();
            if !ready {
                return;
            }
            let vs = &mut self.vehicles[v];
            vs.legs.pop_front();
            let stop = vs.plan.pop_front().expect("legs and stops stay aligned");
            debug_assert_eq!(stop.node, vs.node);
            let idx = self.request_index[&stop.request];
            let record = &mut self.requests[idx];
            match stop.kind {
                StopKind::Pickup => {
                    vs.onboard.push(stop.request);
                    record.status = RequestStatus::Onboard;
                    record.pickup_s = Some(t);
                }
                StopKind::Dropoff => {
                    vs.onboard.retain(|r| *r != stop.request);
                    record.status = RequestStatus::Served;
                    record.dropoff_s = Some(t);
                    self.detours.push(DetourRecord::new(record.id(), record.preferred_arrival_s, t));
                }
            }
            let vs = &self.vehicles[v];
            reports.push(Report {
                time_s: t,
                vehicle: vs.id,
                topic: Topic::VehicleTelemetry,
                telemetry: VehicleTelemetry {
                    vehicle: vs.id,
                    position: vs.position(&self.graph),
                    onboard: vs.onboard.len() as u32,
                    confirmation: Some(StopConfirmation { kind: stop.kind, request: stop.request }),
                    detected: None,
                },
            });
        }
    }

    fn inject_requests(&mut self, until: f64) -> Result<Vec<PendingRequest>, SimError> {
        let mut fresh = Vec::new();
        self.baseline.sync_overlay(&self.overlay);
        while self.next_request < self.trace.len() && self.trace[self.next_request].submission_s < until {
            let request = self.trace[self.next_request].clone();
            self.next_request += 1;
            self.bus.publish(Topic::Requests, request.submission_s, Payload::Request(request.clone()))?;
            let origin = nearest_node(&self.graph, request.origin);
            let destination = nearest_node(&self.graph, request.destination);
            let freeflow_direct = self.graph_freeflow_time(origin, destination);
            let direct = match self.config.detour_baseline {
                SpeedMode::Freeflow => freeflow_direct,
                SpeedMode::Live => self.baseline.travel_time(origin, destination).unwrap_or(freeflow_direct),
            };
            let pending = PendingRequest {
                id: RequestId(request.id),
                origin,
                destination,
                submission_s: request.submission_s,
                pickup_deadline_s: request.pickup_deadline_s,
                dropoff_deadline_s: self.config.max_detour_s.map(|d| request.submission_s + freeflow_direct + d),
            };
            self.request_index.insert(pending.id, self.requests.len());
            self.requests.push(RequestRecord {
                preferred_arrival_s: request.submission_s + direct,
                request,
                origin,
                destination,
                status: RequestStatus::Waiting,
                vehicle: None,
                assigned_s: None,
                pickup_s: None,
                dropoff_s: None,
                rebalanced: false,
            });
            fresh.push(pending);
        }
        Ok(fresh)
    }

    fn graph_freeflow_time(&self, from: NodeIdx, to: NodeIdx) -> f64 {
        if self.config.detour_baseline == SpeedMode::Freeflow {
            self.baseline.travel_time(from, to)
        } else {
            crate::road_network::travel_time(&self.graph, &self.overlay, SpeedMode::Freeflow, from, to)
        }
        .expect("road graph is strongly connected")
    }

    /// Scheduler view of the fleet. Vehicles stuck on a blocked edge are left
    /// out because no finite departure time exists for them.
    fn fleet_view(&self, now: f64) -> Vec<FleetVehicle> {
        self.vehicles
            .iter()
            .filter_map(|vs| {
                let depart_s = match vs.current {
                    None => now,
                    Some((e, progress)) => {
                        let speed = self.scheduler.edge_speed(e);
                        now + (self.graph.edge(e).length_m - progress) / speed
                    }
                };
                depart_s.is_finite().then(|| FleetVehicle {
                    id: vs.id,
                    anchor: VehicleAnchor { node: vs.anchor_node(&self.graph), depart_s, capacity: vs.capacity },
                    plan: vs.plan.clone(),
                })
            })
            .collect()
    }

    fn dispatch_round(&mut self, now: f64) -> Result<(), SimError> {
        let fresh = self.inject_requests(now)?;
        self.scheduler.sync_overlay(&self.overlay);
        let window = collect_batch(now, self.clock.batch_s, &fresh, &self.waiting);
        if window.requests.is_empty() {
            return Ok(());
        }
        let started = Instant::now();
        let fleet = self.fleet_view(now);
        let outcome = dispatch_batch(&window, &fleet, &self.scheduler, &self.dispatch);
        self.dispatch_time += started.elapsed();
        for c in &outcome.commitments {
            self.commit(now, c)?;
        }
        let still: BTreeSet<RequestId> = outcome.waiting.iter().copied().collect();
        self.waiting = window.requests.into_iter().filter(|r| still.contains(&r.id)).collect();
        if !outcome.commitments.is_empty() {
            let graph = &self.graph;
            let edges: BTreeSet<EdgeIdx> = self.vehicles.iter().flat_map(|v| v.planned_edges()).collect();
            self.gateway.set_relevant_edges(edges.into_iter().map(|e| graph.edge(e).id.clone()));
        }
        Ok(())
    }

    fn commit(&mut self, now: f64, c: &Commitment) -> Result<(), SimError> {
        let v = c.vehicle.0 as usize;
        let start = self.vehicles[v].anchor_node(&self.graph);
        let mut legs = VecDeque::with_capacity(c.plan.len());
        let mut at = start;
        for stop in c.plan.stops() {
            let leg = match self.scheduler.path(at, stop.node) {
                Some(p) => Leg { edges: p.into(), routed: true },
                None => Leg { edges: VecDeque::new(), routed: false },
            };
            legs.push_back(leg);
            at = stop.node;
        }
        let vs = &mut self.vehicles[v];
        debug_assert_eq!(c.plan.initial_load() as usize, vs.onboard.len());
        vs.plan = c.plan.clone();
        vs.legs = legs;

        let idx = self.request_index[&c.request];
        let record = &mut self.requests[idx];
        record.status = RequestStatus::Assigned;
        record.vehicle = Some(c.vehicle);
        record.assigned_s = Some(now);
        record.rebalanced = c.rebalanced;
        self.commitments.push(CommitmentRecord {
            time_s: now,
            vehicle: c.vehicle,
            request: c.request,
            rebalanced: c.rebalanced,
        });

        let stops = c
            .plan
            .stops()
            .iter()
            .map(|s| CommandStop {
                kind: s.kind,
                request: s.request,
                node: self.graph.node(s.node).id.clone(),
                planned_arrival_s: s.planned_arrival,
            })
            .collect();
        let command = VehicleCommand { vehicle: c.vehicle, request: c.request, rebalanced: c.rebalanced, stops };
        self.bus.publish(Topic::VehicleCommands, now, Payload::Command(command))?;
        Ok(())
    }

    fn record_sample(&mut self, now: f64) {
        let sample = metrics_report::sample(self, now);
        self.audit.samples += 1;
        let injected = self.requests.len() as u64;
        if sample.waiting + sample.assigned + sample.onboard + sample.served != injected {
            self.audit.violation(format!("t={now}: status partition does not sum to {injected}"));
        }
        if let Some(prev) = self.samples.last() {
            if sample.served < prev.served {
                self.audit.violation(format!("t={now}: served decreased"));
            }
        }
        self.samples.push(sample);
    }
}

/// Everything needed to reproduce or report a run.
#[derive(Debug)]
pub struct RunOutput {
    pub world: World,
    pub trace: RequestTrace,
    pub traffic: Vec<TrafficEvent>,
    pub cameras: Vec<CameraSpec>,
    pub wall_clock: Duration,
}

/// Resolves inputs from the config and runs to the horizon.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput, SimError> {
    config.validate()?;
    let (graph, cameras) = config.build_network()?;
    let trace = config.build_demand(&graph)?;
    let traffic = config.build_traffic(&graph, &cameras)?;
    run_with_inputs(config, graph, cameras, trace, traffic)
}

/// Runs on explicit inputs. Vehicles start at the nodes nearest to positions
/// drawn from the regional vehicle distribution.
pub fn run_with_inputs(
    config: &ScenarioConfig,
    graph: Arc<RoadGraph>,
    cameras: Vec<CameraSpec>,
    trace: RequestTrace,
    traffic: Vec<TrafficEvent>,
) -> Result<RunOutput, SimError> {
    let started = Instant::now();
    let positions = demand::init_vehicle_positions(&demand::builtin_regions(), config.fleet, config.fleet_seed())
        .map_err(ScenarioError::from)?;
    let nodes: Vec<NodeIdx> = positions.into_iter().map(|p| nearest_node(&graph, p)).collect();
    let mut world = World::new(config.clone(), graph, &nodes, &trace, traffic.clone())?;
    world.run_to_end()?;
    Ok(RunOutput { world, trace, traffic, cameras, wall_clock: started.elapsed() })
}

/// The request trace and external traffic recorded in a bus log, for
/// closed-loop re-runs.
pub fn inputs_from_log(messages: &[BusMessage], template: &RequestTrace) -> (RequestTrace, Vec<TrafficEvent>) {
    let requests = messages
        .iter()
        .filter_map(|m| match (&m.topic, &m.payload) {
            (Topic::Requests, Payload::Request(r)) => Some(r.clone()),
            _ => None,
        })
        .collect();
    let trace = RequestTrace { requests, ..template.clone() };
    (trace, crate::event_bus::external_traffic(messages))
}

impl IotMode {
    /// The other mode, for paired runs.
    pub fn other(self) -> Self {
        match self {
            IotMode::IotEnabled => IotMode::IotDisabled,
            IotMode::IotDisabled => IotMode::IotEnabled,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road_network::{EdgeRecord, GraphFile, NodeRecord};

    /// Four nodes on a line, 500 m apart, 10 m/s both ways.
    fn line_graph() -> Arc<RoadGraph> {
        let mut file = GraphFile::default();
        for i in 0..4 {
            file.nodes.push(NodeRecord { id: format!("n{i}"), lat: 51.44, lon: 5.40 + 0.01 * i as f64 });
        }
        for i in 0..3 {
            for (a, b) in [(i, i + 1), (i + 1, i)] {
                file.edges.push(EdgeRecord {
                    id: format!("n{a}-n{b}"),
                    from: format!("n{a}"),
                    to: format!("n{b}"),
                    length_m: 500.0,
                    speed_mps: 10.0,
                });
            }
        }
        Arc::new(RoadGraph::from_records(&file).unwrap())
    }

    fn micro_config() -> ScenarioConfig {
        ScenarioConfig { fleet: 1, horizon_s: 200.0, synthesize_traffic: false, ..ScenarioConfig::full() }
    }

    fn trip(id: u64, graph: &RoadGraph, from: &str, to: &str, t: f64) -> TripRequest {
        let pos = |n: &str| graph.node(graph.node_idx(n).unwrap()).pos;
        TripRequest {
            id,
            origin: pos(from),
            destination: pos(to),
            submission_s: t,
            pickup_deadline_s: t + 420.0,
            party_size: 1,
        }
    }

    fn trace_of(requests: Vec<TripRequest>) -> RequestTrace {
        RequestTrace { requests, seed: 0, horizon_s: 200.0, window_s: 10.0, max_wait_s: 420.0 }
    }

    #[test]
    fn single_trip_timeline_matches_hand_kinematics() {
        let graph = line_graph();
        let start = [graph.node_idx("n0").unwrap()];
        // submitted at 3 s, dispatched at the 10 s boundary
        let trace = trace_of(vec![trip(0, &graph, "n1", "n3", 3.0)]);
        let mut world = World::new(micro_config(), Arc::clone(&graph), &start, &trace, Vec::new()).unwrap();
        world.run_to_end().unwrap();
        let r = world.request(RequestId(0)).unwrap();
        assert_eq!(r.assigned_s, Some(10.0));
        // 500 m at 10 m/s to the pickup, then 1000 m to the drop-off
        assert_eq!(r.pickup_s, Some(60.0));
        assert_eq!(r.dropoff_s, Some(160.0));
        assert_eq!(r.status, RequestStatus::Served);
        assert_eq!(world.detours.len(), 1);
        assert_eq!(world.detours[0].detour_s, 160.0 - (3.0 + 100.0));
        assert!(world.audit.is_clean(), "{:?}", world.audit.violations);
        assert_eq!(world.vehicles[0].status(), VehicleStatus::Idle);
        assert_eq!(world.vehicles[0].node, graph.node_idx("n3").unwrap());
        assert_eq!(world.vehicles[0].odometer_m, 1500.0);
    }

    #[test]
    fn fraction_advances_with_speed_and_slows_after_event() {
        let graph = line_graph();
        let start = [graph.node_idx("n0").unwrap()];
        let trace = trace_of(vec![trip(0, &graph, "n1", "n2", 0.0)]);
        let slow = TrafficEvent { timestamp_s: 15.0, edge_id: "n0-n1".into(), speed_mps: 5.0, source: "cam".into() };
        let mut world = World::new(micro_config(), Arc::clone(&graph), &start, &trace, vec![slow]).unwrap();
        for _ in 0..11 {
            world.step().unwrap();
        }
        // left n0 at 10 s; one tick at 10 m/s covers 2% of the 500 m edge
        match world.vehicles[0].position(&graph) {
            Position::Edge { edge, fraction } => {
                assert_eq!(edge, "n0-n1");
                assert!((fraction - 0.02).abs() < 1e-12);
            }
            p => panic!("{p:?}"),
        }
        for _ in 0..5 {
            world.step().unwrap();
        }
        // ticks 11..15 at 10 m/s, tick 15..16 at 5 m/s
        let (_, progress) = world.vehicles[0].current.unwrap();
        assert!((progress - (50.0 + 5.0)).abs() < 1e-9, "{progress}");
        world.run_to_end().unwrap();
        assert!(world.audit.is_clean());
    }

    #[test]
    fn blocked_edge_forces_live_reroute() {
        // square n0-n1-n2-n3 with a long diagonal n0-n2
        let mut file = GraphFile::default();
        for (i, (lat, lon)) in [(51.0, 5.0), (51.0, 5.01), (51.01, 5.01), (51.01, 5.0)].iter().enumerate() {
            file.nodes.push(NodeRecord { id: format!("n{i}"), lat: *lat, lon: *lon });
        }
        let mut add = |a: usize, b: usize, len: f64| {
            for (x, y) in [(a, b), (b, a)] {
                file.edges.push(EdgeRecord {
                    id: format!("n{x}-n{y}"),
                    from: format!("n{x}"),
                    to: format!("n{y}"),
                    length_m: len,
                    speed_mps: 10.0,
                });
            }
        };
        add(0, 1, 100.0);
        add(1, 2, 100.0);
        add(2, 3, 100.0);
        add(3, 0, 100.0);
        add(0, 2, 500.0);
        let graph = Arc::new(RoadGraph::from_records(&file).unwrap());
        let start = [graph.node_idx("n0").unwrap()];
        let trace = trace_of(vec![trip(0, &graph, "n0", "n2", 0.0)]);
        let block = TrafficEvent { timestamp_s: 11.0, edge_id: "n1-n2".into(), speed_mps: 0.0, source: "cam".into() };
        let config = ScenarioConfig { mode: IotMode::IotDisabled, ..micro_config() };
        let mut world = World::new(config, Arc::clone(&graph), &start, &trace, vec![block]).unwrap();
        world.run_to_end().unwrap();
        let r = world.request(RequestId(0)).unwrap();
        // pickup at n0 at 10 s, n1 at 20 s, back to n0 at 30 s, then via n3: 50 s
        assert_eq!(r.pickup_s, Some(10.0));
        assert_eq!(r.dropoff_s, Some(50.0));
        assert!(world.audit.is_clean(), "{:?}", world.audit.violations);
    }

    #[test]
    fn zero_requests_keep_fleet_idle() {
        let graph = line_graph();
        let start = [graph.node_idx("n1").unwrap()];
        let mut world =
            World::new(micro_config(), Arc::clone(&graph), &start, &trace_of(Vec::new()), Vec::new()).unwrap();
        world.run_to_end().unwrap();
        assert_eq!(world.samples.len(), 20);
        assert!(world.samples.iter().all(|s| s.served == 0 && s.waiting == 0));
        assert_eq!(world.vehicles[0].odometer_m, 0.0);
    }

    #[test]
    fn statuses_progress_in_order() {
        let graph = line_graph();
        let start = [graph.node_idx("n0").unwrap()];
        let trace = trace_of(vec![trip(0, &graph, "n1", "n3", 3.0)]);
        let mut world = World::new(micro_config(), Arc::clone(&graph), &start, &trace, Vec::new()).unwrap();
        let mut seen = Vec::new();
        while !world.is_finished() {
            world.step().unwrap();
            if let Some(r) = world.request(RequestId(0)) {
                if seen.last() != Some(&r.status) {
                    seen.push(r.status);
                }
            }
        }
        assert_eq!(seen, vec![RequestStatus::Assigned, RequestStatus::Onboard, RequestStatus::Served]);
        let topics: Vec<Topic> = world.bus.merged().iter().map(|m| m.topic).collect();
        assert!(topics.contains(&Topic::VehicleCommands) && topics.contains(&Topic::VehicleTelemetry));
    }
}
