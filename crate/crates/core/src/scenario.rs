//! Scenario configuration: every simulation parameter, two named presets and
//! the resolution of a config into a graph, a request trace and a traffic
//! trace.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{self, DemandError, RequestTrace, TraceParams, DEFAULT_MAX_WAIT_S};
use crate::dispatcher::{DispatchConfig, DEFAULT_CANDIDATES_K, DEFAULT_RELAX_FACTOR};
use crate::geo::{BoundingBox, LatLon};
use crate::road_network::grid::corridor_edge_ids;
use crate::road_network::traffic::{generate_camera_events, load_traffic_trace, CameraSpec, CongestionWindow};
use crate::road_network::{
    generate_grid_graph, load_graph, nearest_node, Corridor, GridLayout, NetworkError, RoadGraph, SpeedMode,
    TrafficEvent,
};

pub const DEFAULT_GRID_SPEED_MPS: f64 = 13.9;
pub const HIGHWAY_SPEED_MPS: f64 = 27.8;
pub const RING_SPEED_MPS: f64 = 22.2;

/// Whether the scheduler prices with live traffic or assumes free flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IotMode {
    IotEnabled,
    IotDisabled,
}

impl IotMode {
    pub fn speed_mode(self) -> SpeedMode {
        match self {
            IotMode::IotEnabled => SpeedMode::Live,
            IotMode::IotDisabled => SpeedMode::Freeflow,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IotMode::IotEnabled => "iot-enabled",
            IotMode::IotDisabled => "iot-disabled",
        }
    }
}

impl fmt::Display for IotMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IotMode {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iot-enabled" => Ok(IotMode::IotEnabled),
            "iot-disabled" => Ok(IotMode::IotDisabled),
            other => Err(ScenarioError::Invalid {
                field: "mode",
                message: format!("`{other}` is not iot-enabled or iot-disabled"),
            }),
        }
    }
}

/// A fast road laid onto the grid, described geographically so that it
/// survives changes of bounding box or spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum CorridorSpec {
    Line { name: String, from: [f64; 2], to: [f64; 2], speed_mps: f64, camera: bool },
    Ring { name: String, ne: [f64; 2], sw: [f64; 2], speed_mps: f64, camera: bool },
}

impl CorridorSpec {
    pub fn name(&self) -> &str {
        match self {
            CorridorSpec::Line { name, .. } | CorridorSpec::Ring { name, .. } => name,
        }
    }

    fn has_camera(&self) -> bool {
        match self {
            CorridorSpec::Line { camera, .. } | CorridorSpec::Ring { camera, .. } => *camera,
        }
    }

    /// The node path on a grid, or `None` when it collapses to one node.
    pub fn resolve(&self, layout: &GridLayout) -> Option<Corridor> {
        let cell = |p: [f64; 2]| layout.cell_near(LatLon::new(p[0], p[1]));
        let (nodes, speed_mps) = match self {
            CorridorSpec::Line { from, to, speed_mps, .. } => (layout.line_path(cell(*from), cell(*to)), *speed_mps),
            CorridorSpec::Ring { ne, sw, speed_mps, .. } => {
                let (s, w) = cell(*sw);
                let (n, e) = cell(*ne);
                if n <= s || e <= w {
                    return None;
                }
                (layout.ring_path(s, w, n, e), *speed_mps)
            }
        };
        (nodes.len() >= 2).then_some(Corridor { nodes, speed_mps })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub ne: [f64; 2],
    pub sw: [f64; 2],
    pub spacing_m: f64,
    pub default_speed_mps: f64,
    pub corridors: Vec<CorridorSpec>,
}

impl Default for GridSpec {
    fn default() -> Self {
        let regions = demand::builtin_regions();
        let bbox = |code: demand::RegionCode| regions.iter().find(|r| r.code == code).expect("builtin region").bbox;
        let (w, e, h) = (bbox(demand::RegionCode::W), bbox(demand::RegionCode::E), bbox(demand::RegionCode::H));
        let pair = |p: LatLon<f64>| [p.lat, p.lon];
        Self {
            ne: pair(w.ne),
            sw: pair(w.sw),
            spacing_m: 1000.0,
            default_speed_mps: DEFAULT_GRID_SPEED_MPS,
            corridors: vec![
                CorridorSpec::Line {
                    name: "highway".into(),
                    from: pair(e.center()),
                    to: pair(h.center()),
                    speed_mps: HIGHWAY_SPEED_MPS,
                    camera: true,
                },
                CorridorSpec::Ring {
                    name: "ring".into(),
                    ne: pair(e.ne),
                    sw: pair(e.sw),
                    speed_mps: RING_SPEED_MPS,
                    camera: true,
                },
            ],
        }
    }
}

impl GridSpec {
    pub fn bbox(&self) -> BoundingBox<f64> {
        BoundingBox::new(LatLon::new(self.ne[0], self.ne[1]), LatLon::new(self.sw[0], self.sw[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Road graph file; when absent a grid is generated from `grid`.
    pub graph: Option<PathBuf>,
    pub grid: GridSpec,
    pub fleet: usize,
    pub capacity: u32,
    pub max_wait_s: f64,
    pub batch_s: f64,
    pub tick_s: f64,
    pub horizon_s: f64,
    /// KPI sampling period; must be a multiple of the tick.
    pub sample_s: f64,
    pub mode: IotMode,
    pub seed: u64,
    /// Inclusive range of requests generated per batch window.
    pub requests_per_window: [u32; 2],
    pub demand_trace: Option<PathBuf>,
    pub traffic_trace: Option<PathBuf>,
    /// Synthesize camera events when no traffic trace is given.
    pub synthesize_traffic: bool,
    /// Cameras in addition to the ones on corridors.
    pub cameras: Vec<CameraSpec>,
    pub camera_period_s: f64,
    pub congestion: Option<CongestionWindow>,
    pub candidates_k: usize,
    pub relax_factor: f64,
    pub rebalance: bool,
    /// Latest drop-off relative to the free-flow direct arrival.
    pub max_detour_s: Option<f64>,
    pub detour_baseline: SpeedMode,
    /// Vehicles report edges slower than `report_threshold` times free flow.
    pub vehicle_reports: bool,
    pub report_threshold: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ScenarioConfig {
    /// 100 vehicles, 1 to 4 requests per 10 s window over one hour.
    pub fn full() -> Self {
        Self {
            graph: None,
            grid: GridSpec::default(),
            fleet: 100,
            capacity: 4,
            max_wait_s: DEFAULT_MAX_WAIT_S,
            batch_s: 10.0,
            tick_s: 1.0,
            horizon_s: 3600.0,
            sample_s: 10.0,
            mode: IotMode::IotEnabled,
            seed: 1,
            requests_per_window: [1, 4],
            demand_trace: None,
            traffic_trace: None,
            synthesize_traffic: true,
            cameras: Vec::new(),
            camera_period_s: 300.0,
            congestion: Some(CongestionWindow { start_s: 900.0, end_s: 2700.0, factor: 0.3 }),
            candidates_k: DEFAULT_CANDIDATES_K,
            relax_factor: DEFAULT_RELAX_FACTOR,
            rebalance: true,
            max_detour_s: None,
            detour_baseline: SpeedMode::Freeflow,
            vehicle_reports: true,
            report_threshold: 0.5,
        }
    }

    /// 20 vehicles and one request per window (360 per hour).
    pub fn desk() -> Self {
        Self { fleet: 20, requests_per_window: [1, 1], ..Self::full() }
    }

    pub fn preset(name: &str) -> Result<Self, ScenarioError> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(ScenarioError::Invalid { field: "preset", message: format!("unknown preset `{other}`") }),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let config: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. Relative input paths inside it are taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.rebase_paths(base);
        }
        Ok(config)
    }

    pub fn rebase_paths(&mut self, base: &Path) {
        for p in [&mut self.graph, &mut self.demand_trace, &mut self.traffic_trace].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn dispatch(&self) -> DispatchConfig {
        DispatchConfig { candidates_k: self.candidates_k, relax_factor: self.relax_factor, rebalance: self.rebalance }
    }

    pub fn trace_params(&self) -> TraceParams {
        TraceParams {
            horizon_s: self.horizon_s,
            window_s: self.batch_s,
            per_window: (self.requests_per_window[0], self.requests_per_window[1]),
            max_wait_s: self.max_wait_s,
        }
    }

    /// Number of ticks per batch, sample and horizon.
    pub fn tick_counts(&self) -> (u64, u64, u64) {
        let n = |x: f64| (x / self.tick_s).round() as u64;
        (n(self.batch_s), n(self.sample_s), n(self.horizon_s))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |field: &'static str, message: &str| Err(ScenarioError::Invalid { field, message: message.into() });
        let multiple = |x: f64, of: f64| {
            let k = x / of;
            k >= 1.0 - 1e-9 && (k - k.round()).abs() < 1e-9
        };
        if !(self.tick_s.is_finite() && self.tick_s > 0.0) {
            return bad("tick_s", "must be > 0");
        }
        if !multiple(self.batch_s, self.tick_s) {
            return bad("batch_s", "must be a positive multiple of tick_s");
        }
        if !multiple(self.sample_s, self.tick_s) {
            return bad("sample_s", "must be a positive multiple of tick_s");
        }
        if !(self.horizon_s == 0.0 || multiple(self.horizon_s, self.batch_s)) {
            return bad("horizon_s", "must be a multiple of batch_s");
        }
        if !(self.horizon_s == 0.0 || multiple(self.horizon_s, self.sample_s)) {
            return bad("horizon_s", "must be a multiple of sample_s");
        }
        if self.fleet == 0 {
            return bad("fleet", "must be >= 1");
        }
        if self.capacity == 0 {
            return bad("capacity", "must be >= 1");
        }
        if !(self.max_wait_s.is_finite() && self.max_wait_s > 0.0) {
            return bad("max_wait_s", "must be > 0");
        }
        if self.requests_per_window[0] > self.requests_per_window[1] {
            return bad("requests_per_window", "lower bound exceeds upper bound");
        }
        if self.candidates_k == 0 {
            return bad("candidates_k", "must be >= 1");
        }
        if !(self.relax_factor.is_finite() && self.relax_factor >= 1.0) {
            return bad("relax_factor", "must be >= 1");
        }
        if !(self.camera_period_s.is_finite() && self.camera_period_s > 0.0) {
            return bad("camera_period_s", "must be > 0");
        }
        if let Some(w) = self.congestion {
            if !(w.factor >= 0.0 && w.factor <= 2.0 && w.start_s <= w.end_s) {
                return bad("congestion", "needs 0 <= factor <= 2 and start_s <= end_s");
            }
        }
        if let Some(d) = self.max_detour_s {
            if !(d.is_finite() && d >= 0.0) {
                return bad("max_detour_s", "must be >= 0");
            }
        }
        if !(self.report_threshold > 0.0 && self.report_threshold <= 1.0) {
            return bad("report_threshold", "must be in (0, 1]");
        }
        if self.graph.is_none() {
            if !(self.grid.spacing_m.is_finite() && self.grid.spacing_m > 0.0) {
                return bad("grid.spacing_m", "must be > 0");
            }
            if self.grid.bbox().is_degenerate() {
                return bad("grid", "bounding box is degenerate");
            }
        }
        Ok(())
    }

    /// Loads or generates the road graph together with the cameras covering
    /// its corridors.
    pub fn build_network(&self) -> Result<(Arc<RoadGraph<f64>>, Vec<CameraSpec>), ScenarioError> {
        let mut cameras = Vec::new();
        let graph = match &self.graph {
            Some(path) => load_graph(path)?,
            None => {
                let layout = GridLayout::for_bbox(self.grid.bbox(), self.grid.spacing_m)?;
                let mut corridors = Vec::new();
                for spec in &self.grid.corridors {
                    if let Some(c) = spec.resolve(&layout) {
                        if spec.has_camera() {
                            cameras
                                .push(CameraSpec { id: format!("cam-{}", spec.name()), edges: corridor_edge_ids(&c) });
                        }
                        corridors.push(c);
                    }
                }
                generate_grid_graph(self.grid.bbox(), self.grid.spacing_m, self.grid.default_speed_mps, &corridors)?
            }
        };
        cameras.extend(self.cameras.iter().cloned());
        Ok((Arc::new(graph), cameras))
    }

    /// The configured request trace, or a freshly generated one. Origins and
    /// destinations that snap to the same node are resampled.
    pub fn build_demand(&self, graph: &RoadGraph<f64>) -> Result<RequestTrace, ScenarioError> {
        let params = self.trace_params();
        match &self.demand_trace {
            Some(path) => Ok(demand::load_trace(path, &params)?),
            None => {
                let same = |a: LatLon<f64>, b: LatLon<f64>| nearest_node(graph, a) == nearest_node(graph, b);
                Ok(demand::generate_trace(&demand::builtin_regions(), &params, self.seed, Some(&same))?)
            }
        }
    }

    pub fn build_traffic(
        &self,
        graph: &RoadGraph<f64>,
        cameras: &[CameraSpec],
    ) -> Result<Vec<TrafficEvent>, ScenarioError> {
        match &self.traffic_trace {
            Some(path) => Ok(load_traffic_trace(path)?),
            None if self.synthesize_traffic => {
                Ok(generate_camera_events(graph, cameras, self.horizon_s, self.camera_period_s, self.congestion)?)
            }
            None => Ok(Vec::new()),
        }
    }

    /// Seed for initial vehicle placement, kept apart from the demand seed.
    pub fn fleet_seed(&self) -> u64 {
        self.seed ^ 0x9E37_79B9_7F4A_7C15
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Demand(#[from] DemandError),
}
