//! Regional demand model and offline request-trace generation.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{BoundingBox, LatLon};

/// Default maximum wait before pickup: seven minutes.
pub const DEFAULT_MAX_WAIT_S: f64 = 420.0;

const BUILTIN_REGIONS: &str = include_str!("../config/regions.toml");
const PROBABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("region table: {0}")]
    Table(String),
    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: &'static str, reason: String },
    #[error("trace record {record}: {message}")]
    Record { record: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionCode {
    E,
    L,
    H,
    N,
    G,
    W,
}

impl RegionCode {
    pub const ALL: [RegionCode; 6] = [Self::E, Self::L, Self::H, Self::N, Self::G, Self::W];
}

impl fmt::Display for RegionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One area of interest with its sampling probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub code: RegionCode,
    pub name: String,
    pub bbox: BoundingBox<f64>,
    pub vehicle_p: f64,
    pub origin_p: f64,
    /// Destination probabilities as configured, in [`RegionCode::ALL`] order.
    pub destination_raw: [f64; 6],
    /// `destination_raw` divided by its row sum.
    pub destination: [f64; 6],
}

#[derive(Deserialize)]
struct RegionTableFile {
    region: Vec<RegionRow>,
}

#[derive(Deserialize)]
struct RegionRow {
    code: RegionCode,
    #[serde(default)]
    name: String,
    ne: [f64; 2],
    sw: [f64; 2],
    vehicle: f64,
    origin: f64,
    destination: [f64; 6],
}

/// Parses and validates a region table document.
pub fn parse_regions(text: &str) -> Result<Vec<Region>, DemandError> {
    let file: RegionTableFile = toml::from_str(text).map_err(|e| DemandError::Table(e.to_string()))?;
    let mut regions = Vec::with_capacity(file.region.len());
    for row in file.region {
        let row_sum: f64 = row.destination.iter().sum();
        if row.destination.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || !(row_sum > 0.0) {
            return Err(DemandError::Table(format!("region {}: invalid destination row", row.code)));
        }
        let mut destination = row.destination;
        destination.iter_mut().for_each(|p| *p /= row_sum);
        regions.push(Region {
            code: row.code,
            name: row.name,
            bbox: BoundingBox::new(LatLon::new(row.ne[0], row.ne[1]), LatLon::new(row.sw[0], row.sw[1])),
            vehicle_p: row.vehicle,
            origin_p: row.origin,
            destination_raw: row.destination,
            destination,
        });
    }
    validate_regions(&regions)?;
    Ok(regions)
}

pub fn load_regions(path: impl AsRef<Path>) -> Result<Vec<Region>, DemandError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| DemandError::Io { path: path.display().to_string(), source })?;
    parse_regions(&text)
}

/// The six built-in Brainport areas.
pub fn builtin_regions() -> Vec<Region> {
    parse_regions(BUILTIN_REGIONS).expect("built-in region table is valid")
}

pub fn builtin_regions_text() -> &'static str {
    BUILTIN_REGIONS
}

pub fn validate_regions(regions: &[Region]) -> Result<(), DemandError> {
    let codes: Vec<RegionCode> = regions.iter().map(|r| r.code).collect();
    if codes != RegionCode::ALL {
        return Err(DemandError::Table(format!("expected regions E, L, H, N, G, W in order, got {codes:?}")));
    }
    for r in regions {
        if r.bbox.is_degenerate() {
            return Err(DemandError::Table(format!("region {}: degenerate bounding box", r.code)));
        }
        let dest_sum: f64 = r.destination.iter().sum();
        if (dest_sum - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(DemandError::Table(format!("region {}: destination row sums to {dest_sum}", r.code)));
        }
    }
    for (name, column) in [
        ("vehicle", regions.iter().map(|r| r.vehicle_p).collect::<Vec<_>>()),
        ("origin", regions.iter().map(|r| r.origin_p).collect()),
    ] {
        let sum: f64 = column.iter().sum();
        if column.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(DemandError::Table(format!("{name} probabilities sum to {sum}")));
        }
    }
    Ok(())
}

fn sample_in(bbox: &BoundingBox<f64>, rng: &mut impl Rng) -> LatLon<f64> {
    LatLon::new(rng.gen_range(bbox.sw.lat..=bbox.ne.lat), rng.gen_range(bbox.sw.lon..=bbox.ne.lon))
}

/// A single-passenger ride request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRequest {
    pub id: u64,
    pub origin: LatLon<f64>,
    pub destination: LatLon<f64>,
    pub submission_s: f64,
    pub pickup_deadline_s: f64,
    pub party_size: u32,
}

/// Requests ordered by submission time, plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestTrace {
    pub requests: Vec<TripRequest>,
    pub seed: u64,
    pub horizon_s: f64,
    pub window_s: f64,
    pub max_wait_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub horizon_s: f64,
    pub window_s: f64,
    /// Inclusive range of requests per window.
    pub per_window: (u32, u32),
    pub max_wait_s: f64,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self { horizon_s: 3600.0, window_s: 10.0, per_window: (1, 4), max_wait_s: DEFAULT_MAX_WAIT_S }
    }
}

/// Generates a request trace. When `same_place` is given, destinations are
/// resampled until `same_place(origin, destination)` is false.
pub fn generate_trace(
    regions: &[Region],
    params: &TraceParams,
    seed: u64,
    same_place: Option<&dyn Fn(LatLon<f64>, LatLon<f64>) -> bool>,
) -> Result<RequestTrace, DemandError> {
    validate_regions(regions)?;
    if !(params.window_s > 0.0) {
        return Err(DemandError::Parameter { name: "window_s", reason: "must be > 0".into() });
    }
    if params.per_window.0 > params.per_window.1 {
        return Err(DemandError::Parameter { name: "per_window", reason: "empty range".into() });
    }
    let windows = params.horizon_s / params.window_s;
    if !(params.horizon_s >= 0.0) || (windows - windows.round()).abs() > 1e-9 {
        return Err(DemandError::Parameter { name: "horizon_s", reason: "must be a multiple of window_s".into() });
    }
    if !(params.max_wait_s > 0.0) {
        return Err(DemandError::Parameter { name: "max_wait_s", reason: "must be > 0".into() });
    }
    let windows = windows.round() as u64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin_dist = WeightedIndex::new(regions.iter().map(|r| r.origin_p)).expect("validated origin column");
    let dest_dists: Vec<WeightedIndex<f64>> =
        regions.iter().map(|r| WeightedIndex::new(r.destination).expect("validated destination row")).collect();

    let mut requests = Vec::new();
    for w in 0..windows {
        let start = w as f64 * params.window_s;
        let count = rng.gen_range(params.per_window.0..=params.per_window.1);
        let mut batch = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let o = origin_dist.sample(&mut rng);
            let origin = sample_in(&regions[o].bbox, &mut rng);
            let mut destination = sample_in(&regions[dest_dists[o].sample(&mut rng)].bbox, &mut rng);
            if let Some(same) = same_place {
                let mut attempts = 0;
                while same(origin, destination) {
                    attempts += 1;
                    if attempts > 1000 {
                        return Err(DemandError::Parameter {
                            name: "regions",
                            reason: "cannot sample a destination distinct from its origin".into(),
                        });
                    }
                    destination = sample_in(&regions[dest_dists[o].sample(&mut rng)].bbox, &mut rng);
                }
            }
            let submission_s = start + rng.gen::<f64>() * params.window_s;
            batch.push((submission_s, origin, destination));
        }
        batch.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (submission_s, origin, destination) in batch {
            requests.push(TripRequest {
                id: requests.len() as u64,
                origin,
                destination,
                submission_s,
                pickup_deadline_s: submission_s + params.max_wait_s,
                party_size: 1,
            });
        }
    }
    Ok(RequestTrace {
        requests,
        seed,
        horizon_s: params.horizon_s,
        window_s: params.window_s,
        max_wait_s: params.max_wait_s,
    })
}

/// Initial vehicle positions drawn from the vehicle-location column.
pub fn init_vehicle_positions(
    regions: &[Region],
    fleet_size: usize,
    seed: u64,
) -> Result<Vec<LatLon<f64>>, DemandError> {
    if fleet_size == 0 {
        return Err(DemandError::Parameter { name: "fleet_size", reason: "must be >= 1".into() });
    }
    let weights: Vec<f64> = regions.iter().map(|r| r.vehicle_p).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| DemandError::Table(format!("vehicle probabilities: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..fleet_size)
        .map(|_| {
            let r = dist.sample(&mut rng);
            sample_in(&regions[r].bbox, &mut rng)
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    request_id: u64,
    submission_s: f64,
    origin_lat: f64,
    origin_lon: f64,
    dest_lat: f64,
    dest_lon: f64,
}

/// Writes the trace as CSV preceded by a `#` metadata line.
pub fn write_trace<W: Write>(mut writer: W, trace: &RequestTrace) -> Result<(), DemandError> {
    let io = |e: std::io::Error| DemandError::Record { record: 0, message: e.to_string() };
    writeln!(
        writer,
        "# seed={} horizon_s={} window_s={} max_wait_s={}",
        trace.seed, trace.horizon_s, trace.window_s, trace.max_wait_s
    )
    .map_err(io)?;
    let mut w = csv::Writer::from_writer(writer);
    for r in &trace.requests {
        w.serialize(TraceRow {
            request_id: r.id,
            submission_s: r.submission_s,
            origin_lat: r.origin.lat,
            origin_lon: r.origin.lon,
            dest_lat: r.destination.lat,
            dest_lon: r.destination.lon,
        })
        .map_err(|e| DemandError::Record { record: 0, message: e.to_string() })?;
    }
    w.flush().map_err(io)
}

/// Reads a trace. Metadata missing from the file falls back to `defaults`.
pub fn read_trace<R: Read>(reader: R, defaults: &TraceParams) -> Result<RequestTrace, DemandError> {
    let mut reader = std::io::BufReader::new(reader);
    let mut text = String::new();
    reader.read_to_string(&mut text).map_err(|e| DemandError::Record { record: 0, message: e.to_string() })?;
    let (mut seed, mut horizon_s, mut window_s, mut max_wait_s) =
        (0u64, defaults.horizon_s, defaults.window_s, defaults.max_wait_s);
    for line in text.as_bytes().lines().map_while(Result::ok).filter(|l| l.starts_with('#')) {
        for kv in line.trim_start_matches('#').split_whitespace() {
            let Some((k, v)) = kv.split_once('=') else { continue };
            let bad = || DemandError::Record { record: 0, message: format!("bad metadata {kv}") };
            match k {
                "seed" => seed = v.parse().map_err(|_| bad())?,
                "horizon_s" => horizon_s = v.parse().map_err(|_| bad())?,
                "window_s" => window_s = v.parse().map_err(|_| bad())?,
                "max_wait_s" => max_wait_s = v.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut requests: Vec<TripRequest> = Vec::new();
    for (i, row) in r.deserialize::<TraceRow>().enumerate() {
        let row = row.map_err(|e| DemandError::Record { record: i + 1, message: e.to_string() })?;
        if let Some(prev) = requests.last() {
            if row.submission_s < prev.submission_s {
                return Err(DemandError::Record {
                    record: i + 1,
                    message: "submission times must be non-decreasing".into(),
                });
            }
        }
        requests.push(TripRequest {
            id: row.request_id,
            origin: LatLon::new(row.origin_lat, row.origin_lon),
            destination: LatLon::new(row.dest_lat, row.dest_lon),
            submission_s: row.submission_s,
            pickup_deadline_s: row.submission_s + max_wait_s,
            party_size: 1,
        });
    }
    Ok(RequestTrace { requests, seed, horizon_s, window_s, max_wait_s })
}

pub fn save_trace(path: impl AsRef<Path>, trace: &RequestTrace) -> Result<(), DemandError> {
    let path = path.as_ref();
    let file =
        std::fs::File::create(path).map_err(|source| DemandError::Io { path: path.display().to_string(), source })?;
    write_trace(std::io::BufWriter::new(file), trace)
}

pub fn load_trace(path: impl AsRef<Path>, defaults: &TraceParams) -> Result<RequestTrace, DemandError> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|source| DemandError::Io { path: path.display().to_string(), source })?;
    read_trace(file, defaults)
}
