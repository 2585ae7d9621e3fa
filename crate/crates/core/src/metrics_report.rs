//! KPI sampling, run summaries, artifact files and enabled/disabled
//! comparison.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::demand::{write_trace, RequestTrace};
use crate::ids::RequestId;
use crate::road_network::traffic::write_traffic_trace;
use crate::road_network::{RoadGraph, TrafficEvent};
use crate::scenario::{IotMode, ScenarioConfig};
use crate::simulator::{RequestStatus, RunOutput, World};

pub const DETOUR_BIN_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot {path}: {message}")]
    Plot { path: PathBuf, message: String },
    #[error("runs are not comparable: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiSample {
    pub t_s: f64,
    pub served: u64,
    pub waiting: u64,
    pub assigned: u64,
    pub onboard: u64,
    pub mean_load: f64,
}

/// Counts request statuses and averages the passenger load over the fleet.
pub fn sample(world: &World, now: f64) -> KpiSample {
    let mut s = KpiSample { t_s: now, served: 0, waiting: 0, assigned: 0, onboard: 0, mean_load: 0.0 };
    for r in &world.requests {
        match r.status {
            RequestStatus::Waiting => s.waiting += 1,
            RequestStatus::Assigned => s.assigned += 1,
            RequestStatus::Onboard => s.onboard += 1,
            RequestStatus::Served => s.served += 1,
        }
    }
    let passengers: usize = world.vehicles.iter().map(|v| v.onboard.len()).sum();
    s.mean_load = passengers as f64 / world.vehicles.len().max(1) as f64;
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetourRecord {
    pub request: RequestId,
    pub preferred_s: f64,
    pub actual_s: f64,
    pub detour_s: f64,
}

impl DetourRecord {
    pub fn new(request: RequestId, preferred_s: f64, actual_s: f64) -> Self {
        Self { request, preferred_s, actual_s, detour_s: actual_s - preferred_s }
    }
}

/// Counts per `DETOUR_BIN_S` bin; negative detours fall into the first bin.
pub fn detour_histogram(detours: &[DetourRecord]) -> Vec<u64> {
    let mut counts = Vec::new();
    for d in detours {
        let bin = (d.detour_s.max(0.0) / DETOUR_BIN_S).floor() as usize;
        if counts.len() <= bin {
            counts.resize(bin + 1, 0);
        }
        counts[bin] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: IotMode,
    pub seed: u64,
    pub input_fingerprint: String,
    pub fleet: usize,
    pub horizon_s: f64,
    pub injected: u64,
    pub served: u64,
    pub waiting: u64,
    pub assigned: u64,
    pub onboard: u64,
    pub commitments: u64,
    pub rebalanced_commitments: u64,
    pub mean_wait_s: f64,
    pub max_wait_s: f64,
    pub mean_detour_s: f64,
    pub detour_bin_s: f64,
    pub detour_histogram: Vec<u64>,
    pub audit_violations: u64,
    pub runtime_s: f64,
    pub dispatch_runtime_s: f64,
}

/// Hash of everything that determines a run apart from the scheduler mode.
pub fn input_fingerprint(
    config: &ScenarioConfig,
    graph: &RoadGraph,
    trace: &RequestTrace,
    traffic: &[TrafficEvent],
) -> String {
    let mut neutral = config.clone();
    neutral.mode = IotMode::IotEnabled;
    neutral.graph = None;
    neutral.demand_trace = None;
    neutral.traffic_trace = None;
    let mut h = Sha256::new();
    h.update(neutral.to_toml().as_bytes());
    h.update(serde_json::to_vec(&graph.to_records()).expect("graph serializes"));
    let mut buf = Vec::new();
    write_trace(&mut buf, trace).expect("writing to memory");
    h.update(&buf);
    buf.clear();
    write_traffic_trace(&mut buf, traffic).expect("writing to memory");
    h.update(&buf);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn summarize(output: &RunOutput) -> RunSummary {
    let world = &output.world;
    let last = world.samples.last().copied().unwrap_or_else(|| sample(world, world.clock.now_s));
    let waits: Vec<f64> =
        world.requests.iter().filter_map(|r| r.pickup_s.map(|p| p - r.request.submission_s)).collect();
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let detours: Vec<f64> = world.detours.iter().map(|d| d.detour_s).collect();
    RunSummary {
        mode: world.config.mode,
        seed: world.config.seed,
        input_fingerprint: input_fingerprint(&world.config, &world.graph, &output.trace, &output.traffic),
        fleet: world.config.fleet,
        horizon_s: world.config.horizon_s,
        injected: world.requests.len() as u64,
        served: last.served,
        waiting: last.waiting,
        assigned: last.assigned,
        onboard: last.onboard,
        commitments: world.commitments.len() as u64,
        rebalanced_commitments: world.commitments.iter().filter(|c| c.rebalanced).count() as u64,
        mean_wait_s: mean(&waits),
        max_wait_s: waits.iter().copied().fold(0.0, f64::max),
        mean_detour_s: mean(&detours),
        detour_bin_s: DETOUR_BIN_S,
        detour_histogram: detour_histogram(&world.detours),
        audit_violations: world.audit.violation_count,
        runtime_s: output.wall_clock.as_secs_f64(),
        dispatch_runtime_s: world.dispatch_time.as_secs_f64(),
    }
}

pub fn write_kpis(w: impl Write, samples: &[KpiSample]) -> Result<(), MetricsError> {
    let mut csv = csv::Writer::from_writer(w);
    for s in samples {
        csv.serialize(s)?;
    }
    if samples.is_empty() {
        csv.write_record(["t_s", "served", "waiting", "assigned", "onboard", "mean_load"])?;
    }
    csv.flush().map_err(|e| MetricsError::Csv(e.into()))?;
    Ok(())
}

pub fn read_kpis(r: impl std::io::Read) -> Result<Vec<KpiSample>, MetricsError> {
    let mut csv = csv::Reader::from_reader(r);
    Ok(csv.deserialize().collect::<Result<_, _>>()?)
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> Result<(), MetricsError>,
) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f(&mut w)?;
    w.flush().map_err(io_err(path))
}

/// Paths of the files written for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub kpis: PathBuf,
    pub summary: PathBuf,
    pub detours: PathBuf,
    pub bus_log: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Writes the KPI series, summary, detour table, bus log and single-run
/// plots into `dir`.
pub fn finalize(output: &RunOutput, dir: &Path) -> Result<(RunSummary, RunArtifacts), MetricsError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let world = &output.world;
    let summary = summarize(output);
    let artifacts = RunArtifacts {
        kpis: dir.join("kpis.csv"),
        summary: dir.join("summary.json"),
        detours: dir.join("detours.csv"),
        bus_log: dir.join("bus.ndjson"),
        plots: Vec::new(),
    };
    write_file(&artifacts.kpis, |w| write_kpis(w, &world.samples))?;
    write_file(&artifacts.summary, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n").map_err(io_err(&artifacts.summary))
    })?;
    write_file(&artifacts.detours, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for d in &world.detours {
            csv.serialize(d)?;
        }
        csv.flush().map_err(io_err(&artifacts.detours))
    })?;
    write_file(&artifacts.bus_log, |w| world.bus.write_log(w).map_err(io_err(&artifacts.bus_log)))?;

    let label = world.config.mode.name();
    let series = [Series { label, samples: &world.samples }];
    let mut plots = plot_series(dir, &series)?;
    plots.push(plot_status(&dir.join("status.svg"), &[(label, &summary)])?);
    plots.push(plot_histogram(&dir.join("detours.svg"), &[(label, &summary.detour_histogram)])?);
    Ok((summary, RunArtifacts { plots, ..artifacts }))
}

/// A labelled KPI series for plotting.
pub struct Series<'a> {
    pub label: &'a str,
    pub samples: &'a [KpiSample],
}

const COLORS: [RGBColor; 2] = [RGBColor(0x1f, 0x77, 0xb4), RGBColor(0xd6, 0x27, 0x28)];

fn plot_err(path: &Path) -> impl Fn(String) -> MetricsError + '_ {
    move |message| MetricsError::Plot { path: path.to_path_buf(), message }
}

fn line_plot(
    path: &Path,
    title: &str,
    y_label: &str,
    series: &[Series],
    y: fn(&KpiSample) -> f64,
) -> Result<PathBuf, MetricsError> {
    let err = plot_err(path);
    let x_max = series.iter().flat_map(|s| s.samples.last()).map(|s| s.t_s).fold(1.0, f64::max);
    let y_max = series.iter().flat_map(|s| s.samples.iter().map(y)).fold(1.0, f64::max) * 1.05;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().x_desc("time (s)").y_desc(y_label).draw().map_err(|e| err(e.to_string()))?;
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(s.samples.iter().map(|k| (k.t_s, y(k))), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(s.label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(path.to_path_buf())
}

/// Served, waiting and mean-load curves; one line per series.
pub fn plot_series(dir: &Path, series: &[Series]) -> Result<Vec<PathBuf>, MetricsError> {
    Ok(vec![
        line_plot(&dir.join("served.svg"), "Served customers", "served", series, |k| k.served as f64)?,
        line_plot(&dir.join("waiting.svg"), "Waiting customers", "waiting", series, |k| k.waiting as f64)?,
        line_plot(&dir.join("load.svg"), "Mean vehicle load", "passengers per vehicle", series, |k| k.mean_load)?,
    ])
}

/// Grouped bars of the final status counts per run.
pub fn plot_status(path: &Path, runs: &[(&str, &RunSummary)]) -> Result<PathBuf, MetricsError> {
    let err = plot_err(path);
    let groups = ["served", "waiting", "assigned", "onboard"];
    let value = |s: &RunSummary, g: usize| [s.served, s.waiting, s.assigned, s.onboard][g] as f64;
    let y_max = runs.iter().flat_map(|(_, s)| (0..4).map(move |g| value(s, g))).fold(1.0, f64::max) * 1.1;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Customer status at the end of the run", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..4.0, 0.0..y_max)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(4)
        .x_label_formatter(&|x: &f64| groups.get(x.floor() as usize).map_or(String::new(), |g| g.to_string()))
        .y_desc("customers")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    let width = 0.8 / runs.len().max(1) as f64;
    for (i, (label, s)) in runs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series((0..4).map(|g| {
                let x0 = g as f64 + 0.1 + i as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, value(s, g))], color.filled())
            }))
            .map_err(|e| err(e.to_string()))?
            .label(*label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], color.filled()));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(path.to_path_buf())
}

/// Detour histogram bars, one colour per run.
pub fn plot_histogram(path: &Path, runs: &[(&str, &Vec<u64>)]) -> Result<PathBuf, MetricsError> {
    let err = plot_err(path);
    let bins = runs.iter().map(|(_, h)| h.len()).max().unwrap_or(0).max(1);
    let y_max = runs.iter().flat_map(|(_, h)| h.iter().copied()).max().unwrap_or(0).max(1) as f64 * 1.1;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Detour at destination", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..bins as f64, 0.0..y_max)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_desc("detour (min)")
        .y_desc("served customers")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    let width = 0.8 / runs.len().max(1) as f64;
    for (i, (label, h)) in runs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(h.iter().enumerate().map(|(b, &c)| {
                let x0 = b as f64 + 0.1 + i as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, c as f64)], color.filled())
            }))
            .map_err(|e| err(e.to_string()))?
            .label(*label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], color.filled()));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(path.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDelta {
    pub field: String,
    pub enabled: f64,
    pub disabled: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub claim: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub input_fingerprint: String,
    pub seed: u64,
    pub deltas: Vec<FieldDelta>,
    pub expectations: Vec<Expectation>,
}

impl ComparisonReport {
    pub fn delta(&self, field: &str) -> Option<f64> {
        self.deltas.iter().find(|d| d.field == field).map(|d| d.delta)
    }

    pub fn to_text(&self) -> String {
        let mut out =
            format!("inputs {} seed {}\n", &self.input_fingerprint[..12.min(self.input_fingerprint.len())], self.seed);
        out.push_str(&format!("{:<24}{:>14}{:>14}{:>14}\n", "field", "enabled", "disabled", "delta"));
        for d in &self.deltas {
            out.push_str(&format!("{:<24}{:>14.3}{:>14.3}{:>14.3}\n", d.field, d.enabled, d.disabled, d.delta));
        }
        for e in &self.expectations {
            out.push_str(&format!("[{}] {}\n", if e.holds { "ok" } else { "no" }, e.claim));
        }
        out
    }
}

/// Field-by-field deltas (enabled minus disabled) of two runs on identical
/// inputs. Wall-clock timings are not compared.
pub fn compare(enabled: &RunSummary, disabled: &RunSummary) -> Result<ComparisonReport, MetricsError> {
    if enabled.seed != disabled.seed {
        return Err(MetricsError::Mismatch(format!("seeds differ ({} vs {})", enabled.seed, disabled.seed)));
    }
    if enabled.input_fingerprint != disabled.input_fingerprint {
        return Err(MetricsError::Mismatch(format!(
            "input fingerprints differ ({} vs {})",
            enabled.input_fingerprint, disabled.input_fingerprint
        )));
    }
    let fields: [(&str, fn(&RunSummary) -> f64); 12] = [
        ("injected", |s| s.injected as f64),
        ("served", |s| s.served as f64),
        ("waiting", |s| s.waiting as f64),
        ("assigned", |s| s.assigned as f64),
        ("onboard", |s| s.onboard as f64),
        ("commitments", |s| s.commitments as f64),
        ("rebalanced_commitments", |s| s.rebalanced_commitments as f64),
        ("mean_wait_s", |s| s.mean_wait_s),
        ("max_wait_s", |s| s.max_wait_s),
        ("mean_detour_s", |s| s.mean_detour_s),
        ("detour_over_6min", |s| s.detour_histogram.iter().skip(6).sum::<u64>() as f64),
        ("audit_violations", |s| s.audit_violations as f64),
    ];
    let deltas = fields
        .iter()
        .map(|(name, f)| FieldDelta {
            field: name.to_string(),
            enabled: f(enabled),
            disabled: f(disabled),
            delta: f(enabled) - f(disabled),
        })
        .collect();
    let expectations = vec![
        Expectation {
            claim: "enabled serves at least as many customers".into(),
            holds: enabled.served >= disabled.served,
        },
        Expectation {
            claim: "enabled leaves no more customers waiting".into(),
            holds: enabled.waiting <= disabled.waiting,
        },
        Expectation {
            claim: "enabled has no larger mean detour".into(),
            holds: enabled.mean_detour_s <= disabled.mean_detour_s,
        },
    ];
    Ok(ComparisonReport {
        input_fingerprint: enabled.input_fingerprint.clone(),
        seed: enabled.seed,
        deltas,
        expectations,
    })
}

/// Comparison plots with one series per mode.
pub fn plot_comparison(
    dir: &Path,
    enabled: (&RunSummary, &[KpiSample]),
    disabled: (&RunSummary, &[KpiSample]),
) -> Result<Vec<PathBuf>, MetricsError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (en, dis) = (IotMode::IotEnabled.name(), IotMode::IotDisabled.name());
    let series = [Series { label: en, samples: enabled.1 }, Series { label: dis, samples: disabled.1 }];
    let mut plots = plot_series(dir, &series)?;
    plots.push(plot_status(&dir.join("status.svg"), &[(en, enabled.0), (dis, disabled.0)])?);
    plots.push(plot_histogram(
        &dir.join("detours.svg"),
        &[(en, &enabled.0.detour_histogram), (dis, &disabled.0.detour_histogram)],
    )?);
    Ok(plots)
}
