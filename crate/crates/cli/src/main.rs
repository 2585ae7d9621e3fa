use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rideshare_core::demand::{save_trace, RequestTrace};
use rideshare_core::event_bus::replay_log;
use rideshare_core::metrics_report::{self, RunSummary};
use rideshare_core::road_network::traffic::{save_traffic_trace, CameraSpec, CongestionWindow};
use rideshare_core::road_network::{load_graph, save_graph, TrafficEvent};
use rideshare_core::scenario::{IotMode, ScenarioConfig};
use rideshare_core::simulator::{inputs_from_log, run_with_inputs, RunOutput};
use rideshare_core::RoadGraph;

#[derive(Debug, Parser)]
#[command(name = "rideshare", version, about = "Batch ride-sharing simulator with live traffic context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the grid road graph.
    GenGraph(ScenarioArgs),
    /// Generate a request trace.
    GenDemand(ScenarioArgs),
    /// Synthesize camera traffic events.
    GenTraffic(ScenarioArgs),
    /// Run one mode and write KPIs, summary, bus log and plots.
    Simulate(ScenarioArgs),
    /// Run both modes on identical inputs and compare them.
    Compare(ScenarioArgs),
    /// Re-run a recorded bus log and check that it reproduces itself.
    Replay {
        /// Bus log written by a previous run.
        log: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

#[derive(Debug, Clone, Args)]
struct ScenarioArgs {
    /// Base config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given (full or desk).
    #[arg(long, default_value = "full")]
    preset: String,
    #[arg(long)]
    graph: Option<PathBuf>,
    /// NE_LAT,NE_LON,SW_LAT,SW_LON
    #[arg(long, value_parser = parse_bbox)]
    grid_bbox: Option<[f64; 4]>,
    #[arg(long)]
    grid_spacing: Option<f64>,
    #[arg(long)]
    fleet: Option<usize>,
    #[arg(long)]
    capacity: Option<u32>,
    #[arg(long)]
    max_wait_s: Option<f64>,
    #[arg(long)]
    batch_s: Option<f64>,
    #[arg(long)]
    tick_s: Option<f64>,
    #[arg(long)]
    horizon_s: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<IotMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    demand_trace: Option<PathBuf>,
    #[arg(long)]
    traffic_trace: Option<PathBuf>,
    #[arg(long)]
    candidates_k: Option<usize>,
    #[arg(long)]
    relax_factor: Option<f64>,
    /// Extra camera as ID=EDGE,EDGE,...; repeatable.
    #[arg(long, value_parser = parse_camera)]
    camera: Vec<CameraSpec>,
    #[arg(long)]
    camera_period_s: Option<f64>,
    /// START_S,END_S,FACTOR, or "none" to disable.
    #[arg(long)]
    congestion: Option<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let xs = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if xs.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {}", xs.len()));
    }
    Ok(xs)
}

fn parse_bbox(s: &str) -> Result<[f64; 4], String> {
    let v = parse_floats(s, 4)?;
    Ok([v[0], v[1], v[2], v[3]])
}

fn parse_mode(s: &str) -> Result<IotMode, String> {
    s.parse().map_err(|e: rideshare_core::scenario::ScenarioError| e.to_string())
}

fn parse_camera(s: &str) -> Result<CameraSpec, String> {
    let (id, edges) = s.split_once('=').ok_or("expected ID=EDGE,EDGE,...")?;
    let edges: Vec<String> = edges.split(',').map(|e| e.trim().to_string()).filter(|e| !e.is_empty()).collect();
    if id.is_empty() || edges.is_empty() {
        return Err("camera needs an id and at least one edge".into());
    }
    Ok(CameraSpec { id: id.to_string(), edges })
}

fn parse_congestion(s: &str) -> Result<Option<CongestionWindow>, String> {
    if s == "none" {
        return Ok(None);
    }
    let v = parse_floats(s, 3)?;
    Ok(Some(CongestionWindow { start_s: v[0], end_s: v[1], factor: v[2] }))
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig> {
        let mut c = match &self.config {
            Some(path) => ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ScenarioConfig::preset(&self.preset)?,
        };
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        if let Some(g) = &self.graph {
            c.graph = Some(g.clone());
        }
        if let Some([ne_lat, ne_lon, sw_lat, sw_lon]) = self.grid_bbox {
            c.grid.ne = [ne_lat, ne_lon];
            c.grid.sw = [sw_lat, sw_lon];
        }
        set(&mut c.grid.spacing_m, &self.grid_spacing);
        set(&mut c.fleet, &self.fleet);
        set(&mut c.capacity, &self.capacity);
        set(&mut c.max_wait_s, &self.max_wait_s);
        set(&mut c.batch_s, &self.batch_s);
        set(&mut c.tick_s, &self.tick_s);
        set(&mut c.horizon_s, &self.horizon_s);
        set(&mut c.mode, &self.mode);
        set(&mut c.seed, &self.seed);
        if let Some(p) = &self.demand_trace {
            c.demand_trace = Some(p.clone());
        }
        if let Some(p) = &self.traffic_trace {
            c.traffic_trace = Some(p.clone());
        }
        set(&mut c.candidates_k, &self.candidates_k);
        set(&mut c.relax_factor, &self.relax_factor);
        c.cameras.extend(self.camera.iter().cloned());
        set(&mut c.camera_period_s, &self.camera_period_s);
        if let Some(spec) = &self.congestion {
            c.congestion = parse_congestion(spec).map_err(anyhow::Error::msg).context("--congestion")?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes `config.toml` into `dir`, with input paths relative to `dir` when
/// the inputs live inside it.
fn write_config(dir: &Path, config: &ScenarioConfig) -> Result<PathBuf> {
    let mut echo = config.clone();
    let dir_abs = absolute(dir)?;
    for p in [&mut echo.graph, &mut echo.demand_trace, &mut echo.traffic_trace].into_iter().flatten() {
        let abs = absolute(p)?;
        *p = match abs.strip_prefix(&dir_abs) {
            Ok(rel) => rel.to_path_buf(),
            Err(_) => match abs.strip_prefix(dir_abs.parent().unwrap_or(&dir_abs)) {
                Ok(rel) if dir_abs.parent().is_some() => Path::new("..").join(rel),
                _ => abs,
            },
        };
    }
    let path = dir.join("config.toml");
    fs::write(&path, echo.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

struct Inputs {
    graph: Arc<RoadGraph>,
    cameras: Vec<CameraSpec>,
    trace: RequestTrace,
    traffic: Vec<TrafficEvent>,
}

/// Builds every input and persists the trace files in `dir`, pointing the
/// config at them so the echo reproduces the run.
fn prepare(config: &mut ScenarioConfig, dir: &Path) -> Result<Inputs> {
    create_dir(dir)?;
    let (graph, cameras) = config.build_network()?;
    let trace = config.build_demand(&graph)?;
    let traffic = config.build_traffic(&graph, &cameras)?;
    let demand_path = dir.join("demand.csv");
    let traffic_path = dir.join("traffic.csv");
    save_trace(&demand_path, &trace)?;
    save_traffic_trace(&traffic_path, &traffic)?;
    if let Some(g) = &config.graph {
        config.graph = Some(absolute(g)?);
    }
    config.demand_trace = Some(absolute(&demand_path)?);
    config.traffic_trace = Some(absolute(&traffic_path)?);
    Ok(Inputs { graph, cameras, trace, traffic })
}

fn simulate(config: &ScenarioConfig, inputs: &Inputs) -> Result<RunOutput> {
    Ok(run_with_inputs(
        config,
        Arc::clone(&inputs.graph),
        inputs.cameras.clone(),
        inputs.trace.clone(),
        inputs.traffic.clone(),
    )?)
}

fn print_summary(s: &RunSummary) {
    println!(
        "{}: injected {} served {} waiting {} assigned {} onboard {} mean wait {:.1} s mean detour {:.1} s audit violations {} runtime {:.2} s",
        s.mode,
        s.injected,
        s.served,
        s.waiting,
        s.assigned,
        s.onboard,
        s.mean_wait_s,
        s.mean_detour_s,
        s.audit_violations,
        s.runtime_s
    );
}

fn finish_run(output: &RunOutput, config: &ScenarioConfig, dir: &Path) -> Result<RunSummary> {
    create_dir(dir)?;
    write_config(dir, config)?;
    let (summary, _) = metrics_report::finalize(output, dir)?;
    Ok(summary)
}

fn cmd_gen_graph(args: &ScenarioArgs) -> Result<()> {
    let mut config = args.resolve()?;
    create_dir(&args.out_dir)?;
    let (graph, _) = config.build_network()?;
    let path = args.out_dir.join("graph.json");
    save_graph(&graph, &path)?;
    let reloaded: RoadGraph = load_graph(&path)?;
    if reloaded.to_records() != graph.to_records() {
        bail!("{} does not reload to the generated graph", path.display());
    }
    config.graph = Some(absolute(&path)?);
    write_config(&args.out_dir, &config)?;
    println!("graph: {} nodes, {} edges -> {}", graph.node_count(), graph.edge_count(), path.display());
    Ok(())
}

fn cmd_gen_demand(args: &ScenarioArgs) -> Result<()> {
    let config = args.resolve()?;
    create_dir(&args.out_dir)?;
    let (graph, _) = config.build_network()?;
    let trace = config.build_demand(&graph)?;
    let path = args.out_dir.join("demand.csv");
    save_trace(&path, &trace)?;
    println!("demand: {} requests -> {}", trace.requests.len(), path.display());
    Ok(())
}

fn cmd_gen_traffic(args: &ScenarioArgs) -> Result<()> {
    let mut config = args.resolve()?;
    config.synthesize_traffic = true;
    config.traffic_trace = None;
    create_dir(&args.out_dir)?;
    let (graph, cameras) = config.build_network()?;
    let events = config.build_traffic(&graph, &cameras)?;
    let path = args.out_dir.join("traffic.csv");
    save_traffic_trace(&path, &events)?;
    println!("traffic: {} events from {} cameras -> {}", events.len(), cameras.len(), path.display());
    Ok(())
}

fn cmd_simulate(args: &ScenarioArgs) -> Result<()> {
    let mut config = args.resolve()?;
    let inputs = prepare(&mut config, &args.out_dir)?;
    let output = simulate(&config, &inputs)?;
    let summary = finish_run(&output, &config, &args.out_dir)?;
    print_summary(&summary);
    Ok(())
}

fn cmd_compare(args: &ScenarioArgs) -> Result<()> {
    let mut config = args.resolve()?;
    let inputs = prepare(&mut config, &args.out_dir)?;
    write_config(&args.out_dir, &config)?;
    let enabled_cfg = ScenarioConfig { mode: IotMode::IotEnabled, ..config.clone() };
    let disabled_cfg = ScenarioConfig { mode: IotMode::IotDisabled, ..config.clone() };
    let (enabled, disabled) = std::thread::scope(|s| {
        let en = s.spawn(|| simulate(&enabled_cfg, &inputs));
        let dis = s.spawn(|| simulate(&disabled_cfg, &inputs));
        (en.join().expect("enabled run panicked"), dis.join().expect("disabled run panicked"))
    });
    let (enabled, disabled) = (enabled?, disabled?);
    let en_sum = finish_run(&enabled, &enabled_cfg, &args.out_dir.join(IotMode::IotEnabled.name()))?;
    let dis_sum = finish_run(&disabled, &disabled_cfg, &args.out_dir.join(IotMode::IotDisabled.name()))?;
    let report = metrics_report::compare(&en_sum, &dis_sum)?;
    let json = args.out_dir.join("comparison.json");
    fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;
    let text = report.to_text();
    fs::write(args.out_dir.join("comparison.txt"), &text)?;
    metrics_report::plot_comparison(
        &args.out_dir.join("plots"),
        (&en_sum, &enabled.world.samples),
        (&dis_sum, &disabled.world.samples),
    )?;
    print_summary(&en_sum);
    print_summary(&dis_sum);
    print!("{text}");
    Ok(())
}

fn cmd_replay(log: &Path, args: &ScenarioArgs) -> Result<()> {
    let config = args.resolve()?;
    let original = fs::read(log).with_context(|| format!("reading {}", log.display()))?;
    let messages = replay_log(log)?;
    let (graph, cameras) = config.build_network()?;
    let template = RequestTrace {
        requests: Vec::new(),
        seed: config.seed,
        horizon_s: config.horizon_s,
        window_s: config.batch_s,
        max_wait_s: config.max_wait_s,
    };
    let (trace, traffic) = inputs_from_log(&messages, &template);
    let inputs = Inputs { graph, cameras, trace, traffic };
    let output = simulate(&config, &inputs)?;
    let summary = finish_run(&output, &config, &args.out_dir)?;
    print_summary(&summary);
    let replayed = fs::read(args.out_dir.join("bus.ndjson"))?;
    if replayed != original {
        bail!("replayed bus log differs from {}", log.display());
    }
    println!("replay: {} messages reproduced identically", messages.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenGraph(a) => cmd_gen_graph(a),
        Command::GenDemand(a) => cmd_gen_demand(a),
        Command::GenTraffic(a) => cmd_gen_traffic(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Replay { log, scenario } => cmd_replay(log, scenario),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
