//! `usnav`: one subcommand per workflow stage.
//!
//! Exit codes: 0 success, 2 bad input, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use usnav_core::navengine::{replay_session, Command, NavEngine, SceneUpdate};
use usnav_core::pipeline::{
    self, files, NavigateOptions, PipelineError, Scenario, SceneLink, DEFAULT_NOISE_ROT_DEG, DEFAULT_NOISE_TRANS_MM,
    DEFAULT_TOLERANCE,
};
use usnav_core::trackio::{decode_all, parse_log, MessageKind, StreamMessage, StreamServer, WsBridge};

#[derive(Parser)]
#[command(name = "usnav", version, about = "Ultrasound-only surgical navigation workflow")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom case: ground truth, tracked sweep, clip script, specimen.
    Simulate(SimulateArgs),
    /// Compound the recorded sweep into a volume.
    Reconstruct(ReconstructArgs),
    /// Segment tumor and vessels in the reconstructed volume.
    Segment(SegmentArgs),
    /// Register the preoperative model by its tumor center.
    Register(CaseArg),
    /// Run the navigation engine over the recorded case.
    Navigate(NavigateArgs),
    /// Accuracy report over a cohort directory.
    Evaluate(EvaluateArgs),
    /// Verify a recorded navigation session.
    Replay(ReplayArgs),
    /// Every stage from simulate to evaluate.
    Run(RunArgs),
}

#[derive(Args, Clone)]
struct CaseArg {
    /// Case directory.
    #[arg(long, default_value = "case")]
    case: PathBuf,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = usnav_core::usrecon::DEFAULT_SPACING_MM)]
    spacing_mm: f64,
    #[arg(long, default_value_t = usnav_core::trackio::DEFAULT_RATE_HZ)]
    rate_hz: f64,
    /// Reference sensor detaches at this time, seconds.
    #[arg(long)]
    detach_at: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_NOISE_ROT_DEG)]
    noise_rot_deg: f64,
    #[arg(long, default_value_t = DEFAULT_NOISE_TRANS_MM)]
    noise_trans_mm: f64,
    #[arg(long, default_value_t = usnav_core::phantom::DEFAULT_TUMOR_RADIUS_MM)]
    tumor_radius: f64,
    /// Number of scripted clip placements.
    #[arg(long, default_value_t = 6)]
    clips: usize,
    /// Phantom description file; overrides --tumor-radius.
    #[arg(long)]
    phantom: Option<PathBuf>,
}

impl ScenarioArgs {
    fn scenario(&self) -> Result<Scenario, PipelineError> {
        let mut sc = Scenario::new(self.seed).with_tumor_radius(self.tumor_radius);
        if let Some(p) = &self.phantom {
            if !p.is_file() {
                return Err(PipelineError::Missing(p.clone()));
            }
            sc.phantom = usnav_core::phantom::PhantomSpec::load(p)?;
        }
        sc.spacing_mm = self.spacing_mm;
        sc.rate_hz = self.rate_hz;
        sc.detach_at = self.detach_at;
        sc.noise_rot_deg = self.noise_rot_deg;
        sc.noise_trans_mm = self.noise_trans_mm;
        sc.clips = self.clips;
        sc.validate()?;
        Ok(sc)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    case: CaseArg,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Stream the recorded poses and frames on this TCP port once written.
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    case: CaseArg,
    #[arg(long, default_value_t = usnav_core::usrecon::DEFAULT_SPACING_MM)]
    spacing_mm: f64,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    case: CaseArg,
    /// Region-growing intensity tolerance.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct NavigateArgs {
    #[command(flatten)]
    case: CaseArg,
    /// Safety margin: 5, 7, 10 or any positive value.
    #[arg(long, default_value_t = usnav_core::navengine::DEFAULT_MARGIN_MM)]
    margin_mm: f64,
    /// Serve SCENE_UPDATE messages and accept commands on this TCP port.
    #[arg(long)]
    port: Option<u16>,
    /// WebSocket bridge port for browser consoles.
    #[arg(long)]
    ws_port: Option<u16>,
    /// Replay the log at recorded speed.
    #[arg(long)]
    realtime: bool,
    /// Stop after the recorded log instead of serving until interrupted.
    #[arg(long)]
    exit_when_done: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Session file written by `navigate`.
    session: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    case: CaseArg,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = usnav_core::navengine::DEFAULT_MARGIN_MM)]
    margin_mm: f64,
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<T, PipelineError>) -> Result<T, PipelineError> {
    let start = Instant::now();
    let out = f()?;
    println!("stage {stage}: {:.3} s", start.elapsed().as_secs_f64());
    Ok(out)
}

fn show<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

struct NetLink {
    server: Option<StreamServer>,
    bridge: Option<WsBridge>,
}

impl NetLink {
    fn open(port: Option<u16>, ws_port: Option<u16>) -> Result<Self, PipelineError> {
        let server = port.map(|p| StreamServer::bind(("127.0.0.1", p))).transpose()?;
        let bridge = ws_port.map(|p| WsBridge::bind(("127.0.0.1", p))).transpose()?;
        if let Some(s) = &server {
            println!("stream listening on {}", s.local_addr());
        }
        if let Some(b) = &bridge {
            println!("websocket bridge listening on {}", b.local_addr());
        }
        Ok(NetLink { server, bridge })
    }

    fn is_open(&self) -> bool {
        self.server.is_some() || self.bridge.is_some()
    }
}

impl SceneLink for NetLink {
    fn publish(&mut self, update: &SceneUpdate) {
        let msg = update.to_message();
        if let Some(s) = &self.server {
            s.broadcast(&msg);
        }
        if let Some(b) = &self.bridge {
            b.broadcast(&msg);
        }
    }

    fn poll_commands(&mut self) -> Vec<Command> {
        let mut out = Vec::new();
        let mut take = |m: StreamMessage| {
            if m.kind != MessageKind::Command {
                return;
            }
            match m.payload_str().map_err(|e| e.to_string()).and_then(Command::parse) {
                Ok(c) => out.push(c),
                Err(e) => eprintln!("ignoring command: {e}"),
            }
        };
        if let Some(s) = &self.server {
            while let Some(m) = s.try_recv() {
                take(m);
            }
        }
        if let Some(b) = &self.bridge {
            while let Some(m) = b.try_recv() {
                take(m);
            }
        }
        out
    }
}

/// Keeps serving commands after the log is exhausted.
fn serve_forever(case: &Path, engine: &mut NavEngine, link: &mut NetLink) -> Result<(), PipelineError> {
    let start = Instant::now();
    let t0 = engine.time();
    loop {
        let now = t0 + start.elapsed().as_secs_f64();
        let mut clips_changed = false;
        for c in link.poll_commands() {
            match engine.apply_command(now, &c) {
                Ok(_) => clips_changed |= matches!(c, Command::Clip { .. }),
                Err(e) => eprintln!("command rejected: {e}"),
            }
        }
        if clips_changed {
            pipeline::save_clips(case, engine.clips())?;
        }
        if let Some(u) = engine.publish(now) {
            link.publish(&u);
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Streams the recorded poses and frames in recorded order and timing.
fn stream_case(case: &Path, port: u16) -> Result<(), PipelineError> {
    let log = parse_log(std::io::BufReader::new(fs::File::open(case.join(files::TRACKING_LOG))?))?;
    let frames = decode_all(&fs::read(case.join(files::FRAMES))?)?;
    let mut server = StreamServer::bind(("127.0.0.1", port))?;
    println!("stream listening on {}", server.local_addr());
    if !server.wait_for_clients(1, Duration::from_secs(30)) {
        return Err(PipelineError::Runtime("no client connected within 30 s".into()));
    }
    let mut msgs: Vec<(f64, StreamMessage)> = log.samples.iter().map(|s| (s.pose.timestamp, StreamMessage::pose(s))).collect();
    for f in frames {
        let t = f.to_image_frame()?.0.timestamp;
        msgs.push((t, f));
    }
    msgs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let start = Instant::now();
    let t0 = msgs.first().map(|m| m.0).unwrap_or(0.0);
    for (t, m) in msgs {
        if let Some(wait) = Duration::from_secs_f64((t - t0).max(0.0)).checked_sub(start.elapsed()) {
            thread::sleep(wait);
        }
        server.broadcast(&m);
    }
    server.broadcast(&StreamMessage::status("done"));
    server.shutdown();
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Cmd::Simulate(a) => {
            let sc = a.scenario.scenario()?;
            println!("seed {}", sc.seed);
            let s = timed("simulate", || pipeline::simulate(&sc, &a.case.case))?;
            show(&s);
            if let Some(port) = a.port {
                stream_case(&a.case.case, port)?;
            }
        }
        Cmd::Reconstruct(a) => {
            let s = timed("reconstruct", || pipeline::reconstruct(&a.case.case, a.spacing_mm))?;
            show(&s);
        }
        Cmd::Segment(a) => {
            let s = timed("segment", || pipeline::segment(&a.case.case, a.tolerance))?;
            show(&s);
        }
        Cmd::Register(a) => {
            let r = timed("register", || pipeline::register(&a.case))?;
            show(&r);
        }
        Cmd::Navigate(a) => {
            let mut link = NetLink::open(a.port, a.ws_port)?;
            let opts = NavigateOptions { margin_mm: a.margin_mm, realtime: a.realtime };
            let serving = link.is_open();
            let mut out = timed("navigate", || {
                pipeline::navigate(&a.case.case, &opts, serving.then_some(&mut link as &mut dyn SceneLink))
            })?;
            show(&out.summary);
            if serving && !a.exit_when_done {
                serve_forever(&a.case.case, &mut out.engine, &mut link)?;
            }
        }
        Cmd::Evaluate(a) => {
            let r = timed("evaluate", || pipeline::evaluate(&a.cohort, &a.out))?;
            let stats = |b: &Option<usnav_core::evalkit::BoxplotData>| b.as_ref().map(|b| b.summary);
            show(&json!({
                "clips": r.rows.len(),
                "patients": r.patients.len(),
                "detached": r.detached,
                "per_clip": stats(&r.per_clip),
                "per_patient": stats(&r.per_patient),
            }));
        }
        Cmd::Replay(a) => {
            if !a.session.is_file() {
                return Err(PipelineError::Missing(a.session));
            }
            let bytes = fs::read(&a.session)?;
            let trace = timed("replay", || replay_session(&bytes).map_err(|e| PipelineError::Input(e.to_string())))?;
            show(&json!({
                "derived_events": trace.derived.len(),
                "clips": trace.clips,
                "final_state": trace.final_state,
            }));
        }
        Cmd::Run(a) => {
            let sc = a.scenario.scenario()?;
            println!("seed {}", sc.seed);
            let opts = NavigateOptions { margin_mm: a.margin_mm, realtime: false };
            let run = pipeline::run_all(&sc, &a.case.case, &opts)?;
            for (stage, secs) in &run.timings {
                println!("stage {stage}: {secs:.3} s");
            }
            show(&json!({
                "dice": run.segment.dice,
                "centroid_error_mm": run.segment.centroid_error_mm,
                "clips": run.navigate.clips,
                "per_clip": run.report.per_clip.as_ref().map(|b| b.summary),
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input() { 2 } else { 3 })
        }
    }
}
