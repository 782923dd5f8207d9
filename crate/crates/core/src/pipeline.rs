//! Workflow stages operating on a case directory: simulate, reconstruct,
//! segment, register, navigate and evaluate. Every stage reads and writes
//! only the files listed in [`files`], so stages can run in separate
//! processes and re-running a stage on the same inputs reproduces its
//! outputs byte for byte.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::{self, paint_clip, AccuracyReport, EvalError, SpecimenStudy};
use crate::geometry::{interpolate, FrameId, GeometryError, Pose, Vec3};
use crate::navengine::{order_inputs, ClipRecord, Command, EngineInput, NavConfig, NavEngine, NavError, NavState, SceneUpdate};
use crate::phantom::{rasterize, render_frame, sweep_script, GroundTruth, ImageGeometry, PhantomError, PhantomSpec};
use crate::register::{apply_registration, single_landmark, PreopModel, RegisterError};
use crate::segment::{display_surface, extract_surface, region_grow, vessel_baseline, LabelKind, LabelMask, SeedSet, SegmentError, SurfaceMesh, VesselParams};
use crate::trackio::{
    decode_all, parse_log, simulate_tracker, write_log, Device, ImageFrameHeader, LogError, LogHeader, NoiseModel, PoseRecord,
    SimConfig, StreamMessage, TrackerScript, TrackingLog, WireError,
};
use crate::usrecon::{
    compound, frame_pose, hole_fill, Calibration, PosedSweep, ReconError, UsFrame, VolumeFileError, VoxelVolume,
    DEFAULT_HOLE_RADIUS_MM,
};

/// File names inside a case directory.
pub mod files {
    pub const SCENARIO: &str = "scenario.json";
    pub const PHANTOM: &str = "phantom.json";
    pub const GT_VOLUME: &str = "ground_truth.vol";
    pub const GT_TUMOR: &str = "gt_tumor.vol";
    pub const GT_VESSEL: &str = "gt_vessel.vol";
    pub const TRACKING_LOG: &str = "tracking.log";
    /// Concatenated IMAGE_FRAME stream messages.
    pub const FRAMES: &str = "frames.bin";
    pub const COMMANDS: &str = "commands.json";
    pub const SEEDS: &str = "seeds.json";
    pub const PREOP_LIVER: &str = "preop_liver.mesh";
    pub const PREOP_TUMOR: &str = "preop_tumor.vol";
    pub const RECON: &str = "recon.vol";
    pub const TUMOR: &str = "tumor.vol";
    pub const TUMOR_MESH: &str = "tumor.mesh";
    pub const VESSELS: &str = "vessels.vol";
    pub const VESSELS_MESH: &str = "vessels.mesh";
    pub const REGISTRATION: &str = "registration.json";
    pub const REGISTERED_LIVER: &str = "registered_liver.mesh";
    pub const SESSION: &str = "session.jsonl";
    pub const COHORT: &str = "cohort";
    pub const REPORT: &str = "report";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing input file {}", .0.display())]
    Missing(PathBuf),
    #[error("bad input: {0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    /// True for problems with the inputs rather than failures while running.
    pub fn is_input(&self) -> bool {
        matches!(self, PipelineError::Missing(_) | PipelineError::Input(_))
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(std::io::Error, SegmentError, NavError, ReconError, GeometryError, RegisterError);

macro_rules! input_from {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Input(e.to_string())
            }
        }
    )*};
}
input_from!(serde_json::Error, LogError, WireError, VolumeFileError, PhantomError);

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Missing(p) => PipelineError::Missing(p),
            EvalError::Io(e) => PipelineError::Runtime(e.to_string()),
            other => PipelineError::Input(other.to_string()),
        }
    }
}

fn need(dir: &Path, name: &str) -> Result<PathBuf, PipelineError> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(PipelineError::Missing(p))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T, PipelineError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(need(dir, name)?)?))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Everything needed to simulate one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub patient_id: String,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub spacing_mm: f64,
    pub rate_hz: f64,
    pub noise_rot_deg: f64,
    pub noise_trans_mm: f64,
    pub detach_at: Option<f64>,
    pub frame_rate_hz: f64,
    pub clips: usize,
    /// Range of clip distances from the tumor surface, mm.
    pub clip_distance_mm: (f64, f64),
    /// Clips lost before specimen imaging, by id.
    #[serde(default)]
    pub detached_clips: Vec<u32>,
}

pub const DEFAULT_NOISE_ROT_DEG: f64 = 0.05;
pub const DEFAULT_NOISE_TRANS_MM: f64 = 0.1;
/// Length of the pointer from its sensor to the tip, mm.
pub const POINTER_LENGTH_MM: f64 = 150.0;
/// Offset between the preoperative model frame and the reference frame.
pub const PREOP_OFFSET_MM: [f64; 3] = [-20.5, 14.0, 9.25];

const SETUP_S: f64 = 1.0;
const PAUSE_S: f64 = 1.0;
const APPROACH_S: f64 = 1.5;
const DWELL_S: f64 = 0.5;
const CLIP_AT_S: f64 = 0.25;
const CLIP_RADIUS_MM: f64 = 0.6;

impl Default for Scenario {
    fn default() -> Self {
        Scenario::new(0)
    }
}

impl Scenario {
    pub fn new(seed: u64) -> Self {
        let phantom = PhantomSpec { seed, ..PhantomSpec::default() };
        Scenario {
            patient_id: format!("sim-{seed:04}"),
            seed,
            phantom,
            spacing_mm: crate::usrecon::DEFAULT_SPACING_MM,
            rate_hz: crate::trackio::DEFAULT_RATE_HZ,
            noise_rot_deg: DEFAULT_NOISE_ROT_DEG,
            noise_trans_mm: DEFAULT_NOISE_TRANS_MM,
            detach_at: None,
            frame_rate_hz: 20.0,
            clips: 6,
            clip_distance_mm: (1.0, 12.0),
            detached_clips: Vec::new(),
        }
    }

    pub fn with_tumor_radius(mut self, r: f64) -> Self {
        let seed = self.phantom.seed;
        self.phantom = PhantomSpec::sphere(r);
        self.phantom.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.phantom.validate()?;
        let bad = |m: &str| Err(PipelineError::Input(m.to_string()));
        if self.phantom.tumors.is_empty() {
            return bad("the phantom needs a tumor");
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return bad("spacing must be positive");
        }
        if !(self.rate_hz > 0.0 && self.frame_rate_hz > 0.0) {
            return bad("rates must be positive");
        }
        if !(self.noise_rot_deg >= 0.0 && self.noise_trans_mm >= 0.0) {
            return bad("noise must be non-negative");
        }
        if !(self.clip_distance_mm.0 >= 0.0 && self.clip_distance_mm.1 >= self.clip_distance_mm.0) {
            return bad("invalid clip distance range");
        }
        if self.detach_at.is_some_and(|d| !(d >= 0.0)) {
            return bad("detach time must be non-negative");
        }
        Ok(())
    }

    fn sub_seed(&self, stream: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
    }

    /// Image plane geometry and sweep endpoints covering the field of view.
    fn sweep(&self) -> (ImageGeometry, Pose, Pose, usize) {
        let (lo, hi) = (self.phantom.fov_min, self.phantom.fov_max);
        let inset = 3.0;
        let s = self.spacing_mm;
        let count = |a: usize| ((hi[a] - lo[a] - 2.0 * inset) / s).floor() as usize + 1;
        let image = ImageGeometry { width: count(0), height: count(1), pixel_spacing: (s, s) };
        let frames = count(2).max(2);
        let z0 = lo[2] + inset;
        let start = Pose::from_translation(Vec3::new(lo[0] + inset, lo[1] + inset, z0), FrameId::Reference);
        let end = Pose::from_translation(Vec3::new(lo[0] + inset, lo[1] + inset, z0 + (frames - 1) as f64 * s), FrameId::Reference);
        (image, start, end, frames)
    }

    fn sweep_end(&self) -> f64 {
        let (_, _, _, n) = self.sweep();
        SETUP_S + (n - 1) as f64 / self.frame_rate_hz
    }

    fn nav_start(&self) -> f64 {
        self.sweep_end() + PAUSE_S
    }

    pub fn duration_s(&self) -> f64 {
        self.nav_start() + self.clips as f64 * (APPROACH_S + DWELL_S) + PAUSE_S
    }
}

/// Fixed image-to-sensor transform of the simulated probe.
pub fn probe_calibration() -> Pose {
    Pose::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), PI / 2.0, Vec3::new(10.0, -4.0, 25.0), FrameId::ProbeSensor)
}

/// Pose of the reference sensor in WORLD: the liver breathes with a 4 s
/// period while the sensor stays attached.
fn reference_world(t: f64) -> Pose {
    let phase = 2.0 * PI * t / 4.0;
    Pose::from_axis_angle(
        Vec3::new(1.0, 1.0, 0.0),
        0.05 * phase.sin(),
        Vec3::new(150.0 + 4.0 * phase.sin(), -30.0 + 2.0 * phase.cos(), 220.0 + 3.0 * phase.sin()),
        FrameId::World,
    )
    .with_timestamp(t)
}

/// Sensor orientation whose +z axis points along `dir`.
fn pointing(dir: &Vec3) -> nalgebra::UnitQuaternion<f64> {
    nalgebra::UnitQuaternion::rotation_between(&Vec3::z(), dir)
        .unwrap_or_else(|| nalgebra::UnitQuaternion::from_axis_angle(&Vec3::x_axis(), PI))
}

/// A scripted clip: where the pointer tip rests and when the clip is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub id: u32,
    pub target: [f64; 3],
    pub outward: [f64; 3],
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedCommand {
    pub t: f64,
    pub command: Command,
}

/// Segmentation seeds as physical points, reference frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPoints {
    pub inside: Vec<[f64; 3]>,
    pub inside_radius_mm: f64,
    pub outside: Vec<[f64; 3]>,
}

fn plan_clips(sc: &Scenario) -> Vec<ClipPlan> {
    let tumor = &sc.phantom.tumors[0];
    let mut rng = ChaCha8Rng::seed_from_u64(sc.sub_seed(2));
    let (dmin, dmax) = sc.clip_distance_mm;
    let mut out: Vec<ClipPlan> = Vec::new();
    let mut attempts = 0;
    while out.len() < sc.clips && attempts < 10_000 {
        attempts += 1;
        let v = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let d = dmin + (dmax - dmin) * rng.random::<f64>();
        if v.norm() < 1e-3 || v.norm() > 0.5 {
            continue;
        }
        let n = v.normalize();
        // ellipsoid radius along n
        let rho = 1.0 / (0..3).map(|a| (n[a] / tumor.radii[a]).powi(2)).sum::<f64>().sqrt();
        let target = Vec3::from(tumor.center) + n * (rho + d);
        let inside_fov = (0..3).all(|a| target[a] > sc.phantom.fov_min[a] + 4.0 && target[a] < sc.phantom.fov_max[a] - 4.0);
        if !inside_fov || out.iter().any(|c| (Vec3::from(c.target) - target).norm() < 6.0) {
            continue;
        }
        let k = out.len();
        let t = sc.nav_start() + k as f64 * (APPROACH_S + DWELL_S) + APPROACH_S + CLIP_AT_S;
        out.push(ClipPlan { id: k as u32 + 1, target: [target.x, target.y, target.z], outward: [n.x, n.y, n.z], t });
    }
    out
}

fn pointer_pose(c: &ClipPlan) -> Pose {
    let r = pointing(&-Vec3::from(c.outward));
    let t = Vec3::from(c.target) - r * Vec3::new(0.0, 0.0, POINTER_LENGTH_MM);
    Pose::new(r, t, 0.0, FrameId::Reference)
}

/// Pointer pose in the reference frame at time `t`.
fn pointer_at(sc: &Scenario, plan: &[ClipPlan], park: &Pose, t: f64) -> Result<Pose, GeometryError> {
    let mut prev = *park;
    let mut t0 = sc.nav_start();
    for c in plan {
        let target = pointer_pose(c);
        if t < t0 {
            return Ok(prev);
        }
        if t < t0 + APPROACH_S {
            return interpolate(&prev.with_timestamp(0.0), &target.with_timestamp(1.0), (t - t0) / APPROACH_S);
        }
        prev = target;
        t0 += APPROACH_S + DWELL_S;
    }
    Ok(prev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub frames: usize,
    pub samples: usize,
    pub clips: usize,
    pub duration_s: f64,
    pub gt_tumor_volume_mm3: f64,
    pub analytic_tumor_volume_mm3: f64,
}

/// Writes the phantom, its ground truth, a tracked sweep, scripted clip
/// placements, segmentation seeds, a preoperative model and the specimen.
pub fn simulate(sc: &Scenario, dir: &Path) -> Result<SimulateSummary, PipelineError> {
    sc.validate()?;
    fs::create_dir_all(dir)?;
    write_json(&dir.join(files::SCENARIO), sc)?;
    sc.phantom.save(&dir.join(files::PHANTOM))?;

    let gt = rasterize(&sc.phantom, sc.spacing_mm)?;
    gt.volume.save(&dir.join(files::GT_VOLUME))?;
    gt.tumor.save(&dir.join(files::GT_TUMOR))?;
    gt.vessel.save(&dir.join(files::GT_VESSEL))?;

    let (image, start, end, n) = sc.sweep();
    let sweep = sweep_script(&start, &end, n, (n - 1) as f64 / sc.frame_rate_hz)
        .map_err(|e| PipelineError::Input(e.to_string()))?;
    let image_at = |t: f64| -> Pose {
        let local = ((t - SETUP_S) * sc.frame_rate_hz).clamp(0.0, (n - 1) as f64);
        let i = local.floor() as usize;
        if i + 1 >= n {
            return sweep[n - 1];
        }
        interpolate(&sweep[i], &sweep[i + 1], local - i as f64).expect("sweep poses are valid")
    };

    let cal = probe_calibration();
    let cal_inv = cal.inverse()?;
    let plan = plan_clips(sc);
    let park = Pose::new(pointing(&Vec3::new(0.0, 0.0, -1.0)), Vec3::new(0.0, 0.0, 90.0 + POINTER_LENGTH_MM), 0.0, FrameId::Reference);
    let sealer = Pose::from_translation(Vec3::new(0.0, -70.0, 40.0), FrameId::Reference);

    let duration = sc.duration_s();
    let ticks = (duration * sc.rate_hz + 1e-9).floor() as usize;
    let mut script = TrackerScript::default();
    let mut timelines: [Vec<Pose>; 4] = Default::default();
    for k in 0..=ticks {
        let t = k as f64 / sc.rate_hz;
        let r = reference_world(t);
        let world = |p: &Pose| -> Result<Pose, GeometryError> { Ok(r.compose(p)?.with_timestamp(t).with_frame(FrameId::World)) };
        timelines[0].push(r);
        timelines[1].push(world(&image_at(t).compose(&cal_inv)?)?);
        timelines[2].push(world(&sealer)?);
        timelines[3].push(world(&pointer_at(sc, &plan, &park, t)?)?);
    }
    for (device, timeline) in Device::ALL.into_iter().zip(timelines) {
        script.insert(device, timeline);
    }
    let samples = simulate_tracker(
        &script,
        &SimConfig {
            rate_hz: sc.rate_hz,
            duration_s: duration,
            noise: NoiseModel { rot_sigma_deg: sc.noise_rot_deg, trans_sigma_mm: sc.noise_trans_mm },
            detach_at: sc.detach_at,
            seed: sc.sub_seed(1),
        },
    );
    let mut header = LogHeader { rate_hz: Some(sc.rate_hz), ..LogHeader::default() };
    header.calibrations.insert(Device::Probe, PoseRecord::from_pose(&cal));
    header.calibrations.insert(
        Device::Pointer,
        PoseRecord::from_pose(&Pose::from_translation(Vec3::new(0.0, 0.0, POINTER_LENGTH_MM), FrameId::PointerSensor)),
    );
    let log = TrackingLog { header, samples };
    let mut out = BufWriter::new(File::create(dir.join(files::TRACKING_LOG))?);
    write_log(&log, &mut out)?;

    let mut frames = BufWriter::new(File::create(dir.join(files::FRAMES))?);
    for (i, pose) in sweep.iter().enumerate() {
        let t = SETUP_S + i as f64 / sc.frame_rate_hz;
        let frame = render_frame(&gt, pose, &image, sc.phantom.speckle_sigma, sc.sub_seed(1000 + i as u64));
        let h = ImageFrameHeader {
            width: frame.width as u32,
            height: frame.height as u32,
            spacing_u: image.pixel_spacing.0 as f32,
            spacing_v: image.pixel_spacing.1 as f32,
            timestamp: t,
            sequence: i as u64,
        };
        std::io::Write::write_all(&mut frames, &StreamMessage::image_frame(&h, &frame.pixels)?.encode()?)?;
    }
    std::io::Write::flush(&mut frames)?;

    let commands: Vec<TimedCommand> = plan.iter().map(|c| TimedCommand { t: c.t, command: Command::Clip { position: None } }).collect();
    write_json(&dir.join(files::COMMANDS), &commands)?;
    write_seeds(sc, dir)?;
    write_preop(sc, dir)?;
    write_specimen(sc, &gt, &plan, &dir.join(files::COHORT).join(&sc.patient_id))?;

    let t0 = &sc.phantom.tumors[0];
    Ok(SimulateSummary {
        frames: n,
        samples: log.samples.len(),
        clips: plan.len(),
        duration_s: duration,
        gt_tumor_volume_mm3: gt.tumor.volume_mm3(),
        analytic_tumor_volume_mm3: t0.volume(),
    })
}

fn write_seeds(sc: &Scenario, dir: &Path) -> Result<(), PipelineError> {
    let t = &sc.phantom.tumors[0];
    let c = Vec3::from(t.center);
    let mut outside = Vec::new();
    for a in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut p = c;
            p[a] += sign * (t.radii[a] + 8.0);
            let (lo, hi) = (sc.phantom.fov_min[a] + 4.0, sc.phantom.fov_max[a] - 4.0);
            if (lo..=hi).contains(&p[a]) {
                outside.push([p.x, p.y, p.z]);
            }
        }
    }
    let min_r = t.radii.iter().copied().fold(f64::INFINITY, f64::min);
    write_json(&dir.join(files::SEEDS), &SeedPoints { inside: vec![t.center], inside_radius_mm: (min_r / 4.0).min(3.0), outside })
}

fn write_preop(sc: &Scenario, dir: &Path) -> Result<(), PipelineError> {
    let off = Vec3::from(PREOP_OFFSET_MM);
    let t = &sc.phantom.tumors[0];
    let c = Vec3::from(t.center) + off;
    let r = Vec3::from(t.radii);
    let tumor_grid = crate::usrecon::GridGeometry::covering(c - r - Vec3::repeat(3.0), c + r + Vec3::repeat(3.0), 1.0);
    let mut shifted = t.clone();
    shifted.center = [c.x, c.y, c.z];
    LabelMask::from_fn(tumor_grid, LabelKind::Tumor, |p| shifted.contains(&p)).save(&dir.join(files::PREOP_TUMOR))?;

    let liver_c = Vec3::new(10.0, 5.0, 0.0) + off;
    let liver_r = Vec3::new(70.0, 50.0, 40.0);
    let liver_grid = crate::usrecon::GridGeometry::covering(liver_c - liver_r - Vec3::repeat(4.0), liver_c + liver_r + Vec3::repeat(4.0), 2.0);
    let liver = LabelMask::from_fn(liver_grid, LabelKind::Tumor, |p| {
        (0..3).map(|a| ((p[a] - liver_c[a]) / liver_r[a]).powi(2)).sum::<f64>() <= 1.0
    });
    let mut mesh = extract_surface(&liver)?;
    mesh.frame = FrameId::PreopModel;
    mesh.save(&dir.join(files::PREOP_LIVER)).map_err(|e| PipelineError::Runtime(e.to_string()))?;
    Ok(())
}

fn write_specimen(sc: &Scenario, gt: &GroundTruth, plan: &[ClipPlan], dir: &Path) -> Result<(), PipelineError> {
    let mut clips = LabelMask::empty(gt.tumor.geometry, LabelKind::Clip);
    for c in plan.iter().filter(|c| !sc.detached_clips.contains(&c.id)) {
        paint_clip(&mut clips, Vec3::from(c.target), Vec3::from(c.outward).cross(&Vec3::z()).try_normalize(1e-9).unwrap_or(Vec3::x()), CLIP_RADIUS_MM);
    }
    let mut volume = gt.volume.clone();
    for i in clips.indices() {
        volume.scalars[i] = 255.0;
    }
    let study = SpecimenStudy::new(sc.patient_id.clone(), volume, gt.tumor.clone(), clips)?;
    study.save(dir)?;
    Ok(())
}

/// Loads the recorded frames and poses them with the tracking log.
pub fn load_sweep(dir: &Path) -> Result<(PosedSweep, TrackingLog), PipelineError> {
    let log = parse_log(BufReader::new(File::open(need(dir, files::TRACKING_LOG)?)?))?;
    let cal_rec = log
        .header
        .calibrations
        .get(&Device::Probe)
        .ok_or_else(|| PipelineError::Input("tracking log header has no probe calibration".into()))?;
    let cal = Calibration { image_to_sensor: cal_rec.to_pose(FrameId::ProbeSensor)?, device: Device::Probe };
    let probe = log.timeline(Device::Probe);
    let reference = log.timeline(Device::Reference);
    let bytes = fs::read(need(dir, files::FRAMES)?)?;
    let mut sweep = PosedSweep::default();
    for m in decode_all(&bytes)? {
        let (h, pixels) = m.to_image_frame()?;
        let posed = crate::geometry::sample_at(&probe, h.timestamp)
            .and_then(|p| Ok((p, crate::geometry::sample_at(&reference, h.timestamp)?)))
            .map_err(ReconError::FrameDropped)
            .and_then(|(p, r)| frame_pose(&p, &r, &cal))
            .and_then(|pose| {
                UsFrame::new(
                    h.width as usize,
                    h.height as usize,
                    pixels.to_vec(),
                    (h.spacing_u as f64, h.spacing_v as f64),
                    pose,
                    h.timestamp,
                )
            });
        sweep.push(posed);
    }
    Ok((sweep, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconSummary {
    pub frames: usize,
    pub dropped: usize,
    pub dims: [usize; 3],
    pub holes_before: usize,
    pub holes_after: usize,
    pub seconds: f64,
}

pub fn reconstruct(dir: &Path, spacing_mm: f64) -> Result<ReconSummary, PipelineError> {
    if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
        return Err(PipelineError::Input(format!("spacing {spacing_mm} must be positive")));
    }
    let (sweep, _) = load_sweep(dir)?;
    let start = Instant::now();
    let raw = compound(&sweep.frames, spacing_mm)?;
    let filled = hole_fill(&raw, DEFAULT_HOLE_RADIUS_MM);
    let seconds = start.elapsed().as_secs_f64();
    filled.save(&dir.join(files::RECON))?;
    Ok(ReconSummary {
        frames: sweep.frames.len(),
        dropped: sweep.dropped,
        dims: filled.geometry.dims,
        holes_before: raw.hole_count(),
        holes_after: filled.hole_count(),
        seconds,
    })
}

pub const DEFAULT_TOLERANCE: f64 = 55.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub tumor_volume_mm3: f64,
    pub tumor_centroid: [f64; 3],
    pub vessel_volume_mm3: f64,
    /// Against the analytic phantom, when `phantom.json` is present.
    pub dice: Option<f64>,
    pub centroid_error_mm: Option<f64>,
    pub seconds: f64,
}

/// Voxel seeds from physical seed points; hole voxels are skipped.
pub fn seed_set(v: &VoxelVolume, seeds: &SeedPoints) -> SeedSet {
    let g = v.geometry;
    let mut set = SeedSet::default();
    for p in &seeds.inside {
        let p = Vec3::from(*p);
        let r = seeds.inside_radius_mm.max(0.0);
        for idx in 0..g.len() {
            let c = g.center_of(idx);
            if (c - p).norm() <= r && !v.is_hole(idx) {
                set.inside.push(g.coords(idx));
            }
        }
        if let Some(ijk) = g.nearest_voxel(&p) {
            if !v.is_hole(g.index(ijk[0], ijk[1], ijk[2])) && !set.inside.contains(&ijk) {
                set.inside.push(ijk);
            }
        }
    }
    for p in &seeds.outside {
        if let Some(ijk) = g.nearest_voxel(&Vec3::from(*p)) {
            if !v.is_hole(g.index(ijk[0], ijk[1], ijk[2])) {
                set.outside.push(ijk);
            }
        }
    }
    set
}

pub fn segment(dir: &Path, tolerance: f64) -> Result<SegmentSummary, PipelineError> {
    let volume = VoxelVolume::load(&need(dir, files::RECON)?)?;
    let seeds: SeedPoints = read_json(dir, files::SEEDS)?;
    let start = Instant::now();
    let tumor = region_grow(&volume, &seed_set(&volume, &seeds), tolerance).map_err(|e| match e {
        SegmentError::SeedConflict(_) | SegmentError::InvalidSeed(_) => PipelineError::Input(e.to_string()),
        other => PipelineError::Runtime(other.to_string()),
    })?;
    let tumor_mesh = extract_surface(&tumor)?;
    let vessels = vessel_baseline(&volume, &VesselParams::default());
    let seconds = start.elapsed().as_secs_f64();
    tumor.save(&dir.join(files::TUMOR))?;
    tumor_mesh.save(&dir.join(files::TUMOR_MESH)).map_err(|e| PipelineError::Runtime(e.to_string()))?;
    vessels.save(&dir.join(files::VESSELS))?;
    let vessel_path = dir.join(files::VESSELS_MESH);
    if vessels.is_empty() {
        if vessel_path.exists() {
            fs::remove_file(&vessel_path)?;
        }
    } else {
        display_surface(&vessels, crate::navengine::DISPLAY_SPACING_MM)?.save(&vessel_path).map_err(|e| PipelineError::Runtime(e.to_string()))?;
    }
    let centroid = tumor.centroid()?;
    let (dice, centroid_error_mm) = match PhantomSpec::load(&dir.join(files::PHANTOM)) {
        Ok(spec) if !spec.tumors.is_empty() => {
            let analytic = LabelMask::from_fn(tumor.geometry, LabelKind::Tumor, |p| spec.tumors.iter().any(|t| t.contains(&p)));
            let truth = Vec3::from(spec.tumors[0].center);
            (Some(tumor.dice(&analytic)), Some((centroid - truth).norm()))
        }
        _ => (None, None),
    };
    Ok(SegmentSummary {
        tumor_volume_mm3: tumor.volume_mm3(),
        tumor_centroid: [centroid.x, centroid.y, centroid.z],
        vessel_volume_mm3: vessels.volume_mm3(),
        dice,
        centroid_error_mm,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub translation: [f64; 3],
    pub preop_centroid: [f64; 3],
    pub intraop_centroid: [f64; 3],
    pub landmark: String,
}

pub fn register(dir: &Path) -> Result<Registration, PipelineError> {
    let preop = PreopModel::load(&need(dir, files::PREOP_LIVER)?, &need(dir, files::PREOP_TUMOR)?)?;
    let tumor = LabelMask::load(&need(dir, files::TUMOR)?, LabelKind::Tumor)?;
    let intra = tumor.centroid()?;
    let t = single_landmark(&preop.tumor_centroid, &intra)?;
    let registered = apply_registration(&preop, &t)?;
    registered.liver.save(&dir.join(files::REGISTERED_LIVER)).map_err(|e| PipelineError::Runtime(e.to_string()))?;
    let reg = Registration {
        translation: [t.x, t.y, t.z],
        preop_centroid: [preop.tumor_centroid.x, preop.tumor_centroid.y, preop.tumor_centroid.z],
        intraop_centroid: [intra.x, intra.y, intra.z],
        landmark: "mask-centroid".into(),
    };
    write_json(&dir.join(files::REGISTRATION), &reg)?;
    Ok(reg)
}

/// Two-way connection to scene consumers during navigation.
pub trait SceneLink {
    fn publish(&mut self, update: &SceneUpdate);
    /// Commands received since the last poll.
    fn poll_commands(&mut self) -> Vec<Command>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavigateOptions {
    pub margin_mm: f64,
    /// Pace inputs to wall-clock time.
    pub realtime: bool,
}

impl Default for NavigateOptions {
    fn default() -> Self {
        NavigateOptions { margin_mm: crate::navengine::DEFAULT_MARGIN_MM, realtime: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigateSummary {
    pub samples: usize,
    pub commands: usize,
    pub clips: usize,
    pub rejected_commands: usize,
    pub lost_at: Option<f64>,
    pub final_state: NavState,
    pub published: usize,
    pub margin_clipped: bool,
}

pub struct NavigateOutcome {
    pub engine: NavEngine,
    pub summary: NavigateSummary,
}

/// Engine configured from a case directory, ready for samples.
pub fn prepare_engine(dir: &Path, opts: &NavigateOptions, record: bool) -> Result<(NavEngine, bool), PipelineError> {
    let log_path = need(dir, files::TRACKING_LOG)?;
    let header = parse_log(BufReader::new(File::open(&log_path)?))?.header;
    let mut config = NavConfig { margin_mm: opts.margin_mm, ..NavConfig::default() };
    if !(opts.margin_mm > 0.0 && opts.margin_mm.is_finite()) {
        return Err(PipelineError::Input(format!("margin {} mm must be positive", opts.margin_mm)));
    }
    config.devices = header.devices.clone();
    for d in [Device::Sealer, Device::Pointer] {
        if let Some(rec) = header.calibrations.get(&d) {
            config.tip_offsets.insert(d, rec.p);
        }
    }
    let mut engine = NavEngine::new(config);
    if record {
        engine.start_recording(Box::new(BufWriter::new(File::create(dir.join(files::SESSION))?)))?;
    }
    let tumor = LabelMask::load(&need(dir, files::TUMOR)?, LabelKind::Tumor)?;
    engine.set_tumor(tumor)?;
    let clipped = engine.margin_mask().is_some_and(|m| m.clipped);
    if let Ok(mesh) = SurfaceMesh::load(&dir.join(files::VESSELS_MESH)) {
        engine.set_vessels(mesh);
    }
    if let (Ok(liver), Ok(reg)) = (SurfaceMesh::load(&dir.join(files::REGISTERED_LIVER)), read_json::<Registration>(dir, files::REGISTRATION)) {
        let mut model = PreopModel::new(liver, None, Vec3::from(reg.intraop_centroid));
        model.frame = FrameId::Reference;
        engine.set_preop(model);
    }
    Ok((engine, clipped))
}

/// Feeds the recorded tracking log and scripted commands through the
/// engine, records the session and writes the intraoperative clip list.
pub fn navigate(dir: &Path, opts: &NavigateOptions, mut link: Option<&mut dyn SceneLink>) -> Result<NavigateOutcome, PipelineError> {
    let (mut engine, margin_clipped) = prepare_engine(dir, opts, true)?;
    let log = parse_log(BufReader::new(File::open(need(dir, files::TRACKING_LOG)?)?))?;
    let commands: Vec<TimedCommand> = read_json(dir, files::COMMANDS)?;
    let mut inputs: Vec<EngineInput> = log.samples.iter().cloned().map(EngineInput::Sample).collect();
    inputs.extend(commands.iter().map(|c| EngineInput::Command { t: c.t, command: c.command.clone() }));
    order_inputs(&mut inputs);

    let mut summary = NavigateSummary {
        samples: log.samples.len(),
        commands: commands.len(),
        clips: 0,
        rejected_commands: 0,
        lost_at: None,
        final_state: engine.state(),
        published: 0,
        margin_clipped,
    };
    let wall0 = Instant::now();
    let t0 = inputs.first().map(EngineInput::time).unwrap_or(0.0);
    for input in &inputs {
        if opts.realtime {
            let due = Duration::from_secs_f64((input.time() - t0).max(0.0));
            if let Some(wait) = due.checked_sub(wall0.elapsed()) {
                thread::sleep(wait);
            }
        }
        match engine.handle(input) {
            Ok(()) => {}
            Err(NavError::NotNavigating(_) | NavError::NoPointer | NavError::InvalidCommand(_) | NavError::UnknownDevice(_)) => {
                summary.rejected_commands += matches!(input, EngineInput::Command { .. }) as usize;
            }
            Err(e) => return Err(e.into()),
        }
        if engine.state() == NavState::Lost && summary.lost_at.is_none() {
            summary.lost_at = Some(engine.time());
        }
        if let Some(link) = link.as_deref_mut() {
            for c in link.poll_commands() {
                if engine.apply_command(engine.time(), &c).is_err() {
                    summary.rejected_commands += 1;
                }
            }
            if let Some(update) = engine.publish(engine.time()) {
                link.publish(&update);
                summary.published += 1;
            }
        }
    }
    engine.finish_recording()?;
    summary.clips = engine.clips().len();
    summary.final_state = engine.state();
    save_clips(dir, engine.clips())?;
    Ok(NavigateOutcome { engine, summary })
}

/// Writes the clip list next to the session and into the patient's cohort
/// directory when one exists.
pub fn save_clips(dir: &Path, clips: &[ClipRecord]) -> Result<(), PipelineError> {
    evalkit::save_intraop_clips(&dir.join(evalkit::INTRAOP_CLIPS_FILE), clips)?;
    if let Ok(sc) = read_json::<Scenario>(dir, files::SCENARIO) {
        let patient = dir.join(files::COHORT).join(&sc.patient_id);
        if patient.is_dir() {
            evalkit::save_intraop_clips(&patient.join(evalkit::INTRAOP_CLIPS_FILE), clips)?;
        }
    }
    Ok(())
}

pub fn evaluate(cohort: &Path, out: &Path) -> Result<AccuracyReport, PipelineError> {
    let patients = evalkit::load_cohort(cohort)?;
    let report = evalkit::accuracy_report(&patients)?;
    report.export(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub simulate: SimulateSummary,
    pub reconstruct: ReconSummary,
    pub segment: SegmentSummary,
    pub registration: Registration,
    pub navigate: NavigateSummary,
    pub report: AccuracyReport,
    /// Wall time per stage, seconds, in workflow order.
    pub timings: Vec<(String, f64)>,
}

/// Runs every stage in order on `dir`.
pub fn run_all(sc: &Scenario, dir: &Path, opts: &NavigateOptions) -> Result<RunSummary, PipelineError> {
    let mut timings = Vec::new();
    let mut timed = |name: &str, start: Instant| timings.push((name.to_string(), start.elapsed().as_secs_f64()));
    let s = Instant::now();
    let simulate = simulate(sc, dir)?;
    timed("simulate", s);
    let s = Instant::now();
    let reconstruct = reconstruct(dir, sc.spacing_mm)?;
    timed("reconstruct", s);
    let s = Instant::now();
    let segment = segment(dir, DEFAULT_TOLERANCE)?;
    timed("segment", s);
    let s = Instant::now();
    let registration = register(dir)?;
    timed("register", s);
    let s = Instant::now();
    let navigate = navigate(dir, opts, None)?.summary;
    timed("navigate", s);
    let s = Instant::now();
    let report = evaluate(&dir.join(files::COHORT), &dir.join(files::REPORT))?;
    timed("evaluate", s);
    Ok(RunSummary { simulate, reconstruct, segment, registration, navigate, report, timings })
}
