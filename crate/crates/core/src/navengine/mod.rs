//! Live navigation: reference-relative instrument tracking, tip-to-tumor
//! distances, margin alerts, clip digitization, scene publishing and
//! session recording.

mod alert;
mod scene;
pub mod session;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use alert::{check_alert, next_alert, Alert, DEFAULT_HYSTERESIS_MM};
pub use scene::{Command, InstrumentView, MeshPayload, SceneMeshes, SceneUpdate};
pub use session::{replay_session, Derived, ReplayTrace, SessionError, SessionWriter};

use crate::geometry::{express_in_reference, FrameId, GeometryError, Pose, TrackingStatus, Vec3};
use crate::register::PreopModel;
use crate::segment::{
    display_surface, distance_field, expand_margin_with, extract_surface, DistanceField, LabelMask, MarginMask, SegmentError, SignedDistance,
    SurfaceMesh,
};
use crate::trackio::{Device, TrackedSample};

pub const DEFAULT_T_LOST_S: f64 = 0.5;
pub const DEFAULT_PUBLISH_RATE_HZ: f64 = 30.0;
pub const DEFAULT_MARGIN_MM: f64 = 10.0;
/// Grid spacing of the meshes sent to consoles, mm.
pub const DISPLAY_SPACING_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NavState {
    Setup,
    Navigating,
    Lost,
}

impl NavState {
    pub fn as_str(self) -> &'static str {
        match self {
            NavState::Setup => "SETUP",
            NavState::Navigating => "NAVIGATING",
            NavState::Lost => "LOST",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NavError {
    #[error("sample for unknown device {0}")]
    UnknownDevice(Device),
    #[error("not navigating (state {})", .0.as_str())]
    NotNavigating(NavState),
    #[error("no tumor model loaded")]
    NoTumor,
    #[error("pointer is not tracked")]
    NoPointer,
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: u32,
    /// mm, reference frame.
    pub position: [f64; 3],
    /// Signed distance to the tumor boundary at digitization, mm.
    pub intraop_distance_mm: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavConfig {
    pub margin_mm: f64,
    pub hysteresis_mm: f64,
    pub t_lost_s: f64,
    pub publish_rate_hz: f64,
    pub devices: Vec<Device>,
    /// Tip position in each instrument's sensor frame, mm.
    #[serde(default)]
    pub tip_offsets: BTreeMap<Device, [f64; 3]>,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            margin_mm: DEFAULT_MARGIN_MM,
            hysteresis_mm: DEFAULT_HYSTERESIS_MM,
            t_lost_s: DEFAULT_T_LOST_S,
            publish_rate_hz: DEFAULT_PUBLISH_RATE_HZ,
            devices: Device::ALL.to_vec(),
            tip_offsets: BTreeMap::new(),
        }
    }
}

/// Tumor segmentation with everything needed for distance queries.
#[derive(Debug, Clone)]
pub struct TumorModel {
    pub mask: LabelMask,
    pub mesh: SurfaceMesh,
    /// Coarser surface sent to consoles.
    pub display: SurfaceMesh,
    pub field: DistanceField,
    query: SignedDistance,
}

impl TumorModel {
    pub fn new(mask: LabelMask) -> Result<Self, SegmentError> {
        let mesh = extract_surface(&mask)?;
        let field = distance_field(&mask)?;
        let query = SignedDistance::new(&mesh);
        let display = display_surface(&mask, DISPLAY_SPACING_MM)?;
        Ok(TumorModel { mask, mesh, display, field, query })
    }

    /// Exact signed distance from `p` to the tumor surface mesh, mm.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.query.signed(p).expect("tumor mesh is never empty")
    }

    pub fn margin(&self, margin_mm: f64) -> Result<MarginMask, SegmentError> {
        expand_margin_with(&self.mask, &self.field, margin_mm)
    }
}

/// What one input changed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDelta {
    pub t: f64,
    pub state: NavState,
    pub state_changed: bool,
    pub alert: Alert,
    pub instrument: Option<InstrumentView>,
}

/// An input to the single-writer engine loop.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineInput {
    Sample(TrackedSample),
    Command { t: f64, command: Command },
}

impl EngineInput {
    pub fn time(&self) -> f64 {
        match self {
            EngineInput::Sample(s) => s.pose.timestamp,
            EngineInput::Command { t, .. } => *t,
        }
    }
}

/// Orders a batch of inputs by timestamp; at equal times samples come
/// before commands, otherwise arrival order is kept.
pub fn order_inputs(batch: &mut [EngineInput]) {
    batch.sort_by(|a, b| {
        a.time()
            .total_cmp(&b.time())
            .then_with(|| matches!(a, EngineInput::Command { .. }).cmp(&matches!(b, EngineInput::Command { .. })))
    });
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandOutcome {
    Steered(InstrumentView),
    Clip(ClipRecord),
    Margin { mm: f64, clipped: bool },
}

pub struct NavEngine {
    config: NavConfig,
    tumor: Option<TumorModel>,
    margin: Option<(MarginMask, SurfaceMesh)>,
    vessel: Option<SurfaceMesh>,
    preop: Option<PreopModel>,
    state: NavState,
    alert: Alert,
    time: f64,
    reference: Option<Pose>,
    reference_missing_since: Option<f64>,
    instruments: BTreeMap<Device, InstrumentView>,
    clips: Vec<ClipRecord>,
    mesh_version: u64,
    sent_mesh_version: u64,
    last_publish: Option<f64>,
    recorder: Option<SessionWriter<Box<dyn Write + Send>>>,
    trace: Option<Vec<Derived>>,
}

impl NavEngine {
    pub fn new(config: NavConfig) -> Self {
        NavEngine {
            config,
            tumor: None,
            margin: None,
            vessel: None,
            preop: None,
            state: NavState::Setup,
            alert: Alert::Clear,
            time: 0.0,
            reference: None,
            reference_missing_since: None,
            instruments: BTreeMap::new(),
            clips: Vec::new(),
            mesh_version: 0,
            sent_mesh_version: 0,
            last_publish: None,
            recorder: None,
            trace: None,
        }
    }

    pub fn config(&self) -> &NavConfig {
        &self.config
    }

    pub fn state(&self) -> NavState {
        self.state
    }

    pub fn alert(&self) -> Alert {
        self.alert
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn clips(&self) -> &[ClipRecord] {
        &self.clips
    }

    pub fn tumor(&self) -> Option<&TumorModel> {
        self.tumor.as_ref()
    }

    pub fn margin_mask(&self) -> Option<&MarginMask> {
        self.margin.as_ref().map(|(m, _)| m)
    }

    pub fn instrument(&self, device: Device) -> Option<&InstrumentView> {
        self.instruments.get(&device)
    }

    pub fn instruments(&self) -> impl Iterator<Item = &InstrumentView> {
        self.instruments.values()
    }

    /// Starts writing every input and derived event to `out`.
    pub fn start_recording(&mut self, out: Box<dyn Write + Send>) -> std::io::Result<()> {
        let mut w = SessionWriter::new(out, &self.config)?;
        if let Some(t) = &self.tumor {
            w.tumor(self.time, &t.mask)?;
        }
        self.recorder = Some(w);
        Ok(())
    }

    /// Writes the footer and returns the sink.
    pub fn finish_recording(&mut self) -> std::io::Result<Option<Box<dyn Write + Send>>> {
        match self.recorder.take() {
            Some(w) => w.finish().map(Some),
            None => Ok(None),
        }
    }

    pub(crate) fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub(crate) fn take_trace(&mut self) -> Vec<Derived> {
        self.trace.take().unwrap_or_default()
    }

    fn record(&mut self, f: impl FnOnce(&mut SessionWriter<Box<dyn Write + Send>>) -> std::io::Result<()>) {
        if let Some(w) = &mut self.recorder {
            if let Err(e) = f(w) {
                log::error!("session recording stopped: {e}");
                self.recorder = None;
            }
        }
    }

    fn emit(&mut self, d: Derived) {
        self.record(|w| w.derived(&d));
        if let Some(trace) = &mut self.trace {
            trace.push(d);
        }
    }

    fn set_state(&mut self, state: NavState) -> bool {
        if state == self.state {
            return false;
        }
        self.state = state;
        self.emit(Derived::State { t: self.time, state });
        true
    }

    fn set_alert(&mut self, alert: Alert) {
        if alert != self.alert {
            self.alert = alert;
            self.emit(Derived::Alert { t: self.time, alert });
        }
    }

    /// Loads the tumor segmentation and derives its margin.
    pub fn set_tumor(&mut self, mask: LabelMask) -> Result<(), NavError> {
        let model = TumorModel::new(mask)?;
        let margin = model.margin(self.config.margin_mm)?;
        let margin_mesh = display_surface(&margin.mask, DISPLAY_SPACING_MM)?;
        let t = self.time;
        self.record(|w| w.tumor(t, &model.mask));
        self.tumor = Some(model);
        self.margin = Some((margin, margin_mesh));
        self.mesh_version += 1;
        if self.state == NavState::Setup && self.reference.is_some() && self.reference_missing_since.is_none() {
            self.set_state(NavState::Navigating);
        }
        self.refresh_distances();
        Ok(())
    }

    pub fn set_vessels(&mut self, mesh: SurfaceMesh) {
        self.vessel = Some(mesh);
        self.mesh_version += 1;
    }

    pub fn set_preop(&mut self, model: PreopModel) {
        self.preop = Some(model);
        self.mesh_version += 1;
    }

    pub fn set_margin(&mut self, margin_mm: f64) -> Result<bool, NavError> {
        if !(margin_mm.is_finite() && margin_mm > 0.0) {
            return Err(NavError::InvalidCommand(format!("margin {margin_mm} mm")));
        }
        self.config.margin_mm = margin_mm;
        let Some(tumor) = &self.tumor else {
            return Ok(false);
        };
        let margin = tumor.margin(margin_mm)?;
        let mesh = display_surface(&margin.mask, DISPLAY_SPACING_MM)?;
        let clipped = margin.clipped;
        self.margin = Some((margin, mesh));
        self.mesh_version += 1;
        self.update_alert();
        Ok(clipped)
    }

    fn tip_of(&self, device: Device, pose: &Pose) -> Vec3 {
        let offset = self.config.tip_offsets.get(&device).copied().unwrap_or([0.0; 3]);
        pose.transform_point(&Vec3::from(offset))
    }

    fn view(&self, device: Device, pose_ref: &Pose) -> InstrumentView {
        let tip = self.tip_of(device, pose_ref);
        let distance_mm = match (&self.tumor, self.state) {
            (Some(t), NavState::Navigating) if device != Device::Probe => Some(t.signed_distance(&tip)),
            _ => None,
        };
        InstrumentView { device, q: pose_ref.wxyz(), p: pose_ref.xyz(), tip: [tip.x, tip.y, tip.z], distance_mm }
    }

    fn refresh_distances(&mut self) {
        let devices: Vec<Device> = self.instruments.keys().copied().collect();
        for d in devices {
            let v = &self.instruments[&d];
            let pose = Pose::from_wxyz(v.q, v.p, self.time, TrackingStatus::Ok, FrameId::Reference)
                .expect("stored orientation is a unit quaternion");
            let view = self.view(d, &pose);
            self.instruments.insert(d, view);
        }
        self.update_alert();
    }

    fn update_alert(&mut self) {
        let nearest = self
            .instruments
            .values()
            .filter(|v| matches!(v.device, Device::Sealer | Device::Pointer))
            .filter_map(|v| v.distance_mm)
            .min_by(|a, b| a.total_cmp(b));
        let next = match nearest {
            Some(d) if self.state == NavState::Navigating => {
                next_alert(self.alert, d, self.config.margin_mm, self.config.hysteresis_mm)
            }
            _ => Alert::Clear,
        };
        self.set_alert(next);
    }

    fn set_instrument(&mut self, device: Device, pose_ref: &Pose) -> InstrumentView {
        let view = self.view(device, pose_ref);
        if let Some(d) = view.distance_mm {
            self.emit(Derived::Distance { t: self.time, device, d });
        }
        self.instruments.insert(device, view.clone());
        self.update_alert();
        view
    }

    fn delta(&self, state_changed: bool, instrument: Option<InstrumentView>) -> SceneDelta {
        SceneDelta { t: self.time, state: self.state, state_changed, alert: self.alert, instrument }
    }

    /// Consumes one tracked sample.
    pub fn update_pose(&mut self, s: &TrackedSample) -> Result<SceneDelta, NavError> {
        if !self.config.devices.contains(&s.device) {
            return Err(NavError::UnknownDevice(s.device));
        }
        self.record(|w| w.sample(s));
        self.time = s.pose.timestamp;
        let t = self.time;

        if s.device == Device::Reference {
            let mut changed = false;
            if s.pose.is_ok() {
                self.reference = Some(s.pose);
                self.reference_missing_since = None;
                if self.state != NavState::Navigating {
                    let next = if self.tumor.is_some() { NavState::Navigating } else { NavState::Setup };
                    changed = self.set_state(next);
                    if changed {
                        self.refresh_distances();
                    }
                }
            } else {
                let since = *self.reference_missing_since.get_or_insert(t);
                if t - since > self.config.t_lost_s && self.state != NavState::Lost {
                    changed = self.set_state(NavState::Lost);
                    self.instruments.clear();
                    self.update_alert();
                }
            }
            return Ok(self.delta(changed, None));
        }

        if self.state == NavState::Lost {
            return Ok(self.delta(false, None));
        }
        if !s.pose.is_ok() {
            self.instruments.remove(&s.device);
            self.update_alert();
            return Ok(self.delta(false, None));
        }
        let Some(reference) = self.reference else {
            return Ok(self.delta(false, None));
        };
        let pose_ref = express_in_reference(&s.pose, &reference)?;
        let view = self.set_instrument(s.device, &pose_ref);
        Ok(self.delta(false, Some(view)))
    }

    /// Signed distance from a reference-frame point to the tumor boundary.
    pub fn shortest_distance(&self, tip: &Vec3) -> Result<f64, NavError> {
        if self.state != NavState::Navigating {
            return Err(NavError::NotNavigating(self.state));
        }
        let tumor = self.tumor.as_ref().ok_or(NavError::NoTumor)?;
        Ok(tumor.signed_distance(tip))
    }

    pub fn digitize_clip(&mut self, tip: &Vec3) -> Result<ClipRecord, NavError> {
        let d = self.shortest_distance(tip)?;
        let clip = ClipRecord {
            id: self.clips.len() as u32 + 1,
            position: [tip.x, tip.y, tip.z],
            intraop_distance_mm: d,
            t: self.time,
        };
        self.clips.push(clip.clone());
        self.emit(Derived::Clip(clip.clone()));
        Ok(clip)
    }

    /// Digitizes a clip at the current pointer tip.
    pub fn digitize_pointer(&mut self) -> Result<ClipRecord, NavError> {
        if self.state != NavState::Navigating {
            return Err(NavError::NotNavigating(self.state));
        }
        let tip = self.instruments.get(&Device::Pointer).ok_or(NavError::NoPointer)?.tip;
        self.digitize_clip(&Vec3::from(tip))
    }

    pub fn apply_command(&mut self, t: f64, command: &Command) -> Result<CommandOutcome, NavError> {
        self.record(|w| w.command(t, command));
        self.time = self.time.max(t);
        match command {
            Command::Steer { device, q, p } => {
                if !self.config.devices.contains(device) || *device == Device::Reference {
                    return Err(NavError::UnknownDevice(*device));
                }
                if self.state == NavState::Lost {
                    return Err(NavError::NotNavigating(self.state));
                }
                let pose = Pose::from_wxyz(*q, *p, self.time, TrackingStatus::Ok, FrameId::Reference)?;
                Ok(CommandOutcome::Steered(self.set_instrument(*device, &pose)))
            }
            Command::Clip { position: Some(p) } => self.digitize_clip(&Vec3::from(*p)).map(CommandOutcome::Clip),
            Command::Clip { position: None } => self.digitize_pointer().map(CommandOutcome::Clip),
            Command::Margin { mm } => self.set_margin(*mm).map(|clipped| CommandOutcome::Margin { mm: *mm, clipped }),
        }
    }

    pub fn handle(&mut self, input: &EngineInput) -> Result<(), NavError> {
        match input {
            EngineInput::Sample(s) => self.update_pose(s).map(|_| ()),
            EngineInput::Command { t, command } => self.apply_command(*t, command).map(|_| ()),
        }
    }

    /// Full scene description; meshes are included when `with_meshes`.
    pub fn snapshot(&self, with_meshes: bool) -> SceneUpdate {
        let instruments = if self.state == NavState::Lost { Vec::new() } else { self.instruments.values().cloned().collect() };
        let meshes = with_meshes.then(|| SceneMeshes {
            tumor: self.tumor.as_ref().map(|t| MeshPayload::from_mesh(&t.display)),
            margin: self.margin.as_ref().map(|(_, m)| MeshPayload::from_mesh(m)),
            vessel: self.vessel.as_ref().map(MeshPayload::from_mesh),
            liver: self.preop.as_ref().map(|p| MeshPayload::from_mesh(&p.liver)),
        });
        SceneUpdate {
            state: self.state,
            alert: self.alert,
            margin_mm: self.config.margin_mm,
            t: self.time,
            instruments,
            clips: self.clips.clone(),
            meshes,
            preop_context_only: self.preop.as_ref().map(|p| p.context_only),
        }
    }

    /// Rate-limited scene update. Meshes are attached only when they
    /// changed since the last published update.
    pub fn publish(&mut self, now: f64) -> Option<SceneUpdate> {
        if let Some(last) = self.last_publish {
            if now - last < 1.0 / self.config.publish_rate_hz - 1e-9 {
                return None;
            }
        }
        self.last_publish = Some(now);
        let changed = self.mesh_version != self.sent_mesh_version;
        self.sent_mesh_version = self.mesh_version;
        let mut update = self.snapshot(changed);
        update.t = now;
        Some(update)
    }
}
