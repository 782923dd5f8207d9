//! Session recording as JSON lines and deterministic replay.
//!
//! A record is a `header` line, then `tumor`, `sample` and `command`
//! inputs interleaved with the `state`, `alert`, `distance` and `clip`
//! events they produced, and a closing `footer` with the line count.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Alert, ClipRecord, Command, NavConfig, NavEngine, NavState};
use crate::segment::{LabelKind, LabelMask};
use crate::trackio::{Device, PosePayload, TrackedSample};
use crate::usrecon::GridGeometry;

pub const SESSION_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("replay diverged at derived event {index}: recorded {recorded}, replayed {replayed}")]
    Mismatch { index: usize, recorded: String, replayed: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Outputs computed by the engine, recorded for verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum Derived {
    State { t: f64, state: NavState },
    Alert { t: f64, alert: Alert },
    Distance { t: f64, device: Device, d: f64 },
    Clip(ClipRecord),
}

/// Run-length encoded binary mask: alternating run lengths starting with
/// a run of zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRle {
    pub geometry: GridGeometry,
    pub kind: LabelKind,
    pub runs: Vec<u64>,
}

impl MaskRle {
    pub fn encode(m: &LabelMask) -> Self {
        let mut runs = Vec::new();
        let mut current = 0u8;
        let mut len = 0u64;
        for &v in &m.data {
            let v = (v != 0) as u8;
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        MaskRle { geometry: m.geometry, kind: m.kind, runs }
    }

    pub fn decode(&self) -> Result<LabelMask, String> {
        let mut data = Vec::with_capacity(self.geometry.len());
        for (i, &r) in self.runs.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
        }
        if data.len() != self.geometry.len() {
            return Err(format!("mask runs cover {} voxels, grid has {}", data.len(), self.geometry.len()));
        }
        Ok(LabelMask { geometry: self.geometry, data, kind: self.kind })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum Line {
    Header { version: u32, config: NavConfig },
    Tumor { t: f64, mask: MaskRle },
    Sample(PosePayload),
    Command { t: f64, command: Command },
    Footer { lines: u64 },
    #[serde(untagged)]
    Derived(Derived),
}

pub struct SessionWriter<W: Write> {
    out: io::BufWriter<W>,
    lines: u64,
}

impl<W: Write> SessionWriter<W> {
    pub fn new(out: W, config: &NavConfig) -> io::Result<Self> {
        let mut w = SessionWriter { out: io::BufWriter::new(out), lines: 0 };
        w.line(&Line::Header { version: SESSION_VERSION, config: config.clone() })?;
        Ok(w)
    }

    fn line(&mut self, l: &Line) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, l)?;
        self.out.write_all(b"\n")?;
        self.lines += 1;
        Ok(())
    }

    pub fn tumor(&mut self, t: f64, mask: &LabelMask) -> io::Result<()> {
        self.line(&Line::Tumor { t, mask: MaskRle::encode(mask) })
    }

    pub fn sample(&mut self, s: &TrackedSample) -> io::Result<()> {
        self.line(&Line::Sample(PosePayload::from_sample(s)))
    }

    pub fn command(&mut self, t: f64, command: &Command) -> io::Result<()> {
        self.line(&Line::Command { t, command: command.clone() })
    }

    pub fn derived(&mut self, d: &Derived) -> io::Result<()> {
        self.line(&Line::Derived(d.clone()))
    }

    pub fn finish(mut self) -> io::Result<W> {
        let lines = self.lines + 1;
        self.line(&Line::Footer { lines })?;
        self.out.into_inner().map_err(|e| e.into_error())
    }
}

/// Everything a replay reproduced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayTrace {
    pub derived: Vec<Derived>,
    pub clips: Vec<ClipRecord>,
    pub final_state: Option<NavState>,
}

/// Re-runs a recorded session through a fresh engine and checks every
/// derived event against the recording.
pub fn replay_session(bytes: &[u8]) -> Result<ReplayTrace, SessionError> {
    let mut engine: Option<NavEngine> = None;
    let mut recorded: Vec<Derived> = Vec::new();
    let mut offset = 0usize;
    let mut count = 0u64;
    let mut footer = false;
    while offset < bytes.len() {
        let perr = |msg: String| SessionError::Parse { offset, msg };
        let end = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(n) => offset + n,
            None => return Err(perr("truncated record (no line terminator)".into())),
        };
        if footer {
            return Err(perr("data after footer".into()));
        }
        let line: Line = serde_json::from_slice(&bytes[offset..end]).map_err(|e| perr(e.to_string()))?;
        count += 1;
        match line {
            Line::Header { version, config } => {
                if engine.is_some() {
                    return Err(perr("duplicate header".into()));
                }
                if version != SESSION_VERSION {
                    return Err(perr(format!("unsupported session version {version}")));
                }
                let mut e = NavEngine::new(config);
                e.enable_trace();
                engine = Some(e);
            }
            other => {
                let e = engine.as_mut().ok_or_else(|| perr("record does not start with a header".into()))?;
                match other {
                    Line::Header { .. } => unreachable!(),
                    Line::Tumor { t, mask } => {
                        let mask = mask.decode().map_err(perr)?;
                        e.time = e.time.max(t);
                        e.set_tumor(mask).map_err(|err| perr(err.to_string()))?;
                    }
                    Line::Sample(p) => {
                        let s = p.to_sample().map_err(|err| perr(err.to_string()))?;
                        let _ = e.update_pose(&s);
                    }
                    Line::Command { t, command } => {
                        let _ = e.apply_command(t, &command);
                    }
                    Line::Derived(d) => recorded.push(d),
                    Line::Footer { lines } => {
                        if lines != count {
                            return Err(perr(format!("footer counts {lines} lines, found {count}")));
                        }
                        footer = true;
                    }
                }
            }
        }
        offset = end + 1;
    }
    if !footer {
        return Err(SessionError::Parse { offset: bytes.len(), msg: "missing footer (truncated record)".into() });
    }
    let mut engine = engine.ok_or(SessionError::Parse { offset: 0, msg: "empty record".into() })?;
    let derived = engine.take_trace();
    for (index, (a, b)) in recorded.iter().zip(&derived).enumerate() {
        if a != b {
            return Err(SessionError::Mismatch { index, recorded: format!("{a:?}"), replayed: format!("{b:?}") });
        }
    }
    if recorded.len() != derived.len() {
        let index = recorded.len().min(derived.len());
        return Err(SessionError::Mismatch {
            index,
            recorded: format!("{} events", recorded.len()),
            replayed: format!("{} events", derived.len()),
        });
    }
    Ok(ReplayTrace { derived, clips: engine.clips().to_vec(), final_state: Some(engine.state()) })
}
