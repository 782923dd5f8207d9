//! Line-oriented tracking log.
//!
//! ```text
//! #usnav-tracking-log
//! #header {"version":"1","devices":["REFERENCE","PROBE"],"calibrations":{...}}
//! t=0 dev=REFERENCE q=1,0,0,0 p=0,0,0mm status=OK seq=0
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so parsing a
//! written log reproduces every sample bit for bit. One sample per line
//! keeps the file usable even if recording stops abruptly.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Device, TrackedSample};
use crate::geometry::{FrameId, GeometryError, Pose, TrackingStatus};

const MAGIC: &str = "#usnav-tracking-log";
const HEADER_PREFIX: &str = "#header ";
pub const LOG_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: sample out of order for {device}: {msg}")]
    Order { line: usize, device: Device, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A rigid transform as stored in the header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub q: [f64; 4],
    pub p: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(p: &Pose) -> Self {
        PoseRecord { q: p.wxyz(), p: p.xyz() }
    }

    pub fn to_pose(&self, frame: FrameId) -> Result<Pose, GeometryError> {
        Pose::from_wxyz(self.q, self.p, 0.0, TrackingStatus::Ok, frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: String,
    pub devices: Vec<Device>,
    /// Fixed sensor calibrations keyed by device: image-to-sensor for the
    /// probe, tip offsets for instruments.
    #[serde(default)]
    pub calibrations: BTreeMap<Device, PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_hz: Option<f64>,
}

impl Default for LogHeader {
    fn default() -> Self {
        LogHeader {
            version: LOG_VERSION.into(),
            devices: Device::ALL.to_vec(),
            calibrations: BTreeMap::new(),
            rate_hz: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackingLog {
    pub header: LogHeader,
    pub samples: Vec<TrackedSample>,
}

impl TrackingLog {
    pub fn timeline(&self, device: Device) -> Vec<Pose> {
        self.samples.iter().filter(|s| s.device == device).map(|s| s.pose).collect()
    }
}

fn join<const N: usize>(v: [f64; N]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn format_sample(s: &TrackedSample) -> String {
    format!(
        "t={} dev={} q={} p={}mm status={} seq={}",
        s.pose.timestamp,
        s.device,
        join(s.pose.wxyz()),
        join(s.pose.xyz()),
        s.pose.status.as_str(),
        s.sequence
    )
}

pub fn write_header<W: Write>(header: &LogHeader, out: &mut W) -> io::Result<()> {
    writeln!(out, "{MAGIC}")?;
    let json = serde_json::to_string(header).map_err(io::Error::other)?;
    writeln!(out, "{HEADER_PREFIX}{json}")
}

pub fn write_log<W: Write>(log: &TrackingLog, out: &mut W) -> io::Result<()> {
    write_header(&log.header, out)?;
    for s in &log.samples {
        writeln!(out, "{}", format_sample(s))?;
    }
    out.flush()
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return Err(format!("expected {N} components, found {}", parts.len()));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("bad number '{p}'"))?;
        if !o.is_finite() {
            return Err(format!("non-finite number '{p}'"));
        }
    }
    Ok(out)
}

pub fn parse_sample(line: &str) -> Result<TrackedSample, String> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for tok in line.split_ascii_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| format!("malformed field '{tok}'"))?;
        if fields.insert(k, v).is_some() {
            return Err(format!("duplicate field '{k}'"));
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing field '{k}'"));
    let t: f64 = get("t")?.parse().map_err(|_| "bad timestamp".to_string())?;
    if !t.is_finite() {
        return Err("non-finite timestamp".into());
    }
    let device: Device = get("dev")?.parse()?;
    let q = parse_floats::<4>(get("q")?)?;
    let p = parse_floats::<3>(get("p")?.strip_suffix("mm").ok_or("position must end in 'mm'")?)?;
    let status = match get("status")? {
        "OK" => TrackingStatus::Ok,
        "MISSING" => TrackingStatus::Missing,
        other => return Err(format!("bad status '{other}'")),
    };
    let sequence: u64 = get("seq")?.parse().map_err(|_| "bad sequence number".to_string())?;
    if fields.len() != 6 {
        return Err("unexpected extra fields".into());
    }
    let pose = Pose::from_wxyz(q, p, t, status, FrameId::World).map_err(|e| e.to_string())?;
    Ok(TrackedSample { device, pose, sequence })
}

/// Parses a log, checking that every device's samples are in order.
pub fn parse_log<R: BufRead>(input: R) -> Result<TrackingLog, LogError> {
    let mut lines = input.lines().enumerate();
    let perr = |line: usize, msg: &str| LogError::Parse { line, msg: msg.to_string() };

    match lines.next() {
        Some((_, l)) => {
            if l?.trim_end() != MAGIC {
                return Err(perr(1, "missing log magic line"));
            }
        }
        None => return Err(perr(1, "empty file")),
    }
    let header: LogHeader = match lines.next() {
        Some((_, l)) => {
            let l = l?;
            let json = l.strip_prefix(HEADER_PREFIX).ok_or_else(|| perr(2, "missing header line"))?;
            serde_json::from_str(json).map_err(|e| perr(2, &format!("bad header: {e}")))?
        }
        None => return Err(perr(2, "missing header line")),
    };

    let mut samples = Vec::new();
    let mut last: BTreeMap<Device, (u64, f64)> = BTreeMap::new();
    for (i, l) in lines {
        let lineno = i + 1;
        let l = l?;
        if l.trim().is_empty() || l.starts_with('#') {
            continue;
        }
        let s = parse_sample(&l).map_err(|m| perr(lineno, &m))?;
        if let Some(&(seq, t)) = last.get(&s.device) {
            if s.sequence <= seq {
                return Err(LogError::Order {
                    line: lineno,
                    device: s.device,
                    msg: format!("sequence {} after {seq}", s.sequence),
                });
            }
            if s.pose.timestamp < t {
                return Err(LogError::Order {
                    line: lineno,
                    device: s.device,
                    msg: format!("time {} after {t}", s.pose.timestamp),
                });
            }
        }
        last.insert(s.device, (s.sequence, s.pose.timestamp));
        samples.push(s);
    }
    Ok(TrackingLog { header, samples })
}

/// Appends samples to a log as they arrive.
pub struct LogWriter<W: Write> {
    out: W,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut out: W, header: &LogHeader) -> io::Result<Self> {
        write_header(header, &mut out)?;
        Ok(LogWriter { out })
    }

    pub fn append(&mut self, s: &TrackedSample) -> io::Result<()> {
        writeln!(self.out, "{}", format_sample(s))
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
