//! Tracking data: samples, the recorded log format, the length-prefixed
//! stream protocol and a simulated electromagnetic tracker.

pub mod bridge;
pub mod log;
pub mod server;
pub mod sim;
pub mod wire;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{FrameId, Pose};

pub use self::log::{parse_log, write_log, LogError, LogHeader, PoseRecord, TrackingLog};
pub use bridge::WsBridge;
pub use server::{connect_stream, serve_stream, StreamClient, StreamEvent, StreamServer};
pub use sim::{simulate_tracker, NoiseModel, SimConfig, TrackerScript};
pub use wire::{decode_all, FrameDecoder, ImageFrameHeader, MessageKind, PosePayload, StreamMessage, WireError, MAX_FRAME_LEN};

/// Default tracker update rate in Hz.
pub const DEFAULT_RATE_HZ: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Device {
    Reference,
    Probe,
    Sealer,
    Pointer,
}

impl Device {
    pub const ALL: [Device; 4] = [Device::Reference, Device::Probe, Device::Sealer, Device::Pointer];

    pub fn name(self) -> &'static str {
        match self {
            Device::Reference => "REFERENCE",
            Device::Probe => "PROBE",
            Device::Sealer => "SEALER",
            Device::Pointer => "POINTER",
        }
    }

    /// Frame of the sensor mounted on this device.
    pub fn sensor_frame(self) -> FrameId {
        match self {
            Device::Reference => FrameId::Reference,
            Device::Probe => FrameId::ProbeSensor,
            Device::Sealer => FrameId::SealerSensor,
            Device::Pointer => FrameId::PointerSensor,
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Device {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Device::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown device '{s}'"))
    }
}

/// One tracker reading. `pose` is expressed in the tracker (WORLD) frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedSample {
    pub device: Device,
    pub pose: Pose,
    pub sequence: u64,
}
