//! Stream framing.
//!
//! Every message travels as a 4-byte big-endian length `N` followed by `N`
//! bytes. The first of those bytes is the message kind, the rest is the
//! body: UTF-8 JSON for POSE, STATUS, SCENE_UPDATE and COMMAND, and a
//! 32-byte binary header plus row-major 8-bit pixels for IMAGE_FRAME.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Device, TrackedSample};
use crate::geometry::{FrameId, GeometryError, Pose, TrackingStatus};

/// Frames longer than 16 MiB are rejected.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

pub const IMAGE_HEADER_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    Oversized(usize),
    #[error("empty frame")]
    EmptyFrame,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("malformed payload: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum MessageKind {
    Pose = 1,
    ImageFrame = 2,
    Status = 3,
    SceneUpdate = 4,
    /// Operator commands sent from a console back to the engine.
    Command = 5,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            1 => MessageKind::Pose,
            2 => MessageKind::ImageFrame,
            3 => MessageKind::Status,
            4 => MessageKind::SceneUpdate,
            5 => MessageKind::Command,
            other => return Err(WireError::UnknownKind(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamMessage {
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

/// Structured-text form of a [`TrackedSample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePayload {
    pub device: Device,
    pub t: f64,
    pub q: [f64; 4],
    pub p: [f64; 3],
    pub status: TrackingStatus,
    pub seq: u64,
}

impl PosePayload {
    pub fn from_sample(sample: &TrackedSample) -> Self {
        PosePayload {
            device: sample.device,
            t: sample.pose.timestamp,
            q: sample.pose.wxyz(),
            p: sample.pose.xyz(),
            status: sample.pose.status,
            seq: sample.sequence,
        }
    }

    pub fn to_sample(&self) -> Result<TrackedSample, GeometryError> {
        let pose = Pose::from_wxyz(self.q, self.p, self.t, self.status, FrameId::World)?;
        Ok(TrackedSample { device: self.device, pose, sequence: self.seq })
    }
}

impl StreamMessage {
    pub fn new(kind: MessageKind, payload: Vec<u8>) -> Self {
        StreamMessage { kind, payload }
    }

    pub fn text(kind: MessageKind, text: &str) -> Self {
        StreamMessage { kind, payload: text.as_bytes().to_vec() }
    }

    pub fn status(text: &str) -> Self {
        Self::text(MessageKind::Status, text)
    }

    pub fn payload_str(&self) -> Result<&str, WireError> {
        std::str::from_utf8(&self.payload).map_err(|e| WireError::Payload(e.to_string()))
    }

    pub fn pose(sample: &TrackedSample) -> Self {
        let body = PosePayload::from_sample(sample);
        StreamMessage { kind: MessageKind::Pose, payload: serde_json::to_vec(&body).expect("pose serializes") }
    }

    pub fn to_sample(&self) -> Result<TrackedSample, WireError> {
        if self.kind != MessageKind::Pose {
            return Err(WireError::Payload(format!("{:?} is not a pose message", self.kind)));
        }
        let b: PosePayload = serde_json::from_slice(&self.payload).map_err(|e| WireError::Payload(e.to_string()))?;
        b.to_sample().map_err(|e| WireError::Payload(e.to_string()))
    }

    /// Length-prefixed wire bytes.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let len = self.payload.len() + 1;
        if len > MAX_FRAME_LEN {
            return Err(WireError::Oversized(len));
        }
        let mut out = Vec::with_capacity(4 + len);
        out.extend_from_slice(&(len as u32).to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

/// Fixed 32-byte big-endian header of an IMAGE_FRAME body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageFrameHeader {
    pub width: u32,
    pub height: u32,
    pub spacing_u: f32,
    pub spacing_v: f32,
    pub timestamp: f64,
    pub sequence: u64,
}

impl ImageFrameHeader {
    pub fn to_bytes(&self) -> [u8; IMAGE_HEADER_LEN] {
        let mut b = [0u8; IMAGE_HEADER_LEN];
        b[0..4].copy_from_slice(&self.width.to_be_bytes());
        b[4..8].copy_from_slice(&self.height.to_be_bytes());
        b[8..12].copy_from_slice(&self.spacing_u.to_be_bytes());
        b[12..16].copy_from_slice(&self.spacing_v.to_be_bytes());
        b[16..24].copy_from_slice(&self.timestamp.to_be_bytes());
        b[24..32].copy_from_slice(&self.sequence.to_be_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, WireError> {
        if b.len() < IMAGE_HEADER_LEN {
            return Err(WireError::Payload("image header truncated".into()));
        }
        let u32_at = |i: usize| u32::from_be_bytes(b[i..i + 4].try_into().unwrap());
        Ok(ImageFrameHeader {
            width: u32_at(0),
            height: u32_at(4),
            spacing_u: f32::from_be_bytes(b[8..12].try_into().unwrap()),
            spacing_v: f32::from_be_bytes(b[12..16].try_into().unwrap()),
            timestamp: f64::from_be_bytes(b[16..24].try_into().unwrap()),
            sequence: u64::from_be_bytes(b[24..32].try_into().unwrap()),
        })
    }
}

impl StreamMessage {
    pub fn image_frame(header: &ImageFrameHeader, pixels: &[u8]) -> Result<Self, WireError> {
        if pixels.len() != header.width as usize * header.height as usize {
            return Err(WireError::Payload("pixel count does not match header".into()));
        }
        let mut payload = Vec::with_capacity(IMAGE_HEADER_LEN + pixels.len());
        payload.extend_from_slice(&header.to_bytes());
        payload.extend_from_slice(pixels);
        Ok(StreamMessage { kind: MessageKind::ImageFrame, payload })
    }

    pub fn to_image_frame(&self) -> Result<(ImageFrameHeader, &[u8]), WireError> {
        if self.kind != MessageKind::ImageFrame {
            return Err(WireError::Payload(format!("{:?} is not an image frame", self.kind)));
        }
        let h = ImageFrameHeader::from_bytes(&self.payload)?;
        let pixels = &self.payload[IMAGE_HEADER_LEN..];
        if pixels.len() != h.width as usize * h.height as usize {
            return Err(WireError::Payload("pixel count does not match header".into()));
        }
        Ok((h, pixels))
    }
}

/// Reassembles messages from arbitrarily split byte chunks.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet consumed as complete messages.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }

    pub fn next_message(&mut self) -> Result<Option<StreamMessage>, WireError> {
        let avail = &self.buf[self.start..];
        if avail.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(avail[..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME_LEN {
            return Err(WireError::Oversized(len));
        }
        if len == 0 {
            return Err(WireError::EmptyFrame);
        }
        if avail.len() < 4 + len {
            return Ok(None);
        }
        let kind = MessageKind::from_byte(avail[4])?;
        let payload = avail[5..4 + len].to_vec();
        self.start += 4 + len;
        if self.start > 1 << 20 {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        Ok(Some(StreamMessage { kind, payload }))
    }
}

/// Decodes a complete byte buffer (for example a frames file) into messages.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<StreamMessage>, WireError> {
    let mut d = FrameDecoder::new();
    d.push(bytes);
    let mut out = Vec::new();
    while let Some(m) = d.next_message()? {
        out.push(m);
    }
    if d.pending() != 0 {
        return Err(WireError::Payload(format!("{} trailing bytes", d.pending())));
    }
    Ok(out)
}
