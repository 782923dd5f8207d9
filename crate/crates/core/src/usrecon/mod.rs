//! Freehand 3D ultrasound: turns a sweep of tracked 2D frames into a voxel
//! volume expressed in the reference-sensor frame.

mod compound;
mod holes;
pub mod volfile;
pub mod volume;

use thiserror::Error;

use crate::geometry::{express_in_reference, FrameId, GeometryError, Pose, Vec3};
use crate::trackio::Device;

pub use compound::{compound, compound_with_budget, DEFAULT_VOXEL_BUDGET};
pub use holes::hole_fill;
pub use volfile::{DType, RawVolume, VolumeData, VolumeFileError};
pub use volume::{GridGeometry, VoxelVolume};

/// Voxel spacing used by default, in millimetres.
pub const DEFAULT_SPACING_MM: f64 = 0.5;
/// Default hole-filling radius, in millimetres.
pub const DEFAULT_HOLE_RADIUS_MM: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconError {
    #[error("frame dropped: {0}")]
    FrameDropped(GeometryError),
    #[error("sweep contains no frames")]
    EmptySweep,
    #[error("volume of {voxels} voxels exceeds the budget of {budget}")]
    Budget { voxels: usize, budget: usize },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
}

/// A 2D ultrasound image with its pose in the reference frame.
///
/// Pixel `(u, v)` (column, row) sits at `(u * du, v * dv, 0)` in the
/// image frame.
#[derive(Debug, Clone, PartialEq)]
pub struct UsFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub pixel_spacing: (f64, f64),
    pub image_pose: Pose,
    pub timestamp: f64,
}

impl UsFrame {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        pixel_spacing: (f64, f64),
        image_pose: Pose,
        timestamp: f64,
    ) -> Result<Self, ReconError> {
        if pixels.len() != width * height {
            return Err(ReconError::InvalidFrame(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if !(pixel_spacing.0 > 0.0 && pixel_spacing.1 > 0.0) {
            return Err(ReconError::InvalidFrame("pixel spacing must be positive".into()));
        }
        if !image_pose.is_ok() {
            return Err(ReconError::FrameDropped(GeometryError::PoseMissing));
        }
        Ok(UsFrame { width, height, pixels, pixel_spacing, image_pose, timestamp })
    }

    pub fn pixel(&self, u: usize, v: usize) -> u8 {
        self.pixels[v * self.width + u]
    }

    /// Position of pixel `(u, v)` in the frame the image pose is expressed in.
    pub fn pixel_position(&self, u: usize, v: usize) -> Vec3 {
        self.image_pose
            .transform_point(&Vec3::new(u as f64 * self.pixel_spacing.0, v as f64 * self.pixel_spacing.1, 0.0))
    }
}

/// Fixed image-to-sensor transform of a tracked probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub image_to_sensor: Pose,
    pub device: Device,
}

/// Pose of the image plane in the reference frame:
/// `reference⁻¹ ∘ probe_sensor ∘ image_to_sensor`.
pub fn frame_pose(probe_sensor: &Pose, reference: &Pose, cal: &Calibration) -> Result<Pose, ReconError> {
    let sensor_in_ref = express_in_reference(probe_sensor, reference).map_err(ReconError::FrameDropped)?;
    let mut p = sensor_in_ref.compose(&cal.image_to_sensor).map_err(ReconError::FrameDropped)?;
    p.frame = FrameId::Reference;
    p.timestamp = probe_sensor.timestamp;
    Ok(p)
}

/// Frames that could be posed, plus the count that had to be dropped.
#[derive(Debug, Clone, Default)]
pub struct PosedSweep {
    pub frames: Vec<UsFrame>,
    pub dropped: usize,
}

impl PosedSweep {
    pub fn push(&mut self, frame: Result<UsFrame, ReconError>) {
        match frame {
            Ok(f) => self.frames.push(f),
            Err(_) => self.dropped += 1,
        }
    }
}
