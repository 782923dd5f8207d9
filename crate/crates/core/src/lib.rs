//! Ultrasound-only surgical navigation: tracking I/O, freehand 3D
//! reconstruction, segmentation, reference-relative guidance and
//! clip-based accuracy evaluation on a synthetic phantom.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod trackio;
pub mod usrecon;
pub mod segment;
pub mod register;
pub mod navengine;
pub mod phantom;
pub mod evalkit;
pub mod pipeline;

pub use geometry::{compose, express_in_reference, FrameId, Pose, Vec3};
pub use navengine::{Alert, ClipRecord, Command, NavConfig, NavEngine, NavState, SceneUpdate};
pub use pipeline::{run_all, NavigateOptions, PipelineError, Scenario};
pub use segment::{LabelKind, LabelMask, SurfaceMesh};
pub use trackio::{Device, TrackedSample};
pub use usrecon::{GridGeometry, VoxelVolume};
