//! Tumor and vessel segmentation, resection margins, surfaces and distance
//! queries.

mod bvh;
mod edt;
mod margin;
mod mask;
pub mod mesh;
mod region;
mod signed;
mod surface;
mod vessel;

use thiserror::Error;

pub use bvh::{closest_feature_on_triangle, closest_point_on_triangle, ClosestPoint, MeshBvh, TriFeature};
pub use edt::{distance_field, DistanceField};
pub use margin::{expand_margin, expand_margin_with, MarginMask, MARGIN_PRESETS_MM};
pub use mask::{EditOp, LabelKind, LabelMask};
pub use mesh::{MeshError, SurfaceMesh};
pub use region::{region_grow, SeedSet};
pub use signed::SignedDistance;
pub use surface::{display_surface, extract_surface, SMOOTHING_ITERATIONS};
pub use vessel::{vessel_baseline, Segmenter, VesselBaseline, VesselParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("inside seed {0:?} is also an outside seed")]
    SeedConflict([usize; 3]),
    #[error("segmentation is empty")]
    EmptySegment,
    #[error("invalid seed: {0}")]
    InvalidSeed(String),
    #[error("margin must be a positive finite distance, got {0}")]
    InvalidMargin(f64),
    #[error("inputs are on different grids")]
    GridMismatch,
}
