//! Translation-only registration of a preoperative model by aligning one
//! landmark, the tumor center.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{FrameId, Vec3};
use crate::segment::{LabelKind, LabelMask, MeshError, SurfaceMesh};
use crate::usrecon::VolumeFileError;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("landmark is not a finite point: {0:?}")]
    InvalidPoint([f64; 3]),
    #[error("preoperative tumor mask is empty")]
    EmptyTumor,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Volume(#[from] VolumeFileError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreopModel {
    pub liver: SurfaceMesh,
    pub tumor: Option<SurfaceMesh>,
    pub tumor_centroid: Vec3,
    pub frame: FrameId,
    /// One landmark fixes translation only; the model is for orientation,
    /// never for distance measurement.
    pub context_only: bool,
}

impl PreopModel {
    pub fn new(liver: SurfaceMesh, tumor: Option<SurfaceMesh>, tumor_centroid: Vec3) -> Self {
        PreopModel { liver, tumor, tumor_centroid, frame: FrameId::PreopModel, context_only: true }
    }

    /// Liver mesh file plus tumor mask volume, both in the preoperative frame.
    pub fn load(liver_mesh: &Path, tumor_mask: &Path) -> Result<Self, RegisterError> {
        let mut liver = SurfaceMesh::load(liver_mesh)?;
        liver.frame = FrameId::PreopModel;
        let mask = LabelMask::load(tumor_mask, LabelKind::Tumor)?;
        let centroid = mask.centroid().map_err(|_| RegisterError::EmptyTumor)?;
        Ok(PreopModel::new(liver, None, centroid))
    }
}

/// Where the intraoperative tumor center comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntraopLandmark {
    /// Point indicated with the tracked pointer.
    Digitized(Vec3),
    /// Centroid of the ultrasound tumor segmentation.
    MaskCentroid(Vec3),
}

impl IntraopLandmark {
    pub fn point(&self) -> Vec3 {
        match *self {
            IntraopLandmark::Digitized(p) | IntraopLandmark::MaskCentroid(p) => p,
        }
    }
}

fn finite(p: &Vec3) -> Result<(), RegisterError> {
    if p.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(RegisterError::InvalidPoint([p.x, p.y, p.z]))
    }
}

/// Translation taking the preoperative centroid onto the intraoperative one.
pub fn single_landmark(preop_centroid: &Vec3, intraop_centroid: &Vec3) -> Result<Vec3, RegisterError> {
    finite(preop_centroid)?;
    finite(intraop_centroid)?;
    Ok(intraop_centroid - preop_centroid)
}

pub fn apply_registration(model: &PreopModel, t: &Vec3) -> Result<PreopModel, RegisterError> {
    finite(t)?;
    let mut liver = model.liver.translated(t);
    liver.frame = FrameId::Reference;
    let tumor = model.tumor.as_ref().map(|m| {
        let mut m = m.translated(t);
        m.frame = FrameId::Reference;
        m
    });
    Ok(PreopModel {
        liver,
        tumor,
        tumor_centroid: model.tumor_centroid + t,
        frame: FrameId::Reference,
        context_only: true,
    })
}
