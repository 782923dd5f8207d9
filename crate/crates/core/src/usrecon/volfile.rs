//! Volume file format: a JSON sidecar describing the grid plus a raw
//! little-endian scalar file next to it.
//!
//! ```text
//! tumor.json   {"format":"usnav-volume","version":1,"origin":[..],"spacing":0.5,
//!               "dims":[..],"dtype":"u8","frame":"REFERENCE","endianness":"little",
//!               "data_file":"tumor.raw","label":"TUMOR"}
//! tumor.raw    dims[0]*dims[1]*dims[2] samples, x fastest
//! ```
//!
//! Reconstructed intensity volumes additionally carry a `weight_file` of
//! `u32` accumulation counts so holes survive a round trip.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::volume::{GridGeometry, VoxelVolume};
use crate::geometry::FrameId;

const FORMAT_TAG: &str = "usnav-volume";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VolumeFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    U32,
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U32 | DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    U32(Vec<u32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl VolumeData {
    pub fn dtype(&self) -> DType {
        match self {
            VolumeData::U8(_) => DType::U8,
            VolumeData::U32(_) => DType::U32,
            VolumeData::F32(_) => DType::F32,
            VolumeData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumeData::U8(v) => v.len(),
            VolumeData::U32(v) => v.len(),
            VolumeData::F32(v) => v.len(),
            VolumeData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            VolumeData::U8(v) => v.clone(),
            VolumeData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            VolumeData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            VolumeData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::U8 => VolumeData::U8(bytes.to_vec()),
            DType::U32 => VolumeData::U32(
                bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F32 => VolumeData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => VolumeData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    origin: [f64; 3],
    spacing: f64,
    dims: [usize; 3],
    dtype: DType,
    frame: FrameId,
    endianness: String,
    data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// A volume as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub geometry: GridGeometry,
    pub frame: FrameId,
    pub data: VolumeData,
    pub weights: Option<Vec<u32>>,
    pub label: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeFileError + '_ {
    move |source| VolumeFileError::Io { path: path.to_path_buf(), source }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    path.with_file_name(format!("{stem}{suffix}"))
}

impl RawVolume {
    pub fn new(geometry: GridGeometry, frame: FrameId, data: VolumeData) -> Self {
        RawVolume { geometry, frame, data, weights: None, label: None }
    }

    /// Writes `path` (the JSON sidecar) and its raw data file(s).
    pub fn save(&self, path: &Path) -> Result<(), VolumeFileError> {
        if self.data.len() != self.geometry.len() {
            return Err(VolumeFileError::Format {
                path: path.to_path_buf(),
                msg: format!("data length {} does not match grid {:?}", self.data.len(), self.geometry.dims),
            });
        }
        let data_path = sibling(path, ".raw");
        let weight_path = self.weights.as_ref().map(|_| sibling(path, ".weight.raw"));
        let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
        let sidecar = Sidecar {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            origin: self.geometry.origin,
            spacing: self.geometry.spacing,
            dims: self.geometry.dims,
            dtype: self.data.dtype(),
            frame: self.frame,
            endianness: "little".into(),
            data_file: name(&data_path),
            weight_file: weight_path.as_deref().map(name),
            label: self.label.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(path, json + "\n").map_err(io_err(path))?;
        fs::write(&data_path, self.data.to_le_bytes()).map_err(io_err(&data_path))?;
        if let (Some(w), Some(wp)) = (&self.weights, &weight_path) {
            let bytes: Vec<u8> = w.iter().flat_map(|x| x.to_le_bytes()).collect();
            fs::write(wp, bytes).map_err(io_err(wp))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VolumeFileError> {
        let fmt = |msg: String| VolumeFileError::Format { path: path.to_path_buf(), msg };
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| fmt(format!("bad sidecar: {e}")))?;
        if sc.format != FORMAT_TAG || sc.version != FORMAT_VERSION {
            return Err(fmt(format!("unsupported format {} v{}", sc.format, sc.version)));
        }
        if sc.endianness != "little" {
            return Err(fmt(format!("unsupported endianness {}", sc.endianness)));
        }
        if !(sc.spacing > 0.0) || sc.dims.contains(&0) {
            return Err(fmt("spacing and dims must be positive".into()));
        }
        let geometry = GridGeometry::new(sc.origin, sc.spacing, sc.dims);
        let n = geometry.len();
        let dir = path.parent().unwrap_or(Path::new("."));
        let data_path = dir.join(&sc.data_file);
        let bytes = fs::read(&data_path).map_err(io_err(&data_path))?;
        if bytes.len() != n * sc.dtype.size() {
            return Err(fmt(format!(
                "{} holds {} bytes, expected {}",
                sc.data_file,
                bytes.len(),
                n * sc.dtype.size()
            )));
        }
        let data = VolumeData::from_le_bytes(sc.dtype, &bytes);
        let weights = match &sc.weight_file {
            Some(wf) => {
                let wp = dir.join(wf);
                let wb = fs::read(&wp).map_err(io_err(&wp))?;
                if wb.len() != n * 4 {
                    return Err(fmt(format!("{wf} holds {} bytes, expected {}", wb.len(), n * 4)));
                }
                Some(wb.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            None => None,
        };
        Ok(RawVolume { geometry, frame: sc.frame, data, weights, label: sc.label })
    }
}

impl VoxelVolume {
    pub fn to_raw(&self, frame: FrameId) -> RawVolume {
        RawVolume {
            geometry: self.geometry,
            frame,
            data: VolumeData::F32(self.scalars.clone()),
            weights: Some(self.weight.clone()),
            label: None,
        }
    }

    /// Accepts any dtype; volumes without a weight file are fully populated.
    pub fn from_raw(raw: RawVolume) -> Self {
        let scalars: Vec<f32> = match raw.data {
            VolumeData::U8(v) => v.into_iter().map(f32::from).collect(),
            VolumeData::U32(v) => v.into_iter().map(|x| x as f32).collect(),
            VolumeData::F32(v) => v,
            VolumeData::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        };
        let weight = raw.weights.unwrap_or_else(|| vec![1; scalars.len()]);
        VoxelVolume { geometry: raw.geometry, scalars, weight }
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeFileError> {
        self.to_raw(FrameId::Reference).save(path)
    }

    pub fn load(path: &Path) -> Result<Self, VolumeFileError> {
        RawVolume::load(path).map(VoxelVolume::from_raw)
    }
}
