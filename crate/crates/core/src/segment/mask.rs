use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SegmentError;
use crate::geometry::{FrameId, Vec3};
use crate::usrecon::{GridGeometry, RawVolume, VolumeData, VolumeFileError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelKind {
    Tumor,
    Vessel,
    Margin,
    Clip,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Tumor => "TUMOR",
            LabelKind::Vessel => "VESSEL",
            LabelKind::Margin => "MARGIN",
            LabelKind::Clip => "CLIP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "TUMOR" => Some(LabelKind::Tumor),
            "VESSEL" => Some(LabelKind::Vessel),
            "MARGIN" => Some(LabelKind::Margin),
            "CLIP" => Some(LabelKind::Clip),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Add,
    Erase,
}

/// Binary mask on a voxel grid; `data[i]` is 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub geometry: GridGeometry,
    pub data: Vec<u8>,
    pub kind: LabelKind,
}

impl LabelMask {
    pub fn empty(geometry: GridGeometry, kind: LabelKind) -> Self {
        LabelMask { geometry, data: vec![0; geometry.len()], kind }
    }

    pub fn from_fn(geometry: GridGeometry, kind: LabelKind, mut inside: impl FnMut(Vec3) -> bool) -> Self {
        let data = (0..geometry.len()).map(|i| inside(geometry.center_of(i)) as u8).collect();
        LabelMask { geometry, data, kind }
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.data[idx] != 0
    }

    #[inline]
    pub fn set(&mut self, idx: usize, on: bool) {
        self.data[idx] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.geometry.voxel_volume()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i)
    }

    /// True if any set voxel lies on the outer face of the grid.
    pub fn touches_boundary(&self) -> bool {
        let d = self.geometry.dims;
        self.indices().any(|idx| {
            let c = self.geometry.coords(idx);
            (0..3).any(|a| c[a] == 0 || c[a] + 1 == d[a])
        })
    }

    /// Mean of the set voxel centers.
    pub fn centroid(&self) -> Result<Vec3, SegmentError> {
        let mut sum = [0u64; 3];
        let mut n = 0u64;
        for idx in self.indices() {
            let c = self.geometry.coords(idx);
            for a in 0..3 {
                sum[a] += c[a] as u64;
            }
            n += 1;
        }
        if n == 0 {
            return Err(SegmentError::EmptySegment);
        }
        let g = &self.geometry;
        Ok(Vec3::new(
            g.origin[0] + g.spacing * sum[0] as f64 / n as f64,
            g.origin[1] + g.spacing * sum[1] as f64 / n as f64,
            g.origin[2] + g.spacing * sum[2] as f64 / n as f64,
        ))
    }

    /// Sørensen–Dice overlap with a mask on the same grid.
    pub fn dice(&self, other: &LabelMask) -> f64 {
        assert_eq!(self.geometry, other.geometry, "dice on different grids");
        let (mut both, mut a, mut b) = (0usize, 0usize, 0usize);
        for (&x, &y) in self.data.iter().zip(&other.data) {
            let (x, y) = (x != 0, y != 0);
            a += x as usize;
            b += y as usize;
            both += (x && y) as usize;
        }
        if a + b == 0 {
            1.0
        } else {
            2.0 * both as f64 / (a + b) as f64
        }
    }

    /// Sets or clears every voxel whose center lies within the brush sphere.
    pub fn manual_edit(&self, op: EditOp, center: Vec3, radius: f64) -> LabelMask {
        let mut out = self.clone();
        let g = self.geometry;
        let lo = g.to_voxel(&center.add_scalar(-radius));
        let hi = g.to_voxel(&center.add_scalar(radius));
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let l = lo[a].ceil().max(0.0);
            let h = hi[a].floor().min(g.dims[a] as f64 - 1.0);
            if h < l {
                return out;
            }
            range[a] = (l as usize, h as usize);
        }
        let r2 = radius * radius;
        for k in range[2].0..=range[2].1 {
            for j in range[1].0..=range[1].1 {
                for i in range[0].0..=range[0].1 {
                    if (g.center([i, j, k]) - center).norm_squared() <= r2 {
                        out.set(g.index(i, j, k), op == EditOp::Add);
                    }
                }
            }
        }
        out
    }

    /// 26-connected components, each a sorted list of voxel indices, in
    /// order of their smallest index.
    pub fn components26(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.data.len()];
        let mut out = Vec::new();
        for start in 0..self.data.len() {
            if !self.contains(start) || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut head = 0;
            while head < comp.len() {
                let cur = comp[head];
                head += 1;
                for n in self.geometry.neighbors26(cur) {
                    if self.contains(n) && !seen[n] {
                        seen[n] = true;
                        comp.push(n);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn to_raw(&self, frame: FrameId) -> RawVolume {
        let mut raw = RawVolume::new(self.geometry, frame, VolumeData::U8(self.data.clone()));
        raw.label = Some(self.kind.as_str().to_string());
        raw
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeFileError> {
        self.to_raw(FrameId::Reference).save(path)
    }

    /// Loads a mask; any non-zero value counts as set. `default_kind` is
    /// used when the file carries no label.
    pub fn load(path: &Path, default_kind: LabelKind) -> Result<Self, VolumeFileError> {
        let raw = RawVolume::load(path)?;
        let kind = raw.label.as_deref().and_then(LabelKind::parse).unwrap_or(default_kind);
        let data = match raw.data {
            VolumeData::U8(v) => v.into_iter().map(|x| (x != 0) as u8).collect(),
            _ => {
                return Err(VolumeFileError::Format {
                    path: path.to_path_buf(),
                    msg: "label masks must be stored as u8".into(),
                })
            }
        };
        Ok(LabelMask { geometry: raw.geometry, data, kind })
    }
}
