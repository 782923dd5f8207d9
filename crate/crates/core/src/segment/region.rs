use serde::{Deserialize, Serialize};

use super::{LabelKind, LabelMask, SegmentError};
use crate::usrecon::VoxelVolume;

/// Seed voxels as `(i, j, k)` grid indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub inside: Vec<[usize; 3]>,
    #[serde(default)]
    pub outside: Vec<[usize; 3]>,
}

const UNSET: u8 = 0;
const IN: u8 = 1;
const OUT: u8 = 2;

struct Region {
    frontier: Vec<usize>,
    sum: f64,
    count: u64,
}

impl Region {
    fn mean(&self) -> f64 {
        self.sum / self.count.max(1) as f64
    }

    fn candidates(&self, v: &VoxelVolume, label: &[u8], tol: f64) -> Vec<usize> {
        let mean = self.mean();
        let mut out = Vec::new();
        for &f in &self.frontier {
            for n in v.geometry.neighbors6(f) {
                if label[n] == UNSET && !v.is_hole(n) && (v.scalars[n] as f64 - mean).abs() <= tol {
                    out.push(n);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn absorb(&mut self, v: &VoxelVolume, accepted: Vec<usize>) {
        for &n in &accepted {
            self.sum += v.scalars[n] as f64;
            self.count += 1;
        }
        self.frontier = accepted;
    }
}

fn seed_indices(v: &VoxelVolume, seeds: &[[usize; 3]]) -> Result<Vec<usize>, SegmentError> {
    let g = &v.geometry;
    let mut out = Vec::with_capacity(seeds.len());
    for s in seeds {
        if !(0..3).all(|a| s[a] < g.dims[a]) {
            return Err(SegmentError::InvalidSeed(format!("seed {s:?} outside grid {:?}", g.dims)));
        }
        let idx = g.index(s[0], s[1], s[2]);
        if v.is_hole(idx) {
            return Err(SegmentError::InvalidSeed(format!("seed {s:?} is a hole voxel")));
        }
        out.push(idx);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Seeded region growing with 6-connectivity.
///
/// Growth proceeds in breadth-first levels. During a level every frontier
/// neighbour that is not a hole and lies within `tol` of the region mean
/// (as of the start of the level) is accepted. Inside and outside regions
/// grow in lockstep, so a voxel claimed by both in the same level is one
/// the two seed classes reach in the same number of steps; such ties go to
/// the outside region. The result does not depend on seed order.
pub fn region_grow(v: &VoxelVolume, seeds: &SeedSet, tol: f64) -> Result<LabelMask, SegmentError> {
    if seeds.inside.is_empty() {
        return Err(SegmentError::InvalidSeed("no inside seeds".into()));
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(SegmentError::InvalidSeed(format!("tolerance {tol} must be non-negative")));
    }
    let inside = seed_indices(v, &seeds.inside)?;
    let outside = seed_indices(v, &seeds.outside)?;
    if let Some(c) = inside.iter().find(|i| outside.binary_search(i).is_ok()) {
        return Err(SegmentError::SeedConflict(v.geometry.coords(*c)));
    }

    let mut label = vec![UNSET; v.geometry.len()];
    let mut regions = [
        Region { frontier: Vec::new(), sum: 0.0, count: 0 },
        Region { frontier: Vec::new(), sum: 0.0, count: 0 },
    ];
    for &i in &inside {
        label[i] = IN;
    }
    for &i in &outside {
        label[i] = OUT;
    }
    regions[0].absorb(v, inside);
    regions[1].absorb(v, outside);

    while regions.iter().any(|r| !r.frontier.is_empty()) {
        let cin = regions[0].candidates(v, &label, tol);
        let cout = regions[1].candidates(v, &label, tol);
        for &n in &cout {
            label[n] = OUT;
        }
        let cin: Vec<usize> = cin.into_iter().filter(|n| label[*n] == UNSET).collect();
        for &n in &cin {
            label[n] = IN;
        }
        regions[0].absorb(v, cin);
        regions[1].absorb(v, cout);
    }

    let mask = LabelMask {
        geometry: v.geometry,
        data: label.iter().map(|&l| (l == IN) as u8).collect(),
        kind: LabelKind::Tumor,
    };
    if mask.is_empty() {
        return Err(SegmentError::EmptySegment);
    }
    Ok(mask)
}
