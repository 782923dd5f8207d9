use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Regular isotropic grid. Voxel `(i, j, k)` has its center at
/// `origin + spacing * (i, j, k)`; data is stored with `i` fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl GridGeometry {
    pub fn new(origin: [f64; 3], spacing: f64, dims: [usize; 3]) -> Self {
        GridGeometry { origin, spacing, dims }
    }

    /// Smallest grid at `spacing` whose voxel centers cover `[min, max]`.
    pub fn covering(min: Vec3, max: Vec3, spacing: f64) -> Self {
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = ((max[a] - min[a]) / spacing).ceil().max(0.0) as usize + 1;
        }
        GridGeometry::new([min.x, min.y, min.z], spacing, dims)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.powi(3)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    pub fn contains_index(&self, ijk: [i64; 3]) -> bool {
        (0..3).all(|a| ijk[a] >= 0 && (ijk[a] as usize) < self.dims[a])
    }

    #[inline]
    pub fn center(&self, ijk: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin[0] + self.spacing * ijk[0] as f64,
            self.origin[1] + self.spacing * ijk[1] as f64,
            self.origin[2] + self.spacing * ijk[2] as f64,
        )
    }

    pub fn center_of(&self, idx: usize) -> Vec3 {
        self.center(self.coords(idx))
    }

    /// Continuous voxel coordinates of a point.
    #[inline]
    pub fn to_voxel(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            (p.x - self.origin[0]) / self.spacing,
            (p.y - self.origin[1]) / self.spacing,
            (p.z - self.origin[2]) / self.spacing,
        )
    }

    /// Index of the voxel whose center is nearest to `p`, if inside the grid.
    pub fn nearest_voxel(&self, p: &Vec3) -> Option<[usize; 3]> {
        let v = self.to_voxel(p);
        let ijk = [v.x.round() as i64, v.y.round() as i64, v.z.round() as i64];
        self.contains_index(ijk)
            .then(|| [ijk[0] as usize, ijk[1] as usize, ijk[2] as usize])
    }

    /// Physical extent covered by voxel centers.
    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.spacing * (self.dims[0].saturating_sub(1)) as f64,
            self.spacing * (self.dims[1].saturating_sub(1)) as f64,
            self.spacing * (self.dims[2].saturating_sub(1)) as f64,
        )
    }

    /// Face-connected neighbours of a voxel that lie inside the grid.
    pub fn neighbors6(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let [i, j, k] = self.coords(idx);
        const OFFS: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
        OFFS.iter().filter_map(move |o| {
            let n = [i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]];
            self.contains_index(n)
                .then(|| self.index(n[0] as usize, n[1] as usize, n[2] as usize))
        })
    }

    /// Neighbours sharing a face, edge or corner.
    pub fn neighbors26(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let [i, j, k] = self.coords(idx);
        (-1i64..=1)
            .flat_map(|dz| (-1i64..=1).flat_map(move |dy| (-1i64..=1).map(move |dx| [dx, dy, dz])))
            .filter(|o| *o != [0, 0, 0])
            .filter_map(move |o| {
                let n = [i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]];
                self.contains_index(n)
                    .then(|| self.index(n[0] as usize, n[1] as usize, n[2] as usize))
            })
    }
}

/// Intensity volume in the reference-sensor frame. `weight[i] == 0` marks a
/// hole: no pixel contributed to that voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub geometry: GridGeometry,
    pub scalars: Vec<f32>,
    pub weight: Vec<u32>,
}

impl VoxelVolume {
    /// Volume with every voxel a hole.
    pub fn empty(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        VoxelVolume { geometry, scalars: vec![0.0; n], weight: vec![0; n] }
    }

    /// Fully populated volume (weight one everywhere).
    pub fn filled(geometry: GridGeometry, scalars: Vec<f32>) -> Self {
        assert_eq!(geometry.len(), scalars.len(), "scalar count does not match grid");
        let weight = vec![1; scalars.len()];
        VoxelVolume { geometry, scalars, weight }
    }

    pub fn is_hole(&self, idx: usize) -> bool {
        self.weight[idx] == 0
    }

    pub fn hole_count(&self) -> usize {
        self.weight.iter().filter(|&&w| w == 0).count()
    }

    pub fn get(&self, ijk: [usize; 3]) -> f32 {
        self.scalars[self.geometry.index(ijk[0], ijk[1], ijk[2])]
    }

    /// Trilinear sample at a physical point. Returns `None` when any of the
    /// eight surrounding voxel centers falls outside the grid.
    pub fn sample_trilinear(&self, p: &Vec3) -> Option<f64> {
        trilinear(&self.geometry, p, |idx| self.scalars[idx] as f64)
    }
}

pub(crate) fn trilinear(g: &GridGeometry, p: &Vec3, value: impl Fn(usize) -> f64) -> Option<f64> {
    let v = g.to_voxel(p);
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        if !(v[a] >= 0.0) || v[a] > (g.dims[a] - 1) as f64 {
            return None;
        }
        // points on the last plane use the last cell with fraction 1
        let b = (v[a].floor() as usize).min(g.dims[a].saturating_sub(2));
        base[a] = b;
        frac[a] = v[a] - b as f64;
    }
    let step = |a: usize| if g.dims[a] > 1 { 1 } else { 0 };
    let mut acc = 0.0;
    for dz in 0..2usize {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        for dy in 0..2usize {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            for dx in 0..2usize {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                let w = wx * wy * wz;
                if w == 0.0 {
                    continue;
                }
                let idx = g.index(base[0] + dx * step(0), base[1] + dy * step(1), base[2] + dz * step(2));
                acc += w * value(idx);
            }
        }
    }
    Some(acc)
}
