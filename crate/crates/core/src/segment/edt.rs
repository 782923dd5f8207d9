use std::path::Path;

use super::{LabelMask, SegmentError};
use crate::geometry::{FrameId, Vec3};
use crate::usrecon::volume::trilinear;
use crate::usrecon::{GridGeometry, RawVolume, VolumeData, VolumeFileError};

const FAR: f64 = 1e20;

/// Signed Euclidean distance in mm, sampled at voxel centers.
///
/// For a voxel outside the mask the value is the distance to the nearest
/// mask voxel center. For a voxel inside it is minus the distance to the
/// nearest non-mask voxel center, where the ring of voxels just beyond the
/// grid counts as outside.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub geometry: GridGeometry,
    pub values: Vec<f64>,
}

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let intersect = |p: usize| (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
        let mut s = intersect(v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Squared distance (in voxel units) from every voxel to the nearest
/// feature voxel, separable over the three axes.
fn squared_edt(dims: [usize; 3], feature: impl Fn(usize) -> bool) -> Vec<f64> {
    let len = dims[0] * dims[1] * dims[2];
    let mut grid: Vec<f64> = (0..len).map(|i| if feature(i) { 0.0 } else { FAR }).collect();
    let max = *dims.iter().max().unwrap();
    let (mut f, mut d, mut v, mut z) = (vec![0.0; max], vec![0.0; max], vec![0usize; max], vec![0.0; max + 1]);
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                for q in 0..n {
                    f[q] = grid[base + q * stride];
                }
                edt_1d(&f[..n], &mut d[..n], &mut v[..n], &mut z[..n + 1]);
                for q in 0..n {
                    grid[base + q * stride] = d[q];
                }
            }
        }
    }
    grid
}

pub fn distance_field(m: &LabelMask) -> Result<DistanceField, SegmentError> {
    if m.is_empty() {
        return Err(SegmentError::EmptySegment);
    }
    let g = m.geometry;
    let pd = [g.dims[0] + 2, g.dims[1] + 2, g.dims[2] + 2];
    let inside_padded = |pi: usize| -> bool {
        let i = pi % pd[0];
        let r = pi / pd[0];
        let (j, k) = (r % pd[1], r / pd[1]);
        if i == 0 || j == 0 || k == 0 || i == pd[0] - 1 || j == pd[1] - 1 || k == pd[2] - 1 {
            return false;
        }
        m.contains(g.index(i - 1, j - 1, k - 1))
    };
    let to_inside = squared_edt(pd, inside_padded);
    let to_outside = squared_edt(pd, |pi| !inside_padded(pi));
    let mut values = Vec::with_capacity(g.len());
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                let pi = (i + 1) + pd[0] * ((j + 1) + pd[1] * (k + 1));
                let v = if m.contains(g.index(i, j, k)) {
                    -to_outside[pi].sqrt() * g.spacing
                } else {
                    to_inside[pi].sqrt() * g.spacing
                };
                values.push(v);
            }
        }
    }
    Ok(DistanceField { geometry: g, values })
}

impl DistanceField {
    pub fn get(&self, ijk: [usize; 3]) -> f64 {
        self.values[self.geometry.index(ijk[0], ijk[1], ijk[2])]
    }

    /// Trilinear interpolation; `None` outside the grid.
    pub fn sample(&self, p: &Vec3) -> Option<f64> {
        trilinear(&self.geometry, p, |i| self.values[i])
    }

    pub fn to_raw(&self, frame: FrameId) -> RawVolume {
        let mut raw = RawVolume::new(self.geometry, frame, VolumeData::F64(self.values.clone()));
        raw.label = Some("SIGNED_DISTANCE_MM".into());
        raw
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeFileError> {
        self.to_raw(FrameId::Reference).save(path)
    }

    pub fn load(path: &Path) -> Result<Self, VolumeFileError> {
        let raw = RawVolume::load(path)?;
        let values = match raw.data {
            VolumeData::F64(v) => v,
            VolumeData::F32(v) => v.into_iter().map(f64::from).collect(),
            _ => {
                return Err(VolumeFileError::Format {
                    path: path.to_path_buf(),
                    msg: "distance fields must be stored as f32 or f64".into(),
                })
            }
        };
        Ok(DistanceField { geometry: raw.geometry, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::LabelKind;
    use proptest::prelude::*;

    /// All-pairs oracle, including the virtual outside ring for inside voxels.
    fn brute_force(m: &LabelMask) -> Vec<f64> {
        let g = m.geometry;
        (0..g.len())
            .map(|p| {
                let cp = g.center_of(p);
                let inside = m.contains(p);
                let mut best = f64::INFINITY;
                for q in 0..g.len() {
                    if m.contains(q) != inside {
                        best = best.min((g.center_of(q) - cp).norm());
                    }
                }
                if inside {
                    let c = g.coords(p);
                    for (ca, da) in c.iter().zip(g.dims) {
                        best = best.min(((ca + 1).min(da - ca)) as f64 * g.spacing);
                    }
                    -best
                } else {
                    best
                }
            })
            .collect()
    }

    fn assert_matches_oracle(m: &LabelMask) {
        let df = distance_field(m).unwrap();
        let oracle = brute_force(m);
        for (i, (a, b)) in df.values.iter().zip(&oracle).enumerate() {
            assert!((a - b).abs() < 1e-6, "voxel {i}: {a} vs {b}");
        }
    }

    #[test]
    fn single_voxel() {
        let g = GridGeometry::new([0.0; 3], 0.5, [16, 16, 16]);
        let mut m = LabelMask::empty(g, LabelKind::Tumor);
        let c = g.index(5, 7, 9);
        m.set(c, true);
        let df = distance_field(&m).unwrap();
        assert!(df.values[c] < 0.0);
        for p in 0..g.len() {
            if p != c {
                let expected = (g.center_of(p) - g.center_of(c)).norm() - 0.25;
                assert!((df.values[p] - expected).abs() <= 0.5);
            }
        }
        assert_matches_oracle(&m);
    }

    #[test]
    fn full_and_empty_masks() {
        let g = GridGeometry::new([0.0; 3], 1.0, [5, 6, 7]);
        let full = LabelMask { geometry: g, data: vec![1; g.len()], kind: LabelKind::Tumor };
        let df = distance_field(&full).unwrap();
        assert!(df.values.iter().all(|&v| v <= 0.0));
        assert_matches_oracle(&full);
        assert_eq!(distance_field(&LabelMask::empty(g, LabelKind::Tumor)), Err(SegmentError::EmptySegment));
    }

    #[test]
    fn random_32_cube_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = GridGeometry::new([-3.0, 1.0, 2.0], 0.7, [32, 32, 32]);
        let mut m = LabelMask::empty(g, LabelKind::Tumor);
        for _ in 0..60 {
            m.set(rng.random_range(0..g.len()), true);
        }
        // one solid block so inside distances are non-trivial
        let b = LabelMask::from_fn(g, LabelKind::Tumor, |p| (p - Vec3::new(8.0, 12.0, 13.0)).norm() < 5.0);
        for i in b.indices() {
            m.set(i, true);
        }
        assert_matches_oracle(&m);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::new([0.5, -1.0, 0.0], 0.5, [7, 5, 4]);
        let m = LabelMask::from_fn(g, LabelKind::Tumor, |p| p.x > 1.6);
        let df = distance_field(&m).unwrap();
        let path = dir.path().join("sdf.json");
        df.save(&path).unwrap();
        assert_eq!(DistanceField::load(&path).unwrap(), df);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_brute_force_on_random_masks(
            dims in prop::array::uniform3(1usize..10),
            bits in prop::collection::vec(prop::bool::weighted(0.3), 1000),
            spacing in 0.2f64..2.0,
        ) {
            let g = GridGeometry::new([0.0; 3], spacing, dims);
            let data: Vec<u8> = (0..g.len()).map(|i| bits[i] as u8).collect();
            let m = LabelMask { geometry: g, data, kind: LabelKind::Tumor };
            prop_assume!(!m.is_empty());
            let df = distance_field(&m).unwrap();
            let oracle = brute_force(&m);
            for (a, b) in df.values.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
