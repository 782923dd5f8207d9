use serde::{Deserialize, Serialize};

use super::{LabelKind, LabelMask};
use crate::usrecon::VoxelVolume;

/// Anything that turns an intensity volume into a mask on the same grid.
pub trait Segmenter {
    fn name(&self) -> &str;
    fn segment(&self, v: &VoxelVolume) -> LabelMask;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselParams {
    /// Voxels at or below this intensity are vessel candidates.
    pub threshold: f32,
    pub min_volume_mm3: f64,
}

impl Default for VesselParams {
    fn default() -> Self {
        VesselParams { threshold: 40.0, min_volume_mm3: 50.0 }
    }
}

/// Hypoechoic thresholding followed by removal of small 26-connected
/// components. Hole voxels are never labeled.
pub fn vessel_baseline(v: &VoxelVolume, params: &VesselParams) -> LabelMask {
    let mut mask = LabelMask::empty(v.geometry, LabelKind::Vessel);
    for i in 0..v.scalars.len() {
        mask.data[i] = (!v.is_hole(i) && v.scalars[i] <= params.threshold) as u8;
    }
    let min_voxels = params.min_volume_mm3 / v.geometry.voxel_volume();
    for comp in mask.components26() {
        if (comp.len() as f64) < min_voxels {
            for i in comp {
                mask.data[i] = 0;
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VesselBaseline {
    pub params: VesselParams,
}

impl Segmenter for VesselBaseline {
    fn name(&self) -> &str {
        "threshold-baseline"
    }

    fn segment(&self, v: &VoxelVolume) -> LabelMask {
        vessel_baseline(v, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::usrecon::GridGeometry;
    use std::f64::consts::PI;

    fn tube_volume(tubes: &[(f64, f64, f64)]) -> VoxelVolume {
        // tubes along x: (y offset, radius, half length)
        let g = GridGeometry::new([-20.0, -15.0, -8.0], 0.5, [81, 61, 33]);
        let scalars = (0..g.len())
            .map(|i| {
                let p: Vec3 = g.center_of(i);
                let dark = tubes.iter().any(|&(y, r, hl)| p.x.abs() <= hl && ((p.y - y).powi(2) + p.z.powi(2)).sqrt() <= r);
                if dark { 10.0 } else { 150.0 }
            })
            .collect();
        VoxelVolume::filled(g, scalars)
    }

    fn oracle_components(m: &LabelMask) -> usize {
        let d = m.geometry.dims;
        let mut seen = vec![false; m.data.len()];
        let mut count = 0;
        for s in 0..m.data.len() {
            if m.data[s] == 0 || seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(c) = stack.pop() {
                let [i, j, k] = m.geometry.coords(c);
                for dk in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for di in -1i64..=1 {
                            let (a, b, cc) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                            if a < 0 || b < 0 || cc < 0 || a >= d[0] as i64 || b >= d[1] as i64 || cc >= d[2] as i64 {
                                continue;
                            }
                            let n = m.geometry.index(a as usize, b as usize, cc as usize);
                            if m.data[n] != 0 && !seen[n] {
                                seen[n] = true;
                                stack.push(n);
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn single_tube_volume() {
        let v = tube_volume(&[(0.0, 3.0, 15.0)]);
        let m = vessel_baseline(&v, &VesselParams { threshold: 40.0, min_volume_mm3: 10.0 });
        assert_eq!(m.components26().len(), 1);
        let analytic = PI * 9.0 * 30.0;
        assert!((m.volume_mm3() - analytic).abs() / analytic < 0.10, "{}", m.volume_mm3());
    }

    #[test]
    fn bright_volume_gives_empty_mask() {
        let v = tube_volume(&[]);
        assert!(VesselBaseline::default().segment(&v).is_empty());
    }

    #[test]
    fn small_components_are_filtered() {
        let v = tube_volume(&[(-7.0, 3.0, 15.0), (7.0, 1.0, 5.0)]);
        let small = PI * 1.0 * 10.0;
        let keep_both = vessel_baseline(&v, &VesselParams { threshold: 40.0, min_volume_mm3: 1.0 });
        assert_eq!(oracle_components(&keep_both), 2);
        let m = vessel_baseline(&v, &VesselParams { threshold: 40.0, min_volume_mm3: small * 1.5 });
        assert_eq!(oracle_components(&m), 1);
        assert_eq!(m.components26().len(), 1);
    }

    #[test]
    fn holes_are_not_vessels() {
        let g = GridGeometry::new([0.0; 3], 0.5, [4, 4, 4]);
        let v = VoxelVolume::empty(g);
        assert!(vessel_baseline(&v, &VesselParams { threshold: 40.0, min_volume_mm3: 0.0 }).is_empty());
    }
}
