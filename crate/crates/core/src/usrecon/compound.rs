use super::volume::{GridGeometry, VoxelVolume};
use super::{ReconError, UsFrame};
use crate::geometry::Vec3;

/// Largest volume `compound` will allocate unless told otherwise (512³).
pub const DEFAULT_VOXEL_BUDGET: usize = 512 * 512 * 512;

/// Forward-maps every pixel of every frame to its nearest voxel and
/// averages overlapping contributions.
///
/// The grid is the bounding box of all mapped pixels at `spacing`. Sums
/// are accumulated as integers, so the result does not depend on the order
/// in which contributions arrive.
pub fn compound(frames: &[UsFrame], spacing: f64) -> Result<VoxelVolume, ReconError> {
    compound_with_budget(frames, spacing, DEFAULT_VOXEL_BUDGET)
}

pub fn compound_with_budget(frames: &[UsFrame], spacing: f64, budget: usize) -> Result<VoxelVolume, ReconError> {
    if frames.is_empty() {
        return Err(ReconError::EmptySweep);
    }
    if !(spacing > 0.0) {
        return Err(ReconError::InvalidFrame(format!("voxel spacing {spacing} must be positive")));
    }

    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for f in frames {
        if f.width == 0 || f.height == 0 {
            continue;
        }
        for (u, v) in [(0, 0), (f.width - 1, 0), (0, f.height - 1), (f.width - 1, f.height - 1)] {
            let p = f.pixel_position(u, v);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
    }
    if !lo.iter().all(|x| x.is_finite()) {
        return Err(ReconError::EmptySweep);
    }

    let mut dims = [0usize; 3];
    for a in 0..3 {
        let n = ((hi[a] - lo[a]) / spacing).round() + 1.0;
        if n > budget as f64 {
            return Err(ReconError::Budget { voxels: usize::MAX, budget });
        }
        dims[a] = n as usize;
    }
    let voxels = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).unwrap_or(usize::MAX);
    if voxels > budget {
        return Err(ReconError::Budget { voxels, budget });
    }
    let geometry = GridGeometry::new([lo.x, lo.y, lo.z], spacing, dims);

    let mut sums = vec![0u64; voxels];
    let mut weight = vec![0u32; voxels];
    let max_idx = [dims[0] as f64 - 1.0, dims[1] as f64 - 1.0, dims[2] as f64 - 1.0];
    for f in frames {
        let origin = f.image_pose.transform_point(&Vec3::zeros());
        let du = f.image_pose.transform_vector(&Vec3::new(f.pixel_spacing.0, 0.0, 0.0));
        let dv = f.image_pose.transform_vector(&Vec3::new(0.0, f.pixel_spacing.1, 0.0));
        for v in 0..f.height {
            let row = origin + dv * v as f64;
            for u in 0..f.width {
                let p = row + du * u as f64;
                let mut ijk = [0usize; 3];
                for a in 0..3 {
                    ijk[a] = ((p[a] - lo[a]) / spacing).round().clamp(0.0, max_idx[a]) as usize;
                }
                let idx = geometry.index(ijk[0], ijk[1], ijk[2]);
                sums[idx] += u64::from(f.pixels[v * f.width + u]);
                weight[idx] += 1;
            }
        }
    }

    let scalars = sums
        .iter()
        .zip(&weight)
        .map(|(&s, &w)| if w == 0 { 0.0 } else { (s as f64 / w as f64) as f32 })
        .collect();
    Ok(VoxelVolume { geometry, scalars, weight })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FrameId, Pose};

    fn frame(w: usize, h: usize, pixels: Vec<u8>, spacing: f64, pose: Pose) -> UsFrame {
        UsFrame::new(w, h, pixels, (spacing, spacing), pose, 0.0).unwrap()
    }

    #[test]
    fn single_axis_aligned_frame() {
        let pixels: Vec<u8> = (0..12).map(|i| i as u8 * 10).collect();
        let pose = Pose::from_translation(Vec3::new(1.0, 2.0, 3.0), FrameId::Reference);
        let f = frame(4, 3, pixels.clone(), 0.5, pose);
        let v = compound(&[f], 0.5).unwrap();
        assert_eq!(v.geometry.dims, [4, 3, 1]);
        assert_eq!(v.geometry.origin, [1.0, 2.0, 3.0]);
        for (i, &p) in pixels.iter().enumerate() {
            assert_eq!(v.scalars[i], p as f32);
            assert_eq!(v.weight[i], 1);
        }
    }

    #[test]
    fn off_plane_voxels_are_holes() {
        // a tilted frame spans several z-planes but fills only one voxel per column
        let pose = Pose::from_axis_angle(Vec3::x(), 0.3, Vec3::zeros(), FrameId::Reference);
        let f = frame(8, 8, vec![100; 64], 0.5, pose);
        let v = compound(&[f], 0.5).unwrap();
        assert!(v.geometry.dims[2] > 1);
        assert!(v.hole_count() > 0);
        assert_eq!(v.weight.iter().map(|&w| w as usize).sum::<usize>(), 64);
    }

    #[test]
    fn coincident_frames_average() {
        let pose = Pose::identity(FrameId::Reference);
        let a = frame(3, 3, vec![100; 9], 1.0, pose);
        let b = frame(3, 3, vec![200; 9], 1.0, pose);
        let v = compound(&[a, b], 1.0).unwrap();
        assert!(v.scalars.iter().all(|&s| s == 150.0));
        assert!(v.weight.iter().all(|&w| w == 2));
    }

    #[test]
    fn empty_and_budget_errors() {
        assert_eq!(compound(&[], 0.5), Err(ReconError::EmptySweep));
        let a = frame(10, 10, vec![1; 100], 1.0, Pose::identity(FrameId::Reference));
        assert!(matches!(compound_with_budget(&[a], 1.0, 50), Err(ReconError::Budget { .. })));
    }

    #[test]
    fn translation_equivariance() {
        let mk = |t: Vec3| {
            (0..4)
                .map(|k| {
                    let pose = Pose::from_translation(Vec3::new(0.0, 0.0, k as f64 * 0.5) + t, FrameId::Reference);
                    let pixels = (0..25).map(|i| (i * 7 + k * 3) as u8).collect();
                    frame(5, 5, pixels, 0.5, pose)
                })
                .collect::<Vec<_>>()
        };
        let t = Vec3::new(12.0, -7.5, 3.0);
        let a = compound(&mk(Vec3::zeros()), 0.5).unwrap();
        let b = compound(&mk(t), 0.5).unwrap();
        assert_eq!(a.scalars, b.scalars);
        assert_eq!(a.weight, b.weight);
        for ax in 0..3 {
            assert!((b.geometry.origin[ax] - a.geometry.origin[ax] - t[ax]).abs() < 1e-12);
        }
    }

    #[test]
    fn filled_mean_equals_pixel_mean_without_overlap() {
        let frames: Vec<UsFrame> = (0..6)
            .map(|k| {
                let pose = Pose::from_translation(Vec3::new(0.0, 0.0, k as f64), FrameId::Reference);
                let pixels = (0..16).map(|i| ((i * 31 + k * 17) % 256) as u8).collect();
                frame(4, 4, pixels, 1.0, pose)
            })
            .collect();
        let pixel_mean = frames.iter().flat_map(|f| f.pixels.iter()).map(|&p| p as f64).sum::<f64>() / 96.0;
        let v = compound(&frames, 1.0).unwrap();
        let filled: Vec<f64> = v.scalars.iter().zip(&v.weight).filter(|(_, &w)| w > 0).map(|(&s, _)| s as f64).collect();
        let mean = filled.iter().sum::<f64>() / filled.len() as f64;
        assert!((mean - pixel_mean).abs() < 1e-6);
    }
}
