//! Shared fixtures for the benchmarks.

use usnav_core::geometry::{FrameId, Pose, Vec3};
use usnav_core::phantom::{rasterize, render_frame, sweep_script, GroundTruth, ImageGeometry, PhantomSpec};
use usnav_core::segment::{LabelKind, LabelMask};
use usnav_core::usrecon::{GridGeometry, UsFrame};

/// Ground truth for the default sphere phantom of radius `r` at `spacing`.
pub fn phantom(r: f64, spacing: f64) -> GroundTruth {
    rasterize(&PhantomSpec::sphere(r), spacing).expect("valid phantom")
}

/// A linear sweep of `n` axial frames through the phantom field of view.
pub fn sweep(gt: &GroundTruth, spec: &PhantomSpec, spacing: f64, n: usize) -> Vec<UsFrame> {
    let (lo, hi) = (spec.fov_min, spec.fov_max);
    let count = |a: usize| ((hi[a] - lo[a] - 6.0) / spacing).floor() as usize + 1;
    let image = ImageGeometry { width: count(0), height: count(1), pixel_spacing: (spacing, spacing) };
    let start = Pose::from_translation(Vec3::new(lo[0] + 3.0, lo[1] + 3.0, lo[2] + 3.0), FrameId::Reference);
    let end = Pose::from_translation(Vec3::new(lo[0] + 3.0, lo[1] + 3.0, hi[2] - 3.0), FrameId::Reference);
    sweep_script(&start, &end, n, 1.0)
        .expect("sweep")
        .iter()
        .enumerate()
        .map(|(i, p)| render_frame(gt, p, &image, spec.speckle_sigma, i as u64))
        .collect()
}

/// Solid sphere mask of radius `r` on a cubic grid at `spacing`.
pub fn sphere_mask(r: f64, spacing: f64) -> LabelMask {
    let n = (2.0 * (r + 4.0) / spacing) as usize + 1;
    let h = (n - 1) as f64 * spacing / 2.0;
    let g = GridGeometry::new([-h, -h, -h], spacing, [n, n, n]);
    LabelMask::from_fn(g, LabelKind::Tumor, |p| p.norm() <= r)
}
