//! Synthetic liver phantom: analytic tumors and vessels, rasterized ground
//! truth, and a simple ultrasound frame renderer.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{interpolate, Pose, Vec3};
use crate::segment::{LabelKind, LabelMask};
use crate::usrecon::{GridGeometry, UsFrame, VoxelVolume};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensity {
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: Intensity,
}

impl Ellipsoid {
    pub fn sphere(center: [f64; 3], r: f64, intensity: Intensity) -> Self {
        Ellipsoid { center, radii: [r; 3], intensity }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.radii[0] * self.radii[1] * self.radii[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub polyline: Vec<[f64; 3]>,
    pub radius: f64,
    pub intensity: Intensity,
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

impl Tube {
    pub fn contains(&self, p: &Vec3) -> bool {
        self.polyline
            .windows(2)
            .any(|w| segment_distance(p, &Vec3::from(w[0]), &Vec3::from(w[1])) <= self.radius)
    }

    /// Cylinder volume along the polyline, ignoring joints and end caps.
    pub fn volume(&self) -> f64 {
        let length: f64 = self.polyline.windows(2).map(|w| (Vec3::from(w[1]) - Vec3::from(w[0])).norm()).sum();
        PI * self.radius * self.radius * length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub tumors: Vec<Ellipsoid>,
    pub vessels: Vec<Tube>,
    pub background: Intensity,
    /// Standard deviation of the multiplicative speckle applied per pixel.
    pub speckle_sigma: f64,
    pub seed: u64,
    /// Field of view, reference frame, mm.
    pub fov_min: [f64; 3],
    pub fov_max: [f64; 3],
}

pub const DEFAULT_TUMOR_RADIUS_MM: f64 = 15.0;

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::sphere(DEFAULT_TUMOR_RADIUS_MM)
    }
}

impl PhantomSpec {
    /// Single spherical tumor at the origin with one vessel passing by.
    pub fn sphere(radius: f64) -> Self {
        let half = (radius + 20.0).max(35.0);
        PhantomSpec {
            tumors: vec![Ellipsoid::sphere([0.0; 3], radius, Intensity { mean: 200.0, sigma: 8.0 })],
            vessels: vec![Tube {
                polyline: vec![[-half + 2.0, radius + 8.0, -5.0], [half - 2.0, radius + 8.0, 5.0]],
                radius: 3.0,
                intensity: Intensity { mean: 15.0, sigma: 4.0 },
            }],
            background: Intensity { mean: 90.0, sigma: 8.0 },
            speckle_sigma: 0.08,
            seed: 1,
            fov_min: [-half; 3],
            fov_max: [half; 3],
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Invalid(m));
        let check_intensity = |i: &Intensity| (0.0..=255.0).contains(&i.mean) && i.sigma >= 0.0 && i.sigma.is_finite();
        for (k, t) in self.tumors.iter().enumerate() {
            if !t.radii.iter().all(|r| *r > 0.0 && r.is_finite()) {
                return bad(format!("tumor {k} radii must be positive"));
            }
            if !check_intensity(&t.intensity) {
                return bad(format!("tumor {k} intensity outside [0, 255]"));
            }
        }
        for (k, v) in self.vessels.iter().enumerate() {
            if !(v.radius > 0.0 && v.radius.is_finite()) || v.polyline.len() < 2 {
                return bad(format!("vessel {k} needs a positive radius and two or more points"));
            }
            if !check_intensity(&v.intensity) {
                return bad(format!("vessel {k} intensity outside [0, 255]"));
            }
        }
        if !check_intensity(&self.background) {
            return bad("background intensity outside [0, 255]".into());
        }
        if !(self.speckle_sigma >= 0.0 && self.speckle_sigma.is_finite()) {
            return bad("speckle sigma must be non-negative".into());
        }
        if !(0..3).all(|a| self.fov_max[a] > self.fov_min[a]) {
            return bad("empty field of view".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PhantomError> {
        let spec: PhantomSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), PhantomError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub volume: VoxelVolume,
    pub tumor: LabelMask,
    pub vessel: LabelMask,
    pub tumor_centroids: Vec<Vec3>,
    pub tumor_volumes: Vec<f64>,
    pub vessel_volumes: Vec<f64>,
}

fn draw(n: &Normal<f64>, rng: &mut ChaCha8Rng, i: &Intensity) -> f32 {
    let noise = if i.sigma > 0.0 { n.sample(rng) * i.sigma } else { 0.0 };
    (i.mean + noise).clamp(0.0, 255.0) as f32
}

/// Voxelizes the phantom. Where a tumor and a vessel overlap the voxel is
/// tumor.
pub fn rasterize(spec: &PhantomSpec, spacing: f64) -> Result<GroundTruth, PhantomError> {
    spec.validate()?;
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(PhantomError::Invalid(format!("spacing {spacing} must be positive")));
    }
    let g = GridGeometry::covering(Vec3::from(spec.fov_min), Vec3::from(spec.fov_max), spacing);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tumor = LabelMask::empty(g, LabelKind::Tumor);
    let mut vessel = LabelMask::empty(g, LabelKind::Vessel);
    let mut scalars = Vec::with_capacity(g.len());
    for idx in 0..g.len() {
        let p = g.center_of(idx);
        let value = if let Some(t) = spec.tumors.iter().find(|t| t.contains(&p)) {
            tumor.set(idx, true);
            draw(&unit, &mut rng, &t.intensity)
        } else if let Some(v) = spec.vessels.iter().find(|v| v.contains(&p)) {
            vessel.set(idx, true);
            draw(&unit, &mut rng, &v.intensity)
        } else {
            draw(&unit, &mut rng, &spec.background)
        };
        scalars.push(value);
    }
    Ok(GroundTruth {
        volume: VoxelVolume::filled(g, scalars),
        tumor,
        vessel,
        tumor_centroids: spec.tumors.iter().map(|t| Vec3::from(t.center)).collect(),
        tumor_volumes: spec.tumors.iter().map(Ellipsoid::volume).collect(),
        vessel_volumes: spec.vessels.iter().map(Tube::volume).collect(),
    })
}

/// Image geometry of a simulated probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
    /// mm per pixel along `u` and `v`.
    pub pixel_spacing: (f64, f64),
}

/// Samples the phantom on the image plane of `image_pose` (IMAGE in
/// REFERENCE). Pixels outside the volume are 0; the rest are multiplied by
/// `1 + speckle_sigma · N(0, 1)`.
pub fn render_frame(gt: &GroundTruth, image_pose: &Pose, image: &ImageGeometry, speckle_sigma: f64, seed: u64) -> UsFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (du, dv) = image.pixel_spacing;
    let mut pixels = Vec::with_capacity(image.width * image.height);
    for v in 0..image.height {
        for u in 0..image.width {
            let p = image_pose.transform_point(&Vec3::new(u as f64 * du, v as f64 * dv, 0.0));
            let value = match gt.volume.sample_trilinear(&p) {
                Some(x) => {
                    let s = if speckle_sigma > 0.0 { 1.0 + speckle_sigma * unit.sample(&mut rng) } else { 1.0 };
                    (x * s).round().clamp(0.0, 255.0) as u8
                }
                None => 0,
            };
            pixels.push(value);
        }
    }
    UsFrame::new(image.width, image.height, pixels, image.pixel_spacing, *image_pose, image_pose.timestamp)
        .expect("renderer produces a well-formed frame")
}

/// `n` poses evenly spaced in time over `[0, duration]`, interpolated from
/// `start` to `end`.
pub fn sweep_script(start: &Pose, end: &Pose, n: usize, duration: f64) -> Result<Vec<Pose>, PhantomError> {
    if n < 2 {
        return Err(PhantomError::Invalid(format!("a sweep needs at least 2 frames, got {n}")));
    }
    if !(duration > 0.0) {
        return Err(PhantomError::Invalid(format!("sweep duration {duration} must be positive")));
    }
    let a = start.with_timestamp(0.0);
    let b = end.with_timestamp(duration);
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            interpolate(&a, &b, f)
                .map(|p| p.with_timestamp(duration * f))
                .map_err(|e| PhantomError::Invalid(e.to_string()))
        })
        .collect()
}
