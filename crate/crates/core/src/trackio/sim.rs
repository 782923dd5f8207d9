//! Simulated electromagnetic tracker.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Device, TrackedSample};
use crate::geometry::{sample_at, FrameId, Pose, Vec3};

/// Zero-mean Gaussian jitter. Rotation noise is a random rotation vector
/// with each component drawn with `rot_sigma_deg`; translation noise is
/// drawn per axis with `trans_sigma_mm`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseModel {
    pub rot_sigma_deg: f64,
    pub trans_sigma_mm: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self::default()
    }

    fn is_zero(&self) -> bool {
        self.rot_sigma_deg == 0.0 && self.trans_sigma_mm == 0.0
    }
}

/// Ground-truth pose timelines (WORLD frame) per device.
#[derive(Debug, Clone, Default)]
pub struct TrackerScript {
    pub timelines: BTreeMap<Device, Vec<Pose>>,
}

impl TrackerScript {
    pub fn insert(&mut self, device: Device, timeline: Vec<Pose>) {
        self.timelines.insert(device, timeline);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub rate_hz: f64,
    pub duration_s: f64,
    pub noise: NoiseModel,
    /// Time at which the reference sensor comes off the liver.
    pub detach_at: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { rate_hz: super::DEFAULT_RATE_HZ, duration_s: 10.0, noise: NoiseModel::none(), detach_at: None, seed: 0 }
    }
}

/// Emits one sample per device at every tick `k / rate_hz`, devices in
/// [`Device`] order. Ticks outside a device's timeline produce MISSING
/// samples, as does the reference sensor from `detach_at` onwards.
pub fn simulate_tracker(script: &TrackerScript, cfg: &SimConfig) -> Vec<TrackedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rot = Normal::new(0.0, cfg.noise.rot_sigma_deg.to_radians().max(0.0)).expect("finite sigma");
    let trans = Normal::new(0.0, cfg.noise.trans_sigma_mm.max(0.0)).expect("finite sigma");
    let ticks = (cfg.duration_s * cfg.rate_hz + 1e-9).floor() as u64;
    let mut seq: BTreeMap<Device, u64> = BTreeMap::new();
    let mut out = Vec::with_capacity((ticks as usize + 1) * script.timelines.len());

    for k in 0..=ticks {
        let t = k as f64 / cfg.rate_hz;
        for (&device, timeline) in &script.timelines {
            let detached = device == Device::Reference && cfg.detach_at.is_some_and(|d| t >= d);
            let pose = match sample_at(timeline, t) {
                Ok(p) if !detached => {
                    let p = p.with_timestamp(t).with_frame(FrameId::World);
                    if cfg.noise.is_zero() {
                        p
                    } else {
                        let omega = Vec3::new(rot.sample(&mut rng), rot.sample(&mut rng), rot.sample(&mut rng));
                        let dt = Vec3::new(trans.sample(&mut rng), trans.sample(&mut rng), trans.sample(&mut rng));
                        let jitter = Pose::new(
                            nalgebra::UnitQuaternion::from_scaled_axis(omega),
                            Vec3::zeros(),
                            t,
                            FrameId::World,
                        );
                        Pose::new(*jitter.rotation() * p.rotation(), p.translation() + dt, t, FrameId::World)
                    }
                }
                _ => Pose::missing(t, FrameId::World),
            };
            let s = seq.entry(device).or_insert(0);
            out.push(TrackedSample { device, pose, sequence: *s });
            *s += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TrackingStatus;

    fn script() -> TrackerScript {
        let mut s = TrackerScript::default();
        let line = |from: Vec3, to: Vec3| {
            vec![
                Pose::from_translation(from, FrameId::World).with_timestamp(0.0),
                Pose::from_axis_angle(Vec3::z(), 0.4, to, FrameId::World).with_timestamp(10.0),
            ]
        };
        s.insert(Device::Reference, line(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.0)));
        s.insert(Device::Pointer, line(Vec3::new(10.0, 0.0, 0.0), Vec3::new(30.0, 5.0, -2.0)));
        s
    }

    #[test]
    fn noiseless_samples_follow_script() {
        let sc = script();
        let cfg = SimConfig { duration_s: 10.0, ..Default::default() };
        let samples = simulate_tracker(&sc, &cfg);
        assert_eq!(samples.len(), 601 * 2);
        for s in &samples {
            let expected = sample_at(&sc.timelines[&s.device], s.pose.timestamp).unwrap();
            assert!((s.pose.translation() - expected.translation()).norm() < 1e-12);
            assert!(s.pose.angle_to(&expected) < 1e-12);
        }
        // sequence numbers increase per device
        let ptr: Vec<u64> = samples.iter().filter(|s| s.device == Device::Pointer).map(|s| s.sequence).collect();
        assert!(ptr.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn detachment_marks_reference_missing() {
        let cfg = SimConfig { detach_at: Some(5.0), ..Default::default() };
        let samples = simulate_tracker(&script(), &cfg);
        for s in samples.iter().filter(|s| s.device == Device::Reference) {
            let missing = s.pose.status == TrackingStatus::Missing;
            assert_eq!(missing, s.pose.timestamp >= 5.0, "t={}", s.pose.timestamp);
        }
        assert!(samples.iter().filter(|s| s.device == Device::Pointer).all(|s| s.pose.is_ok()));
    }

    #[test]
    fn translation_noise_has_requested_sigma() {
        let mut sc = TrackerScript::default();
        let still = Pose::identity(FrameId::World);
        sc.insert(Device::Probe, vec![still.with_timestamp(0.0), still.with_timestamp(200.0)]);
        let cfg = SimConfig {
            rate_hz: 50.0,
            duration_s: 199.98,
            noise: NoiseModel { rot_sigma_deg: 0.0, trans_sigma_mm: 1.0 },
            detach_at: None,
            seed: 11,
        };
        let samples = simulate_tracker(&sc, &cfg);
        assert_eq!(samples.len(), 10_000);
        let xs: Vec<f64> = samples.iter().map(|s| s.pose.translation().x).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.9..=1.1).contains(&sd), "sd {sd}");
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn same_seed_same_samples() {
        let cfg = SimConfig { noise: NoiseModel { rot_sigma_deg: 0.2, trans_sigma_mm: 0.3 }, seed: 5, ..Default::default() };
        assert_eq!(simulate_tracker(&script(), &cfg), simulate_tracker(&script(), &cfg));
    }
}
