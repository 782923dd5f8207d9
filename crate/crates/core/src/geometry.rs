//! Rigid-body poses and the transform chain that expresses every tracked
//! object relative to the liver-mounted reference sensor.
//!
//! Conventions used throughout the crate:
//!
//! * quaternions are `(w, x, y, z)`, right-handed, active rotations;
//! * `compose(a, b)` applies `b` first, then `a`;
//! * lengths are millimetres, times are seconds.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Quaternions whose norm drifts further than this from one are renormalized.
const RENORMALIZE_EPS: f64 = 1e-12;

/// Maximum distance in time a pose may be held past the end of a timeline.
pub const MAX_EXTRAPOLATION_S: f64 = 0.050;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pose is MISSING and cannot be used")]
    PoseMissing,
    #[error("reference sensor is MISSING, navigation lost")]
    NavigationLost,
    #[error("value out of range: {0}")]
    Range(String),
    #[error("degenerate quaternion (zero norm)")]
    DegenerateRotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FrameId {
    World,
    Reference,
    ProbeSensor,
    SealerSensor,
    PointerSensor,
    Image,
    PreopModel,
    /// Postoperative specimen scan; unrelated to any intraoperative frame.
    Specimen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrackingStatus {
    Ok,
    Missing,
}

impl TrackingStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackingStatus::Ok => "OK",
            TrackingStatus::Missing => "MISSING",
        }
    }
}

/// A timestamped rigid transform with tracking status.
///
/// `frame` names the frame the pose is expressed in (its parent). A pose
/// whose status is [`TrackingStatus::Missing`] carries no usable geometry;
/// every operation that consumes geometry rejects it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
    pub timestamp: f64,
    pub status: TrackingStatus,
    pub frame: FrameId,
}

fn unit(q: Quaternion<f64>) -> Result<UnitQuaternion<f64>, GeometryError> {
    let norm = q.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(GeometryError::DegenerateRotation);
    }
    if (norm - 1.0).abs() > RENORMALIZE_EPS {
        Ok(UnitQuaternion::new_unchecked(q / norm))
    } else {
        Ok(UnitQuaternion::new_unchecked(q))
    }
}

fn renormalized(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    // norm of a product of unit quaternions is never zero
    unit(q.into_inner()).unwrap_or(q)
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3, timestamp: f64, frame: FrameId) -> Self {
        Pose {
            rotation: renormalized(rotation),
            translation,
            timestamp,
            status: TrackingStatus::Ok,
            frame,
        }
    }

    /// Builds a pose from raw `(w, x, y, z)` components. The quaternion is
    /// renormalized unless it is already unit to within `1e-12`, so a
    /// value that was written out and parsed back is reproduced exactly.
    pub fn from_wxyz(
        wxyz: [f64; 4],
        translation: [f64; 3],
        timestamp: f64,
        status: TrackingStatus,
        frame: FrameId,
    ) -> Result<Self, GeometryError> {
        let q = unit(Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]))?;
        Ok(Pose {
            rotation: q,
            translation: Vec3::from(translation),
            timestamp,
            status,
            frame,
        })
    }

    pub fn identity(frame: FrameId) -> Self {
        Pose::new(UnitQuaternion::identity(), Vec3::zeros(), 0.0, frame)
    }

    pub fn from_translation(t: Vec3, frame: FrameId) -> Self {
        Pose::new(UnitQuaternion::identity(), t, 0.0, frame)
    }

    /// Rotation of `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3, frame: FrameId) -> Self {
        let rot = match nalgebra::Unit::try_new(axis, 1e-15) {
            Some(axis) => UnitQuaternion::from_axis_angle(&axis, angle),
            None => UnitQuaternion::identity(),
        };
        Pose::new(rot, translation, 0.0, frame)
    }

    /// A pose with no usable geometry.
    pub fn missing(timestamp: f64, frame: FrameId) -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
            timestamp,
            status: TrackingStatus::Missing,
            frame,
        }
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn with_frame(mut self, frame: FrameId) -> Self {
        self.frame = frame;
        self
    }

    pub fn with_status(mut self, status: TrackingStatus) -> Self {
        self.status = status;
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status == TrackingStatus::Ok
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    fn require_ok(&self) -> Result<(), GeometryError> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(GeometryError::PoseMissing)
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: `other` is applied first.
    pub fn compose(&self, other: &Pose) -> Result<Pose, GeometryError> {
        compose(self, other)
    }

    pub fn inverse(&self) -> Result<Pose, GeometryError> {
        invert(self)
    }

    /// Rotation angle to `other` in radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// `a ∘ b`: apply `b`, then `a`. The timestamp is the later of the two.
pub fn compose(a: &Pose, b: &Pose) -> Result<Pose, GeometryError> {
    a.require_ok()?;
    b.require_ok()?;
    Ok(Pose {
        rotation: renormalized(a.rotation * b.rotation),
        translation: a.rotation * b.translation + a.translation,
        timestamp: a.timestamp.max(b.timestamp),
        status: TrackingStatus::Ok,
        frame: a.frame,
    })
}

pub fn invert(a: &Pose) -> Result<Pose, GeometryError> {
    a.require_ok()?;
    let inv = a.rotation.inverse();
    Ok(Pose {
        rotation: inv,
        translation: -(inv * a.translation),
        timestamp: a.timestamp,
        status: TrackingStatus::Ok,
        frame: a.frame,
    })
}

/// Re-expresses a tracked instrument relative to the reference sensor:
/// `reference⁻¹ ∘ instrument`. Any rigid motion applied to both world
/// poses cancels out, which is what compensates for organ motion.
pub fn express_in_reference(instrument: &Pose, reference: &Pose) -> Result<Pose, GeometryError> {
    if !reference.is_ok() {
        return Err(GeometryError::NavigationLost);
    }
    instrument.require_ok()?;
    let mut p = compose(&invert(reference)?, instrument)?;
    p.frame = FrameId::Reference;
    p.timestamp = instrument.timestamp;
    Ok(p)
}

fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = a.coords;
    let mut qb = b.coords;
    let mut dot = qa.dot(&qb);
    // shortest arc
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > 0.9995 {
        qa + (qb - qa) * t
    } else {
        let theta = dot.clamp(-1.0, 1.0).acos();
        let s = theta.sin();
        qa * (((1.0 - t) * theta).sin() / s) + qb * ((t * theta).sin() / s)
    };
    let q = Quaternion::from(coords);
    UnitQuaternion::new_normalize(q)
}

/// Spherical interpolation of rotation and linear interpolation of
/// translation. `t = 0` returns `a` and `t = 1` returns `b` unchanged.
pub fn interpolate(a: &Pose, b: &Pose, t: f64) -> Result<Pose, GeometryError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::Range(format!("interpolation fraction {t} outside [0, 1]")));
    }
    a.require_ok()?;
    b.require_ok()?;
    if a.timestamp > b.timestamp {
        return Err(GeometryError::Range(format!(
            "interpolation endpoints out of order ({} > {})",
            a.timestamp, b.timestamp
        )));
    }
    if t == 0.0 {
        return Ok(*a);
    }
    if t == 1.0 {
        return Ok(*b);
    }
    Ok(Pose {
        rotation: slerp(&a.rotation, &b.rotation, t),
        translation: a.translation + (b.translation - a.translation) * t,
        timestamp: a.timestamp + (b.timestamp - a.timestamp) * t,
        status: TrackingStatus::Ok,
        frame: a.frame,
    })
}

/// Samples a time-ordered pose timeline at `time` using the two bracketing
/// samples. Times up to [`MAX_EXTRAPOLATION_S`] outside the timeline hold
/// the nearest endpoint; anything further is rejected.
pub fn sample_at(timeline: &[Pose], time: f64) -> Result<Pose, GeometryError> {
    let (first, last) = match (timeline.first(), timeline.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(GeometryError::Range("empty pose timeline".into())),
    };
    if time <= first.timestamp {
        if first.timestamp - time > MAX_EXTRAPOLATION_S {
            return Err(GeometryError::Range(format!("time {time} precedes timeline by more than 50 ms")));
        }
        first.require_ok()?;
        return Ok(first.with_timestamp(time));
    }
    if time >= last.timestamp {
        if time - last.timestamp > MAX_EXTRAPOLATION_S {
            return Err(GeometryError::Range(format!("time {time} exceeds timeline by more than 50 ms")));
        }
        last.require_ok()?;
        return Ok(last.with_timestamp(time));
    }
    // first index with timestamp > time; 1 <= hi < len here
    let hi = timeline.partition_point(|p| p.timestamp <= time);
    let (a, b) = (&timeline[hi - 1], &timeline[hi]);
    let span = b.timestamp - a.timestamp;
    let t = if span > 0.0 { (time - a.timestamp) / span } else { 0.0 };
    let mut p = interpolate(a, b, t.clamp(0.0, 1.0))?;
    p.timestamp = time;
    Ok(p)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use proptest::prelude::*;

    pub fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -std::f64::consts::PI..std::f64::consts::PI,
            prop::array::uniform3(-200.0f64..200.0),
        )
            .prop_map(|(axis, angle, t)| {
                Pose::from_axis_angle(Vec3::from(axis), angle, Vec3::from(t), FrameId::World)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::testing::arb_pose;
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn rot90z() -> Pose {
        Pose::from_axis_angle(Vec3::z(), FRAC_PI_2, Vec3::zeros(), FrameId::World)
    }

    fn assert_vec_close(a: &Vec3, b: &Vec3, tol: f64) {
        assert!((a - b).norm() < tol, "{a:?} vs {b:?}");
    }

    fn assert_pose_close(a: &Pose, b: &Pose, tol: f64) {
        assert_vec_close(a.translation(), b.translation(), tol);
        assert!(a.angle_to(b) < tol, "angle {}", a.angle_to(b));
    }

    #[test]
    fn identity_is_neutral() {
        let t = Pose::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7, Vec3::new(4.0, -5.0, 6.0), FrameId::World);
        let id = Pose::identity(FrameId::World);
        assert_pose_close(&compose(&id, &t).unwrap(), &t, 1e-12);
        assert_pose_close(&compose(&t, &invert(&t).unwrap()).unwrap(), &id, 1e-9);
    }

    #[test]
    fn half_turn_from_two_quarter_turns() {
        let r = compose(&rot90z(), &rot90z()).unwrap();
        assert_vec_close(&r.transform_point(&Vec3::x()), &Vec3::new(-1.0, 0.0, 0.0), 1e-12);
    }

    #[test]
    fn inverse_of_translation() {
        let p = Pose::from_translation(Vec3::new(3.0, 4.0, 5.0), FrameId::World);
        let inv = invert(&p).unwrap();
        assert_eq!(inv.xyz(), [-3.0, -4.0, -5.0]);
        let id = invert(&Pose::identity(FrameId::World)).unwrap();
        assert_eq!(id.wxyz(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn compose_timestamp_is_max() {
        let a = Pose::identity(FrameId::World).with_timestamp(2.0);
        let b = Pose::identity(FrameId::World).with_timestamp(3.5);
        assert_eq!(compose(&a, &b).unwrap().timestamp, 3.5);
    }

    #[test]
    fn missing_pose_is_rejected() {
        let m = Pose::missing(1.0, FrameId::World);
        let ok = Pose::identity(FrameId::World);
        assert_eq!(compose(&m, &ok), Err(GeometryError::PoseMissing));
        assert_eq!(compose(&ok, &m), Err(GeometryError::PoseMissing));
        assert_eq!(invert(&m), Err(GeometryError::PoseMissing));
        assert_eq!(express_in_reference(&ok, &m), Err(GeometryError::NavigationLost));
        assert_eq!(express_in_reference(&m, &ok), Err(GeometryError::PoseMissing));
    }

    #[test]
    fn reference_relative_translation() {
        let reference = Pose::from_translation(Vec3::new(10.0, 0.0, 0.0), FrameId::World);
        let instrument = Pose::from_translation(Vec3::new(13.0, 4.0, 0.0), FrameId::World);
        let rel = express_in_reference(&instrument, &reference).unwrap();
        assert_eq!(rel.frame, FrameId::Reference);
        assert_vec_close(rel.translation(), &Vec3::new(3.0, 4.0, 0.0), 1e-12);
        let same = express_in_reference(&reference, &reference).unwrap();
        assert_pose_close(&same, &Pose::identity(FrameId::Reference), 1e-12);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = Pose::identity(FrameId::World);
        let b = Pose::from_translation(Vec3::new(10.0, 0.0, 0.0), FrameId::World).with_timestamp(1.0);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        assert_vec_close(interpolate(&a, &b, 0.5).unwrap().translation(), &Vec3::new(5.0, 0.0, 0.0), 1e-12);
        assert!(matches!(interpolate(&a, &b, 1.5), Err(GeometryError::Range(_))));
        assert!(matches!(interpolate(&a, &b, -0.1), Err(GeometryError::Range(_))));
    }

    #[test]
    fn slerp_matches_axis_angle_oracle() {
        // oracle: interpolate the rotation angle directly about the fixed axis
        let b = rot90z().with_timestamp(1.0);
        let a = Pose::identity(FrameId::World);
        for &t in &[0.1, 0.25, 0.5, 0.9] {
            let angle = t * FRAC_PI_2;
            let expected = Vec3::new(angle.cos(), angle.sin(), 0.0);
            let got = interpolate(&a, &b, t).unwrap().transform_point(&Vec3::x());
            assert_vec_close(&got, &expected, 1e-9);
        }
        let half = interpolate(&a, &b, 0.5).unwrap().transform_point(&Vec3::x());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_vec_close(&half, &Vec3::new(s, s, 0.0), 1e-9);
    }

    #[test]
    fn sampling_a_timeline() {
        let tl: Vec<Pose> = (0..5)
            .map(|i| Pose::from_translation(Vec3::new(i as f64, 0.0, 0.0), FrameId::World).with_timestamp(i as f64 * 0.1))
            .collect();
        let p = sample_at(&tl, 0.25).unwrap();
        assert!((p.translation().x - 2.5).abs() < 1e-12);
        assert_eq!(p.timestamp, 0.25);
        assert!((sample_at(&tl, 0.44).unwrap().translation().x - 4.0).abs() < 1e-12);
        assert!(matches!(sample_at(&tl, 0.46), Err(GeometryError::Range(_))));
        assert!(matches!(sample_at(&tl, -0.06), Err(GeometryError::Range(_))));
        assert!(sample_at(&[], 0.0).is_err());
    }

    #[test]
    fn quaternion_norm_stays_unit_over_long_chains() {
        let step = Pose::from_axis_angle(Vec3::new(0.3, -0.5, 0.8), 0.0123, Vec3::new(0.01, 0.0, 0.0), FrameId::World);
        let mut acc = Pose::identity(FrameId::World);
        for _ in 0..1_000_000 {
            acc = compose(&acc, &step).unwrap();
        }
        assert!((acc.rotation().quaternion().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn from_wxyz_renormalizes() {
        let p = Pose::from_wxyz([2.0, 0.0, 0.0, 0.0], [0.0; 3], 0.0, TrackingStatus::Ok, FrameId::World).unwrap();
        assert_eq!(p.wxyz(), [1.0, 0.0, 0.0, 0.0]);
        assert!(Pose::from_wxyz([0.0; 4], [0.0; 3], 0.0, TrackingStatus::Ok, FrameId::World).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn inverse_cancels(p in arb_pose()) {
            let r = compose(&p, &invert(&p).unwrap()).unwrap();
            prop_assert!(r.translation().norm() < 1e-9);
            prop_assert!(r.rotation().angle() < 1e-9);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = compose(&compose(&a, &b).unwrap(), &c).unwrap();
            let r = compose(&a, &compose(&b, &c).unwrap()).unwrap();
            prop_assert!((l.translation() - r.translation()).norm() < 1e-9);
            prop_assert!(l.angle_to(&r) < 1e-9);
        }

        #[test]
        fn reference_frame_cancels_world_motion(inst in arb_pose(), reference in arb_pose(), motion in arb_pose()) {
            let base = express_in_reference(&inst, &reference).unwrap();
            let moved = express_in_reference(
                &compose(&motion, &inst).unwrap(),
                &compose(&motion, &reference).unwrap(),
            ).unwrap();
            prop_assert!((base.translation() - moved.translation()).norm() < 1e-9);
            prop_assert!(base.angle_to(&moved) < 1e-9);
        }
    }
}
