//! Pinhole cameras, rigid poses and bearing vectors.
//!
//! A bearing vector is the `(x/z, y/z)` coordinate of a ray on the `z = 1`
//! plane. Keypoints reach it by removing the intrinsics, scene points by
//! moving into the camera frame and dividing by depth, which puts both
//! modalities into the same coordinate system.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::correspondence::{Correspondence, CorrespondenceSet};
use crate::error::{Error, Result};

/// Depth below which a camera-frame point counts as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Default ground-truth tolerance in normalized image coordinates (4.8 px at f = 1600).
pub const GT_TOLERANCE: f64 = 3e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn to_pixel(&self, b: BearingVector) -> (f64, f64) {
        (self.fx * b.x + self.cx, self.fy * b.y + self.cy)
    }
}

/// Row-major rotation plus translation, as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<RigidPose> for PoseRecord {
    fn from(p: RigidPose) -> Self {
        Self {
            rotation: p.rotation_row_major(),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<PoseRecord> for RigidPose {
    fn from(r: PoseRecord) -> Self {
        RigidPose::from_row_major(r.rotation, r.translation)
    }
}

/// World-to-camera transform: `p_c = R * p_w + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRecord", from = "PoseRecord")]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Checks orthonormality and unit determinant within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).amax() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Re-orthonormalize the rotation block (nearest rotation in Frobenius norm).
    pub fn orthonormalized(&self) -> Self {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-15, 100, Rotation3::identity());
        Self::new(rot.into_inner(), self.translation)
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Self {
        Self::new(
            Matrix3::from_row_slice(&rotation),
            Vector3::from(translation),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub u: f64,
    pub v: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint3D {
    pub position: [f64; 3],
    pub color: [f64; 3],
}

impl ScenePoint3D {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BearingVector {
    pub x: f64,
    pub y: f64,
}

impl BearingVector {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &BearingVector) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 1.0)
    }
}

pub fn bearing_from_pixel(k: &CameraIntrinsics, kp: &Keypoint2D) -> BearingVector {
    BearingVector::new((kp.u - k.cx) / k.fx, (kp.v - k.cy) / k.fy)
}

pub fn bearing_from_world(pose: &RigidPose, p: &ScenePoint3D) -> Result<BearingVector> {
    bearing_from_camera(&pose.transform(&p.position()))
}

pub fn bearing_from_camera(pc: &Vector3<f64>) -> Result<BearingVector> {
    if pc.z <= DEPTH_EPSILON || !pc.z.is_finite() {
        return Err(Error::PointBehindCamera { depth: pc.z });
    }
    Ok(BearingVector::new(pc.x / pc.z, pc.y / pc.z))
}

pub fn project(k: &CameraIntrinsics, pose: &RigidPose, p: &ScenePoint3D) -> Result<(f64, f64)> {
    Ok(k.to_pixel(bearing_from_world(pose, p)?))
}

/// Ground-truth 2D-3D pairs: a keypoint pairs with the closest scene point
/// whose bearing lies strictly within `tol`. Exact distance ties go to the
/// smaller point index. When two keypoints claim the same point, the closer
/// keypoint keeps it, so the result is one-to-one.
pub fn label_ground_truth(
    kps: &[Keypoint2D],
    pts: &[ScenePoint3D],
    pose: &RigidPose,
    k: &CameraIntrinsics,
    tol: f64,
) -> CorrespondenceSet {
    let point_bearings: Vec<Option<BearingVector>> = pts
        .iter()
        .map(|p| bearing_from_world(pose, p).ok())
        .collect();

    let mut best_for_point: Vec<Option<(usize, f64)>> = vec![None; pts.len()];
    for (i, kp) in kps.iter().enumerate() {
        let b = bearing_from_pixel(k, kp);
        let mut best: Option<(usize, f64)> = None;
        for (j, pb) in point_bearings.iter().enumerate() {
            let Some(pb) = pb else { continue };
            let d = b.distance(pb);
            if d < tol && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, d)) = best {
            if best_for_point[j].is_none_or(|(_, bd)| d < bd) {
                best_for_point[j] = Some((i, d));
            }
        }
    }

    let mut pairs: Vec<Correspondence> = best_for_point
        .iter()
        .enumerate()
        .filter_map(|(j, b)| b.map(|(i, _)| Correspondence::new(i, j, 1.0)))
        .collect();
    pairs.sort_by_key(|c| c.keypoint);
    CorrespondenceSet::new(pairs)
}

/// Cosine of the angle between two 2D vectors; 0 when either is degenerate.
pub fn neighbor_cosine(a: [f64; 2], b: [f64; 2]) -> f64 {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    let c = (a[0] * b[0] + a[1] * b[1]) / (na * nb);
    c.clamp(-1.0, 1.0)
}

/// Rotation by angle `|w|` about axis `w / |w|`.
pub fn rotation_from_axis_angle(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(u: f64, v: f64) -> Keypoint2D {
        Keypoint2D {
            u,
            v,
            color: [0.5; 3],
        }
    }

    fn pt(x: f64, y: f64, z: f64) -> ScenePoint3D {
        ScenePoint3D {
            position: [x, y, z],
            color: [0.5; 3],
        }
    }

    #[test]
    fn pixel_bearings() {
        let unit = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(
            bearing_from_pixel(&unit, &kp(0.5, 0.5)),
            BearingVector::new(0.5, 0.5)
        );
        let k = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(
            bearing_from_pixel(&k, &kp(1.0, 1.0)),
            BearingVector::new(0.0, 0.0)
        );
        // Oracle: explicit inverse of K applied to the homogeneous pixel.
        let kinv = k.matrix().try_inverse().unwrap();
        let h = kinv * Vector3::new(3.0, 5.0, 1.0);
        let b = bearing_from_pixel(&k, &kp(3.0, 5.0));
        assert!((b.x - h.x / h.z).abs() < 1e-15 && (b.y - h.y / h.z).abs() < 1e-15);
        assert_eq!(b, BearingVector::new(1.0, 2.0));
    }

    #[test]
    fn world_bearings() {
        let id = RigidPose::identity();
        assert_eq!(
            bearing_from_world(&id, &pt(0.0, 0.0, 2.0)).unwrap(),
            BearingVector::new(0.0, 0.0)
        );
        let shifted = RigidPose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(
            bearing_from_world(&shifted, &pt(0.0, 0.0, 1.0)).unwrap(),
            BearingVector::new(1.0, 0.0)
        );
        assert!(matches!(
            bearing_from_world(&id, &pt(0.0, 0.0, -1.0)),
            Err(Error::PointBehindCamera { .. })
        ));
        assert!(bearing_from_world(&id, &pt(0.0, 0.0, 1e-7)).is_err());
    }

    #[test]
    fn projection() {
        let unit = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let id = RigidPose::identity();
        assert_eq!(project(&unit, &id, &pt(0.0, 0.0, 5.0)).unwrap(), (0.0, 0.0));
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap();
        assert_eq!(project(&k, &id, &pt(1.0, 1.0, 2.0)).unwrap(), (100.0, 100.0));
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(neighbor_cosine([1.0, 0.0], [0.0, 1.0]), 0.0);
        assert_eq!(neighbor_cosine([2.0, 0.0], [5.0, 0.0]), 1.0);
        assert!((neighbor_cosine([1.0, 0.0], [1.0, 1.0]) - 0.7071067811865475).abs() < 1e-15);
        assert_eq!(neighbor_cosine([0.0, 0.0], [1.0, 1.0]), 0.0);
        assert_eq!(neighbor_cosine([1.0, 1.0], [1e-13, 0.0]), 0.0);
    }

    #[test]
    fn labeling_rules() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let pose = RigidPose::identity();
        let p = pt(0.2, -0.1, 2.0);
        let (u, v) = project(&k, &pose, &p).unwrap();

        let exact = label_ground_truth(&[kp(u, v)], &[p], &pose, &k, GT_TOLERANCE);
        assert_eq!(exact.len(), 1);

        // 0.01 in normalized coordinates is 1 pixel at f = 100.
        let off = label_ground_truth(&[kp(u + 1.0, v)], &[p], &pose, &k, GT_TOLERANCE);
        assert!(off.is_empty());

        let behind = pt(0.0, 0.0, -2.0);
        let kb = kp(50.0, 50.0);
        assert!(label_ground_truth(&[kb], &[behind], &pose, &k, GT_TOLERANCE).is_empty());
    }

    #[test]
    fn labeling_keeps_nearest_point() {
        let k = CameraIntrinsics::new(1000.0, 1000.0, 0.0, 0.0).unwrap();
        let pose = RigidPose::identity();
        // Bearings at 0.0004 and 0.0002 from the keypoint at the origin.
        let pts = [pt(0.0004, 0.0, 1.0), pt(0.0, 0.0002, 1.0), pt(0.5, 0.5, 1.0)];
        let kps = [kp(0.0, 0.0)];
        let gt = label_ground_truth(&kps, &pts, &pose, &k, GT_TOLERANCE);

        // Exhaustive oracle: every pair under tolerance, pick the minimum.
        let b = bearing_from_pixel(&k, &kps[0]);
        let (best_j, _) = pts
            .iter()
            .enumerate()
            .map(|(j, p)| (j, b.distance(&bearing_from_world(&pose, p).unwrap())))
            .filter(|(_, d)| *d < GT_TOLERANCE)
            .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        assert_eq!(gt.pairs, vec![Correspondence::new(0, best_j, 1.0)]);
        assert_eq!(best_j, 1);
    }

    #[test]
    fn labeling_breaks_ties_by_index() {
        let k = CameraIntrinsics::new(1000.0, 1000.0, 0.0, 0.0).unwrap();
        let pose = RigidPose::identity();
        let pts = [pt(0.0, 0.0002, 1.0), pt(0.0, 0.0002, 1.0)];
        let gt = label_ground_truth(&[kp(0.0, 0.0)], &pts, &pose, &k, GT_TOLERANCE);
        assert_eq!(gt.pairs[0].point, 0);
    }

    #[test]
    fn labeling_is_one_to_one() {
        let k = CameraIntrinsics::new(1000.0, 1000.0, 0.0, 0.0).unwrap();
        let pose = RigidPose::identity();
        let pts = [pt(0.0, 0.0, 1.0)];
        let kps = [kp(0.3, 0.0), kp(0.1, 0.0), kp(0.2, 0.0)];
        let gt = label_ground_truth(&kps, &pts, &pose, &k, GT_TOLERANCE);
        assert_eq!(gt.pairs, vec![Correspondence::new(1, 0, 1.0)]);
    }
}
