//! Pinhole cameras, multi-view triangulation and pose-error primitives.
//!
//! World frame is right-handed with z up. A camera with yaw 0 and pitch 0
//! looks along +x. Yaw rotates about world z, pitch tilts the optical axis
//! about the camera's lateral axis (positive pitch looks up). Roll is fixed at
//! zero. The camera frame follows the usual image convention: x right, y down,
//! z forward along the optical axis.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Pixel = Vector2<f64>;

pub const NUM_JOINTS: usize = 17;

/// COCO keypoint order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub mod joint {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

/// Rays closer than this (radians) are treated as parallel.
pub const PARALLEL_RAY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate triangulation geometry: {0}")]
    DegenerateGeometry(&'static str),
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub pitch: f64,
    pub yaw: f64,
}

impl CameraPose {
    /// Builds a pose, clamping pitch to [-pi/2, pi/2] and wrapping yaw.
    pub fn new(position: Vec3, pitch: f64, yaw: f64) -> Self {
        Self {
            position,
            pitch: pitch.clamp(-FRAC_PI_2, FRAC_PI_2),
            yaw: wrap_angle(yaw),
        }
    }

    /// Pose at `position` whose optical axis passes through `target`.
    pub fn looking_at(position: Vec3, target: Vec3) -> Self {
        let d = target - position;
        let horizontal = d.x.hypot(d.y);
        let yaw = if horizontal > 1e-12 { d.y.atan2(d.x) } else { 0.0 };
        let pitch = d.z.atan2(horizontal);
        Self::new(position, pitch, yaw)
    }

    pub fn forward(&self) -> Vec3 {
        let (sp, cp) = self.pitch.sin_cos();
        let (sy, cy) = self.yaw.sin_cos();
        Vec3::new(cp * cy, cp * sy, sp)
    }

    pub fn right(&self) -> Vec3 {
        let (sy, cy) = self.yaw.sin_cos();
        Vec3::new(sy, -cy, 0.0)
    }

    pub fn down(&self) -> Vec3 {
        self.forward().cross(&self.right())
    }

    /// World-to-camera rotation; rows are the camera's right, down and forward axes.
    pub fn rotation(&self) -> Matrix3<f64> {
        let r = self.right();
        let d = self.down();
        let f = self.forward();
        Matrix3::new(r.x, r.y, r.z, d.x, d.y, d.z, f.x, f.y, f.z)
    }

    pub fn to_camera(&self, point: &Vec3) -> Vec3 {
        self.rotation() * (point - self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in pixels (fx = fy).
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            focal: 320.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    fn normalize(&self, px: &Pixel) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.focal, (px.y - self.cy) / self.focal)
    }
}

/// Minimum depth along the optical axis for a point to count as in front.
const MIN_DEPTH: f64 = 1e-6;

/// Pinhole projection ignoring the image bounds; `None` only behind the camera.
pub fn project_unbounded(pose: &CameraPose, intr: &CameraIntrinsics, point: &Vec3) -> Option<Pixel> {
    let pc = pose.to_camera(point);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    Some(Pixel::new(
        intr.focal * pc.x / pc.z + intr.cx,
        intr.focal * pc.y / pc.z + intr.cy,
    ))
}

/// Projects a world point to pixels, or `None` if it is behind the camera or
/// falls outside the image.
pub fn project(pose: &CameraPose, intr: &CameraIntrinsics, point: &Vec3) -> Option<Pixel> {
    project_unbounded(pose, intr, point).filter(|px| intr.contains(px))
}

/// One calibrated observation of a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub pixel: Pixel,
}

impl View {
    fn ray(&self) -> Vec3 {
        let n = self.intrinsics.normalize(&self.pixel);
        (self.pose.rotation().transpose() * Vec3::new(n.x, n.y, 1.0)).normalize()
    }

    /// Reprojection error in pixels, `None` if the point is behind the camera.
    pub fn reprojection_error(&self, point: &Vec3) -> Option<f64> {
        project_unbounded(&self.pose, &self.intrinsics, point).map(|p| (p - self.pixel).norm())
    }
}

fn check_views(views: &[View]) -> Result<(), GeometryError> {
    if views.len() < 2 {
        return Err(GeometryError::DegenerateGeometry("fewer than two views"));
    }
    let rays: Vec<Vec3> = views.iter().map(View::ray).collect();
    let mut max_angle = 0.0f64;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let angle = rays[i].cross(&rays[j]).norm().atan2(rays[i].dot(&rays[j]));
            max_angle = max_angle.max(angle);
        }
    }
    if max_angle < PARALLEL_RAY_TOLERANCE {
        return Err(GeometryError::DegenerateGeometry("all rays parallel"));
    }
    let c0 = views[0].pose.position;
    if views.iter().all(|v| (v.pose.position - c0).norm() < 1e-9) {
        return Err(GeometryError::DegenerateGeometry("coincident camera centers"));
    }
    Ok(())
}

/// Linear (DLT) triangulation minimising the algebraic residual.
///
/// Pixels are mapped to normalised image coordinates through the intrinsics
/// and the world frame is re-centred on the mean camera centre and scaled by
/// the mean centre distance before the SVD, which keeps the 4-column system
/// well conditioned at arena scale.
pub fn triangulate_dlt(views: &[View]) -> Result<Vec3, GeometryError> {
    check_views(views)?;
    let n = views.len() as f64;
    let centroid = views.iter().map(|v| v.pose.position).sum::<Vec3>() / n;
    let mut scale = views
        .iter()
        .map(|v| (v.pose.position - centroid).norm())
        .sum::<f64>()
        / n;
    if scale < 1e-9 {
        scale = 1.0;
    }

    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (k, v) in views.iter().enumerate() {
        let r = v.pose.rotation();
        let t = r * (centroid - v.pose.position) / scale;
        let x = v.intrinsics.normalize(&v.pixel);
        for (row, coord, axis) in [(2 * k, x.x, 0usize), (2 * k + 1, x.y, 1usize)] {
            for c in 0..3 {
                a[(row, c)] = coord * r[(2, c)] - r[(axis, c)];
            }
            a[(row, 3)] = coord * t.z - t[axis];
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(GeometryError::DegenerateGeometry("svd failed"))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let h = v_t.row(min_idx);
    let norm = h.norm();
    if h[3].abs() < 1e-12 * norm.max(1e-300) {
        return Err(GeometryError::DegenerateGeometry("point at infinity"));
    }
    let y = Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    Ok(centroid + y * scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier reprojection threshold in pixels.
    pub inlier_threshold: f64,
    pub iterations: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            inlier_threshold: 3.0,
            iterations: 50,
        }
    }
}

/// RANSAC over 2-view minimal sets, scored by reprojection inliers, then a
/// DLT refit on the best inlier set.
pub fn triangulate_ransac<R: Rng + ?Sized>(
    views: &[View],
    params: &RansacParams,
    rng: &mut R,
) -> Result<Vec3, GeometryError> {
    if views.len() < 2 {
        return Err(GeometryError::DegenerateGeometry("fewer than two views"));
    }
    if views.len() == 2 || params.iterations == 0 {
        return triangulate_dlt(views);
    }
    let n = views.len();
    // (inlier count, summed inlier error, mask)
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    for _ in 0..params.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let Ok(candidate) = triangulate_dlt(&[views[i], views[j]]) else {
            continue;
        };
        let mut mask = vec![false; n];
        let mut count = 0;
        let mut err_sum = 0.0;
        for (k, v) in views.iter().enumerate() {
            if let Some(e) = v.reprojection_error(&candidate) {
                if e < params.inlier_threshold {
                    mask[k] = true;
                    count += 1;
                    err_sum += e;
                }
            }
        }
        let better = match &best {
            None => true,
            Some((bc, be, _)) => count > *bc || (count == *bc && err_sum < *be),
        };
        if better {
            best = Some((count, err_sum, mask));
        }
    }
    match best {
        Some((count, _, mask)) if count >= 2 => {
            let inliers: Vec<View> = views
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .collect();
            triangulate_dlt(&inliers).or_else(|_| triangulate_dlt(views))
        }
        _ => triangulate_dlt(views),
    }
}

/// A 17-joint 3D pose in world coordinates (metres).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Skeleton3D {
    pub joints: [Vec3; NUM_JOINTS],
}

impl Skeleton3D {
    pub fn new(joints: [Vec3; NUM_JOINTS]) -> Self {
        Self { joints }
    }

    pub fn uniform(p: Vec3) -> Self {
        Self {
            joints: [p; NUM_JOINTS],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|j| j.iter().all(|c| c.is_finite()))
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        let mut out = *self;
        for j in &mut out.joints {
            *j += offset;
        }
        out
    }
}

/// Mean per-joint position error, in millimetres.
pub fn mpjpe(estimate: &Skeleton3D, truth: &Skeleton3D) -> f64 {
    let total: f64 = estimate
        .joints
        .iter()
        .zip(&truth.joints)
        .map(|(a, b)| (a - b).norm())
        .sum();
    1000.0 * total / NUM_JOINTS as f64
}

/// Geman-McClure penalty `2 (x/c)^2 / ((x/c)^2 + 4)`, bounded in [0, 2).
pub fn geman_mcclure(x: f64, c: f64) -> f64 {
    let q = (x / c).powi(2);
    2.0 * q / (q + 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

impl Keypoint {
    pub const HIDDEN: Keypoint = Keypoint {
        u: 0.0,
        v: 0.0,
        visible: false,
    };

    pub fn pixel(&self) -> Option<Pixel> {
        self.visible.then(|| Pixel::new(self.u, self.v))
    }
}

/// 2D pose detection of one person in one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub keypoints: [Keypoint; NUM_JOINTS],
    /// (cx, cy, w, h), normalised by image size.
    pub bbox: [f64; 4],
}

impl Detection2D {
    /// Builds a detection and its bounding box from keypoints.
    pub fn from_keypoints(keypoints: [Keypoint; NUM_JOINTS], intr: &CameraIntrinsics) -> Self {
        let visible: Vec<&Keypoint> = keypoints.iter().filter(|k| k.visible).collect();
        let bbox = if visible.is_empty() {
            [0.0; 4]
        } else {
            let (mut u0, mut v0, mut u1, mut v1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for k in &visible {
                u0 = u0.min(k.u);
                v0 = v0.min(k.v);
                u1 = u1.max(k.u);
                v1 = v1.max(k.v);
            }
            let w = intr.width as f64;
            let h = intr.height as f64;
            [
                0.5 * (u0 + u1) / w,
                0.5 * (v0 + v1) / h,
                (u1 - u0) / w,
                (v1 - v0) / h,
            ]
        };
        Self { keypoints, bbox }
    }

    pub fn visible_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.visible).count()
    }
}

/// Closest distance between segments `p1-q1` and `p2-q2`.
pub fn segment_segment_distance(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-12;
    let (s, t);
    if a <= eps && e <= eps {
        return r.norm();
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = p1 + d1 * s;
    let c2 = p2 + d2 * t;
    (c1 - c2).norm()
}

/// Distance from a point to segment `a-b`.
pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(&ab);
    if len2 <= 1e-18 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}
