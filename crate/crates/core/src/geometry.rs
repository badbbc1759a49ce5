//! Rigid-body transforms, the pinhole camera model, point clouds and
//! normal estimation.
//!
//! Every pose in this crate is a [`RigidTransform`] mapping camera-frame
//! points into the shared object frame. Optimization works in the tangent
//! space via [`se3_exp`] / [`se3_log`] with left-multiplicative updates.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::spatial::KdTree3;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
}

/// Element of SE(3): rotation + translation, applied as `R p + t`.
///
/// The rotation is kept orthonormal (`det = +1`); constructors that accept
/// arbitrary matrices project onto the nearest rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// se(3) tangent vector: rotational part in radians, translational in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rot: Vector3::zeros(),
            trans: Vector3::zeros(),
        }
    }

    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Twist { rot, trans }
    }

    pub fn norm(&self) -> f64 {
        (self.rot.norm_squared() + self.trans.norm_squared()).sqrt()
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from a rotation matrix and translation. The matrix is projected
    /// onto SO(3) so downstream invariants hold even for slightly drifted
    /// inputs.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    /// Caller guarantees `rotation` is already orthonormal with det +1.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = if axis.norm() < 1e-300 {
            Vector3::zeros()
        } else {
            axis.normalize() * angle
        };
        let r = se3_exp(&Twist::new(rot, Vector3::zeros())).rotation;
        RigidTransform {
            rotation: r,
            translation,
        }
    }

    /// From a TUM-style unit quaternion `(qx, qy, qz, qw)`.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        let unit = nalgebra::UnitQuaternion::from_quaternion(quat);
        RigidTransform::from_parts_unchecked(unit.to_rotation_matrix().into_inner(), translation)
    }

    /// To `(qx, qy, qz, qw)` with `qw >= 0` for a canonical encoding.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let unit = nalgebra::UnitQuaternion::from_matrix(&self.rotation);
        let q = unit.into_inner();
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        if w < 0.0 {
            [-x, -y, -z, -w]
        } else {
            [x, y, z, w]
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Geodesic rotation distance to `other`, in radians. Uses `atan2` of
    /// the antisymmetric and trace parts, which stays accurate near zero
    /// where `acos` loses half the significant digits.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let s = Vector3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        )
        .norm()
            * 0.5;
        let c = (rel.trace() - 1.0) * 0.5;
        s.atan2(c).abs()
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Nearest rotation matrix in the Frobenius sense (SVD projection).
fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // Flip the axis of least significance to restore det = +1.
        let mut u2 = u;
        u2.set_column(2, &(-u.column(2)));
        r = u2 * vt;
    }
    r
}

/// Rodrigues-form exponential map from se(3) to SE(3). `exp(0)` is the
/// identity; small angles use the series expansion.
pub fn se3_exp(xi: &Twist) -> RigidTransform {
    let omega = xi.rot;
    let theta = omega.norm();
    let k = skew(&omega);
    let k2 = k * k;
    let (a, b, c) = if theta < 1e-8 {
        // sin x / x, (1 - cos x)/x^2, (x - sin x)/x^3 near zero
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0,
            0.5 - t2 / 24.0,
            1.0 / 6.0 - t2 / 120.0,
        )
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v_mat = Matrix3::identity() + k * b + k2 * c;
    RigidTransform {
        rotation: orthonormalize(&rotation),
        translation: v_mat * xi.trans,
    }
}

/// Canonical logarithm with `‖rot‖ <= π`. Rotations at exactly π use the
/// diagonal-dominant branch; non-finite input is rejected.
pub fn se3_log(t: &RigidTransform) -> Result<Twist, GeometryError> {
    if !t.is_finite() {
        return Err(GeometryError::InvalidArgument(
            "non-finite transform".into(),
        ));
    }
    let r = &t.rotation;
    // vee(R - Rᵀ)/2 = sin(θ)·axis
    let vee = Vector3::new(
        (r[(2, 1)] - r[(1, 2)]) * 0.5,
        (r[(0, 2)] - r[(2, 0)]) * 0.5,
        (r[(1, 0)] - r[(0, 1)]) * 0.5,
    );
    let sin_theta = vee.norm();
    let cos_theta = (r.trace() - 1.0) * 0.5;
    let theta = sin_theta.atan2(cos_theta);
    let omega = if theta < 1e-8 {
        vee
    } else if theta > std::f64::consts::PI - 1e-4 {
        // Near π the antisymmetric part degenerates. The symmetric part of
        // Rodrigues is cosθ·I + (1-cosθ)·aaᵀ exactly, so aaᵀ is recovered
        // without approximation and stays well conditioned (1-cosθ ≈ 2).
        let s = (r + r.transpose()) * 0.5;
        let b = (s - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
        let diag = [b[(0, 0)], b[(1, 1)], b[(2, 2)]];
        let k = if diag[0] >= diag[1] && diag[0] >= diag[2] {
            0
        } else if diag[1] >= diag[2] {
            1
        } else {
            2
        };
        let col = b.column(k);
        let mut axis = Vector3::new(col[0], col[1], col[2]);
        axis.normalize_mut();
        if sin_theta > 1e-12 {
            if vee.dot(&axis) < 0.0 {
                axis = -axis;
            }
        } else {
            // Exactly at π both signs are equivalent; pick a canonical one.
            let m = axis.iamax();
            if axis[m] < 0.0 {
                axis = -axis;
            }
        }
        axis * theta
    } else {
        vee * (theta / sin_theta)
    };

    let k = skew(&omega);
    let k2 = k * k;
    let v_inv = if theta < 1e-6 {
        Matrix3::identity() - k * 0.5 + k2 * (1.0 / 12.0)
    } else {
        let half = theta * 0.5;
        let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
        Matrix3::identity() - k * 0.5 + k2 * coef
    };
    Ok(Twist::new(omega, v_inv * t.translation))
}

/// Pinhole intrinsics. Sequences are assumed rectified; no distortion model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidArgument(
                "focal lengths must be positive".into(),
            ));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(GeometryError::InvalidArgument(
                "principal point outside image".into(),
            ));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Perspective projection of a camera-frame point to pixel coordinates.
/// The result may fall outside the image bounds; callers filter.
pub fn project(k: &CameraIntrinsics, p: &Vector3<f64>) -> Result<[f64; 2], GeometryError> {
    if p.z <= 1e-9 {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok([k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy])
}

/// Back-project a pixel at a given metric depth into the camera frame.
pub fn backproject(
    k: &CameraIntrinsics,
    pixel: [f64; 2],
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(GeometryError::InvalidArgument(format!(
            "non-positive depth {depth}"
        )));
    }
    Ok(Vector3::new(
        (pixel[0] - k.cx) * depth / k.fx,
        (pixel[1] - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Point cloud with optional per-point unit normals and RGB colors.
/// A `None` normal marks a degenerate neighborhood; downstream consumers
/// skip those points.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Option<Vector3<f64>>>>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        PointCloud {
            points,
            normals: None,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn normal(&self, i: usize) -> Option<Vector3<f64>> {
        self.normals.as_ref().and_then(|n| n[i])
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Map every point (and normal) by a rigid transform.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
            normals: self.normals.as_ref().map(|ns| {
                ns.iter()
                    .map(|n| n.map(|n| t.transform_vector(&n)))
                    .collect()
            }),
            colors: self.colors.clone(),
        }
    }
}

/// Per-point normals from the smallest eigenvector of the k-NN covariance,
/// oriented toward the camera origin (`n · p <= 0`). Rank-deficient
/// neighborhoods (collinear points) yield `None`.
pub fn estimate_normals(cloud: &PointCloud, k_neighbors: usize) -> Result<PointCloud, GeometryError> {
    if cloud.len() < k_neighbors {
        return Err(GeometryError::InvalidArgument(format!(
            "cloud has {} points, need at least {k_neighbors}",
            cloud.len()
        )));
    }
    let tree = KdTree3::build(&cloud.points);
    let normals: Vec<Option<Vector3<f64>>> = crate::exec::map_chunks(
        cloud.len(),
        crate::exec::DEFAULT_CHUNK,
        |range| {
            range
                .map(|i| normal_at(&cloud.points, &tree, i, k_neighbors))
                .collect::<Vec<_>>()
        },
    )
    .into_iter()
    .flatten()
    .collect();
    let mut out = cloud.clone();
    out.normals = Some(normals);
    Ok(out)
}

fn normal_at(
    points: &[Vector3<f64>],
    tree: &KdTree3,
    i: usize,
    k: usize,
) -> Option<Vector3<f64>> {
    let nbrs = tree.k_nearest(&points[i], k);
    let mean = nbrs
        .iter()
        .map(|&(j, _)| points[j as usize])
        .sum::<Vector3<f64>>()
        / nbrs.len() as f64;
    let mut cov = Matrix3::zeros();
    for &(j, _) in &nbrs {
        let d = points[j as usize] - mean;
        cov += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    // Ascending order of eigenvalues is not guaranteed; find extremes.
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let (lo, mid, hi) = (idx[0], idx[1], idx[2]);
    let lambda_max = eig.eigenvalues[hi].max(0.0);
    // Rank < 2: the two smallest eigenvalues both vanish.
    if eig.eigenvalues[mid] <= 1e-9 * lambda_max.max(1e-300) {
        return None;
    }
    let mut n: Vector3<f64> = eig.eigenvectors.column(lo).into();
    let norm = n.norm();
    if !norm.is_finite() || norm < 1e-12 {
        return None;
    }
    n /= norm;
    if n.dot(&points[i]) > 0.0 {
        n = -n;
    }
    Some(n)
}
