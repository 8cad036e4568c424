//! Rigid-body geometry: SO(3)/SE(3) exponential and logarithm maps, pose
//! composition, pinhole projection and the analytic Jacobians chained into
//! the derivative of a projected point with respect to a pose update.
//!
//! Conventions:
//! - a [`Pose`] maps world points into the camera frame, `Pc = R·P + t`;
//! - a [`Tangent`] is ordered `(translation xyz, rotation xyz)`;
//! - updates are applied on the left, `T⁺ = exp(δ^∧)·T`.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

/// Below this rotation angle the exponential and logarithm use Taylor branches.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Below this angle the left-Jacobian coefficients use truncated series.
const SERIES_ANGLE: f64 = 1e-2;

/// Minimum camera-frame depth for a point to be projectable.
pub const Z_MIN: f64 = 1e-4;

/// Tolerance on `RᵀR = I` and `det R = 1` for validated rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// Drift in `RᵀR − I` above which `left_update` re-orthonormalizes.
const REORTHO_DRIFT: f64 = 1e-12;

/// Maximum deviation of a loaded quaternion's norm from 1.
const QUATERNION_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("matrix is not a rotation (orthogonality error {ortho:.3e}, det {det})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("quaternion norm {0} deviates from 1 by more than 1e-3")]
    BadQuaternion(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// A world point in scene units.
pub type Point3 = Vector3<f64>;

/// 3×3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation<T: Real = f64>(Matrix3<T>);

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix after checking the rotation invariants on its value.
    pub fn new(m: Matrix3<T>) -> Result<Self, GeometryError> {
        let v = m.map(|x| x.value());
        let ortho = (v.transpose() * v - Matrix3::identity()).norm();
        let det = v.determinant();
        if !v.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NonFinite("rotation"));
        }
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotARotation { ortho, det });
        }
        Ok(Self(m))
    }

    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Frobenius norm of `RᵀR − I` (value only).
    pub fn orthogonality_error(&self) -> f64 {
        let v = self.0.map(|x| x.value());
        (v.transpose() * v - Matrix3::identity()).norm()
    }

    pub fn value(&self) -> Rotation<f64> {
        Rotation(self.0.map(|x| x.value()))
    }
}

impl Rotation<f64> {
    pub fn lift<T: Real>(&self) -> Rotation<T> {
        Rotation(self.0.map(T::lit))
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let r = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        UnitQuaternion::from_rotation_matrix(&r)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    /// Geodesic angle to another rotation, in radians.
    pub fn angle_to(&self, other: &Rotation<f64>) -> f64 {
        so3_log(&Rotation(self.0.transpose() * other.0)).norm()
    }
}

/// Rigid transform from world to camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real = f64> {
    pub rotation: Rotation<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose {
            rotation: Rotation(self.rotation.0 * other.rotation.0),
            translation: self.rotation.0 * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.0.transpose();
        Pose {
            rotation: Rotation(rt),
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.0);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn value(&self) -> Pose<f64> {
        Pose {
            rotation: self.rotation.value(),
            translation: self.translation.map(|x| x.value()),
        }
    }
}

impl Pose<f64> {
    pub fn lift<T: Real>(&self) -> Pose<T> {
        Pose {
            rotation: self.rotation.lift(),
            translation: self.translation.map(T::lit),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.0.transpose() * self.translation)
    }

    /// Rotation error in radians and camera-center distance to `other`.
    pub fn error_to(&self, other: &Pose<f64>) -> (f64, f64) {
        (
            self.rotation.angle_to(&other.rotation),
            (self.center() - other.center()).norm(),
        )
    }
}

/// Pose update `δ ∈ se(3)`, ordered (translation, rotation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tangent<T: Real = f64>(pub Vector6<T>);

impl<T: Real> Tangent<T> {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn from_parts(v: Vector3<T>, w: Vector3<T>) -> Self {
        Self(Vector6::new(v[0], v[1], v[2], w[0], w[1], w[2]))
    }

    pub fn translation(&self) -> Vector3<T> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vector3<T> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> T {
        self.0.norm()
    }
}

impl<T: Real> std::ops::Neg for Tangent<T> {
    type Output = Tangent<T>;

    fn neg(self) -> Self::Output {
        Tangent(-self.0)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|x| x.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.width < 1 || self.height < 1 {
            return Err(GeometryError::NonFinite("camera intrinsics"));
        }
        Ok(())
    }

    /// Intrinsics of the same camera on an image resized by `scale`, keeping
    /// pixel centers aligned.
    pub fn scaled(&self, scale: f64) -> Camera {
        Camera {
            fx: self.fx * scale,
            fy: self.fy * scale,
            cx: (self.cx + 0.5) * scale - 0.5,
            cy: (self.cy + 0.5) * scale - 0.5,
            width: ((self.width as f64 * scale).round() as u32).max(1),
            height: ((self.height as f64 * scale).round() as u32).max(1),
        }
    }

    /// Unit-depth ray through a pixel, in the camera frame.
    pub fn unproject(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    /// Whether a pixel lies at least `margin` pixels inside the image.
    pub fn contains(&self, p: &Vector2<f64>, margin: f64) -> bool {
        p.x >= margin
            && p.y >= margin
            && p.x <= self.width as f64 - 1.0 - margin
            && p.y <= self.height as f64 - 1.0 - margin
    }
}

/// Skew-symmetric matrix `w^∧` with `w^∧·x = w × x`.
pub fn hat<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -w[2], w[1], w[2], z, -w[0], -w[1], w[0], z)
}

/// Inverse of [`hat`]; reads the antisymmetric part.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Rodrigues' formula.
pub fn so3_exp<T: Real>(w: &Vector3<T>) -> Rotation<T> {
    let theta2 = w.norm_squared();
    let k = hat(w);
    let k2 = k * k;
    let half = T::lit(0.5);
    if theta2.value() < SMALL_ANGLE * SMALL_ANGLE {
        return Rotation(Matrix3::identity() + k + k2 * half);
    }
    let theta = theta2.sqrt();
    let s = (theta * half).sin();
    let a = theta.sin() / theta;
    // (1 − cos θ)/θ² written without cancellation
    let b = T::lit(2.0) * s * s / theta2;
    Rotation(Matrix3::identity() + k * a + k2 * b)
}

/// Principal logarithm, `‖w‖ ≤ π`.
pub fn so3_log(r: &Rotation<f64>) -> Vector3<f64> {
    let m = r.0;
    // v = 2 sin θ · n
    let v = vee(&m) * 2.0;
    let sin2 = v.norm();
    let cos = 0.5 * (m.trace() - 1.0);
    let theta = (0.5 * sin2).atan2(cos);
    if theta < SMALL_ANGLE {
        return v * 0.5 * (1.0 + theta * theta / 6.0);
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return v * (theta / sin2);
    }
    // Near π the antisymmetric part vanishes; read the axis from the
    // symmetric part (1 − cos θ)·n·nᵀ instead.
    let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos;
    let col = (0..3)
        .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
        .unwrap_or(0);
    let mut axis = b.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3), the `V` matrix coupling rotation and translation.
fn so3_left_jacobian<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let k = hat(w);
    let k2 = k * k;
    if theta2.value() < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() + k * T::lit(0.5) + k2 * T::lit(1.0 / 6.0);
    }
    let theta = theta2.sqrt();
    let s = (theta * T::lit(0.5)).sin();
    let a = T::lit(2.0) * s * s / theta2;
    // θ − sin θ cancels badly for small θ; the series is exact to f64 there
    let b = if theta2.value() < SERIES_ANGLE * SERIES_ANGLE {
        T::lit(1.0 / 6.0) - theta2 / T::lit(120.0) + theta2 * theta2 / T::lit(5040.0)
    } else {
        (theta - theta.sin()) / (theta2 * theta)
    };
    Matrix3::identity() + k * a + k2 * b
}

/// SE(3) exponential.
pub fn se3_exp<T: Real>(delta: &Tangent<T>) -> Pose<T> {
    let v = delta.translation();
    let w = delta.rotation();
    Pose {
        rotation: so3_exp(&w),
        translation: so3_left_jacobian(&w) * v,
    }
}

/// SE(3) logarithm.
pub fn se3_log(pose: &Pose<f64>) -> Tangent<f64> {
    let w = so3_log(&pose.rotation);
    let theta = w.norm();
    let k = hat(&w);
    let t2 = theta * theta;
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        // 1 − cos θ as 2 sin²(θ/2)
        let s = (0.5 * theta).sin();
        (1.0 - theta * theta.sin() / (4.0 * s * s)) / t2
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * c;
    Tangent::from_parts(v_inv * pose.translation, w)
}

/// Applies `exp(δ^∧)` on the left of the world→camera transform.
pub fn left_update<T: Real>(pose: &Pose<T>, delta: &Tangent<T>) -> Pose<T> {
    let mut out = se3_exp(delta).compose(pose);
    if out.rotation.orthogonality_error() > REORTHO_DRIFT {
        // one Newton–Schulz polar step
        let r = out.rotation.0;
        let rtr = r.transpose() * r;
        out.rotation = Rotation(r * (Matrix3::identity() * T::lit(3.0) - rtr) * T::lit(0.5));
    }
    out
}

/// `R·P + t`.
pub fn transform<T: Real>(pose: &Pose<T>, p: &Vector3<T>) -> Vector3<T> {
    pose.rotation.0 * p + pose.translation
}

pub fn project<T: Real>(cam: &Camera, pc: &Vector3<T>) -> Result<Vector2<T>, GeometryError> {
    let z = pc[2];
    if z.value() <= Z_MIN {
        return Err(GeometryError::BehindCamera { z: z.value() });
    }
    let iz = T::one() / z;
    Ok(Vector2::new(
        T::lit(cam.fx) * pc[0] * iz + T::lit(cam.cx),
        T::lit(cam.fy) * pc[1] * iz + T::lit(cam.cy),
    ))
}

/// `∂Π/∂Pc`, 2×3.
pub fn projection_jacobian<T: Real>(cam: &Camera, pc: &Vector3<T>) -> Result<Matrix2x3<T>, GeometryError> {
    let z = pc[2];
    if z.value() <= Z_MIN {
        return Err(GeometryError::BehindCamera { z: z.value() });
    }
    let iz = T::one() / z;
    let fx = T::lit(cam.fx);
    let fy = T::lit(cam.fy);
    let zero = T::zero();
    Ok(Matrix2x3::new(
        fx * iz,
        zero,
        -fx * pc[0] * iz * iz,
        zero,
        fy * iz,
        -fy * pc[1] * iz * iz,
    ))
}

/// Projection of a world point together with `∂p/∂δ` at `δ = 0`.
pub fn project_with_jacobian<T: Real>(
    cam: &Camera,
    pose: &Pose<T>,
    p: &Vector3<T>,
) -> Result<(Vector2<T>, Matrix2x6<T>), GeometryError> {
    let pc = transform(pose, p);
    let px = project(cam, &pc)?;
    let jp = projection_jacobian(cam, &pc)?;
    // d(exp(δ^∧)·Pc)/dδ = [I | −Pc^∧]
    let jt = jp;
    let jr = -(jp * hat(&pc));
    let mut j = Matrix2x6::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jt);
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jr);
    Ok((px, j))
}

/// `∂p/∂δ` of the projection of world point `P` under a left update of `pose`.
pub fn pose_point_jacobian<T: Real>(
    cam: &Camera,
    pose: &Pose<T>,
    p: &Vector3<T>,
) -> Result<Matrix2x6<T>, GeometryError> {
    project_with_jacobian(cam, pose, p).map(|(_, j)| j)
}

/// On-disk pose form: unit quaternion `[w, x, y, z]` and translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&Pose<f64>> for PoseJson {
    fn from(p: &Pose<f64>) -> Self {
        let q = p.rotation.to_quaternion();
        // canonical hemisphere
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        PoseJson {
            q: [s * q.w, s * q.i, s * q.j, s * q.k],
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseJson> for Pose<f64> {
    type Error = GeometryError;

    fn try_from(j: PoseJson) -> Result<Self, Self::Error> {
        if !j.q.iter().chain(j.t.iter()).all(|x| x.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let q = nalgebra::Quaternion::new(j.q[0], j.q[1], j.q[2], j.q[3]);
        let n = q.norm();
        if (n - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(GeometryError::BadQuaternion(n));
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Ok(Pose {
            rotation: Rotation::from_quaternion(&uq),
            translation: Vector3::new(j.t[0], j.t[1], j.t[2]),
        })
    }
}

impl Serialize for Pose<f64> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose<f64> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = PoseJson::deserialize(d)?;
        Pose::try_from(j).map_err(serde::de::Error::custom)
    }
}
