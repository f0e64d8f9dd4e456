//! Frames, rotations, Euler angles and spherical/cartesian conversions.
//!
//! Every position lives in a flat north-east-down (NED) frame. Azimuth is the
//! four-quadrant angle of `(x, y)` measured from the x-axis towards the y-axis,
//! elevation is the angle of `z` above the horizontal `x-y` plane of the frame.
//! Euler angles follow the intrinsic Z-Y-X (yaw, pitch, roll) convention.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cartesian position or direction. The frame (global or a sensor's local
/// frame) is a convention of the caller.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Norm below which a vector is treated as zero.
pub const ZERO_VECTOR_EPS: f64 = 1e-12;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("vector norm {0:e} is too small to define a direction")]
    ZeroVector(f64),
    #[error("range is required but the measurement carries angles only")]
    MissingRange,
    #[error("negative range {0}")]
    NegativeRange(f64),
    #[error("pitch is at +/-90 degrees (gimbal lock), yaw and roll are not separable")]
    GimbalLock,
    #[error("matrix is not a proper rotation (orthogonality error {orthogonality:e}, det {det})")]
    NotARotation { orthogonality: f64, det: f64 },
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let w = angle.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// A 3x3 proper orthogonal matrix (`R^T R = I`, `det R = +1`).
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 3]; 3]", try_from = "[[f64; 3]; 3]")]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates `m` against the rotation invariants within [`ROTATION_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let orthogonality = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if orthogonality > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotARotation { orthogonality, det });
        }
        Ok(Self(m))
    }

    /// Wraps a matrix the caller has constructed as a rotation.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Rotation about `axis_angle.normalize()` by `axis_angle.norm()` radians
    /// (the matrix exponential of the skew matrix of `axis_angle`).
    pub fn from_rotation_vector(axis_angle: Vec3) -> Self {
        Self(*Rotation3::new(axis_angle).matrix())
    }

    pub fn from_euler(angles: EulerAngles) -> Self {
        euler_to_rotation(angles)
    }

    pub fn to_euler(&self) -> Result<EulerAngles, GeometryError> {
        rotation_to_euler(self)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic distance on SO(3), in radians: the angle of `self^T other`.
    ///
    /// Uses `atan2(sin, cos)` rather than `acos` so that sub-microradian
    /// differences are resolved.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        let r = self.0.transpose() * other.0;
        let cos = 0.5 * (r.trace() - 1.0);
        let sin = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
        sin.atan2(cos)
    }

    /// Largest elementwise deviation of `R^T R` from identity, and `|det R - 1|`.
    pub fn invariant_errors(&self) -> (f64, f64) {
        let orth = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        (orth, (self.0.determinant() - 1.0).abs())
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

impl Default for RotationMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for RotationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("RotationMatrix").field(&self.rows()).finish()
    }
}

impl From<RotationMatrix> for [[f64; 3]; 3] {
    fn from(r: RotationMatrix) -> Self {
        r.rows()
    }
}

impl TryFrom<[[f64; 3]; 3]> for RotationMatrix {
    type Error = GeometryError;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self, Self::Error> {
        Self::from_matrix(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for RotationMatrix {
    type Output = Vec3;

    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &RotationMatrix {
    type Output = Vec3;

    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Yaw, pitch and roll in radians (intrinsic Z-Y-X).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn from_degrees(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self::new(yaw.to_radians(), pitch.to_radians(), roll.to_radians())
    }

    pub fn to_degrees(self) -> [f64; 3] {
        [self.yaw.to_degrees(), self.pitch.to_degrees(), self.roll.to_degrees()]
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    /// Per-angle difference `self - other`, each wrapped to `(-pi, pi]`.
    pub fn wrapped_difference(self, other: EulerAngles) -> EulerAngles {
        EulerAngles {
            yaw: wrap_angle(self.yaw - other.yaw),
            pitch: wrap_angle(self.pitch - other.pitch),
            roll: wrap_angle(self.roll - other.roll),
        }
    }
}

/// Range/azimuth/elevation. `range` is `None` for angle-only (2D) data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spherical {
    pub range: Option<f64>,
    pub azimuth: f64,
    pub elevation: f64,
}

impl Spherical {
    pub fn new(range: f64, azimuth: f64, elevation: f64) -> Self {
        Self {
            range: Some(range),
            azimuth,
            elevation,
        }
    }

    pub fn angles_only(azimuth: f64, elevation: f64) -> Self {
        Self {
            range: None,
            azimuth,
            elevation,
        }
    }

    /// Unit line-of-sight vector of the angles, ignoring range.
    pub fn direction(&self) -> Vec3 {
        direction_from_angles(self.azimuth, self.elevation)
    }
}

/// A single sensor observation.
pub type Measurement = Spherical;

pub fn cart_to_spherical(p: &Vec3) -> Result<Spherical, GeometryError> {
    let range = p.norm();
    if range < ZERO_VECTOR_EPS {
        return Err(GeometryError::ZeroVector(range));
    }
    let horizontal = p.x.hypot(p.y);
    Ok(Spherical {
        range: Some(range),
        azimuth: wrap_angle(p.y.atan2(p.x)),
        elevation: p.z.atan2(horizontal),
    })
}

pub fn spherical_to_cart(s: &Spherical) -> Result<Vec3, GeometryError> {
    let range = s.range.ok_or(GeometryError::MissingRange)?;
    if range < 0.0 {
        return Err(GeometryError::NegativeRange(range));
    }
    Ok(range * direction_from_angles(s.azimuth, s.elevation))
}

/// `(cos el cos az, cos el sin az, sin el)`.
pub fn direction_from_angles(azimuth: f64, elevation: f64) -> Vec3 {
    let (sin_az, cos_az) = azimuth.sin_cos();
    let (sin_el, cos_el) = elevation.sin_cos();
    Vec3::new(cos_el * cos_az, cos_el * sin_az, sin_el)
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn euler_to_rotation(e: EulerAngles) -> RotationMatrix {
    let (sy, cy) = e.yaw.sin_cos();
    let (sp, cp) = e.pitch.sin_cos();
    let (sr, cr) = e.roll.sin_cos();
    RotationMatrix(Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    ))
}

/// Inverse of [`euler_to_rotation`]. Fails within `1e-9` of gimbal lock.
pub fn rotation_to_euler(r: &RotationMatrix) -> Result<EulerAngles, GeometryError> {
    let m = &r.0;
    let sin_pitch = -m[(2, 0)];
    if sin_pitch.abs() >= 1.0 - 1e-9 {
        return Err(GeometryError::GimbalLock);
    }
    Ok(EulerAngles {
        yaw: wrap_angle(m[(1, 0)].atan2(m[(0, 0)])),
        pitch: sin_pitch.asin(),
        roll: wrap_angle(m[(2, 1)].atan2(m[(2, 2)])),
    })
}

/// Principal extents (root singular values of the scatter matrix) of a point
/// set, largest first. Empty input yields zeros.
pub fn principal_extents(points: &[Vec3]) -> [f64; 3] {
    if points.is_empty() {
        return [0.0; 3];
    }
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let scatter = points
        .iter()
        .map(|p| {
            let d = p - centroid;
            d * d.transpose()
        })
        .sum::<Matrix3<f64>>();
    let mut ev: Vec<f64> = SymmetricEigen::new(scatter)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    [ev[0], ev[1], ev[2]]
}

/// True when the second principal extent of `points` is at most `ratio`
/// times the largest, i.e. the points are (nearly) on a line.
pub fn nearly_collinear(points: &[Vec3], ratio: f64) -> bool {
    let [major, middle, _] = principal_extents(points);
    major == 0.0 || middle <= ratio * major
}
