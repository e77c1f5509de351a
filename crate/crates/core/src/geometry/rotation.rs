use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::linalg::{self, Mat3, Vec3, IDENTITY};
use super::GeometryError;

const ROTATION_TOL: f64 = 1e-9;

/// Proper rotation: orthonormal with determinant +1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Mat3);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation(IDENTITY);

    pub fn new(m: Mat3) -> Result<Self, GeometryError> {
        let ortho = linalg::orthonormality_error(&m);
        let det = linalg::det(&m);
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotRotation { ortho, det });
        }
        Ok(Self(m))
    }

    /// Wraps a matrix already known to be a rotation up to rounding.
    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Self(m)
    }

    /// Unit quaternion `(w, x, y, z)` to matrix; the input is normalized first.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let [w, x, y, z] = q.map(|c| c / n);
        Self([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }

    /// Rotation by `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = linalg::normalize(axis);
        let (s, c) = (angle / 2.0).sin_cos();
        Self::from_quaternion([c, a[0] * s, a[1] * s, a[2] * s])
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        linalg::mat_vec(&self.0, v)
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(linalg::mat_mul(&self.0, &other.0))
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(linalg::transpose(&self.0))
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let r = linalg::mat_mul(&linalg::transpose(&self.0), &other.0);
        let trace = r[0][0] + r[1][1] + r[2][2];
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Haar-uniform rotation: four standard normals, normalized to a unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    Rotation::from_quaternion(q)
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: Rotation::IDENTITY, translation: [0.0; 3] };

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        linalg::add(self.rotation.apply(p), self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose { rotation: r, translation: linalg::scale(r.apply(self.translation), -1.0) }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}
