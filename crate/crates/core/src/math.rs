//! Rigid transforms and bounding volumes.
//!
//! Transforms are stored as an explicit rotation matrix plus translation so
//! that poses parsed from text survive round trips bit for bit (no quaternion
//! conversion).

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

/// A rigid transform `b_T_a`: rotates then translates points from frame `a`
/// into frame `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about the +z axis, then translation.
    pub fn from_yaw_translation(angle: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = angle.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        RigidTransform {
            rotation,
            translation,
        }
    }

    /// Checks orthonormality (`R Rᵀ = I`) and unit determinant within `tol`.
    pub fn validate_rigid(&self, tol: f64) -> Result<()> {
        let gram = self.rotation * self.rotation.transpose();
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(i, j)] - expect).abs());
            }
        }
        if max_dev > tol {
            return Err(Error::NonRigidTransform(format!(
                "rotation not orthonormal (max deviation {max_dev:.3e} > {tol:.1e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol.max(1e-6) {
            return Err(Error::NonRigidTransform(format!(
                "rotation determinant {det} not 1"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonRigidTransform("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((self.rotation[(i, j)] - expect).abs());
            }
            dev = dev.max(self.translation[i].abs());
        }
        dev <= tol
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Inverse transform; uses the transpose, so only valid for rigid input.
    pub fn inverse(&self) -> RigidTransform {
        let rot_inv = self.rotation.transpose();
        RigidTransform {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// Composition: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major 16-float 4x4 matrix form used by frame manifests.
    pub fn to_matrix_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn from_matrix_row_major(m: &[f64; 16]) -> Self {
        RigidTransform {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        }
    }
}

/// Sphere-shaped bounding volume, kept in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingSphere {
    pub center: Point3<f64>,
    pub radius: f64,
}

impl BoundingSphere {
    pub fn empty_at(center: Point3<f64>) -> Self {
        BoundingSphere {
            center,
            radius: 0.0,
        }
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (p - self.center).norm() <= self.radius
    }

    /// Closed intersection test: tangent spheres count as intersecting.
    pub fn intersects(&self, other: &BoundingSphere) -> bool {
        (other.center - self.center).norm() <= self.radius + other.radius
    }

    /// Grows the radius (center fixed) until `p` is inside.
    pub fn grow_to(&mut self, p: &Point3<f64>) {
        let d = (p - self.center).norm();
        if d > self.radius {
            self.radius = d;
        }
    }

    /// Distance from the sphere surface to an axis-aligned box; zero if they
    /// touch or overlap.
    pub fn distance_to_aabb(&self, min: &Point3<f64>, max: &Point3<f64>) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let c = self.center[i];
            let gap = if c < min[i] {
                min[i] - c
            } else if c > max[i] {
                c - max[i]
            } else {
                0.0
            };
            d2 += gap * gap;
        }
        (d2.sqrt() - self.radius).max(0.0)
    }
}

/// Axis-aligned bounding box accumulator.
#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn new_empty() -> Self {
        Aabb {
            min: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x
    }

    pub fn insert(&mut self, p: &Point3<f64>) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from((self.min.coords + self.max.coords) * 0.5)
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        Aabb {
            min: Point3::from(self.min.coords.add_scalar(-margin)),
            max: Point3::from(self.max.coords.add_scalar(margin)),
        }
    }
}
