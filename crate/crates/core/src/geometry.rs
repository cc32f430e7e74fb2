//! Planar rotation and pose primitives.
//!
//! Attitude is yaw-only: roll and pitch are assumed known and zeroed, so every
//! rotation here is a turn about +Z. Angles are canonical; 2x2 matrices are a
//! derived view.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("2x2 block has no well-defined nearest rotation")]
    DegenerateBlock,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Wrap an angle into (-π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(TAU);
    if t > PI {
        t -= TAU;
    }
    t
}

/// A rotation about +Z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation2 {
    pub theta: f64,
}

impl Default for Rotation2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation2 {
    pub fn new(theta: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self { theta: 0.0 }
    }

    pub fn inverse(self) -> Self {
        Self::new(-self.theta)
    }

    pub fn matrix(self) -> Matrix2<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn rotate2(self, v: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }
}

/// `a ∘ b`: apply `b` first, then `a`.
pub fn compose(a: Rotation2, b: Rotation2) -> Rotation2 {
    Rotation2::new(a.theta + b.theta)
}

/// Rotate a 3D vector about Z; the Z component passes through untouched.
pub fn apply_yaw(r: Rotation2, v: &Vector3<f64>) -> Vector3<f64> {
    let (s, c) = r.theta.sin_cos();
    Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Nearest rotation to `m` in Frobenius norm.
pub fn project_to_so2(m: &Matrix2<f64>) -> Result<Rotation2, GeometryError> {
    let cos_part = m[(0, 0)] + m[(1, 1)];
    let sin_part = m[(1, 0)] - m[(0, 1)];
    if cos_part.abs() < 1e-12 && sin_part.abs() < 1e-12 {
        return Err(GeometryError::DegenerateBlock);
    }
    Ok(Rotation2::new(sin_part.atan2(cos_part)))
}

/// Rigid pose with yaw-only attitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub yaw: Rotation2,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            yaw: Rotation2::identity(),
        }
    }

    /// Map a point expressed in this pose's frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + apply_yaw(self.yaw, p)
    }

    /// Map a parent-frame point into this pose's frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        apply_yaw(self.yaw.inverse(), &(p - self.position))
    }
}

/// One yaw per drone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct YawVector {
    pub yaws: Vec<Rotation2>,
}

impl YawVector {
    pub fn identity(n: usize) -> Self {
        Self {
            yaws: vec![Rotation2::identity(); n],
        }
    }

    pub fn from_angles(angles: &[f64]) -> Self {
        Self {
            yaws: angles.iter().map(|&t| Rotation2::new(t)).collect(),
        }
    }

    pub fn angles(&self) -> Vec<f64> {
        self.yaws.iter().map(|r| r.theta).collect()
    }

    pub fn len(&self) -> usize {
        self.yaws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.yaws.is_empty()
    }

    /// Re-express every yaw relative to entry 0 so that entry 0 becomes identity.
    pub fn gauge_fixed(&self) -> Self {
        match self.yaws.first() {
            None => self.clone(),
            Some(&first) => {
                let inv = first.inverse();
                let mut yaws: Vec<Rotation2> = self.yaws.iter().map(|&r| compose(inv, r)).collect();
                yaws[0] = Rotation2::identity();
                Self { yaws }
            }
        }
    }
}

/// Mean absolute wrapped yaw difference.
pub fn yaw_mae(estimated: &YawVector, truth: &YawVector) -> Result<f64, GeometryError> {
    if estimated.len() != truth.len() {
        return Err(GeometryError::LengthMismatch(estimated.len(), truth.len()));
    }
    if estimated.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = estimated
        .yaws
        .iter()
        .zip(&truth.yaws)
        .map(|(e, t)| wrap_angle(e.theta - t.theta).abs())
        .sum();
    Ok(total / estimated.len() as f64)
}
