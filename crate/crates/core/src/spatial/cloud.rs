use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::lie::RigidTransform;

/// Unit-norm tolerance for stored normals.
pub const NORMAL_TOL: f64 = 1e-9;

/// Points with optional per-point unit normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            normals: None,
        }
    }

    /// Normals must match `points` in length and be unit within [`NORMAL_TOL`].
    pub fn with_normals(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(Error::LengthMismatch {
                expected: points.len(),
                got: normals.len(),
            });
        }
        if let Some(i) = normals
            .iter()
            .position(|n| !((n.norm() - 1.0).abs() < NORMAL_TOL))
        {
            return Err(Error::InvalidParameter(format!(
                "normal {i} is not unit length (|n| = {})",
                normals[i].norm()
            )));
        }
        Ok(Self {
            points,
            normals: Some(normals),
        })
    }

    /// Like [`PointCloud::with_normals`] but rescales each normal to unit
    /// length first. Zero normals are rejected.
    pub fn with_normalized_normals(
        points: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        let mut unit = Vec::with_capacity(normals.len());
        for (i, n) in normals.into_iter().enumerate() {
            let len = n.norm();
            if !(len > 0.0) || !len.is_finite() {
                return Err(Error::InvalidParameter(format!("normal {i} has zero length")));
            }
            unit.push(n / len);
        }
        Self::with_normals(points, unit)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    pub fn require_normals(&self) -> Result<&[Vector3<f64>]> {
        self.normals().ok_or(Error::MissingNormals)
    }

    pub fn without_normals(&self) -> PointCloud {
        PointCloud::new(self.points.clone())
    }

    pub fn into_parts(self) -> (Vec<Vector3<f64>>, Option<Vec<Vector3<f64>>>) {
        (self.points, self.normals)
    }

    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyCloud)
        } else {
            Ok(())
        }
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// Applies `t` to points and rotates normals.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.rotate(n)).collect()),
        }
    }

    /// Contiguous sub-range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> PointCloud {
        PointCloud {
            points: self.points[start..end].to_vec(),
            normals: self.normals.as_ref().map(|ns| ns[start..end].to_vec()),
        }
    }

    /// Uniform similarity `p -> scale * (p - center)`; normals unchanged.
    pub fn scaled_about(&self, center: &Vector3<f64>, scale: f64) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| (p - center) * scale).collect(),
            normals: self.normals.clone(),
        }
    }
}
