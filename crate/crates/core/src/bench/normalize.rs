//! Shared similarity that brings a registration pair to unit scale.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::RigidTransform;
use crate::spatial::PointCloud;

/// `x -> scale * (x - center)`, applied identically to source and target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vector3<f64>,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            center: Vector3::zeros(),
            scale: 1.0,
        }
    }

    /// Centers the pair on the midpoint of the two centroids and scales the
    /// bounding box of their union to unit diagonal.
    pub fn for_pair(src: &PointCloud, tgt: &PointCloud) -> Result<Self> {
        src.ensure_non_empty()?;
        tgt.ensure_non_empty()?;
        let center = (src.centroid().unwrap() + tgt.centroid().unwrap()) / 2.0;
        let (lo_s, hi_s) = src.bounding_box().unwrap();
        let (lo_t, hi_t) = tgt.bounding_box().unwrap();
        let diag = (hi_s.sup(&hi_t) - lo_s.inf(&lo_t)).norm();
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Degenerate(format!(
                "bounding box diagonal of the pair is {diag}"
            )));
        }
        Ok(Self {
            center,
            scale: 1.0 / diag,
        })
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center) * self.scale
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.scaled_about(&self.center, self.scale)
    }

    /// Expresses an original-frame transform in normalized coordinates.
    pub fn normalize_transform(&self, t: &RigidTransform) -> RigidTransform {
        let tn = (t.translation + t.rotation * self.center - self.center) * self.scale;
        RigidTransform::new(t.rotation, tn)
    }

    /// Maps a normalized-frame transform back to original coordinates.
    pub fn denormalize_transform(&self, t: &RigidTransform) -> RigidTransform {
        let to = self.center - t.rotation * self.center + t.translation / self.scale;
        RigidTransform::new(t.rotation, to)
    }
}

pub fn normalize_pair(src: &PointCloud, tgt: &PointCloud) -> Result<(PointCloud, PointCloud, Normalization)> {
    let n = Normalization::for_pair(src, tgt)?;
    Ok((n.apply_cloud(src), n.apply_cloud(tgt), n))
}
