//! Built-in synthetic surfaces with analytic normals.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::spatial::PointCloud;

/// Implicit surface `F(x) = 0`, star-shaped around the origin with `F(0) < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpyEllipsoid {
    pub radii: Vector3<f64>,
    pub bump: f64,
    pub freq: Vector3<f64>,
    pub phase: Vector3<f64>,
}

impl Default for BumpyEllipsoid {
    fn default() -> Self {
        Self {
            radii: Vector3::new(1.0, 0.5, 0.3),
            bump: 0.5,
            freq: Vector3::new(1.0, 1.3, 1.7),
            phase: Vector3::new(0.3, 1.1, -0.7),
        }
    }
}

impl BumpyEllipsoid {
    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        let e = x.component_div(&self.radii).norm_squared() - 1.0;
        let a = self.freq.component_mul(x) + self.phase;
        e + self.bump * a.x.sin() * a.y.sin() * a.z.sin()
    }

    pub fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let r2 = self.radii.component_mul(&self.radii);
        let a = self.freq.component_mul(x) + self.phase;
        let (s, c) = (
            Vector3::new(a.x.sin(), a.y.sin(), a.z.sin()),
            Vector3::new(a.x.cos(), a.y.cos(), a.z.cos()),
        );
        let bump = Vector3::new(
            self.freq.x * c.x * s.y * s.z,
            self.freq.y * s.x * c.y * s.z,
            self.freq.z * s.x * s.y * c.z,
        );
        (2.0 * x).component_div(&r2) + self.bump * bump
    }

    /// Surface point along the unit direction `d`, by bisection.
    fn along(&self, d: &Vector3<f64>) -> Result<Vector3<f64>> {
        let mut lo = 0.0;
        let mut hi = 2.0 * self.radii.max();
        if !(self.value(&Vector3::zeros()) < 0.0) || !(self.value(&(d * hi)) > 0.0) {
            return Err(Error::InvalidParameter("surface is not star-shaped about the origin".into()));
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.value(&(d * mid)) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(d * (0.5 * (lo + hi)))
    }

    /// `n` surface points with outward unit normals. Points are ordered from
    /// the top (+z) to the bottom, so leading and trailing slices are caps.
    pub fn sample(&self, n: usize) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::InvalidParameter("sample count must be positive".into()));
        }
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let d = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            let p = self.along(&d)?;
            normals.push(self.gradient(&p));
            points.push(p);
        }
        PointCloud::with_normalized_normals(points, normals)
    }
}

impl BumpyEllipsoid {
    /// `n` points arranged as consecutive virtual scans, one per view
    /// direction. Each scan covers the hemisphere of directions facing its
    /// view, ordered from the view axis outward, so scans overlap
    /// geometrically while being disjoint in index, as merged range scans are.
    pub fn sample_scans(&self, n: usize, views: &[Vector3<f64>]) -> Result<PointCloud> {
        if n == 0 || views.is_empty() {
            return Err(Error::InvalidParameter("scan sampling needs points and views".into()));
        }
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for (k, view) in views.iter().enumerate() {
            let count = n * (k + 1) / views.len() - n * k / views.len();
            let full = 2 * count;
            let w = view.normalize();
            let helper = if w.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let e1 = w.cross(&helper).normalize();
            let e2 = w.cross(&e1);
            // Offset the spiral per scan so scans do not share samples.
            let twist = 0.5 + k as f64;
            for i in 0..count {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / full as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64 + twist;
                let d = e1 * (r * phi.cos()) + e2 * (r * phi.sin()) + w * z;
                let p = self.along(&d)?;
                normals.push(self.gradient(&p));
                points.push(p);
            }
        }
        PointCloud::with_normalized_normals(points, normals)
    }
}

/// View directions of [`scanned_model`].
pub fn default_views() -> [Vector3<f64>; 5] {
    let a = 2.0 * std::f64::consts::PI / 5.0;
    std::array::from_fn(|k| {
        let t = a * k as f64;
        let z = if k % 2 == 0 { 0.3 } else { -0.3 };
        Vector3::new(t.cos(), t.sin(), z).normalize()
    })
}

/// The default [`BumpyEllipsoid`] sampled as five overlapping scans.
pub fn scanned_model(n: usize) -> Result<PointCloud> {
    BumpyEllipsoid::default().sample_scans(n, &default_views())
}

/// Samples the default [`BumpyEllipsoid`].
pub fn bumpy_ellipsoid(n: usize) -> Result<PointCloud> {
    BumpyEllipsoid::default().sample(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_lie_on_surface() {
        let shape = BumpyEllipsoid::default();
        let cloud = shape.sample(500).unwrap();
        assert_eq!(cloud.len(), 500);
        for p in cloud.points() {
            assert!(shape.value(p).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let shape = BumpyEllipsoid::default();
        let h = 1e-6;
        for p in shape.sample(50).unwrap().points() {
            let g = shape.gradient(p);
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let fd = (shape.value(&(p + e)) - shape.value(&(p - e))) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn normals_point_outward_and_order_is_top_down() {
        let cloud = bumpy_ellipsoid(300).unwrap();
        for (p, n) in cloud.points().iter().zip(cloud.normals().unwrap()) {
            assert!(p.dot(n) > 0.0);
        }
        assert!(cloud.points()[0].z > 0.2);
        assert!(cloud.points()[299].z < -0.2);
    }

    #[test]
    fn scans_split_evenly_and_face_their_views() {
        let shape = BumpyEllipsoid::default();
        let views = default_views();
        let cloud = scanned_model(1003).unwrap();
        assert_eq!(cloud.len(), 1003);
        let mut start = 0;
        for (k, v) in views.iter().enumerate() {
            let end = 1003 * (k + 1) / views.len();
            let scan = &cloud.points()[start..end];
            assert!((200..=201).contains(&scan.len()));
            for p in scan {
                assert!(shape.value(p).abs() < 1e-12);
                assert!(p.normalize().dot(v) >= -1e-12);
            }
            // First sample sits on the view axis; the last is near the rim.
            assert!(scan[0].normalize().dot(v) > 0.99);
            assert!(scan[scan.len() - 1].normalize().dot(v) < 0.05);
            start = end;
        }
        for (p, n) in cloud.points().iter().zip(cloud.normals().unwrap()) {
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(p.dot(n) > 0.0);
        }
    }

    #[test]
    fn default_views_alternate_elevation() {
        let views = default_views();
        for (k, v) in views.iter().enumerate() {
            assert!((v.norm() - 1.0).abs() < 1e-15);
            assert_eq!(v.z > 0.0, k % 2 == 0);
        }
    }

    #[test]
    fn scan_sampling_rejects_empty_requests() {
        let shape = BumpyEllipsoid::default();
        assert!(shape.sample_scans(0, &default_views()).is_err());
        assert!(shape.sample_scans(10, &[]).is_err());
    }
}
